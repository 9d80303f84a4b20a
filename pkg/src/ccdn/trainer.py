"""Adam optimization, per-epoch learning-rate halving, checkpoints, training loop.

Checkpoint container layout (all integers little-endian)::

    offset  size  field
    0       8     magic b"CCDNCKPT"
    8       4     format version (uint32, currently 1)
    12      8     header length H (uint64)
    20      H     UTF-8 JSON header
    20+H    ...   tensor blobs, concatenated

The header holds ``config`` (the key = value config text), ``epoch``,
``step``, ``optim`` (Adam scalars), ``rng`` (numpy bit-generator state) and
``tensors``: a list of {name, dtype ("<f8" or "<f4"), shape, offset, nbytes}
with offsets relative to the start of the blob section. Tensor names are
``param/<name>``, ``buffer/<name>``, ``adam.m/<name>`` and ``adam.v/<name>``.
"""
from __future__ import annotations

import csv
import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .blocks import CCDN
from .config import LossConfig, ModelConfig, RunConfig, dump_config, parse_assignments
from .data import ManifestEntry, load_pair, split_entries
from .dsp import SAMPLE_RATE, istft, stft
from .losses import JointTerms, joint_terms

log = logging.getLogger(__name__)

MAGIC = b"CCDNCKPT"
FORMAT_VERSION = 1
LOG_HEADER = ("epoch", "step", "lr", "loss", "mae", "si_sdr", "grad_norm")


class CheckpointError(ValueError):
    pass


class NonFiniteGradient(FloatingPointError):
    pass


# --- optimizer ----------------------------------------------------------------

@dataclass
class OptimState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, ad.Tensor], grads: dict[str, np.ndarray], state: OptimState) -> OptimState:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"{name}: gradient {g.shape} != parameter {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {name} at step {state.step + 1}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm > 0 and norm > max_norm:
        k = max_norm / norm
        grads = {n: g * k for n, g in grads.items()}
    return grads, norm


def lr_at_epoch(lr0: float, epoch: int, decay: float = 0.5) -> float:
    return lr0 * decay ** epoch


# --- checkpoints --------------------------------------------------------------

@dataclass
class Checkpoint:
    config: RunConfig
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    optim: OptimState
    epoch: int = 0
    rng_state: dict | None = None
    version: int = FORMAT_VERSION


def snapshot(model: CCDN, cfg: RunConfig, optim: OptimState, epoch: int,
             rng: np.random.Generator | None = None) -> Checkpoint:
    return Checkpoint(
        config=cfg,
        params={n: p.data.copy() for n, p in model.named_parameters()},
        buffers={n: b.copy() for n, b in model.named_buffers()},
        optim=OptimState(optim.lr, optim.beta1, optim.beta2, optim.eps, optim.step,
                         {k: v.copy() for k, v in optim.m.items()},
                         {k: v.copy() for k, v in optim.v.items()}),
        epoch=epoch,
        rng_state=None if rng is None else rng.bit_generator.state,
    )


def save_checkpoint(path, ckpt: Checkpoint, precision: int = 64) -> Path:
    if precision not in (32, 64):
        raise ValueError("precision must be 32 or 64")
    dtype = "<f8" if precision == 64 else "<f4"
    blobs: list[bytes] = []
    index = []
    offset = 0
    groups = [("param", ckpt.params, dtype), ("buffer", ckpt.buffers, "<f8"),
              ("adam.m", ckpt.optim.m, "<f8"), ("adam.v", ckpt.optim.v, "<f8")]
    for prefix, arrays, dt in groups:
        for name, arr in arrays.items():
            raw = np.ascontiguousarray(arr, dtype=dt).tobytes()
            index.append({"name": f"{prefix}/{name}", "dtype": dt, "shape": list(arr.shape),
                          "offset": offset, "nbytes": len(raw)})
            blobs.append(raw)
            offset += len(raw)
    o = ckpt.optim
    header = {
        "config": dump_config(ckpt.config),
        "epoch": ckpt.epoch,
        "step": o.step,
        "optim": {"lr": o.lr, "beta1": o.beta1, "beta2": o.beta2, "eps": o.eps},
        "rng": ckpt.rng_state,
        "tensors": index,
    }
    hbytes = json.dumps(header).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", FORMAT_VERSION, len(hbytes)))
        f.write(hbytes)
        for b in blobs:
            f.write(b)
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from None
    if len(raw) < 20 or raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a CCDN checkpoint")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    try:
        header = json.loads(raw[20:20 + hlen].decode("utf-8"))
        cfg = parse_assignments(header["config"].splitlines())
    except (ValueError, KeyError) as e:
        raise CheckpointError(f"{path}: corrupt header ({e})") from None
    base = 20 + hlen
    groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "buffer": {}, "adam.m": {}, "adam.v": {}}
    try:
        for t in header["tensors"]:
            start = base + t["offset"]
            if start + t["nbytes"] > len(raw):
                raise CheckpointError(f"{path}: truncated blob {t['name']}")
            count = t["nbytes"] // np.dtype(t["dtype"]).itemsize
            arr = np.frombuffer(raw, dtype=t["dtype"], count=count, offset=start)
            prefix, _, name = t["name"].partition("/")
            if prefix not in groups:
                raise CheckpointError(f"{path}: unknown tensor group {prefix!r}")
            groups[prefix][name] = arr.astype(np.float64).reshape(t["shape"])
        o = header["optim"]
        optim = OptimState(o["lr"], o["beta1"], o["beta2"], o["eps"], header["step"],
                           groups["adam.m"], groups["adam.v"])
        epoch = int(header["epoch"])
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"{path}: corrupt tensor index ({e})") from None
    return Checkpoint(cfg, groups["param"], groups["buffer"], optim, epoch, header.get("rng"), version)


def load_into(model: CCDN, ckpt: Checkpoint) -> CCDN:
    params = dict(model.named_parameters())
    if set(params) != set(ckpt.params):
        missing = sorted(set(params) ^ set(ckpt.params))[:5]
        raise CheckpointError(f"checkpoint parameters do not match model: {missing}")
    for n, p in params.items():
        if p.shape != ckpt.params[n].shape:
            raise CheckpointError(f"{n}: shape {ckpt.params[n].shape} != {p.shape}")
        p.data = ckpt.params[n].copy()
    for n, b in model.named_buffers():
        if n in ckpt.buffers:
            b[...] = ckpt.buffers[n]
    return model


def model_from_checkpoint(ckpt: Checkpoint) -> CCDN:
    model = CCDN(ckpt.config.model, np.random.default_rng(0))
    return load_into(model, ckpt).eval()


# --- forward helpers ----------------------------------------------------------

def loss_terms(model: CCDN, noisy: np.ndarray, clean: np.ndarray,
               loss_cfg: LossConfig = LossConfig()) -> JointTerms:
    cfg = model.cfg.stft
    est = model(stft(noisy, cfg))
    wav = istft(est, cfg, out_len=len(clean))
    return joint_terms(est, stft(clean, cfg), wav, clean, loss_cfg)


def enhance(model: CCDN, noisy: np.ndarray) -> np.ndarray:
    """Inference-mode enhancement; output length equals input length."""
    noisy = np.asarray(noisy, dtype=np.float64)
    was = model.training
    model.eval()
    try:
        est = model(stft(noisy, model.cfg.stft))
        return istft(est.data, model.cfg.stft, out_len=len(noisy))
    finally:
        model.train(was)


def train_step(model: CCDN, noisy, clean, optim: OptimState, cfg: RunConfig) -> dict[str, float]:
    model.train()
    params = dict(model.named_parameters())
    with ad.Tape() as tape:
        terms = loss_terms(model, noisy, clean, cfg.loss)
    gmap = ad.backward(terms.total, tape)
    grads = {n: gmap[p.id] for n, p in params.items()}
    grads, norm = clip_global_norm(grads, cfg.train.clip_norm)
    adam_step(params, grads, optim)
    return {"loss": terms.total.item(), "mae": terms.mae.item(),
            "si_sdr": terms.sisdr.item(), "grad_norm": norm}


# --- training loop ------------------------------------------------------------

@dataclass
class TrainResult:
    log: list[dict]
    checkpoints: list[Path]
    model: CCDN
    optim: OptimState


class _PairCache:
    def __init__(self):
        self._cache: dict = {}

    def get(self, entry: ManifestEntry, crop: int, rng):
        if crop is None:
            key = entry
            if key not in self._cache:
                self._cache[key] = load_pair(entry)
            return self._cache[key]
        return load_pair(entry, crop, rng)


def _write_log(path: Path, rows: list[dict], append: bool) -> None:
    mode = "a" if append and path.exists() else "w"
    with open(path, mode, newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        if mode == "w":
            w.writerow(LOG_HEADER)
        for r in rows:
            w.writerow([r["epoch"], r["step"], repr(r["lr"])] +
                       [repr(r[k]) for k in LOG_HEADER[3:]])


def read_log(path) -> list[dict]:
    with open(path, newline="") as f:
        return [{k: (int(v) if k in ("epoch", "step") else float(v)) for k, v in row.items()}
                for row in csv.DictReader(f)]


def checkpoint_name(epoch: int) -> str:
    return f"epoch{epoch:03d}.ckpt"


def train(entries: list[ManifestEntry], cfg: RunConfig, out_dir, resume: Checkpoint | None = None,
          on_step: Callable[[dict], None] | None = None) -> TrainResult:
    """Train on the ``train`` split of ``entries``.

    Writes ``epochNNN.ckpt`` after every epoch (``epoch000.ckpt`` is the
    untrained initialization), ``last.ckpt`` and a per-step ``train_log.csv``.
    Passing a checkpoint resumes from its epoch with its RNG and optimizer
    state, appending to the log.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_set = split_entries(entries, "train")
    if not train_set:
        raise ValueError("manifest has no train entries")
    tc = cfg.train
    crop = int(round(tc.crop_seconds * SAMPLE_RATE))

    if resume is None:
        rng = np.random.default_rng(tc.seed)
        model = CCDN(cfg.model, np.random.default_rng(tc.seed))
        optim = OptimState(tc.lr, tc.beta1, tc.beta2, tc.adam_eps)
        start = 0
        saved = [save_checkpoint(out_dir / checkpoint_name(0), snapshot(model, cfg, optim, 0, rng))]
    else:
        cfg = resume.config
        tc = cfg.train
        model = load_into(CCDN(cfg.model, np.random.default_rng(0)), resume).train()
        optim = resume.optim
        rng = np.random.default_rng()
        if resume.rng_state is not None:
            rng.bit_generator.state = resume.rng_state
        start = resume.epoch
        saved = []

    log_path = out_dir / "train_log.csv"
    cache = _PairCache()
    history: list[dict] = []
    for epoch in range(start, tc.epochs):
        optim.lr = lr_at_epoch(tc.lr, epoch, tc.lr_decay)
        rows = []
        for _ in range(tc.repeats):
            for i in rng.permutation(len(train_set)):
                entry = train_set[int(i)]
                clean, noisy = cache.get(entry, crop, rng)
                stats = train_step(model, noisy, clean, optim, cfg)
                row = {"epoch": epoch, "step": optim.step, "lr": optim.lr, **stats}
                rows.append(row)
                if on_step is not None:
                    on_step(row)
                log.debug("epoch %d step %d loss %.4f", epoch, optim.step, stats["loss"])
        _write_log(log_path, rows, append=bool(history) or resume is not None)
        history.extend(rows)
        ck = snapshot(model, cfg, optim, epoch + 1, rng)
        saved.append(save_checkpoint(out_dir / checkpoint_name(epoch + 1), ck))
    if not log_path.exists():
        _write_log(log_path, [], append=False)
    save_checkpoint(out_dir / "last.ckpt", snapshot(model, cfg, optim, max(start, tc.epochs), rng))
    return TrainResult(history, saved, model.eval(), optim)


# --- gradient check -----------------------------------------------------------

def gradcheck_config() -> ModelConfig:
    """Full desk topology with narrow channels, for finite-difference checks."""
    from .config import ComEBConfig, FebConfig, MaskBlockConfig
    return ModelConfig(feb=FebConfig(channels=4), mb=MaskBlockConfig(channels=4),
                       comeb=ComEBConfig(channels=8))


def gradcheck_model(cfg: ModelConfig | None = None, seed: int = 0, frames: int = 4,
                    per_param: int = 2, eps: float = 1e-4, loss_cfg: LossConfig = LossConfig()) -> dict:
    """Finite-difference check of the joint loss through the whole model.

    Checks the ``per_param`` coordinates with the largest analytic gradient in
    every parameter tensor and in the noisy input spectrogram. Deep in the
    network many partials sit near 1e-9, below what central differences can
    resolve in float64 (round-off in the loss is ~1e-11 after division by
    2*eps), so the largest entries are the ones that carry a signal.
    Returns the max relative error plus per-tensor detail.
    """
    cfg = cfg or gradcheck_config()
    rng = np.random.default_rng(seed)
    model = CCDN(cfg, rng)
    n = cfg.stft.padded_length(frames)
    clean = rng.standard_normal(n) * 0.1
    noisy = clean + rng.standard_normal(n) * 0.05
    spec_in = ad.Tensor(stft(noisy, cfg.stft))
    spec_ref = stft(clean, cfg.stft)

    def loss_of(spec):
        est = model(spec)
        wav = istft(est, cfg.stft, out_len=n)
        return joint_terms(est, spec_ref, wav, clean, loss_cfg).total

    def pick(g):
        return np.argsort(-np.abs(g), kind="stable")[:per_param]

    errors = {"input": ad.finite_difference_check(loss_of, spec_in, eps, pick)}
    for name, p in model.named_parameters():
        errors[name] = ad.finite_difference_check(lambda _: loss_of(spec_in), p, eps, pick)
    worst = max(errors, key=errors.get)
    return {"max_error": errors[worst], "worst": worst, "errors": errors, "checked": len(errors)}
