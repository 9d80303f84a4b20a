"""Validated configuration records and the ``key = value`` config file format.

Keys are dotted section paths, e.g.::

    # desk experiment
    scale = desk
    feb.channels = 8
    comeb.dilations = 1, 2, 4, 8, 16
    stft.hop = 256
    loss.w_sisdr = 1.0
    train.epochs = 3

Unknown keys are errors. Values are parsed with the type of the field they
override; tuples are comma-separated.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .dsp import StftConfig

DESK_MAX_CHANNELS = 16
PAPER_CHANNELS = {"feb": 256, "mb": 256, "comeb": 512}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class FebConfig:
    channels: int = 8
    glu_kernel: int = 3
    u_blocks: int = 2
    u_layers: int = 5
    u_kernel: int = 3  # along frequency; time kernel is 1
    u_stride: int = 2


@dataclass(frozen=True)
class MaskBlockConfig:
    channels: int = 8
    layers: int = 5
    kernel: int = 8
    stride: int = 2
    groups: int = 2
    units: int = 5
    heads: int = 2
    left_kernel: int = 5
    right_kernel: int = 1
    attention_scale: str = "head_dim"


@dataclass(frozen=True)
class ComEBConfig:
    channels: int = 16
    layers: int = 5
    kernel: int = 8
    stride: int = 2
    groups: int = 4
    dilations: tuple[int, ...] = (1, 2, 4, 8, 16)
    left_kernel: int = 5
    right_kernel: int = 1
    context_kernel: int = 3
    feature_channels: int = 2


@dataclass(frozen=True)
class ModelConfig:
    feb: FebConfig = field(default_factory=FebConfig)
    mb: MaskBlockConfig = field(default_factory=MaskBlockConfig)
    comeb: ComEBConfig = field(default_factory=ComEBConfig)
    stft: StftConfig = field(default_factory=StftConfig)
    scale: str = "desk"

    def __post_init__(self):
        validate_model(self)

    @classmethod
    def desk(cls) -> "ModelConfig":
        return cls()

    @classmethod
    def paper(cls) -> "ModelConfig":
        return cls(feb=FebConfig(channels=PAPER_CHANNELS["feb"]),
                   mb=MaskBlockConfig(channels=PAPER_CHANNELS["mb"]),
                   comeb=ComEBConfig(channels=PAPER_CHANNELS["comeb"]),
                   scale="paper")

    @classmethod
    def for_scale(cls, scale: str) -> "ModelConfig":
        if scale == "desk":
            return cls.desk()
        if scale == "paper":
            return cls.paper()
        raise ConfigError(f"unknown scale {scale!r} (desk|paper)")


@dataclass(frozen=True)
class LossConfig:
    sisdr_epsilon: float = 1e-8
    w_mae: float = 1.0
    w_sisdr: float = 1.0

    def __post_init__(self):
        if not self.sisdr_epsilon > 0:
            raise ConfigError("loss.sisdr_epsilon must be > 0")
        if self.w_mae < 0 or self.w_sisdr < 0:
            raise ConfigError("loss weights must be >= 0")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1
    repeats: int = 1  # passes over the train split per epoch
    lr: float = 1e-3
    lr_decay: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 5.0  # <= 0 disables clipping
    crop_seconds: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.repeats < 1:
            raise ConfigError("train.epochs must be >= 0 and train.repeats >= 1")
        if not self.lr > 0 or not 0 < self.lr_decay <= 1:
            raise ConfigError("train.lr must be > 0 and train.lr_decay in (0, 1]")
        if not self.crop_seconds > 0:
            raise ConfigError("train.crop_seconds must be > 0")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


def validate_model(cfg: ModelConfig) -> None:
    chans = {"feb": cfg.feb.channels, "mb": cfg.mb.channels, "comeb": cfg.comeb.channels}
    if cfg.scale == "desk":
        if max(chans.values()) > DESK_MAX_CHANNELS or min(chans.values()) < 1:
            raise ConfigError(f"desk scale needs 1..{DESK_MAX_CHANNELS} channels, got {chans}")
    elif cfg.scale == "paper":
        if chans != PAPER_CHANNELS:
            raise ConfigError(f"paper scale fixes channels to {PAPER_CHANNELS}")
    else:
        raise ConfigError(f"unknown scale {cfg.scale!r}")
    if cfg.mb.channels % cfg.mb.heads:
        raise ConfigError("mb.channels must be divisible by mb.heads")
    for name, k in (("mb.left_kernel", cfg.mb.left_kernel), ("comeb.left_kernel", cfg.comeb.left_kernel),
                    ("comeb.context_kernel", cfg.comeb.context_kernel),
                    ("feb.glu_kernel", cfg.feb.glu_kernel)):
        if k < 1 or k % 2 == 0:
            raise ConfigError(f"{name} must be a positive odd number")
    if cfg.mb.right_kernel != 1 or cfg.comeb.right_kernel != 1:
        raise ConfigError("right (output) kernels are pointwise")
    if not cfg.comeb.dilations or min(cfg.comeb.dilations) < 1:
        raise ConfigError("comeb.dilations must be positive")
    if cfg.mb.attention_scale not in ("head_dim", "length"):
        raise ConfigError("mb.attention_scale must be head_dim or length")
    for sect in (cfg.feb, cfg.mb, cfg.comeb):
        for f in dataclasses.fields(sect):
            v = getattr(sect, f.name)
            if isinstance(v, int) and v < 1:
                raise ConfigError(f"{f.name} must be >= 1")


# --- key = value files --------------------------------------------------------

_SECTIONS = {
    "feb": ("model", "feb"), "mb": ("model", "mb"), "comeb": ("model", "comeb"),
    "stft": ("model", "stft"), "loss": ("loss", None), "train": ("train", None),
}


def _parse_value(raw: str, current):
    raw = raw.strip()
    if isinstance(current, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        return tuple(int(p) for p in raw.split(",") if p.strip())
    return raw


def parse_assignments(lines, base: RunConfig | None = None) -> RunConfig:
    """Apply ``key = value`` lines on top of ``base`` (defaults if None)."""
    pending: dict[str, str] = {}
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value', got {line!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        pending[key] = val

    if base is None:
        scale = pending.get("scale", "desk")
        base = RunConfig(model=ModelConfig.for_scale(scale))
    model = {k: getattr(base.model, k) for k in ("feb", "mb", "comeb", "stft")}
    model["scale"] = pending.pop("scale", base.model.scale)
    loss = dataclasses.asdict(base.loss)
    train = dataclasses.asdict(base.train)
    sub = {k: dataclasses.asdict(v) for k, v in model.items() if k != "scale"}

    for key, val in pending.items():
        sect, _, name = key.partition(".")
        if sect not in _SECTIONS or not name:
            raise ConfigError(f"unknown config key {key!r}")
        group, inner = _SECTIONS[sect]
        target = sub[inner] if group == "model" else (loss if group == "loss" else train)
        if name not in target:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            target[name] = _parse_value(val, target[name])
        except ValueError as e:
            raise ConfigError(f"bad value for {key}: {e}") from None

    try:
        mcfg = ModelConfig(feb=FebConfig(**sub["feb"]), mb=MaskBlockConfig(**sub["mb"]),
                           comeb=ComEBConfig(**sub["comeb"]), stft=StftConfig(**sub["stft"]),
                           scale=model["scale"])
        return RunConfig(model=mcfg, loss=LossConfig(**loss), train=TrainConfig(**train))
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None


def load_config(path: str | Path | None, overrides=(), scale: str | None = None) -> RunConfig:
    lines: list[str] = []
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        lines = p.read_text().splitlines()
    if scale is not None:
        lines.append(f"scale = {scale}")
    lines.extend(overrides)
    return parse_assignments(lines)


def dump_config(cfg: RunConfig) -> str:
    out = [f"scale = {cfg.model.scale}"]
    for sect in ("feb", "mb", "comeb", "stft"):
        for k, v in dataclasses.asdict(getattr(cfg.model, sect)).items():
            out.append(f"{sect}.{k} = {_fmt(v)}")
    for k, v in dataclasses.asdict(cfg.loss).items():
        out.append(f"loss.{k} = {_fmt(v)}")
    for k, v in dataclasses.asdict(cfg.train).items():
        out.append(f"train.{k} = {_fmt(v)}")
    return "\n".join(out) + "\n"


def _fmt(v) -> str:
    if isinstance(v, (tuple, list)):
        return ", ".join(str(i) for i in v)
    return repr(v) if isinstance(v, float) else str(v)
