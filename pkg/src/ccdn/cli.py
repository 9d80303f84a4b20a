"""Batch command line: ``ccdn {train,enhance,evaluate,gradcheck,info,synth-corpus}``.

Exit status is 0 on success, 1 on a runtime failure and 2 on a usage or
configuration error. Failures print a single ``ccdn: error: ...`` line on
stderr.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import trainer
from .blocks import param_count, shape_table
from .config import ConfigError, RunConfig, dump_config, load_config
from .data import (ManifestError, WavFormatError, load_pair, make_synthetic_corpus, read_manifest,
                   read_wav, split_entries, write_wav)
from .metrics import evaluate
from .plotting import eval_figure, loss_figure

log = logging.getLogger("ccdn")

PARTIAL = ".partial"
GRADCHECK_TOL = 1e-4


class UsageError(Exception):
    """Bad flags, config or missing inputs: exit status 2."""


def _existing(path, what: str) -> Path:
    if path is None:
        raise UsageError(f"{what} is required")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {p}")
    return p


def _run_config(args) -> RunConfig:
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"train.seed = {args.seed}")
    try:
        return load_config(args.config, overrides, args.scale)
    except ConfigError as e:
        raise UsageError(str(e)) from None


def _load_model(path):
    return trainer.model_from_checkpoint(trainer.load_checkpoint(_existing(path, "checkpoint")))


# --- commands -----------------------------------------------------------------

def cmd_train(args) -> int:
    manifest = _existing(args.manifest, "manifest")
    if args.out is None:
        raise UsageError("--out is required")
    resume = None
    if args.checkpoint is not None:
        if args.config or args.set or args.scale or args.seed is not None:
            raise UsageError("--checkpoint resumes with the stored config; "
                             "drop --config/--set/--scale/--seed")
        resume = trainer.load_checkpoint(_existing(args.checkpoint, "checkpoint"))
        cfg = resume.config
    else:
        cfg = _run_config(args)
    try:
        entries = read_manifest(manifest)
    except ManifestError as e:
        raise UsageError(str(e)) from None
    if not split_entries(entries, "train"):
        raise UsageError(f"{manifest}: no train entries")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    marker = out / PARTIAL
    marker.write_text("training in progress or interrupted\n")
    (out / "config.txt").write_text(dump_config(cfg))

    def progress(row):
        log.info("epoch %d step %d loss %.4f si_sdr %.2f", row["epoch"], row["step"],
                 row["loss"], row["si_sdr"])

    result = trainer.train(entries, cfg, out, resume=resume, on_step=progress)
    rows = trainer.read_log(out / "train_log.csv")
    if not args.no_plot:
        loss_figure(rows, out / "train_loss.png")
    marker.unlink()
    final = f"{rows[-1]['loss']:.4f}" if rows else "n/a"
    print(f"trained {len(result.log)} steps; final loss {final}; checkpoint {out / 'last.ckpt'}")
    return 0


def cmd_enhance(args) -> int:
    model = _load_model(args.checkpoint)
    src = _existing(args.input, "input wav")
    noisy = read_wav(src)
    enhanced = trainer.enhance(model, noisy)
    clipped = write_wav(args.output, enhanced)
    if clipped:
        log.warning("%d samples clipped while writing %s", clipped, args.output)
    print(f"wrote {args.output} ({len(enhanced)} samples)")
    return 0


def cmd_evaluate(args) -> int:
    manifest = _existing(args.manifest, "manifest")
    if args.out is None:
        raise UsageError("--out is required")
    if (args.checkpoint is None) == (args.enhanced_dir is None):
        raise UsageError("give exactly one of --checkpoint and --enhanced-dir")
    if args.enhanced_dir is not None and not Path(args.enhanced_dir).is_dir():
        raise UsageError(f"enhanced dir not found: {args.enhanced_dir}")
    try:
        entries = split_entries(read_manifest(manifest), args.split)
    except ManifestError as e:
        raise UsageError(str(e)) from None
    if not entries:
        raise UsageError(f"{manifest}: no {args.split} entries")
    model = _load_model(args.checkpoint) if args.checkpoint is not None else None

    out = Path(args.out)
    triples = []
    for e in entries:
        clean, noisy = load_pair(e)
        if model is not None:
            enhanced = trainer.enhance(model, noisy)
            if args.save_audio:
                write_wav(out / "enhanced" / f"{e.id}.wav", enhanced)
        else:
            enhanced = read_wav(Path(args.enhanced_dir) / f"{e.id}.wav")
            if len(enhanced) != len(clean):
                raise ValueError(f"{e.id}: enhanced has {len(enhanced)} samples, expected {len(clean)}")
        triples.append((clean, noisy, enhanced))
    report = evaluate(triples, [e.snr_db for e in entries], [e.id for e in entries])
    paths = report.write(out, "eval")
    if not args.no_plot:
        eval_figure(report, out / "eval.png")
    sys.stdout.write(report.to_table())
    print(f"report: {paths['csv']}")
    return 0


def cmd_gradcheck(args) -> int:
    if not 1e-7 <= args.eps <= 1e-3:
        raise UsageError("--eps must lie in [1e-7, 1e-3]")
    res = trainer.gradcheck_model(seed=args.seed or 0, frames=args.frames,
                                  per_param=args.per_param, eps=args.eps)
    print(f"checked {res['checked']} tensors; max relative error {res['max_error']:.3e} "
          f"({res['worst']})")
    return 0 if res["max_error"] < GRADCHECK_TOL else 1


def cmd_info(args) -> int:
    cfg = _run_config(args)
    table = shape_table(cfg.model)
    width = max(len(n) for n, _, _ in table)
    for name, shape, size in table:
        print(f"{name:<{width}}  {'x'.join(map(str, shape)):>18}  {size:>12,}")
    print(f"{'total':<{width}}  {'':>18}  {param_count(cfg.model):>12,}")
    return 0


def cmd_synth_corpus(args) -> int:
    if args.out is None:
        raise UsageError("--out is required")
    manifest = make_synthetic_corpus(args.out, n_train=args.n_train, n_val=args.n_val,
                                     n_test=args.n_test, seconds=args.seconds, seed=args.seed or 0)
    print(f"wrote {manifest}")
    return 0


# --- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--scale", choices=("desk", "paper"), help="model size preset")
    common.add_argument("--seed", type=int, help="overrides train.seed")
    common.add_argument("--manifest", help="corpus manifest (clean noise snr split seed)")
    common.add_argument("--checkpoint", help="checkpoint file")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="ccdn", description="Complex-domain speech enhancement.")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    s = sub.add_parser("train", parents=[common], help="train on the manifest's train split; "
                       "--checkpoint resumes")
    s.add_argument("--no-plot", action="store_true", help="skip train_loss.png")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("enhance", parents=[common], help="enhance one WAV file")
    s.add_argument("input", help="16 kHz mono PCM16 WAV")
    s.add_argument("output", help="where to write the enhanced WAV")
    s.set_defaults(func=cmd_enhance)

    s = sub.add_parser("evaluate", parents=[common], help="SI-SDR/ESTOI report over a split")
    s.add_argument("--split", default="test", choices=("train", "val", "test"))
    s.add_argument("--enhanced-dir", help="score <id>.wav files from here instead of a model")
    s.add_argument("--save-audio", action="store_true", help="also write enhanced WAVs")
    s.add_argument("--no-plot", action="store_true", help="skip eval.png")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("gradcheck", parents=[common], help="finite differences through the model")
    s.add_argument("--eps", type=float, default=1e-4)
    s.add_argument("--frames", type=int, default=4)
    s.add_argument("--per-param", type=int, default=2, help="coordinates checked per tensor")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("info", parents=[common], help="parameter count and shape table")
    s.set_defaults(func=cmd_info)

    s = sub.add_parser("synth-corpus", parents=[common], help="write a synthetic demo corpus")
    s.add_argument("--n-train", type=int, default=8)
    s.add_argument("--n-val", type=int, default=2)
    s.add_argument("--n-test", type=int, default=4)
    s.add_argument("--seconds", type=float, default=2.0)
    s.set_defaults(func=cmd_synth_corpus)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"ccdn: error: {e}", file=sys.stderr)
        return 2
    except (trainer.CheckpointError, WavFormatError, ValueError, OSError,
            FloatingPointError, MemoryError) as e:
        print(f"ccdn: error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
