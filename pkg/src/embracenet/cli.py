"""``embracenet`` command line: synth, train, eval, predict, compare, gradcheck.

Exit codes: 0 success, 1 check failure, 2 usage/config error, 3 runtime abort.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import gradcheck
from .config import RunConfig, load_run_config
from .data import Dataset, SynthConfig, filter_invalid, load_manifests, synth_generate
from .errors import (
    CheckpointError,
    ConfigurationError,
    EmbraceNetError,
    FormatError,
    InputError,
    ManifestError,
    TrainingError,
)
from .inference import evaluate, predict_dataset
from .model import ModelConfig, load_checkpoint
from .train import compare_fusions, train_run

log = logging.getLogger("embracenet")

EXIT_OK, EXIT_CHECK_FAILED, EXIT_USAGE, EXIT_ABORT = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _split_list(value):
    if value is None:
        return None
    parts = []
    for v in value:
        parts.extend(s for s in v.split(",") if s)
    return tuple(parts)


def _add_run_flags(p: argparse.ArgumentParser, *, model=True, training=True) -> None:
    p.add_argument("--config", help="key = value run configuration file")
    p.add_argument("--seed", type=int)
    if model:
        p.add_argument("--preset", choices=["base", "large", "tiny"])
        p.add_argument("--fusion", choices=["embrace", "early", "intermediate", "late"])
        p.add_argument("--input-mode", dest="input_mode", choices=["raw", "fft", "raw_and_fft"])
        p.add_argument("--modalities", action="append", help="comma-separated sensor names")
        p.add_argument("--fusion-mode", dest="fusion_mode", choices=["stochastic", "expected"])
    if training:
        p.add_argument("--batch-size", dest="batch_size", type=int)
        p.add_argument("--total-steps", "--steps", dest="total_steps", type=int)
        p.add_argument("--lr0", type=float)
        p.add_argument("--decay-interval", dest="decay_interval", type=int)
        p.add_argument("--decay-factor", dest="decay_factor", type=float)
        p.add_argument("--eval-interval", dest="eval_interval", type=int)
        p.add_argument("--checkpoint-interval", dest="checkpoint_interval", type=int)
        p.add_argument("--augment-rotation", dest="augment_rotation", action=argparse.BooleanOptionalAction)
        p.add_argument("--train-manifest", dest="train_manifest", action="append")
        p.add_argument("--val-manifest", dest="val_manifest", action="append")
        p.add_argument("--out-dir", dest="out_dir")
        p.add_argument("--resume")
    p.add_argument("--ensemble-n", dest="ensemble_n", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="embracenet", description=__doc__.splitlines()[0])
    parser.add_argument("-q", "--quiet", action="store_true", help="only print results")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic dataset in manifest layout")
    p.add_argument("--out", "--out-dir", dest="out", required=True)
    p.add_argument("--samples", type=int, default=64)
    p.add_argument("--val-samples", dest="val_samples", type=int, default=0)
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--location", default="Hips")
    p.add_argument("--window", type=int, default=500)

    p = sub.add_parser("train", help="train a model")
    _add_run_flags(p)

    p = sub.add_parser("compare", help="train every fusion method and write a CSV table")
    _add_run_flags(p)
    p.add_argument("--csv", default="fusion_comparison.csv")

    for name, helptext in (("eval", "score a checkpoint on a labelled split"), ("predict", "write predictions")):
        p = sub.add_parser(name, help=helptext)
        _add_run_flags(p, model=False, training=False)
        p.add_argument("--checkpoint")
        p.add_argument("--manifest", action="append")
        p.add_argument("--metrics-log", dest="metrics_log")
        if name == "predict":
            p.add_argument("--output")
            p.add_argument("--probabilities")

    p = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--preset", choices=["base", "large", "tiny"])
    p.add_argument("--input-mode", dest="input_mode", choices=["raw", "fft", "raw_and_fft"])
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--inject-fault", dest="inject_fault", action="store_true", help=argparse.SUPPRESS)
    return parser


_NOT_CONFIG = {"command", "config", "quiet", "csv", "inject_fault", "tolerance"}


def _run_config(args) -> RunConfig:
    overrides = {k: v for k, v in vars(args).items() if k not in _NOT_CONFIG}
    for key in ("modalities", "train_manifest", "val_manifest", "manifest"):
        if key in overrides:
            overrides[key] = _split_list(overrides[key])
    cfg = load_run_config(args.config, overrides)
    print(f"seed: {cfg.seed}")
    return cfg


def _load_split(paths, what: str) -> Dataset:
    if not paths:
        raise UsageError(f"no {what} manifest given")
    data, dropped = filter_invalid(load_manifests(paths))
    if dropped:
        print(f"{what}: dropped {dropped} samples containing NaN/Inf")
    return data


def cmd_synth(args) -> int:
    cfg = SynthConfig(args.samples, args.classes, args.noise, args.window, args.location)
    if args.val_samples < 0:
        raise ConfigurationError("--val-samples must be >= 0")
    print(f"seed: {args.seed}")
    out = Path(args.out)
    manifest = synth_generate(cfg, out / "train", args.seed, "train")
    print(f"wrote {cfg.samples} samples: {manifest}")
    if args.val_samples:
        val_cfg = SynthConfig(args.val_samples, args.classes, args.noise, args.window, args.location)
        # validation windows come from a disjoint seed stream
        manifest = synth_generate(val_cfg, out / "validation", args.seed + 1_000_003, "validation")
        print(f"wrote {args.val_samples} samples: {manifest}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _run_config(args)
    train_data = _load_split(cfg.train_manifest, "train")
    val_data = _load_split(cfg.val_manifest, "validation") if cfg.val_manifest else None
    result = train_run(cfg.train_config(), cfg.model_config(), train_data, val_data, cfg.out_dir, cfg.resume)
    if result.losses:
        print(f"final loss: {result.losses[-1]:.6f}")
    if result.final_metrics is not None:
        print(f"final metrics: {result.final_metrics.summary()}")
    print(f"checkpoint: {result.checkpoint}")
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _run_config(args)
    train_data = _load_split(cfg.train_manifest, "train")
    val_data = _load_split(cfg.val_manifest, "validation")
    results = compare_fusions(cfg.train_config(), cfg.model_config(), train_data, val_data, args.csv)
    for fusion, acc in results.items():
        print(f"{fusion:>12s}  {acc:.4f}")
    print(f"table: {args.csv}")
    return EXIT_OK


def _checkpoint_and_data(cfg: RunConfig):
    if not cfg.checkpoint:
        raise UsageError("--checkpoint is required")
    model = load_checkpoint(cfg.checkpoint).model
    data = _load_split(cfg.manifest, "evaluation")
    missing = [s for s in model.config.modalities if s not in data.modalities]
    if missing or (len(data) and data.window != model.config.window):
        raise CheckpointError(
            f"checkpoint expects sensors {list(model.config.modalities)} with window {model.config.window}; "
            f"dataset has {sorted(data.modalities)} with window {data.window if len(data) else '?'}"
        )
    return model, data


def _append_log(path, line: str) -> None:
    with open(path, "a") as fh:
        fh.write(line + "\n")


def cmd_eval(args) -> int:
    cfg = _run_config(args)
    model, data = _checkpoint_and_data(cfg)
    if data.labels is None:
        raise UsageError("evaluation split has no label file; use 'predict' for unlabelled data")
    metrics = evaluate(model, data, cfg.ensemble_config())
    line = f"checkpoint={cfg.checkpoint} ensemble_n={cfg.ensemble_n} seed={cfg.seed} {metrics.summary()}"
    print(line)
    _append_log(cfg.metrics_log or Path(cfg.checkpoint).parent / "eval.log", line)
    return EXIT_OK


def cmd_predict(args) -> int:
    cfg = _run_config(args)
    model, data = _checkpoint_and_data(cfg)
    output = cfg.output or "predictions.txt"
    metrics = predict_dataset(model, data, cfg.ensemble_config(), output, cfg.probabilities)
    print(f"predictions: {output}")
    if metrics is not None:
        line = f"checkpoint={cfg.checkpoint} ensemble_n={cfg.ensemble_n} seed={cfg.seed} {metrics.summary()}"
        print(line)
        if cfg.metrics_log:
            _append_log(cfg.metrics_log, line)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    overrides = {k: getattr(args, k) for k in ("seed", "preset", "input_mode")}
    cfg = load_run_config(args.config, overrides)
    print(f"seed: {cfg.seed}")
    preset = args.preset or (cfg.preset if args.config else "tiny")
    model_cfg = ModelConfig.preset_config(preset, input_mode=cfg.input_mode)
    if args.inject_fault:
        with gradcheck.corrupted_backward():
            sections = gradcheck.run_all(model_cfg, cfg.seed, args.tolerance)
    else:
        sections = gradcheck.run_all(model_cfg, cfg.seed, args.tolerance)
    failed = []
    for section in sections:
        for line in section.report.lines(prefix=f"{section.name}/"):
            print(line)
        failed += [f"{section.name}/{b}" for b in section.report.failing()]
    if failed:
        print(f"gradcheck FAILED for {len(failed)} blocks: {', '.join(failed)}")
        return EXIT_CHECK_FAILED
    print(f"gradcheck passed: {sum(len(s.report.errors) for s in sections)} blocks")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "compare": cmd_compare,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(message)s",
        stream=sys.stderr,
    )
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigurationError, ManifestError, FormatError, CheckpointError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingError as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE if args.command == "synth" else EXIT_ABORT
    except EmbraceNetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
