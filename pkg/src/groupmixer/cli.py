"""
Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import configparser
import json
import logging
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np

from . import data, gradsuite, metrics
from . import tensor as T
from .errors import ConfigError, GroupMixerError
from .model import ModelConfig, build, count_parameters, load_checkpoint, normalize_variant, save_checkpoint
from .train import TrainHyper, evaluate, train_model, write_training_log

log = logging.getLogger("groupmixer")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2
SEED_ENV = "GROUPMIXER_SEED"
CHECKPOINT_NAME = "model.gmxr"
MANIFEST_NAME = "split.json"
LOG_NAME = "training_log.csv"
RESOLVED_NAME = "resolved-config"


class CliUsageError(GroupMixerError):
    """Bad or missing command-line input."""


def _parse_bool(text: str) -> bool:
    key = str(text).strip().lower()
    if key in ("1", "true", "yes", "on"):
        return True
    if key in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_fractions(text: str) -> tuple:
    parts = [float(p) for p in str(text).replace(",", " ").split()]
    if len(parts) != 3:
        raise ValueError(f"expected three fractions, got {text!r}")
    return tuple(parts)


@dataclass(frozen=True)
class Option:
    name: str
    parse: Callable[[str], Any]
    default: Any
    help: str


TRAIN_OPTIONS: List[Option] = [
    Option("variant", normalize_variant, "base", "base, slim-g2 or slim-g4"),
    Option("mag", data.normalize_magnification, "40X", "magnification subdirectory"),
    Option("root", str, None, "dataset root containing <mag>/<class>/*.png"),
    Option("seed", int, None, f"random seed (default ${SEED_ENV} or 0)"),
    Option("input_size", int, 224, "square input side, divisible by 7"),
    Option("lr", float, 4e-3, "Adam learning rate"),
    Option("batch_size", int, 32, "training batch size"),
    Option("max_epochs", int, 300, "epoch budget"),
    Option("patience", int, 10, "early-stopping patience in epochs"),
    Option("focal_gamma", float, 2.0, "focal loss focusing parameter"),
    Option("class_weighting", str, "balanced", "balanced or uniform"),
    Option("augment", _parse_bool, True, "random flips on training batches"),
    Option("fractions", _parse_fractions, (0.7, 0.2, 0.1), "train/val/test fractions"),
    Option("by_patient", _parse_bool, False, "keep each patient in one partition"),
    Option("workers", int, 1, "image decoding threads"),
    Option("out_dir", str, "runs", "parent directory for timestamped run directories"),
    Option("run_dir", str, None, "exact run directory (overrides --out-dir)"),
]


def read_config_file(path) -> Dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment. Dashes in keys become underscores."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CliUsageError(f"cannot read config file {path}: {exc.strerror}") from None
    try:
        parser.read_string("[run]\n" + text, source=str(path))
    except configparser.Error as exc:
        raise CliUsageError(f"malformed config file {path}: {exc}") from None
    return {k.replace("-", "_"): v for k, v in parser["run"].items()}


def resolve_options(args: argparse.Namespace, options: Sequence[Option]) -> Dict[str, Any]:
    """Defaults, then the config file, then explicit flags."""
    known = {o.name: o for o in options}
    file_values = read_config_file(args.config) if args.config else {}
    unknown = sorted(set(file_values) - set(known))
    if unknown:
        raise CliUsageError(f"unknown keys in config file: {', '.join(unknown)}")
    resolved = {}
    for opt in options:
        flag = getattr(args, opt.name)
        raw = flag if flag is not None else file_values.get(opt.name)
        if raw is None:
            resolved[opt.name] = opt.default
            continue
        try:
            resolved[opt.name] = opt.parse(raw) if isinstance(raw, str) else raw
        except (ValueError, GroupMixerError) as exc:
            raise CliUsageError(f"invalid value for {opt.name}: {exc}") from None
    if resolved["seed"] is None:
        env = os.environ.get(SEED_ENV)
        try:
            resolved["seed"] = int(env) if env not in (None, "") else 0
        except ValueError:
            raise CliUsageError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return resolved


def _run_directory(opts: Dict[str, Any]) -> Path:
    if opts["run_dir"]:
        return Path(opts["run_dir"])
    stamp = time.strftime("%Y%m%d-%H%M%S")
    return Path(opts["out_dir"]) / f"{stamp}-seed{opts['seed']}"


def _write_resolved(opts: Dict[str, Any], path: Path) -> None:
    lines = []
    for key in sorted(opts):
        value = opts[key]
        if isinstance(value, tuple):
            value = " ".join(repr(v) for v in value)
        lines.append(f"{key} = {value}")
    path.write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    opts = resolve_options(args, TRAIN_OPTIONS)
    if not opts["root"]:
        raise CliUsageError("--root is required (flag or config file)")
    if opts["input_size"] % 7:
        raise CliUsageError(f"--input-size must be divisible by 7, got {opts['input_size']}")
    if opts["class_weighting"] not in ("balanced", "uniform"):
        raise CliUsageError(f"--class-weighting must be balanced or uniform, got {opts['class_weighting']!r}")

    run_dir = _run_directory(opts)
    run_dir.mkdir(parents=True, exist_ok=True)
    opts["run_dir"] = str(run_dir)
    _write_resolved(opts, run_dir / RESOLVED_NAME)

    samples = data.scan_dataset(opts["root"], opts["mag"])
    manifest = data.split(samples, opts["fractions"], seed=opts["seed"], by_patient=opts["by_patient"])
    manifest.save(run_dir / MANIFEST_NAME)
    size = (opts["input_size"], opts["input_size"])
    parts = {p: data.ImageDataset(manifest.select(samples, p), size, workers=opts["workers"])
             for p in ("train", "val", "test")}

    config = ModelConfig(variant=opts["variant"], input_size=size)
    hyper = TrainHyper(
        lr=opts["lr"], batch_size=opts["batch_size"], max_epochs=opts["max_epochs"],
        patience=opts["patience"], seed=opts["seed"], focal_gamma=opts["focal_gamma"],
        class_weighting=opts["class_weighting"], augment=opts["augment"],
        checkpoint_path=str(run_dir / CHECKPOINT_NAME),
    )
    model, history = train_model(config, parts["train"], parts["val"], hyper)
    save_checkpoint(model, run_dir / CHECKPOINT_NAME)
    write_training_log(history, run_dir / LOG_NAME)

    result = evaluate(model, parts["test"])
    report = metrics.compute_metrics(result.confusion, opts["mag"])
    metrics.emit_report(report, result.confusion, run_dir)
    print(f"run directory: {run_dir}")
    print(_summary(report))
    return EXIT_OK


def _summary(report: metrics.MetricsReport) -> str:
    def fmt(v):
        return "undefined" if v is None else f"{v:.4f}"
    return " ".join(f"{k}={fmt(getattr(report, k))}" for k in ("accuracy", "precision", "recall", "f1"))


def _magnification_of(keys: Sequence[str]) -> Optional[str]:
    mags = {k.split("/", 1)[0] for k in keys}
    return mags.pop() if len(mags) == 1 else None


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    manifest_path = Path(args.manifest) if args.manifest else Path(args.checkpoint).parent / MANIFEST_NAME
    try:
        manifest = data.SplitManifest.load(manifest_path)
    except FileNotFoundError:
        raise CliUsageError(f"split manifest {manifest_path} not found; pass --manifest") from None
    mag = _magnification_of(manifest.test)
    samples = data.scan_dataset(args.root, mag)
    test = data.ImageDataset(manifest.select(samples, args.split), model.config.input_size, workers=args.workers)
    result = evaluate(model, test)
    report = metrics.compute_metrics(result.confusion, mag)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / f"eval-{args.split}"
    metrics.emit_report(report, result.confusion, out, svg=args.svg)
    print(f"report: {out}")
    print(_summary(report))
    return EXIT_OK


def cmd_predict(args) -> int:
    model = load_checkpoint(args.checkpoint)
    image = data.load_image(args.image, model.config.input_size)
    probs = T.softmax(model.predict_logits(image[None].astype(model.head.weight.dtype)), axis=1)[0]
    k = int(np.argmax(probs))
    print(f"{data.CLASSES[k]} {float(probs[k]):.6f}")
    return EXIT_OK


def cmd_count_params(args) -> int:
    config = ModelConfig(variant=args.variant)
    print(count_parameters(build(config, np.random.default_rng(0))))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = gradsuite.run_suite(seed=args.seed, corrupt=args.corrupt_backward, max_coords=args.max_coords)
    width = max(len(r.name) for r in results)
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.name:<{width}}  {r.result.max_relative_error:.3e}  "
              f"checked={r.result.checked} skipped={r.result.skipped}  {status}")
    failed = [r.name for r in results if not r.passed]
    print(f"tolerance {gradsuite.TOLERANCE:g}: {len(results) - len(failed)}/{len(results)} passed")
    return EXIT_OK if not failed else EXIT_FAILURE


def cmd_synth(args) -> int:
    paths = data.make_synthetic_dataset(args.out, n=args.n, seed=args.seed, size=args.size,
                                        magnification=args.mag)
    print(f"wrote {len(paths)} images under {Path(args.out) / data.normalize_magnification(args.mag)}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _env_seed_default() -> int:
    env = os.environ.get(SEED_ENV)
    return int(env) if env and env.lstrip("-").isdigit() else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="groupmixer",
                                     description="Grouped ConvMixer histopathology classifier.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model on one magnification")
    p.add_argument("--config", help="file of 'key = value' lines; flags take precedence")
    for opt in TRAIN_OPTIONS:
        # None marks "not given" so the config file can fill it in
        p.add_argument("--" + opt.name.replace("_", "-"), dest=opt.name, default=None, help=opt.help)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="metrics on a split manifest's partition")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--root", required=True)
    p.add_argument("--manifest", help="default: split.json next to the checkpoint")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--out", help="report directory (default: eval-<split> next to the checkpoint)")
    p.add_argument("--svg", action="store_true", help="also write confusion.svg")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="classify one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("count-params", help="print the trainable parameter count")
    p.add_argument("--variant", default="base")
    p.set_defaults(func=cmd_count_params)

    p = sub.add_parser("gradcheck", help="finite-difference check of every layer type")
    p.add_argument("--seed", type=int, default=_env_seed_default())
    p.add_argument("--max-coords", type=int, default=48, help="coordinates sampled per tensor")
    p.add_argument("--corrupt-backward", default=None, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="write a synthetic two-class PNG dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=32)
    p.add_argument("--seed", type=int, default=_env_seed_default())
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--mag", default="40X")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.command == "gradcheck" and args.corrupt_backward not in (None, *gradsuite.case_names()):
        print(f"groupmixer: error: unknown case {args.corrupt_backward!r}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (CliUsageError, ConfigError) as exc:
        print(f"groupmixer: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (GroupMixerError, OSError, json.JSONDecodeError) as exc:
        print(f"groupmixer: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
