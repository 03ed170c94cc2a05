"""Command-line driver: training, evaluation, inference, dataset synthesis,
and checkpoint inspection.

Exit codes: 0 success, 1 usage error, 2 runtime error.  Every command prints
its fully resolved configuration to stderr before acting, and that line is
enough to reproduce the run.  Results go to stdout or to files; diagnostics
go to stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, fields as dataclass_fields
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .dataio import load_paired_dataset, load_png, make_sr_dataset, save_png
from .metrics import MetricRecord
from .model import (
    TASKS,
    ModelConfig,
    build_model,
    enhancement_preset,
    parameter_report,
    sr_preset,
)
from .report import render_report
from .train import EpochLog, TrainConfig, evaluate, train

PRECISIONS = {"f32": np.float32, "f64": np.float64}
_MODEL_KEYS = {f.name for f in dataclass_fields(ModelConfig)}
_TRAIN_KEYS = {f.name for f in dataclass_fields(TrainConfig)}


class UsageError(Exception):
    """Bad flags or flag combinations; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    # argparse wants to sys.exit(2) on bad flags; route through UsageError
    # so every usage problem exits 1 and every runtime problem exits 2
    def error(self, message):
        raise UsageError(message)


def _kernel_list(text: str) -> tuple:
    try:
        sizes = tuple(int(p) for p in text.split(",") if p.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated ints, got {text!r}")
    if not sizes or any(k < 3 or k % 2 == 0 for k in sizes):
        raise argparse.ArgumentTypeError(f"kernel sizes must be odd and >= 3, got {text!r}")
    return sizes


def _announce(command: str, values: dict) -> None:
    line = json.dumps({"command": command, **values}, sort_keys=True)
    print(f"resolved config: {line}", file=sys.stderr)


def _resolve_seed(args) -> int:
    if args.seed is not None:
        return int(args.seed)
    if args.deterministic:
        return 0
    # non-deterministic runs draw a fresh seed, but it still lands in the
    # resolved-config line so the run can be replayed
    return int(np.random.SeedSequence().entropy % (2 ** 32))


def _cast_model(model, dtype, optimizer=None) -> None:
    dtype = np.dtype(dtype)
    for _, t, _ in model.named_tensors():
        t.data = t.data.astype(dtype)
    model.dtype = dtype
    if optimizer is not None:
        optimizer.m = [m.astype(dtype) for m in optimizer.m]
        optimizer.v = [v.astype(dtype) for v in optimizer.v]


def _load_overrides(path) -> dict:
    overrides = json.loads(Path(path).read_text())
    if not isinstance(overrides, dict):
        raise UsageError(f"config file must hold a JSON object, got {type(overrides).__name__}")
    unknown = sorted(set(overrides) - _MODEL_KEYS - _TRAIN_KEYS)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    return overrides


def _cmd_train(args) -> int:
    overrides = _load_overrides(args.config) if args.config else {}
    seed = _resolve_seed(args)
    dtype = PRECISIONS[args.precision]

    optimizer = None
    if args.resume:
        if args.cbam_reduction is not None or any(k in _MODEL_KEYS for k in overrides):
            raise UsageError("architecture flags cannot change on --resume")
        model, optimizer = load_checkpoint(args.resume)
        if optimizer is None:
            raise UsageError(f"{args.resume} holds no optimizer state; cannot resume")
        if args.task is not None and args.task != model.config.task:
            raise UsageError(
                f"--task {args.task} does not match checkpoint task {model.config.task}")
        if dtype is not np.float32:
            _cast_model(model, dtype, optimizer)
        task = model.config.task
    else:
        task = args.task or overrides.get("task")
        if task is None:
            raise UsageError("--task is required when starting fresh")
        if task not in TASKS:
            raise UsageError(f"task must be one of {TASKS}, got {task!r}")
        preset = enhancement_preset() if task == "enhancement" else sr_preset()
        model_dict = preset.to_dict()
        model_dict.update({k: v for k, v in overrides.items() if k in _MODEL_KEYS})
        model_dict["task"] = task
        if args.cbam_reduction is not None:
            model_dict["cbam_reduction"] = args.cbam_reduction
        model = build_model(ModelConfig.from_dict(model_dict), seed=seed, dtype=dtype)

    train_kw = {k: v for k, v in overrides.items() if k in _TRAIN_KEYS}
    for flag, key in (("epochs", "epochs"), ("batch", "batch_size"), ("lr", "lr"),
                      ("lambda_ssim", "lambda_ssim"),
                      ("checkpoint_every", "checkpoint_every"), ("out", "out_dir")):
        value = getattr(args, flag)
        if value is not None:
            train_kw[key] = value
    if args.seed is not None or "shuffle_seed" not in train_kw:
        train_kw["shuffle_seed"] = seed
    if "epochs" not in train_kw:
        raise UsageError("--epochs is required (flag or config file)")
    cfg = TrainConfig(**train_kw)

    _announce("train", {
        "task": task, "data": str(args.data), "precision": args.precision,
        "deterministic": args.deterministic, "seed": seed,
        "resume": str(args.resume) if args.resume else None,
        "model": model.config.to_dict(), **asdict(cfg),
    })

    train_pairs = load_paired_dataset(args.data, "train", task, dtype=dtype)
    val_pairs = load_paired_dataset(args.data, "val", task, dtype=dtype)
    print(f"loaded {len(train_pairs)} train / {len(val_pairs)} val pairs", file=sys.stderr)

    log = train(model, train_pairs, val_pairs, cfg, optimizer=optimizer)
    figures = render_report(log, cfg.out_dir)
    for p in figures:
        print(f"wrote {p}", file=sys.stderr)
    print(EpochLog.HEADER)
    print(log.rows[-1])
    return 0


def _cmd_eval(args) -> int:
    model, _ = load_checkpoint(args.ckpt)
    dtype = PRECISIONS[args.precision]
    if model.dtype != np.dtype(dtype):
        _cast_model(model, dtype)
    data = Path(args.data)
    split, root = data.name, data.parent
    _announce("eval", {
        "ckpt": str(args.ckpt), "data": str(args.data),
        "lambda_ssim": args.lambda_ssim, "precision": args.precision,
        "task": model.config.task,
    })
    pairs = load_paired_dataset(root, split, model.config.task, dtype=dtype)
    stats = evaluate(model, pairs, lambda_ssim=args.lambda_ssim)
    record = MetricRecord(epoch=0, split=split, psnr=stats.psnr, ssim=stats.ssim,
                          mse=stats.mse, mae=stats.mae, hybrid=stats.hybrid)
    print(MetricRecord.HEADER)
    print(record.row())
    return 0


def _infer_one(model, src: Path, dst: Path) -> None:
    x = load_png(src, dtype=model.dtype)
    y = model.forward(x)
    save_png(y, dst)
    print(f"wrote {dst}")


def _cmd_infer(args, task: str) -> int:
    model, _ = load_checkpoint(args.ckpt)
    if model.config.task != task:
        raise RuntimeError(
            f"checkpoint holds a {model.config.task!r} model; "
            f"use the matching command")
    dtype = PRECISIONS[args.precision]
    if model.dtype != np.dtype(dtype):
        _cast_model(model, dtype)
    model.set_training(False)
    _announce(task if task == "sr" else "enhance", {
        "ckpt": str(args.ckpt), "in": str(args.in_path), "out": str(args.out),
        "precision": args.precision,
    })
    src, dst = Path(args.in_path), Path(args.out)
    if src.is_dir():
        files = sorted(src.glob("*.png"))
        if not files:
            raise FileNotFoundError(f"no .png files in {src}")
        dst.mkdir(parents=True, exist_ok=True)
        for f in files:
            _infer_one(model, f, dst / f.name)
    else:
        dst.parent.mkdir(parents=True, exist_ok=True)
        _infer_one(model, src, dst)
    return 0


def _cmd_inspect(args) -> int:
    model, optimizer = load_checkpoint(args.ckpt)
    _announce("inspect", {"ckpt": str(args.ckpt)})
    report = parameter_report(model)
    print(f"task: {model.config.task}")
    print(f"config: {json.dumps(model.config.to_dict(), sort_keys=True)}")
    print(f"optimizer: {'step ' + str(optimizer.step) if optimizer else 'absent'}")
    for name, shape, count in report.rows:
        print(f"{name} {'x'.join(str(s) for s in shape)} {count}")
    print(f"total {report.total}")
    return 0


def _cmd_make_sr_dataset(args) -> int:
    _announce("make-sr-dataset", {
        "src": str(args.src), "dst": str(args.dst), "split": args.split,
        "kernels": list(args.kernels), "seed": args.seed,
    })
    n = make_sr_dataset(args.src, args.dst, args.split,
                        kernel_sizes=args.kernels, seed=args.seed)
    print(f"wrote {n} pairs under {Path(args.dst) / args.split}")
    return 0


def _add_precision(p) -> None:
    p.add_argument("--precision", choices=sorted(PRECISIONS), default="f32",
                   help="floating point width (default f32)")


def build_parser() -> _Parser:
    parser = _Parser(prog="dfn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write metrics, figures, checkpoints")
    p.add_argument("--task", choices=TASKS)
    p.add_argument("--data", required=True, help="dataset root holding train/ and val/")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int, help="batch size (default 16)")
    p.add_argument("--lr", type=float, help="learning rate (default 1e-4)")
    p.add_argument("--lambda-ssim", type=float, dest="lambda_ssim",
                   help="structural term weight in the loss (default 0.7)")
    p.add_argument("--seed", type=int, help="seed for init and shuffling (default 0)")
    p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=True,
                   help="with --no-deterministic and no --seed, draw a fresh seed")
    p.add_argument("--checkpoint-every", type=int, dest="checkpoint_every",
                   help="also checkpoint every N epochs (default: final only)")
    p.add_argument("--out", help="output directory (default run/)")
    p.add_argument("--cbam-reduction", type=int, dest="cbam_reduction",
                   help="attention bottleneck ratio (default 8)")
    p.add_argument("--config", help="JSON file overriding model/training fields")
    p.add_argument("--resume", help="checkpoint to continue from")
    _add_precision(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint against a dataset split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="split directory, e.g. <root>/val")
    p.add_argument("--lambda-ssim", type=float, dest="lambda_ssim", default=0.7)
    _add_precision(p)
    p.set_defaults(func=_cmd_eval)

    for name, task in (("enhance", "enhancement"), ("sr", "sr")):
        p = sub.add_parser(name, help=f"run a {task} checkpoint on PNG file(s)")
        p.add_argument("--ckpt", required=True)
        p.add_argument("--in", required=True, dest="in_path",
                       help="input PNG or directory of PNGs")
        p.add_argument("--out", required=True, help="output PNG or directory")
        _add_precision(p)
        p.set_defaults(func=lambda a, t=task: _cmd_infer(a, t))

    p = sub.add_parser("inspect", help="print checkpoint parameter report")
    p.add_argument("--ckpt", required=True)
    p.set_defaults(func=_cmd_inspect)

    p = sub.add_parser("make-sr-dataset", help="synthesize downscale pairs from clean PNGs")
    p.add_argument("--src", required=True, help="directory of clean PNGs")
    p.add_argument("--dst", required=True, help="dataset root to write into")
    p.add_argument("--split", default="train", help="split name (default train)")
    p.add_argument("--kernels", type=_kernel_list, default=(3, 5, 7),
                   help="comma-separated odd blur kernel sizes (default 3,5,7)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_make_sr_dataset)

    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # runtime failures all land here
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
