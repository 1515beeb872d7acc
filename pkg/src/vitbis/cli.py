"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import vtb
from .data import generate_dataset
from .errors import ConfigMismatch, InvalidSpec, VitbisError
from .gradsuite import run_suite
from .metrics import evaluate
from .runconfig import RunConfig
from .train import (
    ablate_scale,
    ablate_upsampling,
    load_checkpoint,
    predict_labels,
    train,
)

log = logging.getLogger("vitbis")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="run configuration JSON")
    common.add_argument("--seed", type=_u64, help="root seed (overrides the config)")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--checkpoint", type=Path, help="VTB1 checkpoint")
    common.add_argument("--data", type=Path, help="VTB1 dataset (images, masks)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="vitbis", description="Vision-transformer segmentation at desk scale.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True
    sub.add_parser("train", parents=[common], help="train a model")
    sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a dataset")
    sub.add_parser("predict", parents=[common], help="write predicted masks")
    sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    sub.add_parser("gen-data", parents=[common], help="generate a synthetic dataset")
    ab = sub.add_parser("ablate", parents=[common], help="ablation harness")
    ab.add_argument("kind", choices=["upsample", "scale"])
    return parser


# ------------------------------------------------------------------ helpers


def _run_config(args) -> RunConfig:
    if args.config is not None:
        if not args.config.is_file():
            raise UsageError(f"config file not found: {args.config}")
        cfg = RunConfig.load(args.config)
    else:
        cfg = RunConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _require(args, *names):
    for name in names:
        if getattr(args, name) is None:
            raise UsageError(f"--{name} is required for '{args.command}'")


def _load_dataset(path: Path):
    tensors, _ = vtb.read_vtb(path)
    if "images" not in tensors or "masks" not in tensors:
        raise UsageError(f"{path} holds no 'images'/'masks' tensors")
    return tensors["images"].astype(np.float64), tensors["masks"]


def _datasets(cfg: RunConfig, args):
    if args.data is not None:
        return _load_dataset(args.data), None
    train_set = generate_dataset(cfg.data)
    val_spec = cfg.val_spec()
    return train_set, (generate_dataset(val_spec) if val_spec else None)


def _write_dataset(path: Path, images, masks, meta) -> None:
    vtb.write_vtb(path, {"images": images, "masks": masks.astype(np.uint8)}, meta)


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    _require(args, "out")
    cfg = _run_config(args)
    args.out.mkdir(parents=True, exist_ok=True)
    images, masks = generate_dataset(cfg.data)
    _write_dataset(args.out / "train.vtb", images, masks, {"kind": "dataset", "spec": cfg.data.to_dict()})
    val_spec = cfg.val_spec()
    if val_spec is not None:
        vi, vm = generate_dataset(val_spec)
        _write_dataset(args.out / "val.vtb", vi, vm, {"kind": "dataset", "spec": val_spec.to_dict()})
    print(f"wrote {cfg.data.num_images} training and {cfg.val_images} validation images to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    _require(args, "out")
    cfg = _run_config(args)
    data, val = _datasets(cfg, args)
    manifest = train(cfg.model, cfg.optim, data, val, cfg.train, args.out, resume=args.checkpoint)
    split = "val" if "val" in manifest.metrics else "train"
    print(f"final loss {manifest.loss_trace[-1]:.6f}" if manifest.loss_trace else "no steps run")
    print(f"{split} mean Dice {manifest.metrics[split]['mean_dice']:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    _require(args, "checkpoint", "data")
    model, *_ = load_checkpoint(args.checkpoint)
    images, masks = _load_dataset(args.data)
    report = evaluate(predict_labels(model, images), masks, model.cfg.num_classes)
    print(report.format_table())
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "metrics.csv").write_text(report.to_csv())
    return EXIT_OK


def cmd_predict(args) -> int:
    _require(args, "checkpoint", "data", "out")
    model, *_ = load_checkpoint(args.checkpoint)
    images, _ = _load_dataset(args.data)
    labels = predict_labels(model, images)
    args.out.mkdir(parents=True, exist_ok=True)
    for i, mask in enumerate(labels):
        vtb.write_vtb(args.out / f"pred_{i:04d}.vtb", {"mask": mask}, {"kind": "prediction", "index": i})
    print(f"wrote {len(labels)} predictions to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    seed = 0 if args.seed is None else args.seed
    results = run_suite(seed % 2**32)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<22} max rel err {r.max_rel_error:.3e}")
    ok = all(r.passed for r in results)
    print("all gradients pass" if ok else "gradient check FAILED")
    return EXIT_OK if ok else EXIT_RUNTIME


def cmd_ablate(args) -> int:
    _require(args, "out")
    cfg = _run_config(args)
    data, val = _datasets(cfg, args)
    args.out.mkdir(parents=True, exist_ok=True)
    if args.kind == "upsample":
        table, _ = ablate_upsampling(cfg.model, cfg.optim, data, val, cfg.train, args.out)
    else:
        table, _ = ablate_scale(cfg.model, cfg.optim, data, val, train_cfg=cfg.train, out_dir=args.out)
    (args.out / f"ablate_{args.kind}.csv").write_text(table.to_csv())
    (args.out / f"ablate_{args.kind}.txt").write_text(table.format() + "\n")
    print(table.format())
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "gradcheck": cmd_gradcheck,
    "gen-data": cmd_gen_data,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigMismatch, InvalidSpec) as exc:
        print(f"vitbis {args.command}: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except (VitbisError, OSError, ValueError) as exc:
        print(f"vitbis {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
