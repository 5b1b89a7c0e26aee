"""Command-line entry point.

Subcommands: run (train an experiment), eval (score a checkpoint),
inspect-store (validate and account a container file), reconstruct (decode
every stored exemplar to an image file), report (rebuild metrics from an
emitted CSV). Exit codes: 0 success, 2 configuration error, 3 runtime
failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .config import (
    ConfigError,
    archive_config,
    build_configs,
    load_config,
    run_directory,
)
from .data import TaskStream, load_cifar100, synthetic_shapes
from .engine import evaluate, load_checkpoint, reconstruct_old_samples, restore_model, run_experiment
from .metrics import (
    ACC_CSV,
    avg_accuracy,
    emit_reports,
    forgetting,
    last_accuracy,
    load_accuracy_csv,
)
from .patches import quantize
from .store import inspect_store, load_store

# offset between train and test draws of the synthetic generator
_TEST_SEED_GAP = 10007


def _build_stream(cfg: dict) -> TaskStream:
    ds = cfg["dataset"]
    try:
        if ds["id"] == "synthetic":
            side = ds["image_side"]
            if side != cfg["model"]["image_side"]:
                raise ConfigError(
                    f"dataset.image_side {side} != model.image_side "
                    f"{cfg['model']['image_side']}")
            train_x, train_y = synthetic_shapes(ds["train_per_class"], side,
                                                seed=ds["data_seed"])
            test_x, test_y = synthetic_shapes(ds["test_per_class"], side,
                                              seed=ds["data_seed"] + _TEST_SEED_GAP)
        elif ds["id"] == "cifar100":
            if not ds["root"]:
                raise ConfigError("dataset.root is required for cifar100")
            (train_x, train_y), (test_x, test_y) = load_cifar100(ds["root"])
        else:
            raise ConfigError(f"unknown dataset id {ds['id']!r}")
        return TaskStream(train_x, train_y, test_x, test_y, n_tasks=ds["n_tasks"],
                          class_order_seed=ds["class_order_seed"])
    except (ValueError, FileNotFoundError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def cmd_run(args) -> int:
    cfg = load_config(args.config, args.set)
    if args.seed is not None:
        cfg["train"]["seed"] = args.seed
    if args.name is not None:
        cfg["name"] = args.name
    model_cfg, train_cfg, budget = build_configs(cfg)
    stream = _build_stream(cfg)  # config problems surface before any output exists

    out = run_directory(cfg, args.output)
    archive_config(cfg, out)
    ledger = run_experiment(stream, model_cfg, train_cfg, budget,
                            out_dir=out, resume=args.resume)
    emit_reports(ledger, out / "reports")
    for t in range(ledger.n_tasks):
        print(f"after task {t + 1}: overall accuracy {ledger.overall_accuracy(t):.4f}")
    print(f"avg {avg_accuracy(ledger):.4f}  last {last_accuracy(ledger):.4f}  "
          f"forgetting {forgetting(ledger):.4f}")
    print(f"outputs in {out}")
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = restore_model(ckpt)
    cfg = load_config(args.config, args.set)
    stream = _build_stream(cfg)
    n_tasks = min(ckpt["task"], stream.n_tasks)
    correct_weight = 0.0
    total = 0
    for task in stream.tasks[:n_tasks]:
        acc = evaluate(model, task.test_images, task.test_labels)
        print(f"task {task.index}: accuracy {acc:.4f} over {len(task.test_labels)} images")
        correct_weight += acc * len(task.test_labels)
        total += len(task.test_labels)
    print(f"overall: {correct_weight / total:.4f} over {total} images")
    return 0


def cmd_inspect_store(args) -> int:
    report = inspect_store(args.path)
    print(f"container: {args.path}")
    if not report["valid"]:
        print(f"validation: FAILED ({report['error']})")
        return 3
    print("validation: ok")
    budget, used = report["budget_bytes"], report["used_bytes"]
    pct = 100.0 * used / budget if budget else 0.0
    print(f"budget: {budget} bytes")
    print(f"used:   {used} bytes ({pct:.1f}%)")
    print(f"entries: {report['entry_count']} records, {len(report['per_class'])} classes")
    for cls, count in report["per_class"].items():
        print(f"  class {cls}: {count}")
    geo = report["geometry"]
    if geo is not None:
        n_full = (geo["image_side"] // geo["patch_side"]) ** 2
        print(f"geometry: {geo['image_side']} px, {geo['patch_side']} px patches, "
              f"{geo['kept_patches']}/{n_full} kept (r={geo['mask_ratio']:.2f})")
        print(f"exemplar multiplier: {report['multiplier']:g}x per full-image byte cost")
    return 0


def cmd_reconstruct(args) -> int:
    from PIL import Image

    store = load_store(args.store)
    model = restore_model(load_checkpoint(args.checkpoint))
    replay = reconstruct_old_samples(model, store, args.cutoff)
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    for i, (img, rec) in enumerate(zip(replay.images, replay.records)):
        raw = quantize(img.astype(np.float64)).transpose(1, 2, 0)
        Image.fromarray(raw).save(outdir / f"exemplar_{i:05d}_class_{rec.label:03d}.png")
    print(f"wrote {len(replay)} images to {outdir}")
    return 0


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    acc_path = run_dir / "reports" / ACC_CSV
    if not acc_path.exists():
        raise ConfigError(f"no accuracy matrix at {acc_path}")
    ledger = load_accuracy_csv(acc_path)
    emit_reports(ledger, run_dir / "reports")
    print(f"avg {avg_accuracy(ledger):.4f}  last {last_accuracy(ledger):.4f}  "
          f"forgetting {forgetting(ledger):.4f}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bimae",
        description="Bilateral masked-autoencoder class-incremental training")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train an experiment from a config")
    p.add_argument("--config", help="YAML config file; defaults apply when omitted")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted config override, repeatable")
    p.add_argument("--seed", type=int, help="shorthand for --set train.seed=N")
    p.add_argument("--name", help="experiment name (names the run directory)")
    p.add_argument("--output", help="run directory (overrides the output root)")
    p.add_argument("--resume", action="store_true",
                   help="continue from the last task checkpoint in the run directory")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the configured test sets")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect-store", help="validate and account a store container")
    p.add_argument("path")
    p.set_defaults(func=cmd_inspect_store)

    p = sub.add_parser("reconstruct", help="decode every stored exemplar to a PNG")
    p.add_argument("--store", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--outdir", required=True)
    p.add_argument("--cutoff", type=float, default=0.25,
                   help="low-frequency cutoff fraction for the detail branch")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("report", help="recompute metrics and plots from an emitted CSV")
    p.add_argument("--run-dir", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary maps failures to exit codes
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
