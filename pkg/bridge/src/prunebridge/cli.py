"""Command line entry points: export a snapshot, serve the evaluator."""

import argparse
import sys

from .export import ExportConfig, export_snapshot, snapshot_digest
from .model import FINETUNE_LR, TRAIN_LR, TinyConvNet, accuracy, make_data, train_model
from .serve import serve_evaluator

DEFAULT_TRAIN_EPOCHS = 6


def _build_trained(model_seed: int, data_seed: int, epochs: int, lr: float):
    data = make_data(data_seed)
    model = TinyConvNet(model_seed)
    train_model(model, data, epochs, lr=lr, seed=model_seed)
    return model, data


def cmd_export(args) -> int:
    model, data = _build_trained(args.model_seed, args.data_seed, args.epochs, args.lr)
    val_acc = accuracy(model, data.X_val, data.y_val)
    config = ExportConfig(
        out=args.out,
        model=args.name,
        calibration_batches=args.calib_batches,
        bins=args.bins,
        capture_gradients=not args.no_gradients,
        capture_bn=not args.no_bn,
        capture_activations=not args.no_activations,
        batch_size=args.batch_size,
    )
    provenance = {
        "model_seed": str(args.model_seed),
        "data_seed": str(args.data_seed),
        "train_epochs": str(args.epochs),
        "train_lr": repr(args.lr),
        "val_accuracy": repr(val_acc),
    }
    path = export_snapshot(model, data, config, provenance)
    print(f"exported {path} (val accuracy {val_acc:.4f}, digest {snapshot_digest(path)[:12]})")
    return 0


def cmd_serve(args) -> int:
    import json
    from pathlib import Path

    manifest_path = Path(args.snapshot) / "manifest.json"
    if not manifest_path.is_file():
        print(f"error: no manifest at {manifest_path}", file=sys.stderr)
        return 2
    meta = json.loads(manifest_path.read_text(encoding="utf-8")).get("meta", {})
    if meta.get("source") != "bridge-torch":
        print("error: snapshot was not exported by this bridge", file=sys.stderr)
        return 2
    model, data = _build_trained(
        int(meta["model_seed"]),
        int(meta["data_seed"]),
        int(meta["train_epochs"]),
        float(meta.get("train_lr", TRAIN_LR)),
    )
    return serve_evaluator(
        model,
        data,
        expected_sha256=snapshot_digest(args.snapshot),
        lr=args.lr,
        base_seed=args.seed,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="prunebridge",
        description="Export pruning snapshots from the torch testbed and serve fitness evaluations",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("export", help="train the testbed model and export its snapshot")
    p.add_argument("--out", required=True, help="snapshot directory to write")
    p.add_argument("--name", default="tinyconv")
    p.add_argument("--model-seed", type=int, default=0)
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=DEFAULT_TRAIN_EPOCHS)
    p.add_argument("--lr", type=float, default=TRAIN_LR)
    p.add_argument("--calib-batches", type=int, default=4)
    p.add_argument("--bins", type=int, default=8)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--no-gradients", action="store_true")
    p.add_argument("--no-bn", action="store_true")
    p.add_argument("--no-activations", action="store_true")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("serve", help="rebuild the snapshot's model and answer eval requests on stdio")
    p.add_argument("--snapshot", required=True, help="snapshot directory the client is pruning")
    p.add_argument("--lr", type=float, default=FINETUNE_LR)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
