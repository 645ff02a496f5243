"""Command line entry point: ``mcnet {train,eval,predict,decouple,curves,features}``.

Exit codes: 0 success, 1 usage error, 2 data error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .errors import CheckpointError, DataError, MCNetError

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# CLI flag -> TrainConfig key
TRAIN_FLAGS = {
    "epochs": int, "batch_size": int, "lr_backbone": float, "lr_other": float, "momentum": float,
    "weight_decay": float, "input_size": int, "seed": int, "backbone_preset": str, "dataset_root": str,
    "checkpoint_dir": str, "pretrained_path": str, "attention": str, "grad_clip": float,
    "save_every": int,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mcnet", description="RGB-thermal salient object detection")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train from a key=value config file")
    p.add_argument("--config", help="flat key=value config file")
    for key, typ in TRAIN_FLAGS.items():
        p.add_argument("--" + key.replace("_", "-"), dest=key, type=typ)
    p.add_argument("--no-sdc", action="store_true", help="replace SDC with plain 3x3 convolutions")
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--max-steps", type=int, help="stop (and checkpoint) after this many global steps")

    p = sub.add_parser("eval", help="score a prediction directory against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True, help="report CSV")
    p.add_argument("--dataset", default="")
    p.add_argument("--method", default="MCNet")
    p.add_argument("--names", help="file listing basenames to restrict evaluation to")
    p.add_argument("--curve-out", help="optional curve CSV")

    p = sub.add_parser("predict", help="write saliency maps for RGB/ and T/ under --input")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--branches", action="store_true", help="also write RGB and thermal branch maps")

    p = sub.add_parser("decouple", help="write skeleton and contour maps for a mask directory")
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--per-component", action="store_true")

    p = sub.add_parser("curves", help="PR and F-threshold curves (CSV + PNG) for one or more methods")
    p.add_argument("--pred", required=True, action="append", help="prediction dir; repeat for several methods")
    p.add_argument("--label", action="append", help="method label per --pred")
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True, help="output prefix")

    p = sub.add_parser("features", help="dump named intermediate feature maps as image grids")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--rgb", required=True)
    p.add_argument("--thermal", required=True)
    p.add_argument("--names", required=True, help="comma separated, e.g. F2_rgb,LF2_t,SDC_out3,DF2_rgb")
    p.add_argument("--out", required=True)
    return parser


def _train(args) -> int:
    from .pipeline import make_train_config, parse_config_file, train

    values = parse_config_file(args.config) if args.config else {}
    for key in TRAIN_FLAGS:
        v = getattr(args, key)
        if v is not None:
            values[key] = v
    if args.no_sdc:
        values["sdc"] = False
    if args.no_augment:
        values["augment"] = False
    try:
        cfg = make_train_config(values)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    ckpt = train(cfg, resume=args.resume, stop_after=args.max_steps)
    print(f"trained {ckpt.step} steps; checkpoints in {cfg.checkpoint_dir}")
    return EXIT_OK


def _eval(args) -> int:
    from .metrics import evaluate_dataset, write_curve_csv, write_report_csv

    names = None
    if args.names:
        names = [l.strip() for l in Path(args.names).read_text().splitlines() if l.strip()]
    report = evaluate_dataset(args.pred, args.gt, names=names)
    write_report_csv(args.out, [(args.dataset, args.method, report)])
    if args.curve_out:
        write_curve_csv(args.curve_out, report)
    for label, items in (("missing", report.missing), ("empty gt", report.empty_gt), ("resized", report.resized)):
        if items:
            print(f"{label}: {len(items)} ({', '.join(items[:5])}{'...' if len(items) > 5 else ''})")
    row = report.row()
    print(" ".join(f"{k}={v:.6f}" for k, v in row.items()))
    return EXIT_OK


def _predict(args) -> int:
    from .pipeline import predict

    errors = []
    n = predict(args.checkpoint, args.input, args.out, branches=args.branches, errors=errors)
    print(f"wrote {n} maps to {args.out}")
    if errors:
        print(f"failed: {', '.join(errors)}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def _decouple(args) -> int:
    from .labels import decouple_directory

    skipped = []
    n = decouple_directory(args.gt, args.out, skipped=skipped, per_component=args.per_component)
    print(f"decoupled {n} masks into {args.out}")
    if skipped:
        print(f"skipped {len(skipped)} unreadable: {', '.join(skipped)}", file=sys.stderr)
    return EXIT_OK


def _curves(args) -> int:
    from .metrics import evaluate_dataset, write_curve_csv
    from .visualize import plot_curves

    labels = args.label or []
    if labels and len(labels) != len(args.pred):
        raise UsageError("give one --label per --pred")
    labels = labels or [Path(p).name for p in args.pred]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    reports = {}
    for label, pred in zip(labels, args.pred):
        reports[label] = evaluate_dataset(pred, args.gt)
        write_curve_csv(out.with_name(f"{out.name}_{label}_curve.csv"), reports[label])
    for path in plot_curves(reports, out):
        print(path)
    return EXIT_OK


def _features(args) -> int:
    from .pipeline import Checkpoint, dump_features

    model = Checkpoint.load(args.checkpoint).build_model()
    names = [n.strip() for n in args.names.split(",") if n.strip()]
    try:
        paths = dump_features(model, args.rgb, args.thermal, names, args.out)
    except KeyError as exc:
        raise UsageError(str(exc)) from exc
    for p in paths:
        print(p)
    return EXIT_OK


COMMANDS = {"train": _train, "eval": _eval, "predict": _predict, "decouple": _decouple,
            "curves": _curves, "features": _features}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, FileNotFoundError, NotADirectoryError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except MCNetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
