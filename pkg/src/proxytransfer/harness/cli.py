"""Command-line entry point: ``proxytransfer <command> [options]``.

Exit codes: 0 success, 2 configuration/input error, 3 training aborted.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from ..datasets import compute_channel_stats, generate_synthetic, load_folder, write_folder
from ..errors import ProxyTransferError, TrainingAbort
from ..models import load_checkpoint
from .config import FIELD_TYPES, build_config, load_config_file
from .protocol import finetune, pretrain
from .report import report, to_text
from .reproduce import TrendSettings, run_trend
from .training import evaluate

EXIT_OK, EXIT_CONFIG, EXIT_ABORT = 0, 2, 3


def _add_run_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value config file; command-line options take precedence")
    for name, tp in FIELD_TYPES.items():
        if name != "task":
            p.add_argument("--" + name.replace("_", "-"), dest=name, default=None, metavar="VALUE",
                           help="comma-separated ints" if "tuple" in str(tp) else None)


def _run_config(args, task: str):
    file_values = load_config_file(args.config) if args.config else {}
    overrides = {name: getattr(args, name) for name in FIELD_TYPES if name != "task"}
    overrides["task"] = task
    return build_config(file_values, overrides)


def cmd_synth(args) -> int:
    ds = generate_synthetic(args.classes, args.per_class, args.size, args.seed, class_offset=args.class_offset)
    write_folder(ds, args.out)
    print(f"wrote {len(ds)} images ({ds.num_classes} classes) to {args.out}")
    return EXIT_OK


def cmd_stats(args) -> int:
    ds = load_folder(args.data)
    mean, std = compute_channel_stats(ds)
    print(json.dumps({"items": len(ds), "classes": ds.num_classes, "histogram": ds.class_histogram().tolist(),
                      "channel_mean": mean.tolist(), "channel_std": std.tolist()}, indent=1))
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _run_config(args, "pretrain")
    ckpt = pretrain(cfg)
    print(f"pretrain {cfg.method}: final loss {ckpt.provenance['final_loss']:.4f}, "
          f"train accuracy {ckpt.provenance['final_train_accuracy']:.4f}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = _run_config(args, "finetune")
    records = finetune(cfg)
    aborted = [r for r in records if r.aborted]
    for r in records:
        print(f"{r.run_id}: " + (f"aborted ({r.abort_reason})" if r.aborted else f"accuracy {r.test_accuracy:.4f}"))
    return EXIT_ABORT if aborted else EXIT_OK


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    acc = evaluate(ckpt, load_folder(args.data), args.mode)
    print(f"accuracy {acc:.4f}")
    return EXIT_OK


def cmd_report(args) -> int:
    rows = report(args.runs, args.out)
    print(to_text(rows), end="")
    return EXIT_OK


def cmd_reproduce(args) -> int:
    settings = TrendSettings()
    if args.quick:
        settings = TrendSettings(weak_per_class=40, target_per_class=40, pretrain_epochs=3, finetune_epochs=5,
                                 seeds=(0, 1), test_per_class=20, arch="tiny")
    result = run_trend(args.out, settings)
    print(to_text(result.rows), end="")
    for c in result.checks:
        print(f"{'PASS' if c.passed else 'FAIL'}  {c.name}: {c.detail}")
    print(f"wall time {result.wall_time:.0f}s")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="proxytransfer", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic texture dataset as PNG folders")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--per-class", type=int, default=100)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--class-offset", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("stats", help="class histogram and channel statistics of a dataset folder")
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("pretrain", help="train a backbone on the weakly labeled set")
    _add_run_options(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="fine-tune at a given N_c from random or a checkpoint")
    _add_run_options(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="accuracy of a checkpoint on a dataset folder")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=("classifier", "nearest_proxy"), default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="aggregate run records into tables and a curve plot")
    p.add_argument("--runs", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("reproduce", help="synthesize, pretrain, fine-tune and report in one go")
    p.add_argument("--out", default="reproduce_out")
    p.add_argument("--quick", action="store_true", help="tiny smoke-test sizes")
    p.set_defaults(func=cmd_reproduce)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except TrainingAbort as exc:
        print(f"training aborted: {exc.reason}", file=sys.stderr)
        return EXIT_ABORT
    except (ProxyTransferError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
