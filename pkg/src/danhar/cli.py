"""Command-line entry point: ``danhar <command> [options]``.

Errors are reported as a single line on stderr,
``danhar-error[<category>]: <message>``, with a nonzero exit status.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import experiment as E
from .attention import VARIANTS
from .container import ContainerError
from .data import DataError, WindowConfigError
from .model import ModelConfigError
from .tensor import NonFiniteError
from .train import TrainingError

EXIT_CODES = {"config": 2, "io": 3, "data": 4, "checkpoint": 5, "training": 6, "internal": 1}


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--seed", type=int, help="master seed (overrides config)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--no-figures", action="store_true", help="skip PNG rendering")


def _run_overrides(p: argparse.ArgumentParser) -> None:
    p.add_argument("--archive", help="windowed data archive from `prepare`")
    p.add_argument("--preset", help="dataset preset supplying split, batch size and learning rate")
    p.add_argument("--attention", choices=VARIANTS)
    p.add_argument("--backbone", choices=("plain", "residual"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="danhar", description="Dual-attention residual networks for activity recognition")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="window a sensor CSV (or synthesize data) into an archive")
    _common(p)
    p.add_argument("--input", help="sensor log CSV")
    p.add_argument("--preset")
    p.add_argument("--width", type=int)
    p.add_argument("--step", type=int)
    p.add_argument("--synthetic", action="store_true", help="generate the synthetic benchmark instead")
    p.add_argument("--num-classes", type=int, default=4)
    p.add_argument("--windows-per-class", type=int, default=250)
    p.add_argument("--axes", type=int, default=3)
    p.add_argument("--length", type=int, default=64)
    p.add_argument("--embed-mode", choices=("full", "segment"), default="full")

    p = sub.add_parser("train", help="train one model")
    _common(p)
    _run_overrides(p)

    p = sub.add_parser("ablate", help="train every attention variant under each seed")
    _common(p)
    _run_overrides(p)
    p.add_argument("--seeds", type=int, nargs="+")

    p = sub.add_parser("evaluate", help="score a checkpoint on an archive")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--archive", required=True)

    p = sub.add_parser("export-attention", help="dump attention weights for chosen windows")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--archive", required=True)
    p.add_argument("--indices", type=int, nargs="+", default=[0])
    return parser


def _resolved(args) -> dict:
    overrides = {
        "seed": args.seed,
        "data.archive": str(Path(args.archive).resolve()) if args.archive else None,
        "data.preset": args.preset,
        "model.attention.variant": args.attention,
        "model.backbone": args.backbone,
        "train.epochs": args.epochs,
        "train.batch_size": args.batch_size,
        "train.lr": args.lr,
    }
    if getattr(args, "seeds", None):
        overrides["ablate.seeds"] = args.seeds
    cfg = E.load_config_file(args.config)
    if args.archive and "data" in cfg:
        cfg["data"].pop("synthetic", None)  # an explicit archive replaces a configured synthetic source
    return E.resolve_config(cfg, overrides)


def dispatch(args) -> int:
    figures = not args.no_figures
    if args.command == "prepare":
        synth = None
        if args.synthetic:
            synth = {"num_classes": args.num_classes, "windows_per_class": args.windows_per_class,
                     "axes": args.axes, "length": args.length, "embed_mode": args.embed_mode}
        summary = E.cmd_prepare(args.out, args.input, args.preset, args.width, args.step, synth, args.seed or 0)
        print(json.dumps(summary, sort_keys=True))
    elif args.command == "train":
        oc = E.cmd_train(_resolved(args), args.out, figures)
        print(f"final_acc={oc.final_acc!r} best_acc={oc.best_acc!r} best_epoch={oc.result.best_epoch}")
    elif args.command == "ablate":
        rows = E.cmd_ablate(_resolved(args), args.out, figures)
        for r in rows:
            if r["seed"] == "mean":
                print(f"{r['variant']}: params={r['params']} final_acc={r['final_acc']!r} best_acc={r['best_acc']!r}")
    elif args.command == "evaluate":
        res = E.cmd_evaluate(args.checkpoint, args.archive, args.out, figures)
        print(f"accuracy={res['accuracy']!r} errors={res['errors']}")
    elif args.command == "export-attention":
        for p in E.cmd_export_attention(args.checkpoint, args.archive, args.indices, args.out, figures):
            print(p)
    return 0


def _category(exc: BaseException) -> str:
    if isinstance(exc, (E.RunConfigError, ModelConfigError, WindowConfigError, argparse.ArgumentError)):
        return "config"
    if isinstance(exc, ContainerError):
        return "checkpoint"
    if isinstance(exc, (DataError, IndexError)):
        return "data"
    if isinstance(exc, (TrainingError, NonFiniteError)):
        return "training"
    if isinstance(exc, OSError):
        return "io"
    return "internal"


def _limit_threads():
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return None
    return threadpool_limits(int(os.environ.get("DANHAR_THREADS", "1")))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    limiter = _limit_threads()
    try:
        return dispatch(args)
    except Exception as exc:
        cat = _category(exc)
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"danhar-error[{cat}]: {msg}", file=sys.stderr)
        if args.verbose:
            logging.exception("traceback")
        return EXIT_CODES[cat]
    finally:
        if limiter is not None:
            limiter.restore_original_limits()


if __name__ == "__main__":
    sys.exit(main())
