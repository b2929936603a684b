"""Command-line entry point.

    mier <mode> --config <path> [--seed <u64>] [--out-dir <path>]

Modes: meta_train, adapt, eval, check_grads, report. Flags override config
keys; arbitrary keys can be overridden with --set section.key=value. The
MIER_LOG environment variable selects log verbosity (debug, info, warning).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from .config import MODES, RunConfig, load_config, resolve
from .errors import MierError


def _setup_logging():
    level_name = os.environ.get("MIER_LOG", "warning").upper()
    level = getattr(logging, level_name, logging.WARNING)
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mier", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="mode", required=True)
    for mode in MODES:
        p = sub.add_parser(mode)
        p.add_argument("--config", default=None, help="config file (defaults apply if omitted)")
        p.add_argument("--seed", type=int, default=None, help="overrides run.seed")
        p.add_argument("--out-dir", default=None, help="overrides run.out_dir")
        p.add_argument("--checkpoint", default=None, help="overrides run.checkpoint")
        p.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override any config key, e.g. --set sac.discount=0.95",
        )
    rep = sub.add_parser("report")
    rep.add_argument("--out-dir", required=True, help="run directory holding metrics.csv")
    return parser


def _load(args) -> RunConfig:
    if args.config is not None:
        cfg = load_config(args.config, mode=args.mode)
    else:
        cfg = RunConfig(mode=args.mode)
    if args.seed is not None:
        cfg.values["run.seed"] = args.seed
    if args.out_dir is not None:
        cfg.values["run.out_dir"] = args.out_dir
    if args.checkpoint is not None:
        cfg.values["run.checkpoint"] = args.checkpoint
    for item in args.overrides:
        if "=" not in item:
            raise MierError(f"--set expects KEY=VALUE, got {item!r}")
        key, raw = item.split("=", 1)
        cfg.set(key.strip(), raw.strip())
    return cfg


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        if args.mode == "report":
            from .report import render_report

            for path in render_report(args.out_dir):
                print(path)
            return 0
        cfg = _load(args)
        resolved = resolve(cfg)
        from . import runner

        if args.mode == "meta_train":
            runner.run_meta_train(cfg, resolved)
            return 0
        if args.mode == "adapt":
            runner.run_adapt(cfg, resolved)
            return 0
        if args.mode == "eval":
            returns = runner.run_eval(cfg, resolved)
            for i, ret in enumerate(returns):
                print(f"task {i}: mean return {ret:.3f}")
            return 0
        if args.mode == "check_grads":
            return 0 if runner.run_check_grads(resolved) else 1
        raise MierError(f"unhandled mode {args.mode!r}")
    except MierError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
