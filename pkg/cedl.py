#!/usr/bin/env python3
# cedl.py
# Command-line entry point: run / eval / sweep-beta / plot
#
# Exit codes: 0 success, 1 runtime failure, 2 config or usage error

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from errors import ConfigError
from experiment import cmd_eval, cmd_plot, cmd_run, cmd_sweep_beta
from visualize import AVAILABLE_FIGURES

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2

logger = logging.getLogger("cedl")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cedl",
        description="Continual evidential deep learning: train, score, sweep and plot.",
    )
    parser.add_argument("--verbose", "-v", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train and evaluate a configured task stream")
    run.add_argument("config", type=Path, help="YAML config (merged over configs/defaults.yaml)")

    ev = sub.add_parser("eval", help="re-score stored checkpoints and rewrite the tables")
    ev.add_argument("results_dir", type=Path)

    sweep = sub.add_parser("sweep-beta", help="IND_f vs OOD FPR95 of the combined uncertainty over a beta grid")
    sweep.add_argument("results_dir", type=Path)
    sweep.add_argument("--grid", type=float, nargs="+", default=None, help="beta values in [0, 1]")

    plot = sub.add_parser("plot", help="render figures from stored dumps")
    plot.add_argument("results_dir", type=Path)
    # validated by cmd_plot so an unknown id maps to the usage exit code
    plot.add_argument("--figure", required=True, help=f"one of {AVAILABLE_FIGURES}")

    return parser


def _configure_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse exits 2 on bad usage and 0 on --help
        return int(e.code or 0)

    _configure_logging(args.verbose)

    try:
        if args.command == "run":
            run_dir = cmd_run(args.config)
            print(f"✅ Run complete: {run_dir}")
        elif args.command == "eval":
            run_dir = cmd_eval(args.results_dir)
            print(f"✅ Re-evaluated: {run_dir}")
        elif args.command == "sweep-beta":
            _, summary = cmd_sweep_beta(args.results_dir, args.grid)
            print(summary.to_string(index=False))
        elif args.command == "plot":
            written = cmd_plot(args.results_dir, args.figure)
            print(f"✅ Wrote {len(written)} files to {args.results_dir / 'figures'}")
    except ConfigError as e:
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:
        logger.exception("run failed")
        print(f"❌ {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME

    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
