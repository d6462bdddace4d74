"""
Command-line entry point: `shm-nonlin <command> ...`.

Exit status is 0 on success, 1 for bad input (config, manifest or data
files) and 2 for numerical failures.
"""

import argparse
import sys

from arsenal import colors

from shm.nonlin.dataset import LayoutMismatch, RecordTooShort, TooFewRepetitions
from shm.nonlin.neuralnet import DimensionMismatch
from shm.nonlin.pipeline.commands import cmd_analyze, cmd_report, cmd_simulate, cmd_train_baseline
from shm.nonlin.pipeline.config import ConfigError, load_config
from shm.nonlin.pipeline.manifest import MalformedManifest
from shm.nonlin.util import MalformedFile

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_NUMERIC = 2

# bad input found while reading data rather than the config
DATA_ERRORS = (RecordTooShort, LayoutMismatch, TooFewRepetitions, DimensionMismatch)


def _states(text):
    return [s.strip() for s in text.split(",") if s.strip()]


def build_parser():
    parser = argparse.ArgumentParser(
        prog="shm-nonlin",
        description="Nonlinearity detection from the input gradients of one-step-ahead models.",
    )
    parser.add_argument("-q", "--quiet", action="store_true", help="suppress progress output")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate every state of the roster")
    p.add_argument("--config", required=True, help="experiment YAML file")
    p.add_argument("--out", default=None, help="run directory (default: output_dir of the config)")
    p.add_argument("--states", type=_states, default=None, help="comma-separated subset of states")

    p = sub.add_parser("train-baseline", help="select the lag and train the baseline models")
    p.add_argument("--config", required=True, help="experiment YAML file")
    p.add_argument("--out", default=None, help="run directory (default: output_dir of the config)")

    p = sub.add_parser("analyze", help="recalibrate per state and compute gradient metrics")
    p.add_argument("--config", required=True, help="experiment YAML file")
    p.add_argument("--out", default=None, help="run directory (default: output_dir of the config)")
    p.add_argument("--states", type=_states, default=None, help="comma-separated subset of states")
    p.add_argument("--max-points", type=int, default=None, help="cap on gradient evaluation points per floor")

    p = sub.add_parser("report", help="print the metric table with detection flags")
    p.add_argument("--manifest", required=True, help="manifest file or run directory")
    p.add_argument("--format", choices=["table", "csv"], default="table")
    return parser


def run(args):
    verbose = 0 if args.quiet else 1
    if args.command == "report":
        print(cmd_report(args.manifest, fmt=args.format))
        return
    cfg = load_config(args.config)
    if args.command == "simulate":
        cmd_simulate(cfg, out=args.out, states=args.states, verbose=verbose)
    elif args.command == "train-baseline":
        cmd_train_baseline(cfg, out=args.out, verbose=verbose)
    elif args.command == "analyze":
        cmd_analyze(cfg, out=args.out, states=args.states, max_points=args.max_points, verbose=verbose)


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        run(args)
    except (ConfigError, MalformedManifest, MalformedFile, FileNotFoundError, *DATA_ERRORS) as e:
        print(colors.red % "error:", e, file=sys.stderr)
        return EXIT_INPUT
    except ArithmeticError as e:
        print(colors.red % "numerical failure:", f"{type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
