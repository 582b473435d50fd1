"""Command line entry point: ``optimize``, ``train`` and ``sweep`` subcommands."""

from __future__ import annotations

import argparse
import sys

from .errors import InfeasibleError, ProfileError, ScenarioError
from .experiments import (OPTIMIZE_FIELDS, SWEEP_AXES, TRAIN_FIELDS, run_optimize, run_sweep,
                          run_training, sweep_fields, to_csv)
from .latency import FRAMEWORKS
from .scenario import parse_config

EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3


def _csv_list(text):
    return [t.strip() for t in text.split(",") if t.strip()]


def build_parser():
    parser = argparse.ArgumentParser(prog="epsl-sim",
                                     description="Split-learning latency optimisation and toy training.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("config", help="scenario config file (key = value lines)")
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--out", default=None, help="CSV output path (default: stdout)")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("optimize", parents=[common], help="BCD allocation versus baselines a-d")

    train = sub.add_parser("train", parents=[common], help="toy training with modelled latency")
    train.add_argument("--frameworks", type=_csv_list, default=list(FRAMEWORKS),
                       help="comma-separated subset of " + ",".join(FRAMEWORKS))
    train.add_argument("--epochs", type=int, default=1)

    sweep = sub.add_parser("sweep", parents=[common], help="aggregate latencies along one axis")
    sweep.add_argument("--axis", choices=SWEEP_AXES, required=True)
    sweep.add_argument("--values", type=_csv_list, required=True,
                       help="comma-separated axis values (bandwidth_total in MHz)")
    sweep.add_argument("--reps", type=int, default=1)
    return parser


def _read_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ScenarioError(f"cannot read config {path!r}: {exc.strerror}") from None
    return parse_config(text)


def run(args):
    config = _read_config(args.config)
    if args.command == "optimize":
        return to_csv(run_optimize(config, args.seed), OPTIMIZE_FIELDS)
    if args.command == "train":
        bad = [f for f in args.frameworks if f not in FRAMEWORKS]
        if bad:
            raise ScenarioError(f"unknown framework(s): {', '.join(bad)}")
        if args.epochs < 0:
            raise ScenarioError("--epochs must be >= 0")
        return to_csv(run_training(config, args.frameworks, args.epochs, args.seed), TRAIN_FIELDS)
    if args.reps < 1:
        raise ScenarioError("--reps must be >= 1")
    try:
        rows = run_sweep(config, args.axis, args.values, args.reps, args.seed)
    except ValueError as exc:
        if isinstance(exc, ScenarioError):
            raise
        raise ScenarioError(str(exc)) from None
    return to_csv(rows, sweep_fields())


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        text = run(args)
    except (ScenarioError, ProfileError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InfeasibleError as exc:
        print(f"infeasible scenario: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    if args.out:
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


if __name__ == "__main__":
    sys.exit(main())
