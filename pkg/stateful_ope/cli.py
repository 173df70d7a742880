# Copyright (c) 2024 stateful-ope contributors
# This file is part of stateful-ope.
#
#     stateful-ope is free software: you can redistribute it and/or modify
#     it under the terms of the GNU General Public License as published by
#     the Free Software Foundation, either version 3 of the License, or
#     (at your option) any later version.
#
#     stateful-ope is distributed in the hope that it will be useful,
#     but WITHOUT ANY WARRANTY; without even the implied warranty of
#     MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.  See the
#     GNU General Public License for more details.
#
#     You should have received a copy of the GNU General Public License
#     along with stateful-ope.  If not, see <https:#www.gnu.org/licenses/>.
#
"""Command line entrypoint: simulate, ope, learn and analyze."""

import argparse
import logging
import sys
from pathlib import Path
from typing import Callable, Optional

from stateful_ope.env import BehaviorPolicy, simulate
from stateful_ope.experiments import (
    MODES,
    ExperimentConfig,
    manifest,
    run_analysis,
    run_learn,
    run_ope,
)
from stateful_ope.io import load_json, write_json, write_results, write_trajectories
from stateful_ope.settings import Settings

log = logging.getLogger(__name__)

# Presets used when neither the command line nor the config file names one
COMMAND_PRESETS = {"learn": "steep", "analyze": "steep"}


def comma_list(cast: Callable) -> Callable[[str], tuple]:
    """Argparse type for comma separated values."""

    def parse(value: str) -> tuple:
        try:
            return tuple(cast(item) for item in value.split(",") if item.strip())
        except ValueError as e:
            raise argparse.ArgumentTypeError(f"invalid list {value!r}: {e}") from e

    return parse


def load_experiment(args: argparse.Namespace) -> ExperimentConfig:
    """Experiment from the ``--config`` file with command line overrides."""
    document = load_json(args.config) if args.config else {}
    preset = args.preset
    if preset is None and "preset" not in document:
        preset = COMMAND_PRESETS.get(args.command)
    return ExperimentConfig.from_dict(
        document,
        preset=preset,
        master_seed=args.seed,
        workers=args.workers,
        modes=args.modes,
        deltas=args.delta,
        output_dir=args.out,
        sample_sizes=args.sizes,
        replications=args.replications,
        n_trajectories=args.n,
        drop_stockout=True if args.drop_stockout else None,
        outcome_shift=args.shift,
    )


def cmd_simulate(exp: ExperimentConfig) -> Path:
    """Simulate logged trajectories under the behavior policy."""
    cfg = exp.env.with_delta(exp.delta_values()[0])
    data = simulate(cfg, BehaviorPolicy(cfg), exp.n_trajectories, exp.master_seed)
    path = write_trajectories(data, Path(exp.output_dir) / "trajectories.csv")
    log.info(f"Simulated {data.n} trajectories into {path}")
    return path


def cmd_ope(exp: ExperimentConfig) -> Path:
    """Off-policy evaluation error curves."""
    return write_results(run_ope(exp), Path(exp.output_dir) / "ope.csv")


def cmd_learn(exp: ExperimentConfig) -> Path:
    """Out-of-sample value of learned threshold policies."""
    return write_results(run_learn(exp), Path(exp.output_dir) / "learn.csv")


def cmd_analyze(exp: ExperimentConfig) -> Path:
    """Threshold heatmap, outcome-error histogram and persistence summary."""
    out = Path(exp.output_dir)
    result = run_analysis(exp)
    write_results(result.report.to_frame(), out / "thresholds.csv")
    write_results(result.report.delta_hist.to_frame(), out / "delta_hist.csv")
    return write_json(result.summary(), out / "analysis.json")


COMMANDS = {
    "simulate": cmd_simulate,
    "ope": cmd_ope,
    "learn": cmd_learn,
    "analyze": cmd_analyze,
}


def build_parser() -> argparse.ArgumentParser:
    """Parser with one subcommand per experiment."""
    settings = Settings()
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="verbose output")
    common.add_argument("-c", "--config", help="JSON experiment config")
    common.add_argument(
        "-o", "--out", help=f"Output directory (default {settings.OUTPUT_DIR})"
    )
    common.add_argument("--seed", type=int, help="Master seed")
    common.add_argument("--workers", type=int, help="Worker processes")
    common.add_argument(
        "--modes", type=comma_list(str), help=f"Comma separated subset of {MODES}"
    )
    common.add_argument(
        "--delta", type=comma_list(float), help="Misspecification weight(s)"
    )
    common.add_argument(
        "--preset",
        help=(
            "Environment preset: canonical, favorable or steep "
            "(learn and analyze default to steep)"
        ),
    )
    common.add_argument("-n", "--n", type=int, help="Trajectories to simulate")
    common.add_argument("--replications", type=int, help="Replications per size")
    common.add_argument(
        "--sizes", type=comma_list(int), help="Comma separated sample sizes"
    )
    common.add_argument(
        "--drop-stockout",
        action="store_true",
        help="Leave zero-inventory observations out of the estimates",
    )
    common.add_argument(
        "--shift",
        type=comma_list(float),
        help="delta1,delta0 bias of a constructed outcome model (analyze)",
    )

    parser = argparse.ArgumentParser(
        prog="stateful-ope",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        description="Off-policy evaluation and learning for capacitated pricing",
        epilog="""
    examples:
        stateful-ope simulate -n 1000 --out data/
        stateful-ope ope --sizes 100,1000 --replications 20 --modes dm,dr
        stateful-ope learn --delta 0.2 --workers 8
        stateful-ope analyze --shift 0.03,-0.03
        """,
    )
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        subparsers.add_parser(name, parents=[common], help=fn.__doc__)
    return parser


def main(args_list: Optional[list[str]] = None) -> int:
    """Run a subcommand; returns the process exit code."""
    parser = build_parser()
    args = parser.parse_args(args_list)

    logging.basicConfig(
        level="DEBUG" if args.verbose or Settings().DEBUG else "INFO",
        format=(
            "%(asctime)s.%(msecs)03d [%(levelname)s] "
            "%(name)s | %(funcName)s:%(lineno)d | %(message)s"
        ),
        datefmt="%y-%m-%d %H:%M:%S",
        stream=sys.stdout,
    )

    try:
        exp = load_experiment(args)
        COMMANDS[args.command](exp)
        write_json(manifest(args.command, exp), Path(exp.output_dir) / "manifest.json")
    except Exception as e:
        log.debug("Command failed", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    """
    This is just a hook so this file can be run standalone during development.
    """
    sys.exit(main())
