"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 acceptance-threshold failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .errors import ConfigError, NumericalError
from .experiments import (
    EXPERIMENTS,
    config_from_mapping,
    list_models_text,
    parse_config_file,
    run_experiment,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_THRESHOLD = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fracsve",
        description="Simulation and verification toolkit for rough-kernel "
                    "stochastic Volterra equations.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment")
    run.add_argument("experiment", nargs="?", choices=EXPERIMENTS,
                     help="experiment name (may also come from --config)")
    run.add_argument("--config", help="flat key = value config file")
    run.add_argument("--experiment", dest="experiment_flag", choices=EXPERIMENTS)
    run.add_argument("--H", help="comma-separated roughness exponents in (0, 1/2]")
    run.add_argument("--T", type=float, help="time horizon")
    run.add_argument("--n", help="comma-separated grid resolutions")
    run.add_argument("--m-ratio", type=int, dest="m_ratio",
                     help="fine/coarse refinement ratio")
    run.add_argument("--n-ref", type=int, dest="n_ref",
                     help="fine reference resolution for strong-rate")
    run.add_argument("--model", help="comma-separated built-in model names")
    run.add_argument("--replications", type=int)
    run.add_argument("--seed", type=int)
    run.add_argument("--out", help="output directory "
                     "(default $FRACSVE_OUT or ./runs)")
    run.add_argument("--rank", type=int, help="low-rank projection rank")
    run.add_argument("--mode", help="qv-limit mode: deterministic or mc")
    run.add_argument("--cells", type=int, help="grid cells for marchaud-check")
    run.add_argument("--h-stochastic", dest="h_stochastic",
                     help="H values for the stochastic representation check")
    run.add_argument("--workers", type=int, help="parallel worker processes")
    run.add_argument("--self-test", dest="self_test", action="store_true",
                     default=None, help="simulate: run covariance/sampling checks")
    run.add_argument("--scheme", choices=("exact", "euler"),
                     help="simulate: path scheme")
    run.add_argument("--quad-abs-tol", type=float, dest="quad_abs_tol")
    run.add_argument("--quad-rel-tol", type=float, dest="quad_rel_tol")
    run.add_argument("--quad-max-subdivisions", type=int,
                     dest="quad_max_subdivisions")
    run.add_argument("--quad-tail-cutoff", type=float,
                     dest="quad_tail_cutoff")

    sub.add_parser("list-models", help="list built-in coefficient models")
    return parser


def _merge_config(args: argparse.Namespace) -> dict:
    raw: dict = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        raw.update(parse_config_file(path))
    flag_keys = ("H", "T", "n", "m_ratio", "n_ref", "model", "replications",
                 "seed", "out", "rank", "mode", "cells", "h_stochastic",
                 "workers", "self_test", "scheme", "quad_abs_tol",
                 "quad_rel_tol", "quad_max_subdivisions", "quad_tail_cutoff")
    for key in flag_keys:
        val = getattr(args, key, None)
        if val is not None:
            raw[key] = val
    experiment = args.experiment_flag or args.experiment or raw.get("experiment")
    if not experiment:
        raise ConfigError("no experiment given (positional, --experiment, or config)")
    raw["experiment"] = experiment
    if "out" not in raw or not raw["out"]:
        raw["out"] = os.environ.get("FRACSVE_OUT", "runs")
    return raw


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "list-models":
        print(list_models_text())
        return EXIT_OK
    try:
        cfg = config_from_mapping(_merge_config(args))
        outcome = run_experiment(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure in {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    for crit in outcome.criteria:
        status = "PASS" if crit["passed"] else "FAIL"
        print(f"[{status}] {crit['name']}")
    if not outcome.passed:
        print("acceptance thresholds not met", file=sys.stderr)
        return EXIT_THRESHOLD
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
