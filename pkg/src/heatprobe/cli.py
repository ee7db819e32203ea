"""Command-line experiment runner.

Subcommands: forward, dnmap, probe, indicator, verify, detect, report.
Exit codes: 0 success, 2 hypothesis violation, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import sys

from . import configio, experiments
from .conductivity import HypothesisError
from .geometry import ConstructionError, GeometryError
from .pde import SolverError
from .runge import RungeError
from .special import CalibrationError, ResolutionError

HYPOTHESIS_ERRORS = (GeometryError, ConstructionError, HypothesisError,
                     ResolutionError, RungeError, configio.ConfigError, ValueError)
NUMERICAL_ERRORS = (SolverError, CalibrationError, FloatingPointError,
                    ArithmeticError)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="heatprobe",
                                description="moving-inclusion probing laboratory")
    sub = p.add_subparsers(dest="command", required=True)
    for name in experiments.STAGES:
        sp = sub.add_parser(name, help=f"run the {name} stage")
        _common(sp)
    rp = sub.add_parser("report", help="emit plots and summary for an artifact dir")
    rp.add_argument("--out", required=True, help="artifact directory to report on")
    return p


def _common(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--config", required=True, help="experiment config (TOML)")
    sp.add_argument("--out", required=True, help="output artifact directory")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--jobs", type=int, default=1)
    sp.add_argument("--stage", default=None,
                    help="override the stage to run (defaults to the subcommand)")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            outputs = experiments.emit_report(args.out)
            for path in outputs:
                print(path)
            return 0
        cfg = configio.load_config(args.config)
        stage = args.stage or args.command
        out = experiments.run_experiment(cfg, args.out, seed=args.seed,
                                         jobs=args.jobs, stage=stage)
        print(out)
        return 0
    except HYPOTHESIS_ERRORS as exc:
        print(f"hypothesis violation: {exc}", file=sys.stderr)
        return 2
    except NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    raise SystemExit(main())
