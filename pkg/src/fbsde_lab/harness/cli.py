"""Command line: ``run``, ``study`` and ``list-experiments``."""

from __future__ import annotations

import argparse
import sys

from ..errors import ConfigurationError, ExperimentError
from .config import OUTPUT_ENV, SEED_ENV, load_config
from .experiments import REGISTRY, run_experiment
from .study import AXES, convergence_study


def _values(text: str) -> list:
    try:
        return [int(float(v)) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="fbsde-lab",
        description="Numerical checks for recursive stochastic control with random coefficients.",
        epilog=f"Environment: {SEED_ENV} overrides the seed, {OUTPUT_ENV} the output directory.",
    )
    sub = p.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run one experiment from a JSON config")
    run.add_argument("config")
    st = sub.add_parser("study", help="convergence study along one axis")
    st.add_argument("config")
    st.add_argument("--axis", choices=sorted(AXES), required=True)
    st.add_argument("--values", type=_values, required=True, help="ascending, e.g. 25,50,100,200")
    st.add_argument("--statistic", default=None, help="row used as the error (default: first row)")
    sub.add_parser("list-experiments", help="print the registered experiments")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "list-experiments":
        for name, exp in sorted(REGISTRY.items()):
            print(f"{name:24s} {exp.description}")
        return 0
    try:
        cfg = load_config(args.config)
        if args.command == "run":
            report = run_experiment(cfg)
            print(report.summary())
            print(f"wrote {cfg.output_dir}/{cfg.experiment}.csv ({report.wall_time:.1f}s)")
            return 0 if report.passed else 1
        res = convergence_study(cfg, args.axis, args.values, statistic=args.statistic)
        print(f"{'value':>10s} {'x':>12s} {'error':>12s} {'se':>12s}")
        for row in res.table():
            print(f"{row['value']:>10} {row['x']:12.5g} {row['error']:12.5g} {row['se']:12.5g}")
        print(f"error slope {res.error_slope:.4f}, se slope {res.se_slope:.4f}")
        for r in res.rows:
            print(r.line())
        return 0 if res.passed else 1
    except (ConfigurationError, ExperimentError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
