#!/usr/bin/env python3
"""
Federated Mixture EM - Main Script

Runs the simulation study of the distributed EM estimator for heterogeneous
Gaussian mixtures, or fits one estimator to site data files.

Usage:
    python main.py simulate --out data/            # Export a synthetic study
    python main.py fit data/site_*.csv --sigma2 2.5 # Fit on site files
    python main.py reproduce-fig1 --reps 20         # Approximation-error traces
    python main.py reproduce-bias-mse --reps 50     # Bias / variance / MSE tables
    python main.py diagnose                         # SNR and Condition-1 report
"""

import argparse
import json
import sys

from src.config import ESTIMATORS, load_config_file, merge_settings, parse_list
from src.exceptions import ConfigError, FederatedEMError
from src.experiments import (
    ExperimentPlan,
    cmd_diagnose,
    cmd_fit,
    cmd_reproduce_bias_mse,
    cmd_reproduce_fig1,
    cmd_simulate,
)
from src.logs import configure_logging

# Defaults of the approximation-error study that differ from the full grid
FIG1_DEFAULTS = {"sites": [10], "sizes": [1000]}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Distributed EM for heterogeneous Gaussian mixtures across sites",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  python main.py simulate --sites 3 --sizes 200 --sigma2 2.5 --half-width 0.1 --out data/
  python main.py fit data/site_0.csv data/site_1.csv data/site_2.csv --sigma2 2.5 --estimator distributed
  python main.py reproduce-fig1 --reps 20 --workers 4 --out results/
  python main.py reproduce-bias-mse --config study.env --reps 50
  python main.py diagnose --sigma2 2.5,5
        """
    )
    parser.add_argument('--log-level', help='Logging level (default from FEDEM_LOG_LEVEL)')
    subparsers = parser.add_subparsers(dest='command', required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='key=value experiment config file')
    common.add_argument('--seed', type=int, help='Master seed')
    common.add_argument('--reps', type=int, dest='replications', help='Replications per grid cell')
    common.add_argument('--out', help='Output directory')
    common.add_argument('--workers', type=int, help='Worker processes for replications')
    common.add_argument('--estimators', help=f'Comma separated subset of {",".join(ESTIMATORS)}')
    common.add_argument('--sites', help='Comma separated numbers of sites K')
    common.add_argument('--sizes', help='Comma separated per-site sample sizes n')
    common.add_argument('--half-width', dest='half_width', help='Comma separated lambda half-widths a')

    grid = argparse.ArgumentParser(add_help=False)
    grid.add_argument('--sigma2', help='Comma separated noise variances')

    simulate = subparsers.add_parser('simulate', parents=[common, grid], help='Export synthetic site files')
    simulate.add_argument('--rep', type=int, default=0, help='Replication index to export')

    fit = subparsers.add_parser('fit', parents=[common], help='Fit an estimator to site files')
    fit.add_argument('files', nargs='+', help='Site CSV files; the first is the lead site')
    fit.add_argument('--estimator', choices=ESTIMATORS, default='distributed')
    fit.add_argument('--sigma2', type=float, help='Known shared noise variance')

    subparsers.add_parser('reproduce-fig1', parents=[common, grid], help='Approximation-error traces')
    subparsers.add_parser('reproduce-bias-mse', parents=[common, grid], help='Bias / variance / MSE tables')
    subparsers.add_parser('diagnose', parents=[common, grid], help='SNR and Condition-1 report')
    return parser


def build_plan(args: argparse.Namespace, defaults=None) -> ExperimentPlan:
    """Merge defaults, the config file and CLI flags (in that order) into a plan."""
    settings = dict(defaults or {})
    settings = merge_settings(settings, load_config_file(args.config))
    overrides = {
        'seed': args.seed,
        'replications': args.replications,
        'out': args.out,
        'workers': args.workers,
        'estimators': parse_list(args.estimators, str),
        'sites': parse_list(args.sites, int),
        'sizes': parse_list(args.sizes, int),
        'half_width': parse_list(args.half_width, float),
    }
    if args.command != 'fit':
        overrides['sigma2'] = parse_list(args.sigma2, float)
    return ExperimentPlan.from_settings(merge_settings(settings, overrides))


def run(args: argparse.Namespace) -> None:
    if args.command == 'simulate':
        plan = build_plan(args)
        directories = cmd_simulate(plan, args.rep)
        print(f"Exported {len(directories)} stud{'y' if len(directories) == 1 else 'ies'} under {plan.out}")

    elif args.command == 'fit':
        plan = build_plan(args)
        sigma2 = args.sigma2 if args.sigma2 is not None else plan.sigma2[0]
        if args.sigma2 is None and len(plan.sigma2) != 1:
            raise ConfigError("fit needs a single --sigma2 value")
        estimates = cmd_fit(args.files, plan, args.estimator, sigma2)
        print(f"Estimated means ({args.estimator}):")
        for c, mean in enumerate(estimates['means']):
            print(f"  class {c}: {', '.join(f'{v:.6f}' for v in mean)}")
        print(f"Results written to: {plan.out}")

    elif args.command == 'reproduce-fig1':
        path = cmd_reproduce_fig1(build_plan(args, FIG1_DEFAULTS))
        print(f"Trace written to: {path}")

    elif args.command == 'reproduce-bias-mse':
        path = cmd_reproduce_bias_mse(build_plan(args))
        print(f"Summary written to: {path}")

    elif args.command == 'diagnose':
        path = cmd_diagnose(build_plan(args))
        print(f"Diagnostics written to: {path}")


def main(argv=None) -> int:
    """Parse arguments, run the subcommand and map failures to exit codes."""
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.log_level)

    print("Federated Mixture EM")
    print("=" * 60)

    try:
        run(args)
    except FederatedEMError as e:
        print(json.dumps(e.summary()), file=sys.stderr)
        return 1
    except OSError as e:
        summary = {"error": type(e).__name__, "message": str(e), "path": e.filename}
        print(json.dumps(summary, default=str), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
