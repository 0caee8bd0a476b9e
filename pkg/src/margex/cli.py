"""Command-line entry point: ``margex fit | simulate | mc-study | verify``.

Exit status: 0 success, 2 usage error, 3 data error, 4 convergence or
numerical failure.
"""

from __future__ import annotations

import argparse
import sys
from typing import Sequence

from .errors import ArgumentError, MargexError
from .estimation import FitMode, SolverConfig, fit
from .frailty import PRESETS, preset_scenario, simulate_dataset
from .io import read_csv, write_csv
from .mc import StudySpec, run_study, write_summary_csv
from .mle import fit_mle
from .model import CorrelationKind
from .report import report_from_fit, sha256_file, write_report

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_FIT = 0, 2, 3, 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _Usage(message)


class _Usage(Exception):
    pass


def _ci_level(text: str) -> float:
    v = float(text)
    if not 0.0 < v < 1.0:
        raise argparse.ArgumentTypeError("must lie in (0, 1)")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="margex", description="Marginal frailty models for clustered binary outcomes.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    f = sub.add_parser("fit", help="fit a dataset and write a report")
    f.add_argument("--data", required=True, help="input CSV (cluster, [subject], [time], y, covariates...)")
    f.add_argument("--structure", default="exch", choices=[k.value for k in CorrelationKind])
    f.add_argument("--method", default="proposed", choices=["proposed", "mle"])
    f.add_argument("--mode", default="four-step", choices=[m.value for m in FitMode])
    f.add_argument("--ci", type=_ci_level, default=0.95, help="confidence level (default 0.95)")
    f.add_argument("--out", default="report.json", help="report path; .csv gives the table layout")
    f.add_argument("--format", choices=["json", "csv"], help="override the format implied by --out")
    f.add_argument("--no-intercept", action="store_true", help="do not prepend an intercept column")
    f.add_argument("--seed", type=int, default=None, help="recorded in the report for provenance")

    s = sub.add_parser("simulate", help="simulate a preset scenario to CSV")
    s.add_argument("--scenario", required=True, choices=PRESETS)
    s.add_argument("--rho", type=float, nargs="*", default=None)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--clusters", type=int, default=200)
    s.add_argument("--out", default="data.csv")

    m = sub.add_parser("mc-study", help="Monte Carlo study of a preset scenario")
    m.add_argument("--scenario", required=True, choices=PRESETS)
    m.add_argument("--rho", type=float, nargs="*", default=None)
    m.add_argument("--reps", type=int, default=1000)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--methods", default="proposed", help="comma-separated subset of proposed,mle")
    m.add_argument("--structure", default=None, choices=[k.value for k in CorrelationKind])
    m.add_argument("--mode", default="four-step", choices=[x.value for x in FitMode])
    m.add_argument("--clusters", type=int, default=200)
    m.add_argument("--ci", type=_ci_level, default=0.95)
    m.add_argument("--workers", type=int, default=None, help="worker processes (default MARGEX_THREADS; 0 = all cores)")
    m.add_argument("--out", default="summary.csv")

    sub.add_parser("verify", help="run the built-in oracle checks")
    return parser


def _cmd_fit(args) -> int:
    data = read_csv(args.data, intercept=not args.no_intercept)
    kind = CorrelationKind(args.structure)
    if args.method == "mle":
        result = fit_mle(data, kind)
    else:
        result = fit(data, kind, SolverConfig(mode=args.mode))
    report = report_from_fit(
        result, data, kind.value, args.method, args.mode, args.ci, args.seed, sha256_file(args.data)
    )
    write_report(report, args.out, args.format)
    return EXIT_OK


def _cmd_simulate(args) -> int:
    config = preset_scenario(args.scenario, args.rho or None, seed=args.seed, cluster_count=args.clusters)
    write_csv(simulate_dataset(config), args.out)
    return EXIT_OK


def _cmd_mc(args) -> int:
    methods = tuple(m.strip() for m in args.methods.split(",") if m.strip())
    try:
        spec = StudySpec(args.scenario, tuple(args.rho or ()), args.reps, methods, args.seed, args.ci,
                         args.structure, args.mode, args.clusters)
    except ValueError as exc:
        raise ArgumentError(str(exc)) from None
    summary = run_study(spec, args.workers)
    write_summary_csv(summary, args.out)
    for method, secs in summary.mean_seconds.items():
        print(f"{method}: mean {secs:.4f} s per replicate, {summary.n_failed[method]} failed", file=sys.stderr)
    return EXIT_OK


def _cmd_verify(args) -> int:
    from .verify import run_checks

    checks = run_checks()
    for c in checks:
        print(f"{'PASS' if c.passed else 'FAIL'}  {c.name}: {c.detail}")
    return EXIT_OK if all(c.passed for c in checks) else 1


COMMANDS = {"fit": _cmd_fit, "simulate": _cmd_simulate, "mc-study": _cmd_mc, "verify": _cmd_verify}


def run_cli(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _Usage as exc:
        print(f"margex: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except MargexError as exc:
        print(f"margex: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code if exc.exit_code in (EXIT_USAGE, EXIT_DATA, EXIT_FIT) else 1
    except FileNotFoundError as exc:
        print(f"margex: cannot read {exc.filename}: {exc.strerror}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"margex: I/O error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run_cli())
