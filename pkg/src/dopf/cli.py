"""Command-line front end: ``dopf solve``, ``dopf tune`` and ``dopf compare``.

Exit codes: 0 converged (or a tuned value found), 2 iteration limit (or no
value in the sweep converged), 1 any error including bad flags.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from dopf import bench
from dopf.kernels import AdaConfig, Algorithm, Norm
from dopf.forms import FormulationKind
from dopf.network import load_case
from dopf.partition import read_partition
from dopf.runtime import TRACE_COLUMNS, SolveReport, default_workers, solve_dopf

EXIT_OK, EXIT_ERROR, EXIT_LIMIT = 0, 1, 2

log = logging.getLogger("dopf")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags, which would collide with the iteration-limit code
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _csv_list(kind):
    def parse(text):
        try:
            return [kind(x) for x in text.split(",") if x.strip()]
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from None
    return parse


def _run_flags(p: argparse.ArgumentParser, multi: bool = False):
    if multi:
        p.add_argument("--case", action="append", required=True,
                       help="case file or bundled name; repeat for several cases")
        p.add_argument("--areas", action="append", default=None,
                       help="bus-to-area file, one per --case in the same order ('-' for none)")
        p.add_argument("--alg", type=_csv_list(str), default=["admm"], help="comma-separated algorithms")
        p.add_argument("--form", type=_csv_list(str), default=["dc"], help="comma-separated formulations")
    else:
        p.add_argument("--case", required=True, help="MATPOWER case file or bundled name (e.g. case14)")
        p.add_argument("--areas", default=None, help="bus-to-area override file ('bus area' per line)")
        p.add_argument("--alg", default="admm", choices=[a.value for a in Algorithm])
        p.add_argument("--form", default="dc", choices=[f.value for f in FormulationKind])
    p.add_argument("--penalty", type=float, default=None,
                   help="ADMM rho / APP beta / ATC initial beta (default depends on formulation)")
    p.add_argument("--alpha", type=float, default=None, help="ATC penalty growth factor")
    p.add_argument("--tol", type=float, default=1e-2, help="mismatch tolerance")
    p.add_argument("--norm", default="l2", choices=[n.value for n in Norm])
    p.add_argument("--max-iter", type=int, default=2000)
    p.add_argument("--termination", default="central", choices=["central", "distributed"])
    p.add_argument("--init", default="flat", choices=["flat", "warm"])
    p.add_argument("--solver-tol", type=float, default=1e-8)
    if not multi:
        p.add_argument("--workers", type=int, default=None,
                       help="worker processes (default: $DOPF_WORKERS or 1)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dopf", description="Distributed optimal power flow by area decomposition.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("solve", help="run one distributed solve")
    _run_flags(p)
    p.add_argument("--out", default=None, help="write the report as JSON")
    p.add_argument("--trace", default=None, help="write the mismatch trace as CSV")
    p.add_argument("--no-oracle", action="store_true", help="skip the centralized comparison solve")

    p = sub.add_parser("tune", help="sweep the hyperparameter along the descending schedule")
    _run_flags(p)
    p.add_argument("--start", type=float, default=None, help="first sweep value")
    p.add_argument("--steps", type=int, default=None, help="number of sweep values")
    p.add_argument("--values", type=_csv_list(float), default=None, help="explicit comma-separated sweep")
    p.add_argument("--out", default=None, help="write the sweep table as CSV")

    p = sub.add_parser("compare", help="benchmark a product of cases, algorithms, formulations and workers")
    _run_flags(p, multi=True)
    p.add_argument("--workers", type=_csv_list(int), default=None,
                   help="comma-separated worker counts (default: $DOPF_WORKERS or 1)")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--out", required=True, help="benchmark table CSV")
    p.add_argument("--series", default=None, help="per-worker timing series CSV")
    return parser


def _config(args, **overrides) -> AdaConfig:
    kw = dict(algorithm=args.alg, formulation=args.form, penalty=args.penalty, tol=args.tol,
              norm=args.norm, max_iter=args.max_iter, termination=args.termination, init=args.init,
              solver_tol=args.solver_tol)
    if args.alpha is not None:
        kw["alpha"] = args.alpha
    kw.update(overrides)
    return AdaConfig(**kw)


def _load(args):
    case = load_case(args.case)
    areas = read_partition(args.areas) if args.areas else None
    return case, areas


def write_report(report: SolveReport, path: str | Path):
    Path(path).write_text(json.dumps(report.to_dict(), indent=2) + "\n")


def write_trace(report: SolveReport, path: str | Path):
    extra = sorted({k for row in report.trace for k in row} - set(TRACE_COLUMNS))
    bench.write_csv(report.trace, list(TRACE_COLUMNS) + extra, path)


def cmd_solve(args) -> int:
    workers = args.workers if args.workers is not None else default_workers()
    config = _config(args, workers=workers)
    case, areas = _load(args)
    report = solve_dopf(case, config, areas=areas, oracle=not args.no_oracle)
    if args.out:
        write_report(report, args.out)
    if args.trace:
        write_trace(report, args.trace)
    gap = "n/a" if report.gap is None else f"{report.gap:+.3e}"
    print(f"{report.case}: {report.reason} after {report.iterations} iterations, "
          f"objective {report.objective:.6g}, gap {gap}, l2 {report.final_l2:.3e}, {report.wall_time:.3f} s")
    return EXIT_OK if report.converged else EXIT_LIMIT


def _print_row(row: bench.BenchmarkRow):
    status = row.error or ("converged" if row.converged else "not converged")
    gap = "" if row.gap is None else f" gap {row.gap:+.3e}"
    print(f"  {row.algorithm}/{row.formulation} {row.hyperparameter:g} workers={row.workers}: "
          f"{status}, {row.iterations} it{gap}", flush=True)


def cmd_tune(args) -> int:
    workers = args.workers if args.workers is not None else default_workers()
    config = _config(args, workers=workers)
    if args.values:
        values = args.values
    else:
        values = bench.tune_schedule(config.algorithm, args.start, args.steps)
    case, areas = _load(args)
    best, rows = bench.tune(case, config, areas, values, progress=_print_row)
    if args.out:
        bench.write_rows(rows, args.out)
    if best is None:
        print("no value in the sweep converged within the gap limit")
        return EXIT_LIMIT
    print(f"best {'alpha' if config.algorithm == Algorithm.ATC else 'penalty'}: {best:g}")
    return EXIT_OK


def cmd_compare(args) -> int:
    parts = args.areas or []
    if parts and len(parts) != len(args.case):
        raise UsageError(f"--areas given {len(parts)} times for {len(args.case)} cases")
    parts = [None if p in (None, "-") else p for p in parts] or [None] * len(args.case)
    workers = args.workers or [default_workers()]
    if args.repeats < 1:
        raise ValueError(f"repeats must be >= 1, got {args.repeats}")
    base = asdict(_config(args, algorithm=args.alg[0], formulation=args.form[0]))
    for k in ("algorithm", "formulation", "workers", "penalty"):
        base.pop(k)
    hyper = {}
    for a in args.alg:
        alg = Algorithm(a)
        if alg == Algorithm.ATC and args.alpha is not None:
            hyper[alg.value] = args.alpha
        elif alg != Algorithm.ATC and args.penalty is not None:
            hyper[alg.value] = args.penalty
    # validate the product's configs up front so flag errors are not buried in rows
    for a in args.alg:
        for f in args.form:
            AdaConfig(**{**base, "algorithm": a, "formulation": f})
    rows = bench.compare(list(zip(args.case, parts)), args.alg, args.form, workers, args.repeats,
                         base=base, hyperparameters=hyper, progress=_print_row)
    bench.write_rows(rows, args.out)
    if args.series:
        bench.write_csv(bench.timing_series(rows), bench.SERIES_FIELDS, args.series)
    return EXIT_OK


COMMANDS = {"solve": cmd_solve, "tune": cmd_tune, "compare": cmd_compare}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except Exception as exc:  # noqa: BLE001 - every failure maps to exit code 1
        if args.verbose:
            log.exception("failed")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
