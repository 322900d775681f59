"""Benchmark harness: hyperparameter sweeps and timing comparisons.

Timing is taken from :func:`dopf.runtime.solve_dopf`, which receives an
already-parsed case, so case loading is never part of a reported time.
"""
from __future__ import annotations

import csv
import itertools
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Iterable, Sequence

from dopf.kernels import AdaConfig, Algorithm
from dopf.network import NetworkCase, load_case
from dopf.partition import read_partition
from dopf.runtime import SolveReport, solve_dopf

log = logging.getLogger(__name__)

GAP_LIMIT = 0.01

# first values of the descending tuning schedules
SWEEP_START = {Algorithm.ADMM: 1e6, Algorithm.APP: 1e6, Algorithm.ATC: 1.2}
PENALTY_DIVISOR = 10.0
ALPHA_STEP = 0.05
DEFAULT_PENALTY_STEPS = 10


@dataclass
class BenchmarkRow:
    """One (case, algorithm, formulation, hyperparameter, workers) measurement.

    ``hyperparameter`` is the penalty for ADMM/APP and the growth factor for ATC.
    ``time`` is the mean solve wall time over ``repeats`` runs; ``gap`` is only
    filled for converged runs. ``error`` holds the failure message of a run
    that raised instead of producing a report.
    """

    case: str
    areas: int
    algorithm: str
    formulation: str
    hyperparameter: float
    iterations: int | None
    time: float | None
    converged: bool
    gap: float | None
    final_l2: float | None
    workers: int
    repeats: int
    error: str | None = None

    @property
    def accepted(self) -> bool:
        return self.converged and self.gap is not None and abs(self.gap) <= GAP_LIMIT


ROW_FIELDS = tuple(f.name for f in fields(BenchmarkRow))
SERIES_FIELDS = ("case", "areas", "algorithm", "formulation", "hyperparameter", "workers", "time")


def tune_schedule(algorithm, start: float | None = None, steps: int | None = None) -> list[float]:
    """Descending candidate values: penalties divided by 10, ATC growth factor minus 0.05 while above 1."""
    alg = Algorithm(algorithm) if not isinstance(algorithm, Algorithm) else algorithm
    start = SWEEP_START[alg] if start is None else float(start)
    out = []
    if alg == Algorithm.ATC:
        if start <= 1:
            raise ValueError(f"ATC sweep must start above 1, got {start}")
        i = 0
        while True:
            # rounding keeps 1.2 - 3*0.05 at 1.05 rather than 1.0499999
            v = round(start - i * ALPHA_STEP, 10)
            if v <= 1 or (steps is not None and i >= steps):
                break
            out.append(v)
            i += 1
        return out
    if start <= 0:
        raise ValueError(f"penalty sweep must start above 0, got {start}")
    n = DEFAULT_PENALTY_STEPS if steps is None else steps
    return [float(f"{start / PENALTY_DIVISOR ** i:.12g}") for i in range(n)]


def with_hyperparameter(config: AdaConfig, value: float) -> AdaConfig:
    key = "alpha" if config.algorithm == Algorithm.ATC else "penalty"
    return AdaConfig(**{**config.__dict__, key: value})


def hyperparameter_of(config: AdaConfig) -> float:
    return float(config.alpha if config.algorithm == Algorithm.ATC else config.penalty)


def run_row(case: NetworkCase, config: AdaConfig, areas: dict[int, int] | None = None,
            repeats: int = 1, oracle: bool = True) -> tuple[BenchmarkRow, SolveReport | None]:
    """Run ``repeats`` solves and average wall time; errors are captured in the row."""
    if repeats < 1:
        raise ValueError(f"repeats must be >= 1, got {repeats}")
    base = dict(case=case.name, algorithm=config.algorithm.value, formulation=config.formulation.value,
                hyperparameter=hyperparameter_of(config), workers=config.workers, repeats=repeats)
    times, report = [], None
    try:
        for r in range(repeats):
            # the oracle is untimed but only needed once
            rep = solve_dopf(case, config, areas=areas, oracle=oracle and r == 0)
            times.append(rep.wall_time)
            report = report or rep
    except Exception as exc:  # noqa: BLE001 - recorded in-row by contract
        log.warning("run failed: %s", exc)
        n_areas = len(set(areas.values())) if areas else len(case.areas)
        return BenchmarkRow(areas=n_areas, iterations=None,
                            time=None, converged=False, gap=None, final_l2=None,
                            error=f"{type(exc).__name__}: {exc}", **base), None
    row = BenchmarkRow(areas=report.areas, iterations=report.iterations, time=sum(times) / len(times),
                       converged=report.converged, gap=report.gap if report.converged else None,
                       final_l2=report.final_l2, **{**base, "workers": report.workers})
    return row, report


def tune(case: NetworkCase, config: AdaConfig, areas: dict[int, int] | None = None,
         values: Sequence[float] | None = None, progress: Callable[[BenchmarkRow], None] | None = None
         ) -> tuple[float | None, list[BenchmarkRow]]:
    """Walk the schedule until a value converges with |gap| <= 1%; returns (best or None, sweep rows)."""
    if values is None:
        values = tune_schedule(config.algorithm)
    rows = []
    for v in values:
        row, _ = run_row(case, with_hyperparameter(config, v), areas)
        rows.append(row)
        if progress:
            progress(row)
        if row.accepted:
            return v, rows
    return None, rows


def compare(cases: Iterable[tuple[str, str | None]], algorithms: Iterable, formulations: Iterable,
            workers: Iterable[int], repeats: int = 5, base: dict | None = None,
            hyperparameters: dict | None = None, loader: Callable[[str], NetworkCase] = load_case,
            progress: Callable[[BenchmarkRow], None] | None = None) -> list[BenchmarkRow]:
    """Cartesian product of cases x algorithms x formulations x worker counts.

    ``cases`` holds (case path or bundled name, partition file or None).
    ``hyperparameters`` maps algorithm name to its penalty (or growth factor
    for ATC); unspecified ones use the defaults. The central oracle runs once
    per (case, algorithm, formulation) and its gap is reused across worker counts.
    """
    algorithms, formulations, workers = list(algorithms), list(formulations), list(workers)
    base = dict(base or {})
    hyper = {Algorithm(k).value: v for k, v in (hyperparameters or {}).items()}
    rows = []
    for case_ref, part_ref in cases:
        try:
            case = loader(case_ref)
            areas = read_partition(part_ref) if part_ref else None
        except Exception as exc:  # noqa: BLE001
            for alg, form, w in itertools.product(algorithms, formulations, workers):
                rows.append(BenchmarkRow(case=str(case_ref), areas=0, algorithm=Algorithm(alg).value,
                                         formulation=str(form), hyperparameter=float("nan"), iterations=None,
                                         time=None, converged=False, gap=None, final_l2=None, workers=w,
                                         repeats=repeats, error=f"{type(exc).__name__}: {exc}"))
            continue
        for alg, form in itertools.product(algorithms, formulations):
            gap = None
            for w in workers:
                cfg = AdaConfig(**{**base, "algorithm": alg, "formulation": form, "workers": w})
                if cfg.algorithm.value in hyper:
                    cfg = with_hyperparameter(cfg, hyper[cfg.algorithm.value])
                row, report = run_row(case, cfg, areas, repeats, oracle=gap is None)
                if report is not None and report.central_objective is not None:
                    gap = report.gap
                if row.converged and row.gap is None and gap is not None:
                    row.gap = gap
                row.workers = w
                rows.append(row)
                if progress:
                    progress(row)
    return rows


def timing_series(rows: Iterable[BenchmarkRow]) -> list[dict]:
    """Per-worker-count mean times, sorted for plotting time against workers."""
    out = [{k: getattr(r, k) for k in SERIES_FIELDS} for r in rows if r.error is None]
    return sorted(out, key=lambda d: (d["case"], d["algorithm"], d["formulation"], d["workers"]))


def write_rows(rows: Iterable[BenchmarkRow], path: str | Path):
    write_csv([asdict(r) for r in rows], ROW_FIELDS, path)


def write_csv(records: Iterable[dict], columns: Sequence[str], path: str | Path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
        w.writeheader()
        for rec in records:
            w.writerow({k: "" if rec.get(k) is None else rec.get(k) for k in columns})
