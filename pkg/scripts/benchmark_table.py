"""Tune every algorithm on the bundled DC/SOC benchmark cases and write one table.

Each (case, algorithm, formulation) is swept along the descending schedule and
the first accepted value is kept; its row goes into the output CSV.

    python3 scripts/benchmark_table.py --out results/benchmark.csv
"""
import argparse
import logging
from pathlib import Path

from dopf import bench
from dopf.kernels import AdaConfig
from dopf.network import load_case
from dopf.partition import read_partition

DATA = Path(bench.__file__).parent / "data"

CASES = [
    ("case14", DATA / "case14_2areas.txt"),
    ("case30", None),
    ("case118", DATA / "case118_8areas.txt"),
]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="benchmark.csv")
    ap.add_argument("--sweep", default=None, help="also write every sweep row to this CSV")
    ap.add_argument("--alg", default="admm,app,atc")
    ap.add_argument("--form", default="dc,soc")
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    best_rows, sweep_rows = [], []
    for name, part in CASES:
        case = load_case(name)
        areas = read_partition(part) if part else None
        for form in args.form.split(","):
            for alg in args.alg.split(","):
                cfg = AdaConfig(algorithm=alg, formulation=form, workers=args.workers,
                                max_iter=3000 if form == "soc" else 2000)
                best, rows = bench.tune(case, cfg, areas)
                sweep_rows += rows
                chosen = next((r for r in rows if r.accepted), rows[-1])
                best_rows.append(chosen)
                logging.info("%s %s/%s: %s after %d iterations, gap %s", name, alg, form,
                             "accepted" if best is not None else "no value accepted",
                             chosen.iterations, "n/a" if chosen.gap is None else f"{chosen.gap:+.2e}")
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    bench.write_rows(best_rows, args.out)
    if args.sweep:
        bench.write_rows(sweep_rows, args.sweep)


if __name__ == "__main__":
    main()
