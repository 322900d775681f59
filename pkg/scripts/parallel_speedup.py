"""Mean wall time against worker count on an area-decomposed case.

    python3 scripts/parallel_speedup.py --workers 1,2,4,8,12,16 --out speedup.csv
"""
import argparse
import os
import statistics
from pathlib import Path

from dopf import bench
from dopf.kernels import AdaConfig
from dopf.network import load_case
from dopf.partition import read_partition
from dopf.runtime import solve_dopf

DATA = Path(bench.__file__).parent / "data"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--case", default="case118")
    ap.add_argument("--areas", default=str(DATA / "case118_8areas.txt"))
    ap.add_argument("--alg", default="admm")
    ap.add_argument("--form", default="dc")
    ap.add_argument("--workers", default="1,2,4,8,12,16")
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--out", default="speedup.csv")
    args = ap.parse_args()

    case = load_case(args.case)
    areas = read_partition(args.areas) if args.areas else None
    records = []
    print(f"{os.cpu_count()} CPUs visible")
    for w in (int(x) for x in args.workers.split(",")):
        times = []
        for _ in range(args.repeats):
            rep = solve_dopf(case, AdaConfig(algorithm=args.alg, formulation=args.form, workers=w),
                             areas=areas, oracle=False)
            times.append(rep.wall_time)
        mean = statistics.mean(times)
        sd = statistics.stdev(times) if len(times) > 1 else 0.0
        base = records[0]["mean_time"] if records else mean
        records.append({"workers": w, "effective_workers": rep.workers, "iterations": rep.iterations,
                        "mean_time": mean, "stdev_time": sd, "speedup": base / mean})
        print(f"workers {w:>3} (effective {rep.workers}): {mean:.3f} s +/- {sd:.3f}, speedup {base / mean:.2f}x")
    bench.write_csv(records, list(records[0]), args.out)


if __name__ == "__main__":
    main()
