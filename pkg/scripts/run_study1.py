"""Monte Carlo study 1: classification accuracy over the full design grid.

Writes one CSV row per (condition, replication) plus a JSON summary with the
mean and sd of SE, SP, BACC and MCC per condition.

    python3 scripts/run_study1.py --reps 50 --out results/study1
"""

import argparse
import itertools
import json
import time
from dataclasses import asdict
from pathlib import Path

from aberrant_mix.em import EmOptions
from aberrant_mix.simulation import Study1Config, run_study, summarize, write_rows_csv

PI = (0.05, 0.40, 0.60, 0.80, 0.90)
Q = (1, 3)
K = (2, 4)
C = (1, 2)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--reps", type=int, default=50)
    ap.add_argument("--starts", type=int, default=10)
    ap.add_argument("--max-iter", type=int, default=500)
    ap.add_argument("--seed", type=int, default=2024)
    ap.add_argument("--n", type=int, default=1000)
    ap.add_argument("--p", type=int, default=30)
    ap.add_argument("--pi", type=float, nargs="*", default=PI)
    ap.add_argument("--q", type=int, nargs="*", default=Q)
    ap.add_argument("--k", type=int, nargs="*", default=K)
    ap.add_argument("--c", type=int, nargs="*", default=C)
    ap.add_argument("--out", type=Path, default=Path("results/study1"))
    args = ap.parse_args()

    args.out.mkdir(parents=True, exist_ok=True)
    opts = EmOptions(n_starts=args.starts, max_iter=args.max_iter)
    csv_path = args.out / "replications.csv"
    summary = []
    first = True
    for pi, q, k, c in itertools.product(args.pi, args.q, args.k, args.c):
        cfg = Study1Config(n=args.n, p=args.p, pi=pi, q=q, K=k, C=c, seed=args.seed)
        t0 = time.perf_counter()
        rows = run_study(cfg, args.reps, opts)
        write_rows_csv(rows, csv_path, append=not first)
        first = False
        stats = summarize(rows, ["SE", "SP", "BACC", "MCC"])
        summary.append({"config": asdict(cfg), "metrics": stats})
        line = "  ".join(f"{m}={v['mean']:.3f}({v['sd']:.3f})" for m, v in stats.items())
        print(f"pi={pi:.2f} q={q} K={k} C={c}  {line}  [{time.perf_counter() - t0:.0f}s]", flush=True)
    (args.out / "summary.json").write_text(json.dumps(summary, indent=1) + "\n")


if __name__ == "__main__":
    main()
