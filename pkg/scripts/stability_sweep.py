"""Bespoke optimizer (10 evaluations) against long random search on all 36 cells.

Writes one CSV row per (setting, workload, batch) cell with both bests and
their ratio, then prints how many cells are within the tolerance.

    python scripts/stability_sweep.py --out results/stability.csv
"""

import argparse
import csv
import time
from pathlib import Path

from sgdtune.fixtures import make_setting, settings, workload_batches
from sgdtune.optimizer import run_baseline, run_bespoke

WORKLOADS = ("googlenet", "alexnet", "speechnet")


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--random-budget", type=int, default=2000)
    p.add_argument("--tolerance", type=float, default=1.25)
    p.add_argument("--out", default="results/stability.csv")
    args = p.parse_args()

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    rows = []
    for s in settings():
        for w in WORKLOADS:
            for b in workload_batches(w):
                cluster, wl = make_setting(s, w, b)
                t0 = time.perf_counter()
                bespoke = run_bespoke(cluster, wl, 10, seed=args.seed).best
                t1 = time.perf_counter()
                random = run_baseline("random", cluster, wl, args.seed, args.random_budget).best
                rows.append({"setting": s, "workload": w, "batch": b,
                             "bespoke_best_s": bespoke, "random_best_s": random,
                             "ratio": bespoke / random, "bespoke_wall_s": t1 - t0})
                print(f"{s} {w:9} {b:6} bespoke {bespoke:7.3f} random {random:7.3f} "
                      f"ratio {bespoke / random:.3f}", flush=True)
    with open(out, "w", newline="") as fh:
        wr = csv.DictWriter(fh, list(rows[0]))
        wr.writeheader()
        wr.writerows(rows)
    ok = sum(r["ratio"] <= args.tolerance for r in rows)
    print(f"{ok}/{len(rows)} cells within {args.tolerance}x of random search -> {out}")


if __name__ == "__main__":
    main()
