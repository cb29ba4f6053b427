"""Best-so-far curves of bespoke, generic flat-GP and baselines on one instance.

Defaults reproduce the headline comparison: Setting C, SpeechNet, batch
65536, three seeds, bespoke for 10 evaluations and the flat GP for 30.

    python scripts/convergence.py --out results/convergence.csv
"""

import argparse
import csv
import statistics
from pathlib import Path

from sgdtune.fixtures import make_setting
from sgdtune.optimizer import run_baseline, run_bespoke, run_generic


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--setting", default="C")
    p.add_argument("--workload", default="speechnet")
    p.add_argument("--batch", type=int, default=65536)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--bespoke-budget", type=int, default=10)
    p.add_argument("--generic-budget", type=int, default=30)
    p.add_argument("--out", default="results/convergence.csv")
    args = p.parse_args()

    cluster, wl = make_setting(args.setting, args.workload, args.batch)
    rows, finals = [], {"bespoke": [], "generic_gp": []}
    for seed in args.seeds:
        for method, run in (("bespoke", run_bespoke(cluster, wl, args.bespoke_budget, seed)),
                            ("generic_gp", run_generic(cluster, wl, args.generic_budget, seed))):
            finals[method].append(run.best)
            for e in run.trajectory:
                rows.append({"method": method, "seed": seed, "iteration": e.iteration,
                             "objective_s": e.measurement.objective,
                             "best_so_far_s": e.best_so_far})
    refs = {}
    for method in ("uniform_devices", "uniform_gpus"):
        try:
            refs[method] = run_baseline(method, cluster, wl).best
        except ValueError:
            continue

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        wr = csv.DictWriter(fh, ["method", "seed", "iteration", "objective_s", "best_so_far_s"])
        wr.writeheader()
        wr.writerows(rows)
    for method, vals in finals.items():
        print(f"{method:16} median best {statistics.median(vals):.4f} s  ({', '.join(f'{v:.3f}' for v in vals)})")
    for method, v in refs.items():
        print(f"{method:16} {v:.4f} s")
    print(f"curves -> {out}")


if __name__ == "__main__":
    main()
