"""Load optimizer with the noiseless simulator as model, against exhaustive search.

Enumerates every split of a small batch over the devices of random
three-machine clusters and reports the optimizer's ratio to the optimum.

    python scripts/load_split_oracle.py --trials 60
"""

import argparse
import itertools

import numpy as np

from sgdtune.domain import ClusterSpec, Configuration, Machine, WorkloadSpec
from sgdtune.fixtures import load_workloads, make_cluster
from sgdtune.optimizer import optimize_loads
from sgdtune.simulator import TruthModel, noiseless_objective


def brute_force(cluster, wl, ps_mask):
    nd, batch = len(cluster.devices), wl.batch_size
    best = np.inf
    for cut in itertools.combinations(range(batch + nd - 1), nd - 1):
        loads = np.diff([-1, *cut, batch + nd - 1]) - 1
        best = min(best, noiseless_objective(Configuration.from_arrays(cluster, loads, ps_mask),
                                             cluster, wl))
    return best


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--trials", type=int, default=60)
    p.add_argument("--batch", type=int, default=24)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    base = make_cluster("C")
    types = sorted(base.machine_types)
    rows = load_workloads()
    rng = np.random.default_rng(args.seed)
    ratios = []
    for trial in range(args.trials):
        ts = [str(t) for t in rng.choice(types, 3)]
        cluster = ClusterSpec(tuple(Machine(f"m{i}", t) for i, t in enumerate(ts)),
                              {t: base.machine_types[t] for t in set(ts)}, base.sim_params)
        name = sorted(rows)[trial % len(rows)]
        wl = WorkloadSpec(name, rows[name]["model_size_mb"], rows[name]["ops_millions"], args.batch)
        ps = rng.random(3) < 0.5
        if not ps.any():
            ps[rng.integers(3)] = True
        got = optimize_loads(TruthModel(cluster, wl), [0, 1, 2], np.flatnonzero(ps), cluster, wl)
        ratios.append(noiseless_objective(got, cluster, wl) / brute_force(cluster, wl, ps))
        print(f"{trial:3} {','.join(ts):38} {name:9} ps={ps.astype(int)} ratio {ratios[-1]:.4f}")
    ratios = np.array(ratios)
    print(f"worst {ratios.max():.4f}, exact in {np.mean(ratios < 1 + 1e-9):.0%} of trials")


if __name__ == "__main__":
    main()
