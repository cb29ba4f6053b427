"""Bayesian optimization of SGD schedules, plus the baselines it is compared to.

The bespoke optimizer refits the structured performance model after every
evaluation, then proposes the candidate with the largest Monte Carlo
expected improvement. Candidates come from enumerating worker/PS flag
patterns and optimizing the per-machine loads of each pattern against the
model's predicted mean.
"""

from __future__ import annotations

import itertools
import logging
import math
import time
from concurrent.futures import Executor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.stats import norm

from . import gp, perf_model
from .domain import (ClusterSpec, Configuration, DomainError, WorkloadSpec, chunk_size,
                     decode, encode, encoding_dim, largest_remainder, random_configuration,
                     uniform_devices, uniform_gpus, validate)
from .simulator import Measurement, run_experiment

log = logging.getLogger(__name__)

METHODS = ("bespoke", "generic_gp", "random", "uniform_devices", "uniform_gpus")
GENERIC_CANDIDATES = 4096
LINE_SEARCH = np.geomspace(0.5, 2.0, 11)
WATER_FILL_CHUNKS = 64


@dataclass(frozen=True)
class AcquisitionParams:
    ei_samples: int = 128
    candidate_subsets: int = 64
    coordinate_passes: int = 3

    def __post_init__(self):
        if min(self.ei_samples, self.candidate_subsets, self.coordinate_passes) < 1:
            raise ValueError("acquisition budgets must be >= 1")


@dataclass
class TrajectoryEntry:
    iteration: int
    config: Configuration
    measurement: Measurement
    best_so_far: float
    wall_time: float
    model_digest: dict | None = None


@dataclass
class OptRun:
    method: str
    seed: int
    trajectory: list[TrajectoryEntry] = field(default_factory=list)

    @property
    def best(self) -> float:
        return self.trajectory[-1].best_so_far

    def best_at(self, n: int) -> float:
        return self.trajectory[min(n, len(self.trajectory)) - 1].best_so_far

    @property
    def best_config(self) -> Configuration:
        return min(self.trajectory, key=lambda e: e.measurement.objective).config

    def history(self) -> list[tuple[Configuration, Measurement]]:
        return [(e.config, e.measurement) for e in self.trajectory]

    def record(self, config: Configuration, measurement: Measurement, started: float,
               model_digest: dict | None = None) -> None:
        prev = self.trajectory[-1].best_so_far if self.trajectory else math.inf
        self.trajectory.append(TrajectoryEntry(
            len(self.trajectory), config, measurement, min(prev, measurement.objective),
            time.perf_counter() - started, model_digest))


# -- acquisition ---------------------------------------------------------------

def mc_expected_improvement(samples: np.ndarray, best: float) -> float:
    return float(np.mean(np.maximum(best - np.asarray(samples), 0.0)))


def normal_expected_improvement(mean, sd, best):
    """Closed-form EI for minimization under a normal predictive distribution."""
    mean = np.asarray(mean, dtype=float)
    sd = np.asarray(sd, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = (best - mean) / sd
        ei = (best - mean) * norm.cdf(z) + sd * norm.pdf(z)
    return np.where(sd > 0, ei, np.maximum(best - mean, 0.0))


def expected_improvement(model, config: Configuration, best: float, params: AcquisitionParams,
                         rng: np.random.Generator) -> float:
    """Expected improvement over ``best`` estimated from forward samples."""
    return mc_expected_improvement(model.sample_iteration_times(config, params.ei_samples, rng),
                                   best)


# -- load optimization ---------------------------------------------------------

class _Scorer:
    """Predicted-mean objective of load vectors under a fixed PS set."""

    def __init__(self, model, cluster: ClusterSpec, ps_mask: np.ndarray):
        self.model = model
        self.cluster = cluster
        self.ps_mask = ps_mask

    def machine_time(self, m: int, loads: np.ndarray) -> float:
        idx = self.cluster.machine_devices[m]
        return self.model.mean_machine_time(m, tuple(int(loads[i]) for i in idx))

    def __call__(self, loads: np.ndarray) -> float:
        per_machine = np.zeros(len(self.cluster.machines), dtype=np.int64)
        np.add.at(per_machine, self.cluster.device_machine, loads)
        workers = per_machine > 0
        compute = max(self.machine_time(m, loads) for m in np.flatnonzero(workers))
        return compute + self.model.mean_comm_time(workers, self.ps_mask)


def _water_fill(scorer: _Scorer, devices: Sequence[int], batch: int,
                with_comm: bool) -> np.ndarray:
    """Hand out the batch chunk by chunk to the device that raises the prediction least.

    With ``with_comm`` the prediction includes the communication cost of
    turning an idle machine into a worker, so slow-link machines may stay idle.
    Ties go to the lowest resulting machine time, then the lowest device index.
    """
    cluster = scorer.cluster
    owner = cluster.device_machine
    loads = np.zeros(len(cluster.devices), dtype=np.int64)
    mtimes = np.zeros(len(cluster.machines))
    workers = np.zeros(len(cluster.machines), dtype=bool)
    chunk = chunk_size(batch, WATER_FILL_CHUNKS)
    remaining = batch
    comm = 0.0
    while remaining > 0:
        c = min(chunk, remaining)
        top = np.sort(mtimes)[::-1]
        best = None
        for d in devices:
            m = owner[d]
            loads[d] += c
            t = scorer.machine_time(m, loads)
            loads[d] -= c
            others = top[1] if mtimes[m] == top[0] and len(top) > 1 else top[0]
            total = max(t, others)
            if with_comm:
                if workers[m]:
                    total += comm
                else:
                    workers[m] = True
                    total += scorer.model.mean_comm_time(workers, scorer.ps_mask)
                    workers[m] = False
            key = (total, t, d)
            if best is None or key < best:
                best = key
        d = best[2]
        m = owner[d]
        loads[d] += c
        mtimes[m] = best[1]
        if not workers[m]:
            workers[m] = True
            comm = scorer.model.mean_comm_time(workers, scorer.ps_mask)
        remaining -= c
    return loads


def _line_search(scorer: _Scorer, workers: Sequence[int], loads: np.ndarray, batch: int,
                 passes: int) -> tuple[float, np.ndarray]:
    """Coordinate passes scaling one machine's share at a time, greedy acceptance."""
    best = scorer(loads)
    for _ in range(passes):
        improved = False
        for m in workers:
            idx = list(scorer.cluster.machine_devices[m])
            if loads[idx].sum() == 0:
                continue
            # factor 0 lets a machine drop out of the worker set entirely
            for f in (0.0, *LINE_SEARCH):
                if f == 1.0:
                    continue
                w = loads.astype(float)
                w[idx] *= f
                if w.sum() == 0:
                    continue
                cand = largest_remainder(w, batch)
                if np.array_equal(cand, loads):
                    continue
                score = scorer(cand)
                if score < best:
                    best, loads, improved = score, cand, True
        if not improved:
            break
    return best, loads


def optimize_loads(model, worker_set: Iterable[int], ps_set: Iterable[int], cluster: ClusterSpec,
                   workload: WorkloadSpec, params: AcquisitionParams = AcquisitionParams()
                   ) -> Configuration:
    """Balance the batch across the devices of ``worker_set`` (machine indices).

    Two greedy water-fills (compute only, and one that also charges
    communication for every new worker) are each refined by coordinate
    passes that line-search one machine's share at a time. The result is the
    best of those two and every single-device assignment. Machines left with
    no load drop out of the worker set.
    """
    workers = sorted(set(worker_set))
    if not workers:
        raise DomainError("empty worker set")
    ps_mask = np.zeros(len(cluster.machines), dtype=bool)
    ps_mask[list(ps_set)] = True
    if not ps_mask.any():
        raise DomainError("empty parameter-server set")
    batch = workload.batch_size
    devices = [d for m in workers for d in cluster.machine_devices[m]]
    scorer = _Scorer(model, cluster, ps_mask)

    results = [_line_search(scorer, workers, _water_fill(scorer, devices, batch, with_comm),
                            batch, params.coordinate_passes)
               for with_comm in (False, True)]
    for d in devices:
        # greedy fills can get stuck on the device that is cheapest for small loads
        single = np.zeros(len(cluster.devices), dtype=np.int64)
        single[d] = batch
        results.append((scorer(single), single))
    loads = min(results, key=lambda r: r[0])[1]
    return Configuration.from_arrays(cluster, loads, ps_mask)


# -- proposal ------------------------------------------------------------------

def _flag_patterns(incumbent: Configuration, cluster: ClusterSpec, n: int,
                   rng: np.random.Generator) -> list[tuple[tuple[bool, ...], tuple[bool, ...]]]:
    """Worker/PS flag patterns to optimize loads for.

    The incumbent's pattern comes first, then its single-flag mutations,
    then one co-located pattern (PS set = worker set) per subset of machine
    types, then the co-located variant of every pattern so far, and finally
    uniformly random patterns until ``n`` are collected.
    """
    n_m = len(cluster.machines)
    base_w = tuple(bool(v) for v in incumbent.worker_mask(cluster))
    base_p = tuple(bool(v) for v in incumbent.ps_mask(cluster))
    out = []
    seen = set()

    def add(w, p):
        if any(w) and any(p) and (w, p) not in seen and len(out) < n:
            seen.add((w, p))
            out.append((w, p))

    add(base_w, base_p)
    for i in range(n_m):
        w = list(base_w)
        w[i] = not w[i]
        add(tuple(w), base_p)
    for i in range(n_m):
        p = list(base_p)
        p[i] = not p[i]
        add(base_w, tuple(p))
    types = sorted(set(cluster.machine_type_names))
    for r in range(1, len(types) + 1):
        for subset in itertools.combinations(types, r):
            w = tuple(t in subset for t in cluster.machine_type_names)
            add(w, w)
    for w, _ in list(out):
        add(w, w)
    attempts = 0
    while len(out) < n and attempts < 100 * n:
        attempts += 1
        add(tuple(bool(v) for v in rng.random(n_m) < 0.5),
            tuple(bool(v) for v in rng.random(n_m) < 0.5))
    return out


def candidate_rng(seed: int, iteration: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, iteration, index])


def _tie_key(config: Configuration, cluster: ClusterSpec):
    return (len(config.workers), tuple(sorted(config.workers, key=cluster.machine_index.get)))


def propose(model, incumbent: Configuration, best: float, cluster: ClusterSpec,
            workload: WorkloadSpec, params: AcquisitionParams = AcquisitionParams(), *,
            seed: int = 0, iteration: int = 0, evaluated: Iterable[Configuration] = (),
            executor: Executor | None = None) -> Configuration:
    """Next configuration to evaluate: the candidate with the largest expected improvement.

    Per-candidate random streams are derived from (seed, iteration, index),
    so scoring through ``executor`` gives the same answer as serial scoring.
    """
    seen = set(evaluated)
    patterns = _flag_patterns(incumbent, cluster, params.candidate_subsets,
                              candidate_rng(seed, iteration, -1 % 2**32))
    candidates: list[Configuration] = []
    for w, p in patterns:
        cfg = optimize_loads(model, np.flatnonzero(w), np.flatnonzero(p), cluster, workload, params)
        if cfg not in seen and cfg not in candidates:
            candidates.append(cfg)
    if not candidates:
        log.info("candidate space exhausted; re-proposing incumbent pattern")
        candidates = [optimize_loads(model, np.flatnonzero(patterns[0][0]),
                                     np.flatnonzero(patterns[0][1]), cluster, workload, params)]

    def score(item):
        i, cfg = item
        return expected_improvement(model, cfg, best, params, candidate_rng(seed, iteration, i))

    mapper: Callable = executor.map if executor is not None else map
    eis = list(mapper(score, enumerate(candidates)))
    if max(eis) > 0:
        order = sorted(range(len(candidates)),
                       key=lambda i: (-eis[i], _tie_key(candidates[i], cluster)))
        return candidates[order[0]]
    log.info("all candidates have zero expected improvement; using best predicted mean")
    means = [float(model.sample_iteration_times(c, params.ei_samples,
                                                candidate_rng(seed, iteration, i)).mean())
             for i, c in enumerate(candidates)]
    order = sorted(range(len(candidates)), key=lambda i: (means[i], _tie_key(candidates[i], cluster)))
    return candidates[order[0]]


# -- optimization loops ----------------------------------------------------------

def initial_configurations(cluster: ClusterSpec, workload: WorkloadSpec,
                           rng: np.random.Generator) -> list[Configuration]:
    """Uniform-devices, then uniform-GPUs (or a random configuration without GPUs)."""
    out = []
    try:
        out.append(uniform_devices(cluster, workload))
    except DomainError:
        out.append(random_configuration(cluster, workload, rng))
    try:
        cfg = uniform_gpus(cluster, workload)
    except DomainError:
        cfg = random_configuration(cluster, workload, rng)
    while cfg in out:
        cfg = random_configuration(cluster, workload, rng)
    out.append(cfg)
    return out


def _evaluate(run: OptRun, config: Configuration, cluster: ClusterSpec,
              workload: WorkloadSpec, started: float, digest: dict | None = None) -> None:
    check = validate(config, cluster, workload)
    assert check.ok, check.violations
    meas = run_experiment(config, cluster, workload, seed=run.seed * 1_000_003 + len(run.trajectory))
    run.record(config, meas, started, digest)


def run_bespoke(cluster: ClusterSpec, workload: WorkloadSpec, budget: int = 10, seed: int = 0,
                params: AcquisitionParams = AcquisitionParams(),
                n_particles: int = perf_model.N_PARTICLES,
                executor: Executor | None = None) -> OptRun:
    """Bayesian optimization with the structured performance model."""
    if budget < 3:
        raise ValueError("budget must be >= 3")
    run = OptRun("bespoke", seed)
    rng = np.random.default_rng([seed, 1])
    for cfg in initial_configurations(cluster, workload, rng):
        _evaluate(run, cfg, cluster, workload, time.perf_counter())
    while len(run.trajectory) < budget:
        started = time.perf_counter()
        model = perf_model.fit(run.history(), cluster, workload, n_particles, seed)
        cfg = propose(model, run.best_config, run.best, cluster, workload, params, seed=seed,
                      iteration=len(run.trajectory), evaluated=[e.config for e in run.trajectory],
                      executor=executor)
        _evaluate(run, cfg, cluster, workload, started, model.digest())
    return run


def run_generic(cluster: ClusterSpec, workload: WorkloadSpec, budget: int = 30,
                seed: int = 0) -> OptRun:
    """Flat-GP Bayesian optimization over the encoded configuration vector."""
    if budget < 3:
        raise ValueError("budget must be >= 3")
    run = OptRun("generic_gp", seed)
    rng = np.random.default_rng([seed, 1])
    for cfg in initial_configurations(cluster, workload, rng):
        _evaluate(run, cfg, cluster, workload, time.perf_counter())
    dim = encoding_dim(cluster)
    while len(run.trajectory) < budget:
        started = time.perf_counter()
        xs = np.array([encode(e.config, cluster, workload) for e in run.trajectory])
        ys = np.array([e.measurement.objective for e in run.trajectory])
        post = gp.fit(xs, ys)
        seen = {e.config for e in run.trajectory}
        cands = []
        for v in rng.random((GENERIC_CANDIDATES, dim)):
            cfg = decode(v, cluster, workload)
            if cfg not in seen:
                cands.append(cfg)
        enc = np.array([encode(c, cluster, workload) for c in cands])
        mean, var = gp.predict(post, enc)
        ei = normal_expected_improvement(mean, np.sqrt(var), run.best)
        _evaluate(run, cands[int(np.argmax(ei))], cluster, workload, started)
    return run


def run_baseline(method: str, cluster: ClusterSpec, workload: WorkloadSpec, seed: int = 0,
                 budget: int = 1) -> OptRun:
    """Uniform-devices, uniform-GPUs, or ``budget`` uniformly random configurations."""
    run = OptRun(method, seed)
    started = time.perf_counter()
    if method == "uniform_devices":
        _evaluate(run, uniform_devices(cluster, workload), cluster, workload, started)
    elif method == "uniform_gpus":
        _evaluate(run, uniform_gpus(cluster, workload), cluster, workload, started)
    elif method == "random":
        rng = np.random.default_rng([seed, 2])
        for _ in range(budget):
            _evaluate(run, random_configuration(cluster, workload, rng), cluster, workload,
                      time.perf_counter())
    else:
        raise ValueError(f"unknown baseline {method!r}")
    return run


def run_method(method: str, cluster: ClusterSpec, workload: WorkloadSpec, budget: int,
               seed: int, params: AcquisitionParams = AcquisitionParams()) -> OptRun:
    if method == "bespoke":
        return run_bespoke(cluster, workload, budget, seed, params)
    if method == "generic_gp":
        return run_generic(cluster, workload, budget, seed)
    return run_baseline(method, cluster, workload, seed, budget)
