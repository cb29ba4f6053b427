"""Structured performance model of one distributed SGD iteration.

Iteration time = max over worker machines of (slowest device + aggregation)
plus communication time. Device times come from per-device-type GPs over
processing rate, aggregation overhead from per-machine-type GPs over the
device load vector, and communication from a particle-based parametric
model corrected by a residual GP.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import gp, inference
from .domain import CPU, ClusterSpec, Configuration, WorkloadSpec
from .simulator import Measurement

RATE_FLOOR = 1e-6
GPU_PRIOR_FACTOR = 8.0
DEFAULT_PRIOR_RATE = 1.0
AGG_PRIOR_SD = 0.1
N_PARTICLES = 1000
PREDICT_SEED = 20170


@dataclass(eq=False)
class PerfModel:
    cluster: ClusterSpec
    workload: WorkloadSpec
    device_rate_gps: dict[str, gp.GpPosterior]
    agg_gps: dict[str, gp.GpPosterior]
    comm_particles: inference.ParticleSet
    comm_residual_gp: gp.GpPosterior | None
    observation_count: int
    _machine_cache: dict = field(default_factory=dict, repr=False)
    _comm_cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._type_idx = self.comm_particles.type_index(self.cluster.machine_type_names)

    # -- plug-in means used by the load optimizer ---------------------------

    def mean_device_time(self, device_type: str, load: int) -> float:
        key = (device_type, load)
        hit = self._machine_cache.get(key)
        if hit is None:
            rate = gp.predict(self.device_rate_gps[device_type], float(load))[0]
            hit = self._machine_cache[key] = load / max(rate, RATE_FLOOR)
        return hit

    def mean_machine_time(self, machine: int, loads: Sequence[int]) -> float:
        """Predicted compute time of one machine given its device loads (cpu first)."""
        loads = tuple(int(n) for n in loads)
        mtype = self.cluster.machine_type_names[machine]
        key = (mtype, loads)
        hit = self._machine_cache.get(key)
        if hit is not None:
            return hit
        idx = self.cluster.machine_devices[machine]
        times = [self.mean_device_time(self.cluster.device_types[i], n)
                 for i, n in zip(idx, loads) if n > 0]
        value = max(times, default=0.0)
        if len(times) > 1:
            agg = gp.predict(self.agg_gps[mtype], inference.agg_input(loads[0], loads[1:]))[0]
            value += max(agg, 0.0)
        self._machine_cache[key] = value
        return value

    def mean_comm_time(self, worker_mask, ps_mask) -> float:
        key = (tuple(bool(w) for w in worker_mask), tuple(bool(p) for p in ps_mask))
        hit = self._comm_cache.get(key)
        if hit is None:
            t, feats = inference.comm_summary(self.cluster, np.array(key[0]), np.array(key[1]),
                                              self.workload)
            hit = self._comm_cache[key] = inference.mean_comm(
                self.comm_particles, self.comm_residual_gp, t, self._type_idx, feats)
        return hit

    # -- forward sampling ---------------------------------------------------

    def sample_iteration_times(self, config: Configuration, k: int,
                               rng: np.random.Generator) -> np.ndarray:
        """``k`` joint forward samples of the iteration time of ``config``."""
        cluster = self.cluster
        loads = config.load_vector(cluster)
        active = np.flatnonzero(loads)
        dev_times = np.empty((k, len(active)))
        types = [cluster.device_types[i] for i in active]
        for t in sorted(set(types)):
            cols = [j for j, tt in enumerate(types) if tt == t]
            n = loads[active[cols]].astype(float)
            rates = gp.sample_joint(self.device_rate_gps[t], n, rng, size=k)
            dev_times[:, cols] = n / np.maximum(rates, RATE_FLOOR)

        owner = cluster.device_machine[active]
        compute = np.zeros(k)
        for m in np.unique(owner):
            cols = owner == m
            mt = dev_times[:, cols].max(axis=1)
            if cols.sum() > 1:
                idx = cluster.machine_devices[m]
                x = inference.agg_input(loads[idx[0]], [loads[i] for i in idx[1:]])
                agg = gp.sample_joint(self.agg_gps[cluster.machine_type_names[m]], [x], rng,
                                      size=k)[:, 0]
                mt = mt + np.maximum(agg, 0.0)
            compute = np.maximum(compute, mt)

        t, feats = inference.comm_summary(cluster, config.worker_mask(cluster),
                                          config.ps_mask(cluster), self.workload)
        comm = inference.sample_comm(self.comm_particles, self.comm_residual_gp, t,
                                     self._type_idx, feats, k, rng)
        return np.maximum(compute + comm, 0.0)

    def digest(self) -> dict:
        return {
            "observations": self.observation_count,
            "device_points": {t: g.n for t, g in sorted(self.device_rate_gps.items())},
            "agg_points": {t: g.n for t, g in sorted(self.agg_gps.items())},
            "comm_points": 0 if self.comm_residual_gp is None else self.comm_residual_gp.n,
            **self.comm_particles.digest(),
        }


def sample_iteration_time(model: PerfModel, config: Configuration,
                          rng: np.random.Generator) -> float:
    return float(model.sample_iteration_times(config, 1, rng)[0])


def predict_mean(model: PerfModel, config: Configuration, k: int = 128) -> float:
    """Monte Carlo mean of ``k`` forward samples on a fixed rng stream."""
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = np.random.default_rng(PREDICT_SEED)
    return float(model.sample_iteration_times(config, k, rng).mean())


def _device_priors(cluster: ClusterSpec, observed: dict[str, float]) -> dict[str, float]:
    """Prior mean rate for device types without observations.

    CPUs borrow the nearest observed CPU type's rate scaled by hyperthread
    count; GPUs get a fixed multiple of the fastest observed CPU rate.
    """
    cpu_threads = {}
    gpu_types = set()
    for spec in cluster.machine_types.values():
        cpu_threads[spec.cpu_device_type] = spec.hyperthreads
        if spec.gpu_model:
            gpu_types.add(spec.gpu_model)
    seen_cpu = {t: r for t, r in observed.items() if t in cpu_threads}
    out = {}
    for t, threads in cpu_threads.items():
        if t in observed:
            continue
        if seen_cpu:
            near = min(seen_cpu, key=lambda s: (abs(cpu_threads[s] - threads), s))
            out[t] = seen_cpu[near] * threads / cpu_threads[near]
        else:
            out[t] = DEFAULT_PRIOR_RATE
    for t in gpu_types - set(observed):
        out[t] = GPU_PRIOR_FACTOR * max(seen_cpu.values(), default=DEFAULT_PRIOR_RATE)
    return out


def fit(history: Sequence[tuple[Configuration, Measurement]], cluster: ClusterSpec,
        workload: WorkloadSpec, n_particles: int = N_PARTICLES, seed: int = 0) -> PerfModel:
    """Fit every sub-model on its own slice of the evaluated history."""
    if not history:
        raise ValueError("need at least one evaluated configuration")
    obs = inference.RoutedObservations()
    for config, meas in history:
        obs.extend(inference.route(meas, config, cluster, workload))

    by_type: dict[str, list[inference.DeviceObs]] = {}
    for o in obs.device:
        by_type.setdefault(o.device_type, []).append(o)
    device_gps = {t: gp.fit([o.load for o in v], [o.rate for o in v])
                  for t, v in sorted(by_type.items())}
    observed = {t: float(np.mean([o.rate for o in v])) for t, v in by_type.items()}
    for t, rate in _device_priors(cluster, observed).items():
        device_gps[t] = gp.GpPosterior.prior(1, rate, (0.5 * rate) ** 2,
                                             length_scale=float(workload.batch_size))

    agg_by_type: dict[str, list[inference.AggObs]] = {}
    for o in obs.agg:
        agg_by_type.setdefault(o.machine_type, []).append(o)
    agg_gps = {t: gp.fit([o.loads for o in v], [o.agg_diff for o in v])
               for t, v in sorted(agg_by_type.items())}
    for name, spec in cluster.machine_types.items():
        if spec.gpu_count and name not in agg_gps:
            agg_gps[name] = gp.GpPosterior.prior(1 + spec.gpu_count, 0.0, AGG_PRIOR_SD ** 2,
                                                 length_scale=float(workload.batch_size))

    particles, residual = fit_comm(obs.comm, sorted(cluster.machine_types), n_particles, seed)
    return PerfModel(cluster, workload, device_gps, agg_gps, particles, residual, len(history))


def _residuals(ps: inference.ParticleSet, comm: Sequence[inference.CommObs]) -> np.ndarray:
    speeds = ps.speeds
    return np.array([o.comm_time - ps.weights @ inference.parametric_comm(
        speeds, o.transfers, ps.type_index(o.machine_types)) for o in comm])


def fit_comm(comm: Sequence[inference.CommObs], type_names: Sequence[str],
             n_particles: int = N_PARTICLES, seed: int = 0):
    """Alternate residual-GP refits and particle reweighting, one observation at a time.

    Before assimilating observation i, the zero-mean residual GP is refit on
    the residuals of observations 0..i-1 against the current posterior-mean
    parametric prediction.
    """
    rng = np.random.default_rng([seed, 7])
    ps = inference.init_particles(n_particles, type_names, rng)
    residual = None
    for i, o in enumerate(comm):
        if i:
            residual = gp.fit([c.features for c in comm[:i]], _residuals(ps, comm[:i]), zero_mean=True)
        ps = inference.update(ps, o, residual, rng)
    if comm:
        residual = gp.fit([c.features for c in comm], _residuals(ps, comm), zero_mean=True)
    return ps, residual
