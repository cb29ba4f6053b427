"""Measurement routing and particle inference of per-type connection speeds.

A measurement decomposes into independent observations: one rate sample per
loaded device, one aggregation-overhead sample per machine with several
active devices, and one communication sample per configuration. Only the
communication part needs particles; the rest feed plain GPs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import gp
from .domain import ClusterSpec, Configuration, WorkloadSpec
from .simulator import Measurement, transfers

log = logging.getLogger(__name__)

SPEED_PRIOR = (10.0, 10000.0)  # MB/s, log-uniform
RESAMPLE_FRACTION = 0.5
RW_STEP_FRACTION = 0.05
MOVE_STEPS = 5
NOISE_FLOOR_REL = 0.01
NOISE_FLOOR_ABS = 1e-3


@dataclass(frozen=True)
class DeviceObs:
    device_type: str
    load: int
    rate: float


@dataclass(frozen=True)
class AggObs:
    machine_type: str
    loads: tuple[int, ...]      # cpu load, then gpu loads sorted descending
    agg_diff: float


@dataclass(frozen=True, eq=False)
class CommObs:
    transfers: np.ndarray        # MB per machine, cluster order
    machine_types: tuple[str, ...]
    features: np.ndarray         # residual-GP input
    comm_time: float


@dataclass
class RoutedObservations:
    device: list[DeviceObs] = field(default_factory=list)
    agg: list[AggObs] = field(default_factory=list)
    comm: list[CommObs] = field(default_factory=list)

    def extend(self, other: "RoutedObservations") -> None:
        self.device.extend(other.device)
        self.agg.extend(other.agg)
        self.comm.extend(other.comm)


def agg_input(cpu_load: int, gpu_loads: Sequence[int]) -> tuple[int, ...]:
    return (int(cpu_load),) + tuple(sorted((int(g) for g in gpu_loads), reverse=True))


def comm_features(t: np.ndarray, n_workers: int, model_size_mb: float) -> np.ndarray:
    """Residual-GP input: (max transfer, total transfer) in model sizes, worker count."""
    return np.array([t.max() / model_size_mb, t.sum() / model_size_mb, float(n_workers)])


def comm_summary(cluster: ClusterSpec, worker_mask, ps_mask, workload: WorkloadSpec):
    t = transfers(worker_mask, ps_mask, workload.model_size_mb)
    return t, comm_features(t, int(np.sum(worker_mask)), workload.model_size_mb)


def route(measurement: Measurement, config: Configuration, cluster: ClusterSpec,
          workload: WorkloadSpec) -> RoutedObservations:
    """Split one measurement into per-sub-model observations."""
    out = RoutedObservations()
    for dev, t in sorted(measurement.device_times.items()):
        n = config.load_of(dev)
        if n > 0:
            out.device.append(DeviceObs(cluster.device_type(dev), n, n / t))
    for m, mid in enumerate(cluster.machine_ids):
        idx = cluster.machine_devices[m]
        if len(idx) < 2 or mid not in measurement.machine_times:
            continue
        devs = [cluster.devices[i] for i in idx]
        active = [d for d in devs if config.load_of(d) > 0]
        if len(active) < 2:
            continue
        slowest = max(measurement.device_times[d] for d in active)
        out.agg.append(AggObs(
            cluster.machine_type_names[m],
            agg_input(config.load_of(devs[0]), [config.load_of(d) for d in devs[1:]]),
            measurement.machine_times[mid] - slowest,
        ))
    t, feats = comm_summary(cluster, config.worker_mask(cluster), config.ps_mask(cluster), workload)
    out.comm.append(CommObs(t, cluster.machine_type_names, feats, measurement.comm_time))
    return out


@dataclass(frozen=True, eq=False)
class _Assimilated:
    transfers: np.ndarray
    type_idx: np.ndarray
    target: float     # observed comm time minus residual mean
    var: float


@dataclass(frozen=True, eq=False)
class ParticleSet:
    """Weighted particles over log connection speeds, one column per machine type."""

    type_names: tuple[str, ...]
    log_speeds: np.ndarray       # (n, n_types)
    weights: np.ndarray          # (n,)
    prior: tuple[float, float] = SPEED_PRIOR
    history: tuple[_Assimilated, ...] = ()
    floor_scale: float = 1.0
    flags: tuple[str, ...] = ()

    @property
    def n(self) -> int:
        return len(self.weights)

    @property
    def speeds(self) -> np.ndarray:
        return np.exp(self.log_speeds)

    @property
    def ess(self) -> float:
        return float(1.0 / np.sum(self.weights ** 2))

    def mean_speeds(self) -> np.ndarray:
        return self.weights @ self.speeds

    def std_speeds(self) -> np.ndarray:
        s = self.speeds
        mu = self.weights @ s
        return np.sqrt(np.maximum(self.weights @ (s - mu) ** 2, 0.0))

    def type_index(self, machine_types: Sequence[str]) -> np.ndarray:
        lookup = {t: i for i, t in enumerate(self.type_names)}
        return np.array([lookup[t] for t in machine_types], dtype=int)

    def digest(self) -> dict:
        return {
            "mean_speed_mb_per_s": dict(zip(self.type_names, map(float, self.mean_speeds()))),
            "ess": self.ess,
            "flags": list(self.flags),
        }


def init_particles(n: int, type_names: Sequence[str], rng: np.random.Generator,
                   prior: tuple[float, float] = SPEED_PRIOR) -> ParticleSet:
    """Draw ``n`` particles from the log-uniform speed prior, uniformly weighted."""
    if n < 100:
        raise ValueError("need at least 100 particles")
    lo, hi = np.log(prior[0]), np.log(prior[1])
    logs = rng.uniform(lo, hi, size=(n, len(type_names)))
    return ParticleSet(tuple(type_names), logs, np.full(n, 1.0 / n), prior)


def parametric_comm(speeds: np.ndarray, t: np.ndarray, type_idx: np.ndarray) -> np.ndarray:
    """``max_m t[m] / speed[type(m)]`` for every row of ``speeds``."""
    if not np.any(t > 0):
        return np.zeros(speeds.shape[:-1])
    active = t > 0
    return np.max(t[active] / speeds[..., type_idx[active]], axis=-1)


def systematic_resample(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n = len(weights)
    positions = (rng.random() + np.arange(n)) / n
    cumulative = np.cumsum(weights)
    cumulative[-1] = 1.0
    return np.searchsorted(cumulative, positions)


def _log_lik(log_speeds: np.ndarray, history: Sequence[_Assimilated]) -> np.ndarray:
    total = np.zeros(len(log_speeds))
    speeds = np.exp(log_speeds)
    for h in history:
        r = h.target - parametric_comm(speeds, h.transfers, h.type_idx)
        total -= 0.5 * r * r / h.var
    return total


def _rejuvenate(log_speeds: np.ndarray, history, prior, rng) -> np.ndarray:
    """Metropolis moves on log speeds targeting the current posterior.

    Dimensions are moved one at a time: a speed the data pin down sharply
    must not freeze the ones it says nothing about. Each sweep also proposes
    exchanging the speeds of two random types. When only the minimum of two
    speeds is observed the posterior has one mode per labelling, and the
    random walk alone cannot cross between them. The prior is the same for
    every type, so the exchange is accepted on the likelihood ratio alone.
    """
    lo, hi = np.log(prior[0]), np.log(prior[1])
    step = RW_STEP_FRACTION * (hi - lo)
    cur = log_speeds.copy()
    cur_ll = _log_lik(cur, history)
    n, d = cur.shape
    rows = np.arange(n)
    for _ in range(MOVE_STEPS):
        for j in range(d):
            prop = cur.copy()
            prop[:, j] += step * rng.standard_normal(n)
            inside = (prop[:, j] >= lo) & (prop[:, j] <= hi)
            prop_ll = np.full(n, -np.inf)
            prop_ll[inside] = _log_lik(prop[inside], history)
            accept = np.log(rng.random(n)) < prop_ll - cur_ll
            cur[accept] = prop[accept]
            cur_ll[accept] = prop_ll[accept]
        if d > 1:
            a = rng.integers(d, size=n)
            b = (a + rng.integers(1, d, size=n)) % d
            prop = cur.copy()
            prop[rows, a], prop[rows, b] = cur[rows, b], cur[rows, a]
            prop_ll = _log_lik(prop, history)
            accept = np.log(rng.random(n)) < prop_ll - cur_ll
            cur[accept] = prop[accept]
            cur_ll[accept] = prop_ll[accept]
    return cur


def residual_moments(residual_gp: gp.GpPosterior | None, features: np.ndarray):
    if residual_gp is None:
        return 0.0, 0.0
    return gp.predict(residual_gp, features)


def update(ps: ParticleSet, comm_obs: CommObs | Sequence[CommObs],
           residual_gp: gp.GpPosterior | None, rng: np.random.Generator) -> ParticleSet:
    """Reweight by each communication observation, resampling when ESS drops.

    The likelihood is Gaussian in (observed - parametric - residual mean) with
    variance equal to the residual GP's predictive variance plus a noise floor.
    """
    obs_list = [comm_obs] if isinstance(comm_obs, CommObs) else list(comm_obs)
    for obs in obs_list:
        ps = _update_one(ps, obs, residual_gp, rng)
    return ps


def _update_one(ps: ParticleSet, obs: CommObs, residual_gp, rng) -> ParticleSet:
    r_mean, r_var = residual_moments(residual_gp, obs.features)
    type_idx = ps.type_index(obs.machine_types)
    pred = parametric_comm(ps.speeds, obs.transfers, type_idx)
    target = obs.comm_time - r_mean
    floor_scale = ps.floor_scale
    flags = ps.flags
    while True:
        floor = max(NOISE_FLOOR_REL * obs.comm_time, NOISE_FLOOR_ABS) * floor_scale
        var = r_var + floor ** 2
        w = ps.weights * np.exp(-0.5 * (target - pred) ** 2 / var)
        if w.sum() > 0:
            break
        if floor_scale >= 100 * ps.floor_scale:
            log.warning("communication likelihood underflow; reverting to uniform weights")
            flags = flags + ("uniform-reweight",)
            w = np.ones(ps.n)
            break
        floor_scale *= 10
        flags = flags + (f"noise-floor-x{floor_scale:g}",)
        log.warning("communication likelihood underflow; widening noise floor to x%g", floor_scale)
    w = w / w.sum()
    history = ps.history + (_Assimilated(obs.transfers, type_idx, target, var),)
    out = replace(ps, weights=w, history=history, floor_scale=floor_scale, flags=flags)
    if out.ess < RESAMPLE_FRACTION * out.n:
        idx = systematic_resample(w, rng)
        logs = _rejuvenate(out.log_speeds[idx], history, out.prior, rng)
        out = replace(out, log_speeds=logs, weights=np.full(out.n, 1.0 / out.n))
    return out


def sample_comm(ps: ParticleSet, residual_gp: gp.GpPosterior | None, t: np.ndarray,
                type_idx: np.ndarray, features: np.ndarray, size: int,
                rng: np.random.Generator) -> np.ndarray:
    """``size`` forward samples of communication time, clamped at zero."""
    idx = rng.choice(ps.n, size=size, p=ps.weights)
    param = parametric_comm(ps.speeds[idx], t, type_idx)
    if residual_gp is not None:
        m, v = gp.predict(residual_gp, features)
        param = param + m + np.sqrt(v) * rng.standard_normal(size)
    return np.maximum(param, 0.0)


def predict_comm(ps: ParticleSet, residual_gp: gp.GpPosterior | None, config: Configuration,
                 cluster: ClusterSpec, workload: WorkloadSpec, rng: np.random.Generator) -> float:
    """One forward sample of the communication time of ``config``."""
    t, feats = comm_summary(cluster, config.worker_mask(cluster), config.ps_mask(cluster), workload)
    return float(sample_comm(ps, residual_gp, t, ps.type_index(cluster.machine_type_names),
                             feats, 1, rng)[0])


def mean_comm(ps: ParticleSet, residual_gp: gp.GpPosterior | None, t: np.ndarray,
              type_idx: np.ndarray, features: np.ndarray) -> float:
    """Posterior-mean communication time (weighted parametric mean plus residual mean)."""
    value = float(ps.weights @ parametric_comm(ps.speeds, t, type_idx))
    if residual_gp is not None:
        value += gp.predict(residual_gp, features)[0]
    return max(value, 0.0)
