"""Synthetic cluster standing in for real distributed SGD runs.

Given a configuration, :func:`run_experiment` plays 20 synchronous SGD
iterations and reports per-device, per-machine and communication timings
along with the objective (mean of the last 10 iteration times).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .domain import ClusterSpec, Configuration, DeviceRef, DomainError, WorkloadSpec, validate

N_ITERATIONS = 20
N_MEASURED = 10
REFERENCE_OPS = 1000.0


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class DeviceTypeParams:
    peak_rate: float
    half_load: float
    startup: float


@dataclass(frozen=True)
class MachineTypeParams:
    agg_rate: float
    connection_speed: float


@dataclass(frozen=True)
class SimParams:
    device_types: Mapping[str, DeviceTypeParams]
    machine_types: Mapping[str, MachineTypeParams]
    noise_sigma: float = 0.02
    warmup_inflation: float = 1.5
    congestion_gamma: float = 0.25
    seed: int = 0

    def __post_init__(self):
        for name, p in self.device_types.items():
            if min(p.peak_rate, p.half_load, p.startup) <= 0:
                raise DomainError(f"device type {name}: rates and constants must be positive")
        for name, p in self.machine_types.items():
            if min(p.agg_rate, p.connection_speed) <= 0:
                raise DomainError(f"machine type {name}: rates must be positive")
        if self.noise_sigma < 0:
            raise DomainError("noise_sigma must be >= 0")
        if self.warmup_inflation < 1:
            raise DomainError("warmup_inflation must be >= 1")
        if self.congestion_gamma < 0:
            raise DomainError("congestion_gamma must be >= 0")

    def replace(self, **kw) -> "SimParams":
        from dataclasses import replace
        return replace(self, **kw)

    def check_covers(self, cluster: ClusterSpec) -> None:
        for t in set(cluster.device_types):
            if t not in self.device_types:
                raise DomainError(f"calibration lacks device type {t!r}")
        for t in set(cluster.machine_type_names):
            if t not in self.machine_types:
                raise DomainError(f"calibration lacks machine type {t!r}")


@dataclass
class Measurement:
    device_times: dict[DeviceRef, float]
    machine_times: dict[str, float]
    comm_time: float
    iteration_times: list[float]
    objective: float = field(init=False)

    def __post_init__(self):
        self.objective = float(np.mean(self.iteration_times[N_ITERATIONS - N_MEASURED:]))

    def to_dict(self) -> dict:
        return {
            "device_times": [[d.machine_id, d.device_kind, d.device_index, t]
                             for d, t in sorted(self.device_times.items())],
            "machine_times": dict(sorted(self.machine_times.items())),
            "comm_time": self.comm_time,
            "iteration_times": list(self.iteration_times),
            "objective": self.objective,
        }

    @classmethod
    def from_dict(cls, data) -> "Measurement":
        return cls(
            device_times={DeviceRef(m, k, int(i)): float(t) for m, k, i, t in data["device_times"]},
            machine_times={k: float(v) for k, v in data["machine_times"].items()},
            comm_time=float(data["comm_time"]),
            iteration_times=[float(t) for t in data["iteration_times"]],
        )

    def __eq__(self, other):
        if not isinstance(other, Measurement):
            return NotImplemented
        return self.to_dict() == other.to_dict()


def _sim(cluster: ClusterSpec) -> SimParams:
    if cluster.sim_params is None:
        raise SimulationError("cluster has no simulator parameters")
    return cluster.sim_params


def device_time(sim: SimParams, device_type: str, n, workload: WorkloadSpec):
    """Compute time of one device processing ``n`` inputs (scalar or array).

    The processing rate saturates as ``peak * n / (n + half_load)``, so the
    per-input cost falls with load while the total keeps rising.
    """
    try:
        p = sim.device_types[device_type]
    except KeyError:
        raise DomainError(f"unknown device type {device_type!r}") from None
    n = np.asarray(n, dtype=float)
    peak = p.peak_rate * REFERENCE_OPS / workload.ops_millions
    # startup + n / (peak * n / (n + half)) simplifies to the linear form below
    t = np.where(n > 0, p.startup + (n + p.half_load) / peak, 0.0)
    return float(t) if t.ndim == 0 else t


def aggregation_time(sim: SimParams, machine_type: str, n_active: int,
                     workload: WorkloadSpec) -> float:
    if n_active <= 1:
        return 0.0
    return (n_active - 1) * workload.model_size_mb / sim.machine_types[machine_type].agg_rate


def machine_time(sim: SimParams, cluster: ClusterSpec, machine_id: str,
                 loads: Sequence[int], workload: WorkloadSpec) -> float:
    """Slowest active device plus local gradient summation.

    ``loads`` are the machine's device loads, cpu first then gpus.
    """
    idx = cluster.machine_devices[cluster.machine_index[machine_id]]
    if len(loads) != len(idx):
        raise DomainError(f"{machine_id}: expected {len(idx)} device loads")
    times = [device_time(sim, cluster.device_types[i], n, workload)
             for i, n in zip(idx, loads) if n > 0]
    if not times:
        return 0.0
    mtype = cluster.machines[cluster.machine_index[machine_id]].type_name
    return max(times) + aggregation_time(sim, mtype, len(times), workload)


def transfers(worker_mask: np.ndarray, ps_mask: np.ndarray, model_size_mb: float) -> np.ndarray:
    """Megabytes each machine moves per iteration, excluding local traffic.

    Parameters are sharded equally across parameter servers; a worker sends
    gradients and receives parameters for every shard it does not host, and
    a server does the same with every other worker.
    """
    worker = np.asarray(worker_mask, dtype=bool)
    ps = np.asarray(ps_mask, dtype=bool)
    n_ps = ps.sum()
    if n_ps == 0:
        raise DomainError("no parameter server")
    shard = model_size_mb / n_ps
    n_workers = worker.sum()
    worker_part = np.where(worker, 2.0 * (model_size_mb - shard * ps), 0.0)
    ps_part = np.where(ps, 2.0 * shard * (n_workers - worker), 0.0)
    return worker_part + ps_part


def transfer(cluster: ClusterSpec, config: Configuration, workload: WorkloadSpec) -> dict[str, float]:
    t = transfers(config.worker_mask(cluster), config.ps_mask(cluster), workload.model_size_mb)
    return dict(zip(cluster.machine_ids, map(float, t)))


def connection_speeds(sim: SimParams, cluster: ClusterSpec) -> np.ndarray:
    return np.array([sim.machine_types[t].connection_speed for t in cluster.machine_type_names])


def comm_time_masks(sim: SimParams, cluster: ClusterSpec, worker_mask, ps_mask,
                    workload: WorkloadSpec) -> float:
    speeds = connection_speeds(sim, cluster)
    t = transfers(worker_mask, ps_mask, workload.model_size_mb)
    bottleneck = float(np.max(t / speeds))
    # each crossing byte is counted once at the sender and once at the receiver
    congestion = sim.congestion_gamma * (t.sum() / 2.0) / speeds.sum()
    return bottleneck + congestion


def comm_time(sim: SimParams, cluster: ClusterSpec, config: Configuration,
              workload: WorkloadSpec) -> float:
    return comm_time_masks(sim, cluster, config.worker_mask(cluster),
                           config.ps_mask(cluster), workload)


def warmup_factors(inflation: float) -> np.ndarray:
    i = np.arange(N_ITERATIONS, dtype=float)
    return np.where(i < N_MEASURED, inflation - (inflation - 1.0) * i / N_MEASURED, 1.0)


def run_experiment(config: Configuration, cluster: ClusterSpec, workload: WorkloadSpec,
                   seed: int = 0) -> Measurement:
    """Simulate 20 SGD iterations of ``config`` and report the last-10 means."""
    sim = _sim(cluster)
    check = validate(config, cluster, workload)
    if not check.ok:
        raise SimulationError("invalid configuration: " + "; ".join(check.violations))
    rng = np.random.default_rng([sim.seed, seed])

    loads = config.load_vector(cluster)
    active = np.flatnonzero(loads)
    base = np.array([device_time(sim, cluster.device_types[i], loads[i], workload)
                     for i in active])
    noisy = base * np.exp(sim.noise_sigma * rng.standard_normal((N_ITERATIONS, len(active))))

    owner = cluster.device_machine[active]
    machines = np.unique(owner)
    machine_draws = np.empty((N_ITERATIONS, len(machines)))
    for j, m in enumerate(machines):
        cols = owner == m
        agg = aggregation_time(sim, cluster.machine_type_names[m], int(cols.sum()), workload)
        machine_draws[:, j] = noisy[:, cols].max(axis=1) + agg

    comm_base = comm_time(sim, cluster, config, workload)
    comm_draws = comm_base * np.exp(sim.noise_sigma * rng.standard_normal(N_ITERATIONS))
    iterations = (machine_draws.max(axis=1) + comm_draws) * warmup_factors(sim.warmup_inflation)

    tail = slice(N_ITERATIONS - N_MEASURED, None)
    devices = cluster.devices
    mids = cluster.machine_ids
    return Measurement(
        device_times={devices[i]: float(v) for i, v in zip(active, noisy[tail].mean(axis=0))},
        machine_times={mids[m]: float(v) for m, v in zip(machines, machine_draws[tail].mean(axis=0))},
        comm_time=float(comm_draws[tail].mean()),
        iteration_times=[float(v) for v in iterations],
    )


def noiseless_objective(config: Configuration, cluster: ClusterSpec,
                        workload: WorkloadSpec) -> float:
    sim = _sim(cluster)
    loads = config.load_vector(cluster)
    compute = max(
        machine_time(sim, cluster, mid, [loads[i] for i in cluster.machine_devices[m]], workload)
        for m, mid in enumerate(cluster.machine_ids))
    return compute + comm_time(sim, cluster, config, workload)


class TruthModel:
    """The simulator's noiseless ground truth behind the performance-model interface.

    Lets the load optimizer be checked against a perfect model.
    """

    def __init__(self, cluster: ClusterSpec, workload: WorkloadSpec):
        self.cluster = cluster
        self.workload = workload
        self.sim = _sim(cluster)

    def mean_machine_time(self, machine: int, loads: Sequence[int]) -> float:
        return machine_time(self.sim, self.cluster, self.cluster.machine_ids[machine],
                            loads, self.workload)

    def mean_comm_time(self, worker_mask, ps_mask) -> float:
        return comm_time_masks(self.sim, self.cluster, np.asarray(worker_mask),
                               np.asarray(ps_mask), self.workload)

    def sample_iteration_times(self, config: Configuration, k: int,
                               rng: np.random.Generator) -> np.ndarray:
        return np.full(k, noiseless_objective(config, self.cluster, self.workload))


def make_setting(setting: str, workload_name: str, batch_size: int):
    """Cluster and workload for one of the shipped settings (A, B, C)."""
    from .fixtures import make_setting as _make
    return _make(setting, workload_name, batch_size)
