"""Search space for parameter-server schedules.

A configuration assigns an integer load (inputs per iteration) to every
device of the cluster and marks a subset of machines as parameter servers.
Worker flags are derived from the loads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

CPU = "cpu"
GPU = "gpu"


class DomainError(ValueError):
    """Raised when a cluster, workload or configuration request is malformed."""


@dataclass(frozen=True, order=True)
class DeviceRef:
    machine_id: str
    device_kind: str
    device_index: int = 0

    def __post_init__(self):
        if self.device_kind not in (CPU, GPU):
            raise DomainError(f"unknown device kind {self.device_kind!r}")
        if self.device_kind == CPU and self.device_index != 0:
            raise DomainError("cpu device_index must be 0")
        if self.device_index < 0:
            raise DomainError("device_index must be non-negative")

    def __str__(self):
        return f"{self.machine_id}.{self.device_kind}{self.device_index}"


@dataclass(frozen=True)
class MachineTypeSpec:
    type_name: str
    hyperthreads: int
    gpu_count: int = 0
    gpu_model: str | None = None

    def __post_init__(self):
        if self.hyperthreads < 1:
            raise DomainError(f"{self.type_name}: hyperthreads must be >= 1")
        if self.gpu_count < 0:
            raise DomainError(f"{self.type_name}: gpu_count must be >= 0")
        if (self.gpu_model is not None) != (self.gpu_count > 0):
            raise DomainError(f"{self.type_name}: gpu_model must be set iff gpu_count > 0")

    @property
    def cpu_device_type(self) -> str:
        return f"{self.type_name}/cpu"

    @property
    def n_devices(self) -> int:
        return 1 + self.gpu_count


@dataclass(frozen=True)
class Machine:
    machine_id: str
    type_name: str


@dataclass(frozen=True, eq=False)
class ClusterSpec:
    """Machines of a cluster, in a fixed order used everywhere for tie-breaking.

    ``sim_params`` holds the simulator's hidden ground truth and is never read
    by the performance model or the optimizers.
    """

    machines: tuple[Machine, ...]
    machine_types: Mapping[str, MachineTypeSpec]
    sim_params: Any = None

    def __post_init__(self):
        ids = [m.machine_id for m in self.machines]
        if len(set(ids)) != len(ids):
            raise DomainError("machine ids must be unique")
        if not self.machines:
            raise DomainError("cluster has no machines")
        for m in self.machines:
            if m.type_name not in self.machine_types:
                raise DomainError(f"machine {m.machine_id}: unknown type {m.type_name!r}")

    @cached_property
    def machine_ids(self) -> tuple[str, ...]:
        return tuple(m.machine_id for m in self.machines)

    @cached_property
    def machine_index(self) -> dict[str, int]:
        return {mid: i for i, mid in enumerate(self.machine_ids)}

    def type_of(self, machine_id: str) -> MachineTypeSpec:
        return self.machine_types[self.machines[self.machine_index[machine_id]].type_name]

    @cached_property
    def devices(self) -> tuple[DeviceRef, ...]:
        out = []
        for m in self.machines:
            out.append(DeviceRef(m.machine_id, CPU, 0))
            for g in range(self.machine_types[m.type_name].gpu_count):
                out.append(DeviceRef(m.machine_id, GPU, g))
        return tuple(out)

    @cached_property
    def device_index(self) -> dict[DeviceRef, int]:
        return {d: i for i, d in enumerate(self.devices)}

    @cached_property
    def device_machine(self) -> np.ndarray:
        """Machine index of every device."""
        return np.array([self.machine_index[d.machine_id] for d in self.devices], dtype=int)

    @cached_property
    def machine_devices(self) -> tuple[tuple[int, ...], ...]:
        """Device indices of every machine (cpu first, then gpus)."""
        groups: list[list[int]] = [[] for _ in self.machines]
        for i, m in enumerate(self.device_machine):
            groups[m].append(i)
        return tuple(tuple(g) for g in groups)

    def device_type(self, device: DeviceRef) -> str:
        spec = self.type_of(device.machine_id)
        return spec.cpu_device_type if device.device_kind == CPU else spec.gpu_model

    @cached_property
    def device_types(self) -> tuple[str, ...]:
        """Device type key of every device, aligned with ``devices``."""
        return tuple(self.device_type(d) for d in self.devices)

    @cached_property
    def gpu_devices(self) -> tuple[int, ...]:
        return tuple(i for i, d in enumerate(self.devices) if d.device_kind == GPU)

    @cached_property
    def machine_type_names(self) -> tuple[str, ...]:
        return tuple(m.type_name for m in self.machines)


@dataclass(frozen=True)
class WorkloadSpec:
    name: str
    model_size_mb: float
    ops_millions: float
    batch_size: int
    batch_range: tuple[int, int] | None = None

    def __post_init__(self):
        if self.model_size_mb <= 0 or self.ops_millions <= 0:
            raise DomainError(f"{self.name}: model size and ops must be positive")
        if self.batch_size < 1:
            raise DomainError(f"{self.name}: batch size must be positive")
        if self.batch_range is not None:
            lo, hi = self.batch_range
            if not lo <= self.batch_size <= hi:
                raise DomainError(
                    f"{self.name}: batch {self.batch_size} outside range [{lo}, {hi}]")


@dataclass(frozen=True, eq=False)
class Configuration:
    """Per-device loads plus the parameter-server and worker machine sets.

    Use :meth:`build` to derive the worker set from the loads; the raw
    constructor exists so that inconsistent configurations can be represented
    and reported by :func:`validate`.
    """

    loads: Mapping[DeviceRef, int]
    ps: frozenset[str]
    workers: frozenset[str]

    @classmethod
    def build(cls, loads: Mapping[DeviceRef, int], ps: Iterable[str]) -> "Configuration":
        loads = {d: int(n) for d, n in loads.items() if n}
        workers = frozenset(d.machine_id for d, n in loads.items() if n > 0)
        return cls(loads, frozenset(ps), workers)

    @classmethod
    def from_arrays(cls, cluster: ClusterSpec, loads: Sequence[int],
                    ps_mask: Sequence[bool]) -> "Configuration":
        dev = cluster.devices
        mids = cluster.machine_ids
        return cls.build({dev[i]: int(n) for i, n in enumerate(loads) if n},
                         (mids[i] for i, p in enumerate(ps_mask) if p))

    def load_of(self, device: DeviceRef) -> int:
        return self.loads.get(device, 0)

    def load_vector(self, cluster: ClusterSpec) -> np.ndarray:
        return np.array([self.loads.get(d, 0) for d in cluster.devices], dtype=np.int64)

    def ps_mask(self, cluster: ClusterSpec) -> np.ndarray:
        return np.array([m in self.ps for m in cluster.machine_ids], dtype=bool)

    def worker_mask(self, cluster: ClusterSpec) -> np.ndarray:
        return np.array([m in self.workers for m in cluster.machine_ids], dtype=bool)

    def key(self) -> tuple:
        return (tuple(sorted((d, n) for d, n in self.loads.items() if n)),
                tuple(sorted(self.ps)), tuple(sorted(self.workers)))

    def __eq__(self, other):
        if not isinstance(other, Configuration):
            return NotImplemented
        return self.key() == other.key()

    def __hash__(self):
        return hash(self.key())

    def digest(self) -> str:
        """Compact human-readable description, stable across runs."""
        loads = ",".join(f"{d}={n}" for d, n in sorted(self.loads.items()) if n)
        return f"ps[{','.join(sorted(self.ps))}] loads[{loads}]"

    def to_dict(self) -> dict:
        return {
            "ps": sorted(self.ps),
            "workers": sorted(self.workers),
            "loads": [[d.machine_id, d.device_kind, d.device_index, n]
                      for d, n in sorted(self.loads.items()) if n],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "Configuration":
        loads = {DeviceRef(m, k, int(i)): int(n) for m, k, i, n in data["loads"]}
        return cls(loads, frozenset(data["ps"]), frozenset(data["workers"]))


@dataclass(frozen=True)
class ValidationResult:
    violations: tuple[str, ...] = field(default_factory=tuple)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self):
        return self.ok


def validate(config: Configuration, cluster: ClusterSpec,
             workload: WorkloadSpec) -> ValidationResult:
    """Check a configuration against the cluster and batch size.

    Violations are returned as data; nothing is raised.
    """
    problems = []
    known = cluster.device_index
    for d, n in config.loads.items():
        if d not in known:
            problems.append(f"unknown device {d}")
        if n < 0:
            problems.append(f"negative load {n} on {d}")
    for mid in config.ps | config.workers:
        if mid not in cluster.machine_index:
            problems.append(f"unknown machine {mid}")
    total = sum(config.loads.values())
    if total != workload.batch_size:
        problems.append(f"loads sum {total} != batch {workload.batch_size}")
    if not config.ps:
        problems.append("empty parameter-server set")
    if not config.workers:
        problems.append("empty worker set")
    loaded = {d.machine_id for d, n in config.loads.items() if n > 0}
    for mid in sorted(config.workers - loaded):
        problems.append(f"worker flag without load on {mid}")
    for mid in sorted(loaded - config.workers):
        problems.append(f"load on non-worker machine {mid}")
    return ValidationResult(tuple(problems))


def largest_remainder(weights: Sequence[float], total: int) -> np.ndarray:
    """Round non-negative ``weights`` to integers summing to ``total``.

    Quotas are floored and the deficit is handed out by descending fractional
    part; ties go to the lower index.
    """
    w = np.asarray(weights, dtype=float)
    s = w.sum()
    if total == 0:
        return np.zeros(len(w), dtype=np.int64)
    if s <= 0:
        raise DomainError("weights must have positive sum")
    quota = w * (total / s)
    base = np.floor(quota).astype(np.int64)
    deficit = int(total - base.sum())
    if deficit > 0:
        order = np.lexsort((np.arange(len(w)), -(quota - base)))
        base[order[:deficit]] += 1
    elif deficit < 0:
        order = np.lexsort((np.arange(len(w)), quota - base))
        order = [i for i in order if base[i] > 0]
        base[order[:-deficit]] -= 1
    return base


def _even_split(total: int, n: int) -> list[int]:
    q, r = divmod(total, n)
    return [q + 1 if i < r else q for i in range(n)]


def uniform_devices(cluster: ClusterSpec, workload: WorkloadSpec) -> Configuration:
    """Split the batch evenly over every device; every machine is worker and PS."""
    n_dev = len(cluster.devices)
    if workload.batch_size < n_dev:
        raise DomainError("batch too small for uniform split")
    loads = _even_split(workload.batch_size, n_dev)
    return Configuration.build(dict(zip(cluster.devices, loads)), cluster.machine_ids)


def uniform_gpus(cluster: ClusterSpec, workload: WorkloadSpec) -> Configuration:
    """Split the batch evenly over the GPUs; GPU hosts are workers and PS."""
    gpus = [cluster.devices[i] for i in cluster.gpu_devices]
    if not gpus:
        raise DomainError("no gpu devices")
    if workload.batch_size < len(gpus):
        raise DomainError("batch too small for uniform split")
    loads = _even_split(workload.batch_size, len(gpus))
    return Configuration.build(dict(zip(gpus, loads)), {d.machine_id for d in gpus})


def encoding_dim(cluster: ClusterSpec) -> int:
    return len(cluster.machines) + len(cluster.devices)


def encode(config: Configuration, cluster: ClusterSpec, workload: WorkloadSpec) -> np.ndarray:
    """Flatten to ``[ps flag per machine] + [load / batch per device]`` in [0, 1]."""
    flags = config.ps_mask(cluster).astype(float)
    loads = config.load_vector(cluster) / workload.batch_size
    return np.concatenate([flags, loads])


def decode(vector: Sequence[float], cluster: ClusterSpec,
           workload: WorkloadSpec) -> Configuration:
    """Map any point of the unit cube back to a valid configuration."""
    v = np.asarray(vector, dtype=float)
    n_m = len(cluster.machines)
    if v.shape != (encoding_dim(cluster),):
        raise DomainError(f"expected vector of length {encoding_dim(cluster)}, got {v.shape}")
    v = np.clip(v, 0.0, 1.0)
    flags, raw = v[:n_m], v[n_m:]
    ps_mask = flags >= 0.5
    if not ps_mask.any():
        ps_mask[int(np.argmax(flags))] = True
    if raw.sum() > 0:
        loads = largest_remainder(raw, workload.batch_size)
    else:
        loads = np.zeros(len(raw), dtype=np.int64)
        loads[int(np.argmax(raw))] = workload.batch_size
    return Configuration.from_arrays(cluster, loads, ps_mask)


def random_configuration(cluster: ClusterSpec, workload: WorkloadSpec,
                         rng: np.random.Generator) -> Configuration:
    """Sample a valid configuration: random worker/PS subsets, Dirichlet loads."""
    n_m = len(cluster.machines)
    workers = rng.random(n_m) < 0.5
    if not workers.any():
        workers[rng.integers(n_m)] = True
    ps = rng.random(n_m) < 0.5
    if not ps.any():
        ps[rng.integers(n_m)] = True
    active = workers[cluster.device_machine]
    weights = np.where(active, rng.exponential(size=len(cluster.devices)), 0.0)
    loads = largest_remainder(weights, workload.batch_size)
    return Configuration.from_arrays(cluster, loads, ps)


def same_type_swap(config: Configuration, cluster: ClusterSpec, a: str, b: str) -> Configuration:
    """Exchange the roles and loads of two machines of the same type."""
    if cluster.type_of(a).type_name != cluster.type_of(b).type_name:
        raise DomainError(f"{a} and {b} have different types")
    swap = {a: b, b: a}

    def move(mid):
        return swap.get(mid, mid)

    loads = {DeviceRef(move(d.machine_id), d.device_kind, d.device_index): n
             for d, n in config.loads.items()}
    return Configuration(loads, frozenset(map(move, config.ps)),
                         frozenset(map(move, config.workers)))


def chunk_size(batch_size: int, chunks: int = 64) -> int:
    return max(1, math.ceil(batch_size / chunks))
