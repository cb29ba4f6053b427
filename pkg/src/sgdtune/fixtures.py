"""Reading the YAML fixture files: machine settings, workloads, calibration.

All quantities carry their unit in the key name (``model_size_mb``,
``peak_rate_inputs_per_s``...). Files shipped with the package live in
``sgdtune/data``; user-supplied cluster files follow the same schema.
"""

from __future__ import annotations

from importlib import resources
from pathlib import Path
from typing import Any, Mapping

import yaml

from .domain import ClusterSpec, DomainError, Machine, MachineTypeSpec, WorkloadSpec
from .simulator import DeviceTypeParams, MachineTypeParams, SimParams

SCHEMA_VERSION = 1


def _load(source: str | Path | None, default: str) -> dict:
    if source is None:
        text = resources.files("sgdtune.data").joinpath(default).read_text()
    else:
        text = Path(source).read_text()
    data = yaml.safe_load(text)
    if not isinstance(data, dict):
        raise DomainError(f"{source or default}: expected a mapping at top level")
    version = data.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise DomainError(f"{source or default}: unsupported schema_version {version}")
    return data


def _require(d: Mapping, key: str, where: str) -> Any:
    try:
        return d[key]
    except (KeyError, TypeError):
        raise DomainError(f"{where}: missing key {key!r}") from None


def parse_machine_types(items) -> dict[str, MachineTypeSpec]:
    out = {}
    for it in items:
        spec = MachineTypeSpec(
            type_name=str(_require(it, "type_name", "machine_types")),
            hyperthreads=int(_require(it, "hyperthreads", "machine_types")),
            gpu_count=int(it.get("gpu_count", 0)),
            gpu_model=it.get("gpu_model"),
        )
        if spec.type_name in out:
            raise DomainError(f"machine type {spec.type_name!r} declared twice")
        out[spec.type_name] = spec
    return out


def parse_sim_params(data: Mapping) -> SimParams:
    dev = {
        name: DeviceTypeParams(
            peak_rate=float(_require(v, "peak_rate_inputs_per_s", name)),
            half_load=float(_require(v, "half_load_inputs", name)),
            startup=float(_require(v, "startup_s", name)),
        )
        for name, v in _require(data, "device_types", "calibration").items()
    }
    mach = {
        name: MachineTypeParams(
            agg_rate=float(_require(v, "agg_rate_mb_per_s", name)),
            connection_speed=float(_require(v, "connection_speed_mb_per_s", name)),
        )
        for name, v in _require(data, "machine_types", "calibration").items()
    }
    return SimParams(
        device_types=dev,
        machine_types=mach,
        noise_sigma=float(data.get("noise_sigma", 0.0)),
        warmup_inflation=float(data.get("warmup_inflation", 1.0)),
        congestion_gamma=float(data.get("congestion_gamma", 0.25)),
        seed=int(data.get("seed", 0)),
    )


def load_calibration(path: str | Path | None = None) -> SimParams:
    return parse_sim_params(_load(path, "calibration.yaml"))


def load_workloads(path: str | Path | None = None) -> dict[str, dict]:
    return {k.lower(): v for k, v in _load(path, "workloads.yaml")["workloads"].items()}


def workload_batches(name: str) -> list[int]:
    """Powers of two spanning the workload's declared batch range."""
    row = load_workloads()[name.lower()]
    out, b = [], int(row["batch_min"])
    while b <= int(row["batch_max"]):
        out.append(b)
        b *= 2
    return out


def make_workload(name: str, batch_size: int, path: str | Path | None = None) -> WorkloadSpec:
    rows = load_workloads(path)
    row = rows.get(name.lower())
    if row is None:
        raise DomainError(f"unknown workload {name!r}")
    return WorkloadSpec(
        name=name.lower(),
        model_size_mb=float(row["model_size_mb"]),
        ops_millions=float(row["ops_millions"]),
        batch_size=int(batch_size),
        batch_range=(int(row["batch_min"]), int(row["batch_max"])),
    )


def load_workload_file(path: str | Path, batch_size: int) -> WorkloadSpec:
    """A single-workload file: name, model_size_mb, ops_millions, optional batch bounds."""
    data = _load(path, "")
    lo, hi = data.get("batch_min"), data.get("batch_max")
    return WorkloadSpec(
        name=str(_require(data, "name", str(path))),
        model_size_mb=float(_require(data, "model_size_mb", str(path))),
        ops_millions=float(_require(data, "ops_millions", str(path))),
        batch_size=int(batch_size),
        batch_range=(int(lo), int(hi)) if lo is not None and hi is not None else None,
    )


def make_cluster(setting: str, sim_params: SimParams | None = None) -> ClusterSpec:
    data = _load(None, "settings.yaml")
    types = parse_machine_types(data["machine_types"])
    counts = data["settings"].get(setting.upper())
    if counts is None:
        raise DomainError(f"unknown setting {setting!r}")
    machines = []
    for type_name in types:
        for _ in range(int(counts.get(type_name, 0))):
            machines.append(Machine(f"m{len(machines):02d}", type_name))
    if sim_params is None:
        sim_params = load_calibration()
    return ClusterSpec(tuple(machines), types, sim_params)


def load_cluster_file(path: str | Path) -> ClusterSpec:
    """Cluster file: ``machine_types``, ``machines`` and optional inline ``sim_params``."""
    data = _load(path, "")
    types = parse_machine_types(_require(data, "machine_types", str(path)))
    machines = tuple(
        Machine(str(_require(m, "machine_id", "machines")), str(_require(m, "type_name", "machines")))
        for m in _require(data, "machines", str(path))
    )
    sim = data.get("sim_params")
    sim_params = parse_sim_params(sim) if sim is not None else load_calibration()
    cluster = ClusterSpec(machines, types, sim_params)
    sim_params.check_covers(cluster)
    return cluster


def settings() -> list[str]:
    return sorted(_load(None, "settings.yaml")["settings"])


def make_setting(setting: str, workload_name: str, batch_size: int,
                 sim_params: SimParams | None = None) -> tuple[ClusterSpec, WorkloadSpec]:
    """Cluster of a named setting plus a workload row at the given batch size."""
    workload = make_workload(workload_name, batch_size)
    return make_cluster(setting, sim_params), workload
