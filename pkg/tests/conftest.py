import hypothesis
import numpy as np
import pytest

from sgdtune.domain import ClusterSpec, Machine, MachineTypeSpec, WorkloadSpec
from sgdtune.fixtures import load_calibration, make_setting
from sgdtune.simulator import DeviceTypeParams, MachineTypeParams, SimParams

hypothesis.settings.register_profile("default", max_examples=50, deadline=None)
hypothesis.settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def small_cluster(types=("c4.2xlarge", "c4.2xlarge"), sim: SimParams | None = None,
                  **sim_overrides) -> ClusterSpec:
    cal = load_calibration()
    specs = {
        "c4.2xlarge": MachineTypeSpec("c4.2xlarge", 8),
        "c4.4xlarge": MachineTypeSpec("c4.4xlarge", 16),
        "c4.8xlarge": MachineTypeSpec("c4.8xlarge", 36),
        "g2.2xlarge": MachineTypeSpec("g2.2xlarge", 8, 1, "K520"),
    }
    machines = tuple(Machine(f"m{i}", t) for i, t in enumerate(types))
    sim = sim or cal
    if sim_overrides:
        sim = sim.replace(**sim_overrides)
    return ClusterSpec(machines, {t: specs[t] for t in set(types)}, sim)


def toy_sim(**kw) -> SimParams:
    """One cpu type with round numbers for hand-checkable timings."""
    base = dict(
        device_types={"c4.2xlarge/cpu": DeviceTypeParams(1000.0, 100.0, 0.01)},
        machine_types={"c4.2xlarge": MachineTypeParams(1000.0, 100.0)},
        noise_sigma=0.0, warmup_inflation=1.0, congestion_gamma=0.0, seed=0,
    )
    base.update(kw)
    return SimParams(**base)


@pytest.fixture
def setting_a():
    return make_setting("A", "googlenet", 64)


@pytest.fixture
def setting_c():
    return make_setting("C", "speechnet", 65536)


def workload(batch=8, size=100.0, ops=1000.0, name="toy"):
    return WorkloadSpec(name, size, ops, batch)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report():
    """Collects one verdict line per acceptance criterion for the terminal summary."""
    def add(number: int, ok: bool, detail: str, elapsed: float) -> None:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}  ({elapsed:.1f} s)"
        ACCEPTANCE_LINES.append(line)
        print(line)
    return add


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
