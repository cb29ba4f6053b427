import numpy as np
import pytest
from hypothesis import given, strategies as st

from sgdtune.domain import (Configuration, DeviceRef, DomainError, random_configuration,
                            same_type_swap, uniform_devices)
from sgdtune.fixtures import make_setting, workload_batches
from sgdtune.simulator import (N_ITERATIONS, DeviceTypeParams, SimulationError, comm_time,
                               device_time, machine_time, noiseless_objective, run_experiment,
                               transfer, transfers)

from conftest import small_cluster, toy_sim, workload


def cpu(m):
    return DeviceRef(m, "cpu", 0)


def test_device_time_zero_and_hand_value():
    sim = toy_sim()
    wl = workload(ops=1000.0)
    assert device_time(sim, "c4.2xlarge/cpu", 0, wl) == 0.0
    # 0.01 + 100 / (1000 * 100 / (100 + 100))
    assert device_time(sim, "c4.2xlarge/cpu", 100, wl) == pytest.approx(0.21, abs=1e-12)


def test_device_time_unknown_type():
    with pytest.raises(DomainError):
        device_time(toy_sim(), "nope", 3, workload())


@pytest.mark.parametrize("setting", "ABC")
@pytest.mark.parametrize("name", ["googlenet", "alexnet", "speechnet"])
def test_device_time_monotone_and_efficiency(setting, name):
    batch = workload_batches(name)[-1]
    cluster, wl = make_setting(setting, name, batch)
    n = np.arange(1, batch + 1)
    for t in set(cluster.device_types):
        times = device_time(cluster.sim_params, t, n, wl)
        assert np.all(np.diff(times) > 0)
        assert np.all(np.diff(times / n) < 0)


def test_machine_time_aggregation():
    sim = toy_sim(
        device_types={"g2.2xlarge/cpu": DeviceTypeParams(1000.0, 100.0, 0.01),
                      "K520": DeviceTypeParams(1000.0, 100.0, 0.01)},
        machine_types={"g2.2xlarge": __import__("sgdtune.simulator", fromlist=["x"])
                       .MachineTypeParams(1000.0, 100.0)})
    cluster = small_cluster(("g2.2xlarge",), sim=sim)
    wl = workload(batch=10, size=100.0)
    one = machine_time(sim, cluster, "m0", [0, 100], wl)
    assert one == pytest.approx(device_time(sim, "K520", 100, wl))
    assert machine_time(sim, cluster, "m0", [0, 0], wl) == 0.0
    # slowest device + (2 - 1) * 100 MB / 1000 MB/s
    two = machine_time(sim, cluster, "m0", [100, 50], wl)
    assert two == pytest.approx(device_time(sim, "K520", 100, wl) + 0.1)


def test_transfer_examples():
    wl = workload(size=100.0)
    assert transfers([True], [True], 100.0).tolist() == [0.0]
    assert transfers([True, True], [True, False], 100.0).tolist() == [200.0, 200.0]
    assert transfers([False, True], [True, False], 100.0).tolist() == [200.0, 200.0]
    cluster = small_cluster()
    cfg = Configuration.build({cpu("m0"): 4, cpu("m1"): 4}, {"m0"})
    assert transfer(cluster, cfg, wl) == {"m0": 200.0, "m1": 200.0}


def test_comm_time_examples():
    sim = toy_sim()
    wl = workload(batch=8, size=100.0)
    one = small_cluster(("c4.2xlarge",), sim=sim)
    assert comm_time(sim, one, Configuration.build({cpu("m0"): 8}, {"m0"}), wl) == 0.0

    from sgdtune.simulator import MachineTypeParams
    sim2 = toy_sim(machine_types={"c4.2xlarge": MachineTypeParams(1000.0, 100.0),
                                  "c4.4xlarge": MachineTypeParams(1000.0, 50.0)},
                   device_types={"c4.2xlarge/cpu": DeviceTypeParams(1000.0, 100.0, 0.01),
                                 "c4.4xlarge/cpu": DeviceTypeParams(1000.0, 100.0, 0.01)})
    two = small_cluster(("c4.2xlarge", "c4.4xlarge"), sim=sim2)
    cfg = Configuration.build({cpu("m0"): 4, cpu("m1"): 4}, {"m0"})
    # transfers (200, 200) MB at (100, 50) MB/s
    assert comm_time(sim2, two, cfg, wl) == pytest.approx(4.0)


@given(st.integers(0, 2**32 - 1))
def test_adding_worker_never_decreases_network_bytes(seed):
    rng = np.random.default_rng(seed)
    n = 10
    ps = rng.random(n) < 0.5
    ps[rng.integers(n)] = True
    workers = rng.random(n) < 0.5
    idle = np.flatnonzero(~workers)
    if len(idle) == 0:
        return
    before = transfers(workers, ps, 173.0).sum()
    workers[rng.choice(idle)] = True
    assert transfers(workers, ps, 173.0).sum() >= before - 1e-9


def test_noiseless_composition(setting_c):
    cluster, wl = setting_c
    sim = cluster.sim_params.replace(noise_sigma=0.0, warmup_inflation=1.0)
    cluster = type(cluster)(cluster.machines, cluster.machine_types, sim)
    cfg = uniform_devices(cluster, wl)
    m = run_experiment(cfg, cluster, wl, seed=3)
    assert m.objective == pytest.approx(max(m.machine_times.values()) + m.comm_time, rel=1e-12)
    assert m.objective == pytest.approx(noiseless_objective(cfg, cluster, wl), rel=1e-12)


def test_measurement_invariants(setting_c, rng):
    cluster, wl = setting_c
    for _ in range(20):
        cfg = random_configuration(cluster, wl, rng)
        m = run_experiment(cfg, cluster, wl, seed=int(rng.integers(1 << 30)))
        assert len(m.iteration_times) == N_ITERATIONS
        assert m.objective == pytest.approx(np.mean(m.iteration_times[10:]))
        for mid, t in m.machine_times.items():
            devs = [t2 for d, t2 in m.device_times.items() if d.machine_id == mid]
            assert t >= max(devs) - 1e-12
        assert set(m.device_times) == {d for d, n in cfg.loads.items() if n > 0}


def test_warmup_inflates_early_iterations(setting_a):
    cluster, wl = setting_a
    sim = cluster.sim_params.replace(noise_sigma=0.0)
    cluster = type(cluster)(cluster.machines, cluster.machine_types, sim)
    m = run_experiment(uniform_devices(cluster, wl), cluster, wl)
    its = np.array(m.iteration_times)
    assert its[0] == pytest.approx(sim.warmup_inflation * its[-1])
    assert np.all(np.diff(its[:11]) < 0)
    assert np.allclose(its[10:], its[-1])


def test_determinism(setting_c):
    cluster, wl = setting_c
    cfg = uniform_devices(cluster, wl)
    assert run_experiment(cfg, cluster, wl, seed=9) == run_experiment(cfg, cluster, wl, seed=9)
    assert run_experiment(cfg, cluster, wl, seed=9) != run_experiment(cfg, cluster, wl, seed=10)


def test_invalid_config_refused(setting_a):
    cluster, wl = setting_a
    cfg = Configuration.build({cpu("m00"): 3}, {"m00"})
    with pytest.raises(SimulationError):
        run_experiment(cfg, cluster, wl)


@given(st.integers(0, 2**32 - 1))
def test_same_type_permutation_symmetry(seed):
    cluster, wl = make_setting("C", "alexnet", 512)
    sim = cluster.sim_params.replace(noise_sigma=0.0)
    cluster = type(cluster)(cluster.machines, cluster.machine_types, sim)
    cfg = random_configuration(cluster, wl, np.random.default_rng(seed))
    for a, b in [("m00", "m01"), ("m06", "m09"), ("m02", "m03")]:
        swapped = same_type_swap(cfg, cluster, a, b)
        assert (run_experiment(swapped, cluster, wl).objective
                == pytest.approx(run_experiment(cfg, cluster, wl).objective, rel=1e-12))


@given(st.integers(0, 2**32 - 1))
def test_monotone_bottleneck(seed):
    """Moving one input off the slowest machine onto a faster one never hurts compute."""
    cluster, wl = make_setting("B", "alexnet", 512)
    sim = cluster.sim_params.replace(noise_sigma=0.0)
    rng = np.random.default_rng(seed)
    cfg = random_configuration(cluster, wl, rng)
    loads = cfg.load_vector(cluster)

    def mtimes(loads):
        return np.array([machine_time(sim, cluster, mid, [loads[i] for i in cluster.machine_devices[m]], wl)
                         for m, mid in enumerate(cluster.machine_ids)])

    t = mtimes(loads)
    slow = int(np.argmax(t))
    src = [i for i in cluster.machine_devices[slow] if loads[i] > 0]
    src = max(src, key=lambda i: device_time(sim, cluster.device_types[i], loads[i], wl))
    for dst_m in np.flatnonzero(t < t[slow]):
        for dst in cluster.machine_devices[dst_m]:
            if loads[dst] == 0:
                continue
            moved = loads.copy()
            moved[src] -= 1
            moved[dst] += 1
            if mtimes(moved)[dst_m] >= t[slow]:
                continue  # destination not strictly faster after the move
            assert mtimes(moved).max() <= t.max() + 1e-12


def test_repeat_noise_sanity(setting_c):
    cluster, wl = setting_c
    cfg = uniform_devices(cluster, wl)
    objs = np.array([run_experiment(cfg, cluster, wl, seed=s).objective for s in range(30)])
    assert objs.std() / objs.mean() <= 3 * cluster.sim_params.noise_sigma


def test_make_setting_rows():
    cluster, wl = make_setting("A", "GoogleNet", 64)
    assert len(cluster.machines) == 10 and not cluster.gpu_devices
    assert (wl.model_size_mb, wl.ops_millions) == (26.7, 1582)
    cluster, wl = make_setting("C", "speechnet", 65536)
    assert len(cluster.machines) == 10 and len(cluster.gpu_devices) == 2
    assert (wl.model_size_mb, wl.ops_millions) == (173, 45.3)
    counts = {}
    for m in cluster.machines:
        counts[m.type_name] = counts.get(m.type_name, 0) + 1
    assert counts == {"g2.2xlarge": 2, "c4.2xlarge": 2, "c4.4xlarge": 2, "c4.8xlarge": 4}
    with pytest.raises(DomainError):
        make_setting("B", "alexnet", 64)
    with pytest.raises(DomainError):
        make_setting("D", "alexnet", 256)
