import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sgdtune import gp, perf_model
from sgdtune.domain import (Configuration, DeviceRef, random_configuration, same_type_swap,
                            uniform_devices, uniform_gpus)
from sgdtune.fixtures import make_setting
from sgdtune.simulator import device_time, run_experiment

from conftest import small_cluster, toy_sim, workload


def noiseless(setting, name, batch):
    cluster, wl = make_setting(setting, name, batch)
    sim = cluster.sim_params.replace(noise_sigma=0.0)
    return type(cluster)(cluster.machines, cluster.machine_types, sim), wl


def history(cluster, wl, configs):
    return [(c, run_experiment(c, cluster, wl, seed=i)) for i, c in enumerate(configs)]


def diverse_configs(cluster, wl, n, seed=0):
    rng = np.random.default_rng(seed)
    out = [uniform_devices(cluster, wl)]
    while len(out) < n:
        cfg = random_configuration(cluster, wl, rng)
        if cfg not in out:
            out.append(cfg)
    return out


@pytest.fixture(scope="module")
def model_c():
    cluster, wl = noiseless("C", "alexnet", 1024)
    configs = [uniform_devices(cluster, wl), uniform_gpus(cluster, wl)]
    configs += diverse_configs(cluster, wl, 8, seed=3)[1:]
    hist = history(cluster, wl, configs)
    return cluster, wl, hist, perf_model.fit(hist, cluster, wl, n_particles=300)


def test_single_config_counts():
    cluster = small_cluster(("c4.2xlarge",), sim=toy_sim())
    wl = workload(batch=8)
    cfg = Configuration.build({DeviceRef("m0", "cpu"): 8}, {"m0"})
    model = perf_model.fit(history(cluster, wl, [cfg]), cluster, wl, n_particles=100)
    assert model.device_rate_gps["c4.2xlarge/cpu"].n == 1
    assert model.comm_residual_gp.n == 1
    assert model.observation_count == 1
    # degenerate model reproduces the single observation
    m = run_experiment(cfg, cluster, wl)
    sample = perf_model.sample_iteration_time(model, cfg, np.random.default_rng(0))
    assert sample == pytest.approx(m.objective, rel=0.01)


def test_fit_requires_history(setting_a):
    with pytest.raises(ValueError):
        perf_model.fit([], *setting_a)


def test_refit_deterministic(model_c):
    cluster, wl, hist, model = model_c
    again = perf_model.fit(hist, cluster, wl, n_particles=300)
    assert again.digest() == model.digest()
    for t, g in model.device_rate_gps.items():
        assert again.device_rate_gps[t].hyper == g.hyper
    cfg = hist[3][0]
    assert perf_model.predict_mean(again, cfg) == perf_model.predict_mean(model, cfg)


def test_device_rates_match_truth_setting_a():
    cluster, wl = noiseless("A", "googlenet", 256)
    hist = history(cluster, wl, diverse_configs(cluster, wl, 10))
    model = perf_model.fit(hist, cluster, wl, n_particles=200)
    sim = cluster.sim_params
    for cfg, _ in hist:
        for dev, n in cfg.loads.items():
            if n == 0:
                continue
            t = cluster.device_type(dev)
            true_rate = n / device_time(sim, t, n, wl)
            fitted = gp.predict(model.device_rate_gps[t], float(n))[0]
            assert fitted == pytest.approx(true_rate, rel=0.05)


def test_samples_non_negative(model_c, rng):
    cluster, wl, _, model = model_c
    for _ in range(10):
        cfg = random_configuration(cluster, wl, rng)
        assert np.all(model.sample_iteration_times(cfg, 64, rng) >= 0)


def test_prediction_at_evaluated_configs(model_c):
    cluster, wl, hist, model = model_c
    for cfg, meas in hist:
        assert perf_model.predict_mean(model, cfg, k=2000) == pytest.approx(meas.objective, rel=0.10)


def test_monte_carlo_mean_of_observed_config(model_c):
    _, _, hist, model = model_c
    cfg, meas = hist[0]
    draws = model.sample_iteration_times(cfg, 10_000, np.random.default_rng(0))
    assert draws.mean() == pytest.approx(meas.objective, rel=0.10)


def test_predict_mean_k1_and_convergence(model_c):
    _, _, hist, model = model_c
    cfg = hist[1][0]
    one = perf_model.predict_mean(model, cfg, k=1)
    assert one == perf_model.sample_iteration_time(
        model, cfg, np.random.default_rng(perf_model.PREDICT_SEED))
    a = perf_model.predict_mean(model, cfg, k=10_000)
    b = perf_model.predict_mean(model, cfg, k=100_000)
    assert abs(a - b) / b < 0.02
    with pytest.raises(ValueError):
        perf_model.predict_mean(model, cfg, k=0)


@settings(max_examples=20)
@given(st.integers(0, 2**32 - 1))
def test_permutation_invariance(model_c, seed):
    cluster, wl, _, model = model_c
    cfg = random_configuration(cluster, wl, np.random.default_rng(seed))
    swapped = same_type_swap(cfg, cluster, "m06", "m08")
    swapped = same_type_swap(swapped, cluster, "m00", "m01")
    rng_a, rng_b = np.random.default_rng(1), np.random.default_rng(1)
    a = model.sample_iteration_times(cfg, 32, rng_a)
    b = model.sample_iteration_times(swapped, 32, rng_b)
    assert np.mean(a) == pytest.approx(np.mean(b), rel=0.05)
    assert perf_model.predict_mean(model, cfg) == pytest.approx(
        perf_model.predict_mean(model, swapped), rel=0.05)


def test_shift_toward_bottleneck_increases_prediction(model_c):
    cluster, wl, _, model = model_c
    cfg = uniform_devices(cluster, wl)
    loads = cfg.load_vector(cluster)
    times = [model.mean_machine_time(m, [loads[i] for i in cluster.machine_devices[m]])
             for m in range(len(cluster.machines))]
    slow = int(np.argmax(times))
    dst = cluster.machine_devices[slow][0]
    base = perf_model.predict_mean(model, cfg)
    for src in range(len(loads)):
        if cluster.device_machine[src] == slow or loads[src] < 8:
            continue
        moved = loads.copy()
        moved[src] -= 8
        moved[dst] += 8
        shifted = Configuration.from_arrays(cluster, moved, cfg.ps_mask(cluster))
        assert perf_model.predict_mean(model, shifted) > base


def test_conditional_independence():
    cluster, wl = noiseless("C", "alexnet", 1024)
    a = uniform_devices(cluster, wl)
    # b only uses the two c4.2xlarge machines
    b = Configuration.build({DeviceRef("m02", "cpu"): 512, DeviceRef("m03", "cpu"): 512},
                            {"m02"})
    one = perf_model.fit(history(cluster, wl, [a]), cluster, wl, n_particles=100)
    two = perf_model.fit(history(cluster, wl, [a, b]), cluster, wl, n_particles=100)
    for t in ("c4.4xlarge/cpu", "c4.8xlarge/cpu", "K520", "g2.2xlarge/cpu"):
        g1, g2 = one.device_rate_gps[t], two.device_rate_gps[t]
        assert g1.hyper == g2.hyper and np.array_equal(g1.ys, g2.ys)
    assert two.device_rate_gps["c4.2xlarge/cpu"].n == 4


def test_unobserved_type_priors():
    cluster, wl = noiseless("B", "alexnet", 256)
    cfg = Configuration.build({DeviceRef("m04", "cpu"): 256}, {"m04"})  # one c4.4xlarge
    assert cluster.type_of("m04").type_name == "c4.4xlarge"
    model = perf_model.fit(history(cluster, wl, [cfg]), cluster, wl, n_particles=100)
    seen = gp.predict(model.device_rate_gps["c4.4xlarge/cpu"], 256.0)[0]
    prior_8xl = model.device_rate_gps["c4.8xlarge/cpu"].mean
    assert prior_8xl == pytest.approx(seen * 36 / 16, rel=1e-9)
    # gpus scale the fastest *observed* cpu rate
    assert model.device_rate_gps["K520"].mean == pytest.approx(8 * seen, rel=1e-9)
    assert model.agg_gps["g2.2xlarge"].n == 0
