import json
import math
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynamix.errors import ConfigError, ContractViolation
from dynamix.metrics import time_to_threshold
from dynamix.simenv import (
    MULTIPLIER_MAX,
    MULTIPLIER_MIN,
    ClusterConfig,
    ClusterSimulator,
    NetworkProfile,
    TrainingCurveModel,
    WorkerProfile,
    accuracy_asymptote,
    accuracy_curve,
    default_cluster,
    load_cluster_config,
    run_to_sample_budget,
    sample_network_metrics,
    step_multiplier,
    synth_gradient_stats,
)

CONFIG_DIR = Path(__file__).resolve().parents[1] / "configs"


# ── barrier timing ──

def test_barrier_time_is_slowest_compute_plus_communication(quiet_cluster):
    sim = ClusterSimulator(quiet_cluster)
    out = {o.worker_id: o for o in sim.step({0: 256, 1: 128})}
    net = quiet_cluster.network
    comm = net.payload_bytes / net.base_throughput
    compute0 = 0.01 + 256 / 4000.0
    compute1 = 0.02 + 128 / 2000.0
    barrier = max(compute0, compute1) + comm
    assert out[0].compute_time == pytest.approx(compute0, abs=1e-12)
    assert out[1].compute_time == pytest.approx(compute1, abs=1e-12)
    for o in out.values():
        assert o.wall_time == pytest.approx(barrier, abs=1e-12)
    assert sim.state.sim_time == pytest.approx(barrier, abs=1e-12)


def test_slowest_worker_only_waits_for_communication(quiet_cluster):
    sim = ClusterSimulator(quiet_cluster)
    out = {o.worker_id: o for o in sim.step({0: 64, 1: 512})}
    comm = quiet_cluster.network.payload_bytes / quiet_cluster.network.base_throughput
    assert out[1].sync_time == pytest.approx(comm, abs=1e-12)
    assert out[0].sync_time > out[1].sync_time


def test_communication_uses_slowest_link():
    config = replace(default_cluster(2, zero_noise=True), network=NetworkProfile(initial_multiplier=0.5,
                                                                                  congestion_step=0.0))
    sim = ClusterSimulator(config)
    out = sim.step({0: 256, 1: 256})
    slow_compute = 0.02 + 256 / 2000.0
    assert out[0].wall_time == pytest.approx(slow_compute + 5.0e7 / (1.25e9 * 0.5), abs=1e-12)


# ── accuracy model ──

@pytest.mark.parametrize("batch, expected", [(32, 0.82), (64, 0.82), (128, 0.79), (256, 0.76), (1024, 0.70)])
def test_accuracy_asymptote_default_calibration(batch, expected):
    assert accuracy_asymptote(TrainingCurveModel(), batch) == pytest.approx(expected, abs=1e-12)


def test_accuracy_asymptote_clamped_to_unit_interval():
    assert accuracy_asymptote(TrainingCurveModel(a0=1.0, a1=0.9), 1024) == 0.0


@given(st.sampled_from([32, 64, 128, 256, 512, 1024]), st.integers(0, 10**7), st.integers(1, 10**6))
def test_accuracy_curve_monotone_in_samples(batch, samples, extra):
    model = TrainingCurveModel()
    assert accuracy_curve(model, batch, samples + extra) >= accuracy_curve(model, batch, samples)


def test_zero_noise_batch_accuracy_equals_curve(quiet_cluster):
    sim = ClusterSimulator(quiet_cluster)
    for _ in range(3):
        for o in sim.step({0: 128, 1: 256}):
            assert o.batch_accuracy == o.curve_accuracy
    expected = accuracy_curve(quiet_cluster.curve, 256, 3 * 256)
    assert sim.state.worker_samples[1] == 768
    assert [o for o in sim.step({0: 128, 1: 256}) if o.worker_id == 1][0].curve_accuracy > expected


# ── network and gradient models ──

@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1), st.floats(MULTIPLIER_MIN, MULTIPLIER_MAX))
def test_multiplier_walk_stays_in_range(seed, start):
    rng = np.random.default_rng(seed)
    m = start
    for _ in range(200):
        m = step_multiplier(m, 0.05, rng)
        assert MULTIPLIER_MIN <= m <= MULTIPLIER_MAX


def test_network_metrics_without_congestion_has_no_retransmissions(rng):
    tp, retx, nxt = sample_network_metrics(NetworkProfile(congestion_step=0.0), 1.0, rng, multiplier=1.0)
    assert tp == 1.25e9
    assert retx == 0
    assert nxt == 1.0


def test_retransmissions_grow_with_congestion():
    profile = NetworkProfile(congestion_step=0.0)
    rng = np.random.default_rng(0)
    light = np.mean([sample_network_metrics(profile, 1.0, rng, 0.9)[1] for _ in range(2000)])
    heavy = np.mean([sample_network_metrics(profile, 1.0, rng, 0.2)[1] for _ in range(2000)])
    assert light == pytest.approx(5.0, rel=0.1)
    assert heavy == pytest.approx(40.0, rel=0.05)


def test_network_metrics_rejects_empty_window(rng):
    with pytest.raises(ContractViolation):
        sample_network_metrics(NetworkProfile(), 0.0, rng)


def test_gradient_noise_follows_sqrt_batch_law():
    model = TrainingCurveModel()
    rng = np.random.default_rng(1)
    small = np.mean([synth_gradient_stats(model, 32, rng)[0] for _ in range(4000)])
    large = np.mean([synth_gradient_stats(model, 128, rng)[0] for _ in range(4000)])
    assert small / large == pytest.approx(2.0, rel=0.01)


def test_gradient_stats_variance_is_square(rng):
    sigma, var = synth_gradient_stats(TrainingCurveModel(), 64, rng)
    assert var == pytest.approx(sigma ** 2, rel=1e-15)


def test_gradient_stats_zero_without_noise(rng):
    assert synth_gradient_stats(TrainingCurveModel(noise_scale=0.0), 64, rng) == (0.0, 0.0)


# ── step contract ──

def test_step_rejects_unknown_worker(quiet_cluster):
    with pytest.raises(ConfigError):
        ClusterSimulator(quiet_cluster).step({0: 64, 1: 64, 9: 64})


def test_step_rejects_missing_worker(quiet_cluster):
    with pytest.raises(ContractViolation):
        ClusterSimulator(quiet_cluster).step({0: 64})


@pytest.mark.parametrize("bad", [16, 2048])
def test_step_rejects_out_of_range_batch(quiet_cluster, bad):
    with pytest.raises(ContractViolation):
        ClusterSimulator(quiet_cluster).step({0: 64, 1: bad})


def test_same_seed_same_outcomes():
    config = default_cluster(4, seed=11)
    a, b = ClusterSimulator(config), ClusterSimulator(config)
    sizes = {i: 32 * (i + 1) for i in range(4)}
    for _ in range(20):
        assert a.step(sizes) == b.step(sizes)


def test_reset_replays_noise_stream():
    sim = ClusterSimulator(default_cluster(2, seed=5))
    first = [sim.step({0: 128, 1: 128}) for _ in range(5)]
    sim.reset()
    assert [sim.step({0: 128, 1: 128}) for _ in range(5)] == first
    assert sim.state.iteration == 5


def test_resource_metrics_track_batch_size(quiet_cluster):
    out = {o.worker_id: o for o in ClusterSimulator(quiet_cluster).step({0: 1024, 1: 32})}
    assert out[0].memory_utilization == 1.0
    assert out[1].memory_utilization == pytest.approx(32 / 1024)
    assert out[0].cpu_time_ratio == pytest.approx(8.0)
    assert out[1].cpu_time_ratio == pytest.approx(1.0 + 3.0 * 32 / 1024)


def test_model_accuracy_before_first_step_is_zero(quiet_cluster):
    assert ClusterSimulator(quiet_cluster).model_accuracy() == 0.0


# ── configuration ──

def test_cluster_config_dict_round_trip():
    config = default_cluster(3, seed=9)
    assert ClusterConfig.from_dict(json.loads(json.dumps(config.to_dict()))) == config


def test_cluster_config_rejects_unknown_keys():
    doc = default_cluster(2).to_dict()
    doc["gpus"] = 8
    with pytest.raises(ConfigError):
        ClusterConfig.from_dict(doc)


def test_cluster_config_rejects_duplicate_ids():
    with pytest.raises(ConfigError):
        ClusterConfig(workers=(WorkerProfile(0, 100.0), WorkerProfile(0, 200.0)))


def test_bundled_cluster_config_matches_default():
    assert load_cluster_config(CONFIG_DIR / "cluster_default.json") == default_cluster(4)


def test_missing_cluster_config_is_config_error(tmp_path):
    with pytest.raises(ConfigError):
        load_cluster_config(tmp_path / "nope.json")


def test_invalid_profile_values():
    with pytest.raises(ConfigError):
        WorkerProfile(0, compute_rate=0.0)
    with pytest.raises(ConfigError):
        TrainingCurveModel(tau=-1.0)
    with pytest.raises(ConfigError):
        NetworkProfile(initial_multiplier=0.05)


def test_scaled_curve_multiplies_tau_and_penalty():
    scaled = TrainingCurveModel().scaled(1.5)
    assert scaled.tau == pytest.approx(3.0e5)
    assert scaled.a1 == pytest.approx(0.045)
    assert scaled.a0 == 0.82


# ── static trade-off ──

def _calm_cluster():
    return replace(default_cluster(2, seed=0, zero_noise=True), network=NetworkProfile(congestion_step=0.0))


def test_small_batch_more_accurate_but_slower_at_equal_budget():
    config = _calm_cluster()
    acc_small, time_small = run_to_sample_budget(config, 32, 400_000)
    acc_large, time_large = run_to_sample_budget(config, 256, 400_000)
    assert acc_small > acc_large
    assert time_small > time_large


def _threshold_time(config, batch, threshold, iterations):
    sim = ClusterSimulator(config)
    sizes = {w: batch for w in config.worker_ids}
    times, acc = [], []
    for _ in range(iterations):
        out = sim.step(sizes)
        times.append(sim.state.sim_time)
        acc.append(float(np.mean([o.curve_accuracy for o in out])))
    return time_to_threshold(times, acc, threshold), acc[-1]


def test_large_batch_reaches_moderate_threshold_first():
    config = _calm_cluster()
    t_small, final_small = _threshold_time(config, 32, 0.6, 15_000)
    t_large, final_large = _threshold_time(config, 256, 0.6, 1_900)
    assert math.isfinite(t_small) and math.isfinite(t_large)
    assert t_large < t_small
    assert final_small > final_large
