import numpy as np
import pytest

from dynamix.arbitrator import SessionConfig
from dynamix.policy import PPOConfig, zero_params
from dynamix.simenv import ClusterConfig, IterationOutcome, NetworkProfile, WorkerProfile


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def quiet_cluster():
    """Two heterogeneous workers, no accuracy noise, no congestion."""
    return ClusterConfig(
        workers=(
            WorkerProfile(0, compute_rate=4000.0, fixed_overhead=0.01, cores=8.0),
            WorkerProfile(1, compute_rate=2000.0, fixed_overhead=0.02, cores=4.0),
        ),
        network=NetworkProfile(congestion_step=0.0),
        seed=7,
        zero_noise=True,
    )


@pytest.fixture
def make_outcome():
    def _make(i, worker_id=0, batch_size=256, accuracy=0.5, compute=0.1, sync=0.05, retx=0,
              cpu=2.0, sigma=0.01):
        return IterationOutcome(
            worker_id=worker_id,
            iteration_index=i,
            batch_size=batch_size,
            compute_time=compute,
            sync_time=sync,
            batch_accuracy=accuracy,
            grad_norm_std=sigma,
            grad_norm_var=sigma * sigma,
            throughput_bytes=1.0e9,
            retransmissions=retx,
            cpu_time_ratio=cpu,
            memory_utilization=batch_size / 1024,
            curve_accuracy=accuracy,
            sim_time=(i + 1) * (compute + sync),
        )
    return _make


@pytest.fixture
def session_config():
    def _make(**overrides):
        base = dict(episodes=1, steps=2, k=4, timeout=5.0, seed=3, ppo=PPOConfig(hidden=8))
        base.update(overrides)
        return SessionConfig(**base)
    return _make


@pytest.fixture
def forced_params():
    """Policy whose output is (almost surely) the given action index."""
    def _make(index, hidden=8):
        params = zero_params(hidden=hidden)
        params.biases[-1][index] = 50.0
        return params
    return _make
