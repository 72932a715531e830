"""
DYNAMIX — Simulated Heterogeneous BSP Cluster
==============================================

Deterministic stand-in for a data-parallel training cluster. Every worker
processes one batch per iteration; all workers meet at a global barrier
(bulk-synchronous parallel), so the slowest worker sets the iteration time:

    T_iter = max_i (overhead_i + B_i / rate_i) + payload / (Tp_base · min_i m_i)

Synthetic accuracy follows a saturating curve over cumulative samples s with
a batch-dependent asymptote (large batches generalize worse):

    asymptote(B) = clip(a0 − a1 · max(0, log2(B / B*)), 0, 1)
    A(B, s)      = asymptote(B) · (1 − exp(−s / τ))

Batch accuracy and gradient statistics carry zero-mean noise that shrinks
as 1/√B. Network congestion m_i ∈ [0.1, 1] is a reflecting random walk per
worker link.

See supplementary/S1_simulator_calibration.md for the default calibration.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .config import BATCH_MAX, BATCH_MIN
from .errors import ConfigError, ContractViolation

logger = logging.getLogger(__name__)

MULTIPLIER_MIN = 0.1
MULTIPLIER_MAX = 1.0
CPU_JITTER = 0.05


# ══════════════════════════════════════════════
# 1. Profiles
# ══════════════════════════════════════════════

@dataclass(frozen=True)
class WorkerProfile:
    worker_id: int
    compute_rate: float                 # samples / second
    fixed_overhead: float = 0.0         # seconds / iteration
    memory_capacity: int = BATCH_MAX    # largest batch that fits
    cores: float = 4.0

    def __post_init__(self):
        if not self.compute_rate > 0:
            raise ConfigError(f"worker {self.worker_id}: compute_rate must be > 0, got {self.compute_rate}")
        if self.fixed_overhead < 0:
            raise ConfigError(f"worker {self.worker_id}: fixed_overhead must be >= 0, got {self.fixed_overhead}")
        if self.memory_capacity < 1:
            raise ConfigError(f"worker {self.worker_id}: memory_capacity must be >= 1")
        if not self.cores >= 1:
            raise ConfigError(f"worker {self.worker_id}: cores must be >= 1")


@dataclass(frozen=True)
class NetworkProfile:
    base_throughput: float = 1.25e9     # bytes / second at multiplier 1.0
    payload_bytes: float = 5.0e7        # gradient bytes exchanged per iteration
    retx_rate: float = 50.0             # retransmissions / second at full congestion
    congestion_step: float = 0.05       # random-walk step per sampling window
    initial_multiplier: float = 1.0

    def __post_init__(self):
        if not self.base_throughput > 0:
            raise ConfigError("network.base_throughput must be > 0")
        if self.payload_bytes < 0 or self.retx_rate < 0 or self.congestion_step < 0:
            raise ConfigError("network payload_bytes, retx_rate and congestion_step must be >= 0")
        if not MULTIPLIER_MIN <= self.initial_multiplier <= MULTIPLIER_MAX:
            raise ConfigError(
                f"network.initial_multiplier must lie in [{MULTIPLIER_MIN}, {MULTIPLIER_MAX}], "
                f"got {self.initial_multiplier}"
            )


@dataclass(frozen=True)
class TrainingCurveModel:
    a0: float = 0.82            # plateau at or below the pivot batch size
    a1: float = 0.03            # asymptote loss per doubling above B*
    B_star: int = 64
    tau: float = 2.0e5          # samples
    noise_scale: float = 0.5
    grad_dim: int = 1000

    def __post_init__(self):
        if not 0 < self.a0 <= 1:
            raise ConfigError(f"curve.a0 must lie in (0, 1], got {self.a0}")
        if self.a1 < 0:
            raise ConfigError(f"curve.a1 must be >= 0, got {self.a1}")
        if not 32 <= self.B_star <= 1024:
            raise ConfigError(f"curve.B_star must lie in [32, 1024], got {self.B_star}")
        if not self.tau > 0:
            raise ConfigError(f"curve.tau must be > 0, got {self.tau}")
        if self.noise_scale < 0:
            raise ConfigError(f"curve.noise_scale must be >= 0, got {self.noise_scale}")
        if self.grad_dim < 1:
            raise ConfigError("curve.grad_dim must be >= 1")

    def scaled(self, factor):
        """Deeper-model variant: slower saturation and a steeper large-batch penalty."""
        return replace(self, tau=self.tau * factor, a1=self.a1 * factor)


@dataclass(frozen=True)
class ClusterConfig:
    workers: tuple
    network: NetworkProfile = field(default_factory=NetworkProfile)
    curve: TrainingCurveModel = field(default_factory=TrainingCurveModel)
    seed: int = 0
    zero_noise: bool = False

    def __post_init__(self):
        if not self.workers:
            raise ConfigError("cluster needs at least one worker")
        ids = [w.worker_id for w in self.workers]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate worker_id in cluster: {sorted(ids)}")
        object.__setattr__(self, "workers", tuple(sorted(self.workers, key=lambda w: w.worker_id)))

    @property
    def worker_ids(self):
        return [w.worker_id for w in self.workers]

    def profile(self, worker_id):
        for w in self.workers:
            if w.worker_id == worker_id:
                return w
        raise ConfigError(f"unknown worker id {worker_id}")

    def effective_curve(self):
        return replace(self.curve, noise_scale=0.0) if self.zero_noise else self.curve

    def to_dict(self):
        return {
            "seed": self.seed,
            "zero_noise": self.zero_noise,
            "workers": [asdict(w) for w in self.workers],
            "network": asdict(self.network),
            "curve": asdict(self.curve),
        }

    @classmethod
    def from_dict(cls, doc):
        allowed = {"seed", "zero_noise", "workers", "network", "curve"}
        unknown = set(doc) - allowed
        if unknown:
            raise ConfigError(f"unknown cluster config keys: {sorted(unknown)}")
        if "workers" not in doc:
            raise ConfigError("cluster config is missing 'workers'")
        try:
            workers = tuple(WorkerProfile(**w) for w in doc["workers"])
            network = NetworkProfile(**doc.get("network", {}))
            curve = TrainingCurveModel(**doc.get("curve", {}))
        except TypeError as e:
            raise ConfigError(f"bad cluster config field: {e}") from e
        return cls(
            workers=workers,
            network=network,
            curve=curve,
            seed=int(doc.get("seed", 0)),
            zero_noise=bool(doc.get("zero_noise", False)),
        )


def load_cluster_config(path):
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise ConfigError(f"cluster config not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"cluster config {path} is not valid JSON: {e}") from e
    return ClusterConfig.from_dict(doc)


def default_cluster(n_workers=4, seed=0, curve=None, zero_noise=False):
    """Heterogeneous cluster alternating a fast and a slow accelerator class."""
    workers = []
    for i in range(n_workers):
        if i % 2 == 0:
            workers.append(WorkerProfile(i, compute_rate=4000.0, fixed_overhead=0.01, cores=8.0))
        else:
            workers.append(WorkerProfile(i, compute_rate=2000.0, fixed_overhead=0.02, cores=4.0))
    return ClusterConfig(
        workers=tuple(workers),
        curve=curve or TrainingCurveModel(),
        seed=seed,
        zero_noise=zero_noise,
    )


# ══════════════════════════════════════════════
# 2. Curve, network and gradient models
# ══════════════════════════════════════════════

def accuracy_asymptote(model, batch_size):
    """a0 − a1·max(0, log2(B/B*)), clamped to [0, 1]."""
    penalty = model.a1 * max(0.0, math.log2(batch_size / model.B_star))
    return min(1.0, max(0.0, model.a0 - penalty))


def accuracy_curve(model, batch_size, samples):
    return accuracy_asymptote(model, batch_size) * (1.0 - math.exp(-samples / model.tau))


def step_multiplier(multiplier, step, rng):
    """One reflecting ±step move of the congestion multiplier."""
    if step == 0:
        return multiplier
    m = multiplier + (step if rng.random() < 0.5 else -step)
    if m > MULTIPLIER_MAX:
        m = 2 * MULTIPLIER_MAX - m
    elif m < MULTIPLIER_MIN:
        m = 2 * MULTIPLIER_MIN - m
    return min(MULTIPLIER_MAX, max(MULTIPLIER_MIN, m))


def sample_network_metrics(profile, window_seconds, rng, multiplier=None):
    """
    Throughput and retransmissions observed on one link over a window.

    Returns (throughput, retransmissions, next_multiplier). Retransmissions
    are Poisson with mean retx_rate · window · (1 − multiplier); the
    multiplier then takes one random-walk step.
    """
    if not window_seconds > 0:
        raise ContractViolation(f"window_seconds must be > 0, got {window_seconds}")
    m = profile.initial_multiplier if multiplier is None else multiplier
    throughput = profile.base_throughput * m
    mean_retx = profile.retx_rate * window_seconds * (1.0 - m)
    retransmissions = int(rng.poisson(mean_retx)) if mean_retx > 0 else 0
    return throughput, retransmissions, step_multiplier(m, profile.congestion_step, rng)


def synth_gradient_stats(model, batch_size, rng):
    """(σ_norm, σ²_norm) for one iteration: noise_scale/√B · √(χ²_d / d)."""
    if batch_size < 1:
        raise ContractViolation(f"batch_size must be >= 1, got {batch_size}")
    if model.noise_scale == 0:
        return 0.0, 0.0
    spread = math.sqrt(rng.chisquare(model.grad_dim) / model.grad_dim)
    sigma = model.noise_scale / math.sqrt(batch_size) * spread
    return sigma, sigma * sigma


# ══════════════════════════════════════════════
# 3. BSP iteration
# ══════════════════════════════════════════════

@dataclass(frozen=True)
class IterationOutcome:
    worker_id: int
    iteration_index: int
    batch_size: int
    compute_time: float
    sync_time: float
    batch_accuracy: float
    grad_norm_std: float
    grad_norm_var: float
    throughput_bytes: float
    retransmissions: int
    cpu_time_ratio: float
    memory_utilization: float
    curve_accuracy: float       # noise-free value of the accuracy curve
    sim_time: float             # cluster clock at the end of the iteration

    @property
    def wall_time(self):
        return self.compute_time + self.sync_time


@dataclass
class ClusterState:
    config: ClusterConfig
    iteration: int = 0
    sim_time: float = 0.0
    total_samples: int = 0
    worker_samples: dict = field(default_factory=dict)
    batch_sizes: dict = field(default_factory=dict)
    multipliers: dict = field(default_factory=dict)

    @classmethod
    def initial(cls, config):
        ids = config.worker_ids
        return cls(
            config=config,
            worker_samples={i: 0 for i in ids},
            batch_sizes={},
            multipliers={i: config.network.initial_multiplier for i in ids},
        )


def _check_batch_sizes(state, batch_sizes):
    known = set(state.config.worker_ids)
    unknown = set(batch_sizes) - known
    if unknown:
        raise ConfigError(f"unknown worker id(s) {sorted(unknown)}")
    missing = known - set(batch_sizes)
    if missing:
        raise ContractViolation(f"no batch size for worker(s) {sorted(missing)}")
    for wid, b in batch_sizes.items():
        if not BATCH_MIN <= b <= BATCH_MAX:
            raise ContractViolation(f"worker {wid}: batch size {b} outside [{BATCH_MIN}, {BATCH_MAX}]")


def step_iteration(state, batch_sizes, rng):
    """Advance the cluster by one BSP iteration; mutates `state`."""
    _check_batch_sizes(state, batch_sizes)
    config = state.config
    curve = config.effective_curve()
    jitter = 0.0 if config.zero_noise else CPU_JITTER
    net = config.network

    compute = {}
    for w in config.workers:
        compute[w.worker_id] = w.fixed_overhead + batch_sizes[w.worker_id] / w.compute_rate
    slowest_link = min(state.multipliers.values())
    comm = net.payload_bytes / (net.base_throughput * slowest_link)
    barrier = max(compute.values()) + comm
    state.sim_time += barrier

    outcomes = []
    for w in config.workers:
        wid = w.worker_id
        b = int(batch_sizes[wid])
        state.worker_samples[wid] += b
        state.total_samples += b

        clean = accuracy_curve(curve, b, state.worker_samples[wid])
        noise = rng.normal(0.0, curve.noise_scale / math.sqrt(b)) if curve.noise_scale > 0 else 0.0
        accuracy = min(1.0, max(0.0, clean + noise))
        sigma, sigma_sq = synth_gradient_stats(curve, b, rng)

        mem_util = min(1.0, b / w.memory_capacity)
        cores_used = 1.0 + (w.cores - 1.0) * b / BATCH_MAX
        cpu_ratio = max(0.05, cores_used + (rng.normal(0.0, jitter) if jitter else 0.0))

        throughput, retx, state.multipliers[wid] = sample_network_metrics(
            net, barrier, rng, state.multipliers[wid]
        )
        outcomes.append(IterationOutcome(
            worker_id=wid,
            iteration_index=state.iteration,
            batch_size=b,
            compute_time=compute[wid],
            sync_time=barrier - compute[wid],
            batch_accuracy=accuracy,
            grad_norm_std=sigma,
            grad_norm_var=sigma_sq,
            throughput_bytes=throughput,
            retransmissions=retx,
            cpu_time_ratio=cpu_ratio,
            memory_utilization=mem_util,
            curve_accuracy=clean,
            sim_time=state.sim_time,
        ))
    state.batch_sizes = {wid: int(b) for wid, b in batch_sizes.items()}
    state.iteration += 1
    return outcomes


class ClusterSimulator:
    """A ClusterState plus the RNG that drives it; one instance per session."""

    def __init__(self, config):
        self.config = config
        self.reset()

    def reset(self):
        self.rng = np.random.default_rng(self.config.seed)
        self.state = ClusterState.initial(self.config)
        logger.debug("simulator reset: %d workers, seed=%d", len(self.config.workers), self.config.seed)

    def step(self, batch_sizes):
        return step_iteration(self.state, batch_sizes, self.rng)

    def model_accuracy(self):
        """Noise-free curve value averaged over workers at their current batch size."""
        curve = self.config.curve
        if not self.state.batch_sizes:
            return 0.0
        return float(np.mean([
            accuracy_curve(curve, self.state.batch_sizes[wid], self.state.worker_samples[wid])
            for wid in self.config.worker_ids
        ]))


def run_to_sample_budget(config, batch_size, budget):
    """
    Static run at one batch size until every worker has seen `budget` samples.

    Returns (terminal noise-free accuracy, elapsed simulated seconds).
    """
    sim = ClusterSimulator(config)
    sizes = {wid: batch_size for wid in config.worker_ids}
    n_iter = math.ceil(budget / batch_size)
    for _ in range(n_iter):
        sim.step(sizes)
    return sim.model_accuracy(), sim.state.sim_time
