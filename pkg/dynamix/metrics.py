"""
DYNAMIX — Window Aggregation and State Vectors
===============================================

Every k iterations a worker folds its IterationOutcomes into a LocalState
(network, system and training-statistics features). The arbitrator keeps a
single GlobalState per decision step, shared by every worker's decision,
and concatenates both into the 14-feature policy input.

Accuracy gain ΔA: z-score the batch accuracies of the window, take sliding
means of width w, and return mean(last window) − mean(first window).
"""

import math
from dataclasses import asdict, dataclass, fields

import numpy as np
import pandas as pd
from scipy import stats

from .config import BATCH_MAX, BATCH_MIN
from .errors import ContractViolation

LOCAL_FEATURES = (
    "Tp", "Rtx", "cpu_ratio", "mem_util", "A_bar", "sigma_batch",
    "delta_A", "T_iter", "sigma_norm", "sigma_norm_sq", "batch_size_norm",
)
GLOBAL_FEATURES = ("loss_trend", "val_accuracy_proxy", "progress")
FEATURE_NAMES = LOCAL_FEATURES + GLOBAL_FEATURES
STATE_DIM = len(FEATURE_NAMES)


def encode_batch_size(batch_size):
    """log2(B) − 5 scaled so that 32 → 0 and 1024 → 1."""
    span = math.log2(BATCH_MAX) - math.log2(BATCH_MIN)
    return (math.log2(batch_size) - math.log2(BATCH_MIN)) / span


def default_gain_window(k):
    # max(2, k/4), shrunk so that first and last windows fit in short series
    return max(1, min(max(2, k // 4), k // 2))


@dataclass(frozen=True)
class AggregateWindow:
    worker_id: int
    k: int
    outcomes: tuple

    def __post_init__(self):
        if self.k < 2:
            raise ContractViolation(f"window length k must be >= 2, got {self.k}")
        if len(self.outcomes) != self.k:
            raise ContractViolation(f"window holds {len(self.outcomes)} outcomes, expected k={self.k}")
        idx = [o.iteration_index for o in self.outcomes]
        if idx != list(range(idx[0], idx[0] + self.k)):
            raise ContractViolation(f"window iteration indices are not contiguous: {idx}")
        if any(o.worker_id != self.worker_id for o in self.outcomes):
            raise ContractViolation(f"window for worker {self.worker_id} holds foreign outcomes")


@dataclass(frozen=True)
class LocalState:
    Tp: float
    Rtx: float
    cpu_ratio: float
    mem_util: float
    A_bar: float
    sigma_batch: float
    delta_A: float
    T_iter: float
    sigma_norm: float
    sigma_norm_sq: float
    batch_size_norm: float

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, doc):
        return cls(**{f.name: float(doc[f.name]) for f in fields(cls)})


@dataclass(frozen=True)
class GlobalState:
    loss_trend: float
    val_accuracy_proxy: float
    progress: float

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, doc):
        return cls(**{f.name: float(doc[f.name]) for f in fields(cls)})


@dataclass(frozen=True)
class StateNormalizers:
    """Divisors applied feature-wise before the policy sees the state."""
    Tp: float = 1.0e9
    Rtx: float = 100.0
    cpu_ratio: float = 4.0       # used when the worker reports no core count
    mem_util: float = 1.0
    A_bar: float = 1.0
    sigma_batch: float = 1.0
    delta_A: float = 4.0
    T_iter: float = 1.0
    sigma_norm: float = 1.0
    sigma_norm_sq: float = 1.0
    batch_size_norm: float = 1.0
    loss_trend: float = 1.0
    val_accuracy_proxy: float = 1.0
    progress: float = 1.0

    def __post_init__(self):
        for name in FEATURE_NAMES:
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ContractViolation(f"normalizer {name} must be finite and > 0, got {v}")

    def vector(self):
        return np.array([getattr(self, n) for n in FEATURE_NAMES], dtype=float)

    @classmethod
    def unit(cls):
        return cls(**{n: 1.0 for n in FEATURE_NAMES})


# ══════════════════════════════════════════════
# Aggregation
# ══════════════════════════════════════════════

def accuracy_gain(accuracies, window_w):
    """ΔA over an ordered accuracy series (z-score, sliding means, last − first)."""
    if window_w < 1:
        raise ContractViolation(f"window_w must be >= 1, got {window_w}")
    acc = np.asarray(accuracies, dtype=float)
    if acc.size < 2 * window_w:
        raise ContractViolation(f"series of {acc.size} too short for window {window_w}")
    if np.std(acc) == 0:
        return 0.0
    z = stats.zscore(acc)
    sliding = np.convolve(z, np.ones(window_w) / window_w, mode="valid")
    return float(sliding[-1] - sliding[0])


def aggregate_window(window, gain_window=None):
    """Fold k IterationOutcomes into the worker's LocalState."""
    out = window.outcomes
    w = default_gain_window(window.k) if gain_window is None else gain_window
    acc = np.array([o.batch_accuracy for o in out])
    wall = np.array([o.wall_time for o in out])
    cpu = np.array([o.cpu_time_ratio for o in out]) * wall
    return LocalState(
        Tp=float(np.mean([o.throughput_bytes for o in out])),
        Rtx=float(sum(o.retransmissions for o in out)),
        cpu_ratio=float(cpu.sum() / wall.sum()),
        mem_util=float(np.mean([o.memory_utilization for o in out])),
        A_bar=float(acc.mean()),
        sigma_batch=float(acc.std()),
        delta_A=accuracy_gain(acc, w),
        T_iter=float(wall.mean()),
        sigma_norm=float(np.mean([o.grad_norm_std for o in out])),
        sigma_norm_sq=float(np.mean([o.grad_norm_var for o in out])),
        batch_size_norm=encode_batch_size(out[-1].batch_size),
    )


def build_state_vector(local, global_state, normalizers=None, cores=None):
    """Fixed-order concatenation (11 local + 3 global), divided by the normalizers.

    When the reporting worker's core count is known it replaces the
    cpu_ratio divisor, so a saturated worker reads 1.0 whatever its size.
    """
    norm = normalizers or StateNormalizers()
    raw = np.array(
        [getattr(local, n) for n in LOCAL_FEATURES]
        + [getattr(global_state, n) for n in GLOBAL_FEATURES],
        dtype=float,
    )
    if not np.all(np.isfinite(raw)):
        bad = [n for n, v in zip(FEATURE_NAMES, raw) if not math.isfinite(v)]
        raise ContractViolation(f"non-finite state feature(s): {bad}")
    divisors = norm.vector()
    if cores is not None:
        if not (math.isfinite(cores) and cores > 0):
            raise ContractViolation(f"core count must be finite and > 0, got {cores}")
        divisors[FEATURE_NAMES.index("cpu_ratio")] = float(cores)
    return raw / divisors


# ══════════════════════════════════════════════
# Global state
# ══════════════════════════════════════════════

class GlobalStateTracker:
    """Per-episode global loss history; one snapshot per decision step."""

    def __init__(self, steps_per_episode, trend_windows=5):
        if steps_per_episode < 1:
            raise ContractViolation("steps_per_episode must be >= 1")
        self.steps_per_episode = steps_per_episode
        self.trend_windows = trend_windows
        self.reset()

    def reset(self):
        self.losses = []
        self._last_progress = 0.0

    def update(self, step, mean_accuracy):
        self.losses.append(1.0 - mean_accuracy)
        recent = self.losses[-self.trend_windows:]
        slope = stats.linregress(np.arange(len(recent)), recent).slope if len(recent) >= 2 else 0.0
        progress = min(1.0, step / self.steps_per_episode)
        if progress < self._last_progress:
            raise ContractViolation(f"progress went backwards at step {step}")
        self._last_progress = progress
        return GlobalState(
            loss_trend=float(slope),
            val_accuracy_proxy=float(mean_accuracy),
            progress=progress,
        )


def time_to_threshold(times, accuracies, threshold, window=5):
    """First time at which the rolling mean accuracy reaches `threshold` (NaN if never)."""
    acc = pd.Series(np.asarray(accuracies, dtype=float))
    smooth = acc.rolling(window=window, min_periods=1).mean().to_numpy()
    hit = np.nonzero(smooth >= threshold)[0]
    if hit.size == 0:
        return float("nan")
    return float(np.asarray(times, dtype=float)[hit[0]])
