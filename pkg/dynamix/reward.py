"""
DYNAMIX — Reward Functions
===========================

Per-decision rewards for the two training regimes and the discounted return:

    r_SGD      = Ā + α·max(0, ΔA) − β·T_iter − δ·(log2 B − 5)
    r_adaptive = r_SGD − η·(σ²_norm + σ_norm)
    J          = Σ_t γ^t · r_t

The constant 5 is log2 of the smallest admissible batch (32), so the
regularization term vanishes there.
"""

import enum
import math
from dataclasses import dataclass, field, replace

from .config import BATCH_MAX, BATCH_MIN
from .errors import ConfigError, ContractViolation


class Regime(str, enum.Enum):
    SGD = "sgd"
    ADAPTIVE = "adaptive"


@dataclass(frozen=True)
class RewardCoefficients:
    alpha: float = 0.1
    beta: float = 0.1
    delta: float = 0.05
    eta: float = 0.5
    gamma: float = 0.99

    def __post_init__(self):
        for name in ("alpha", "beta", "delta", "eta"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ConfigError(f"reward coefficient {name} must be finite and >= 0, got {v}")
        if not 0 <= self.gamma <= 1:
            raise ConfigError(f"gamma must lie in [0, 1], got {self.gamma}")

    def with_overrides(self, overrides):
        unknown = set(overrides) - {"alpha", "beta", "delta", "eta", "gamma"}
        if unknown:
            raise ConfigError(f"unknown reward coefficient(s): {sorted(unknown)}")
        return replace(self, **{k: float(v) for k, v in overrides.items()})


@dataclass(frozen=True)
class RewardSample:
    step_index: int
    worker_id: int
    regime: Regime
    value: float
    components: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "step": self.step_index,
            "worker_id": self.worker_id,
            "regime": self.regime.value,
            "value": self.value,
            **{f"r_{k}": v for k, v in self.components.items()},
        }


def _check_inputs(T_iter, batch_size):
    if not BATCH_MIN <= batch_size <= BATCH_MAX:
        raise ContractViolation(f"batch size {batch_size} outside [{BATCH_MIN}, {BATCH_MAX}]")
    if not T_iter > 0:
        raise ContractViolation(f"T_iter must be > 0, got {T_iter}")


def _sample(components, regime, step_index, worker_id):
    # value is the left-to-right sum of the components, so it reconstructs exactly
    value = 0.0
    for v in components.values():
        value += v
    return RewardSample(step_index, worker_id, regime, value, components)


def _shared_terms(A_bar, delta_A, T_iter, batch_size, coeffs):
    return {
        "accuracy": float(A_bar),
        "gain": coeffs.alpha * max(0.0, delta_A),
        "time": -coeffs.beta * T_iter,
        "regularization": -coeffs.delta * (math.log2(batch_size) - 5),
    }


def reward_sgd(A_bar, delta_A, T_iter, batch_size, coeffs, step_index=0, worker_id=0):
    _check_inputs(T_iter, batch_size)
    components = _shared_terms(A_bar, delta_A, T_iter, batch_size, coeffs)
    components["normalization"] = 0.0
    return _sample(components, Regime.SGD, step_index, worker_id)


def reward_adaptive(A_bar, delta_A, T_iter, sigma_norm, sigma_norm_sq, batch_size, coeffs,
                    step_index=0, worker_id=0):
    _check_inputs(T_iter, batch_size)
    if sigma_norm < 0:
        raise ContractViolation(f"sigma_norm must be >= 0, got {sigma_norm}")
    components = _shared_terms(A_bar, delta_A, T_iter, batch_size, coeffs)
    components["normalization"] = -coeffs.eta * (sigma_norm_sq + sigma_norm)
    return _sample(components, Regime.ADAPTIVE, step_index, worker_id)


def compute_reward(local, batch_size, coeffs, regime, step_index=0, worker_id=0, t_iter_scale=1.0):
    """Reward for one worker's window; T_iter enters in normalized seconds."""
    t_iter = local.T_iter / t_iter_scale
    if Regime(regime) is Regime.ADAPTIVE:
        return reward_adaptive(local.A_bar, local.delta_A, t_iter, local.sigma_norm,
                               local.sigma_norm_sq, batch_size, coeffs, step_index, worker_id)
    return reward_sgd(local.A_bar, local.delta_A, t_iter, batch_size, coeffs, step_index, worker_id)


def discounted_return(rewards, gamma):
    """Σ_t γ^t · r_t, t starting at 0."""
    total = 0.0
    for t, r in enumerate(rewards):
        total += gamma ** t * r
    return total


def rewards_to_go(rewards, gamma):
    """G_t = r_t + γ·G_{t+1} for every position of an ordered reward list."""
    out = [0.0] * len(rewards)
    running = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        running = rewards[t] + gamma * running
        out[t] = running
    return out
