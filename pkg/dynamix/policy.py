"""
DYNAMIX — Centralized Batch-Size Policy
========================================

One policy π_θ(a | s_local, s_global) shared by every worker. θ is a small
tanh MLP (14 → H → H → 5 logits); the five actions are fixed batch-size
deltas {−100, −25, 0, +25, +100}.

Two update rules over one episode of trajectory records:

  simplified : ascend  mean_t [ log π_θ(a_t|s_t) · Â_t ]
  clipped    : ascend  mean_t [ min(r_t·Â_t, clip(r_t, 1−ε, 1+ε)·Â_t) ]
               with r_t = π_θ(a_t|s_t) / π_θ_old(a_t|s_t)

where Â_t is the discounted reward-to-go G_t minus a baseline (by default a
least-squares fit on the state and the step within the episode), optionally
standardized. Both objectives add an entropy bonus. Gradients are exact
backpropagation through the MLP; θ moves by plain gradient ascent.

Checkpoint format (little-endian):
    magic b"DYNXPOL\\0" | u32 format version | u64 policy version |
    u32 n_layers | (n_layers + 1) × u32 layer dims |
    per layer: W (out × in, row-major f64) then b (out f64)
"""

import enum
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import log_softmax, softmax

from .errors import CheckpointError, ConfigError, ContractViolation, PolicyUpdateError
from .metrics import STATE_DIM
from .reward import rewards_to_go

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"DYNXPOL\x00"
CHECKPOINT_FORMAT = 1
DEFAULT_HIDDEN = 64
LINEAR_BASELINE_MIN_RATIO = 4


# ══════════════════════════════════════════════
# 1. Actions
# ══════════════════════════════════════════════

class ActionDelta(enum.Enum):
    DEC_LARGE = -100
    DEC_SMALL = -25
    NOOP = 0
    INC_SMALL = 25
    INC_LARGE = 100

    @property
    def index(self):
        return ACTIONS.index(self)

    @classmethod
    def from_index(cls, index):
        if not 0 <= index < len(ACTIONS):
            raise ContractViolation(f"action index {index} outside 0..{len(ACTIONS) - 1}")
        return ACTIONS[index]


ACTIONS = (
    ActionDelta.DEC_LARGE,
    ActionDelta.DEC_SMALL,
    ActionDelta.NOOP,
    ActionDelta.INC_SMALL,
    ActionDelta.INC_LARGE,
)
N_ACTIONS = len(ACTIONS)


# ══════════════════════════════════════════════
# 2. Parameters
# ══════════════════════════════════════════════

@dataclass
class PolicyParams:
    weights: list       # W_l with shape (out, in)
    biases: list        # b_l with shape (out,)
    version: int = 0

    @property
    def dims(self):
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    def copy(self):
        return PolicyParams(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.version,
        )

    def frozen(self):
        """Read-only copy, safe to hand to other threads."""
        snap = self.copy()
        for a in snap.weights + snap.biases:
            a.flags.writeable = False
        return snap

    def arrays(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def is_finite(self):
        return all(np.all(np.isfinite(a)) for a in self.arrays())


def init_params(rng, input_dim=STATE_DIM, hidden=DEFAULT_HIDDEN, n_actions=N_ACTIONS):
    """Scaled-normal init; the output layer is shrunk so π starts near uniform."""
    dims = [input_dim, hidden, hidden, n_actions]
    weights, biases = [], []
    for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
        scale = 1.0 / math.sqrt(d_in)
        if i == len(dims) - 2:
            scale *= 0.01
        weights.append(rng.normal(0.0, scale, size=(d_out, d_in)))
        biases.append(np.zeros(d_out))
    return PolicyParams(weights, biases, version=0)


def zero_params(input_dim=STATE_DIM, hidden=DEFAULT_HIDDEN, n_actions=N_ACTIONS):
    dims = [input_dim, hidden, hidden, n_actions]
    return PolicyParams(
        [np.zeros((o, i)) for i, o in zip(dims[:-1], dims[1:])],
        [np.zeros(o) for o in dims[1:]],
        version=0,
    )


# ══════════════════════════════════════════════
# 3. Forward pass and action selection
# ══════════════════════════════════════════════

def _forward_cache(params, states):
    """Activations of every layer for a (N, d) batch; the last entry is the logits."""
    x = np.atleast_2d(np.asarray(states, dtype=float))
    if x.shape[1] != params.dims[0]:
        raise ContractViolation(f"state dimension {x.shape[1]} != policy input {params.dims[0]}")
    if not np.all(np.isfinite(x)):
        raise ContractViolation("non-finite state passed to the policy")
    acts = [x]
    n_layers = len(params.weights)
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = acts[-1] @ w.T + b
        acts.append(z if i == n_layers - 1 else np.tanh(z))
    return acts


def forward(params, state_vector):
    """Logits for one state (shape (5,)) or a batch of states (shape (N, 5))."""
    logits = _forward_cache(params, state_vector)[-1]
    return logits[0] if np.ndim(state_vector) == 1 else logits


def action_distribution(logits):
    return softmax(np.asarray(logits, dtype=float), axis=-1)


def sample_action(probabilities, rng):
    """Inverse-CDF draw over the fixed action order; ties go to the lowest index."""
    p = np.asarray(probabilities, dtype=float)
    u = rng.random()
    index = int(np.searchsorted(np.cumsum(p), u, side="right"))
    index = min(index, N_ACTIONS - 1)
    while p[index] == 0 and index > 0:
        index -= 1
    return ACTIONS[index], float(np.log(p[index]))


def select_action(params, state_vector, rng, greedy=False):
    logits = forward(params, state_vector)
    probs = action_distribution(logits)
    if greedy:
        index = int(np.argmax(probs))
        return ACTIONS[index], float(log_softmax(logits)[index])
    return sample_action(probs, rng)


def log_prob(params, state_vector, action_index):
    return float(log_softmax(forward(params, state_vector))[action_index])


def ppo_ratio(params, params_old, state, action_index):
    """π_θ(a|s) / π_θ_old(a|s)."""
    return math.exp(log_prob(params, state, action_index) - log_prob(params_old, state, action_index))


def clipped_objective(ratio, advantage, epsilon):
    if not 0 < epsilon < 1:
        raise ContractViolation(f"epsilon must lie in (0, 1), got {epsilon}")
    return min(ratio * advantage, float(np.clip(ratio, 1 - epsilon, 1 + epsilon)) * advantage)


# ══════════════════════════════════════════════
# 4. Trajectories
# ══════════════════════════════════════════════

@dataclass
class TrajectoryRecord:
    state: np.ndarray
    action_index: int
    log_prob: float
    worker_id: int
    step: int
    reward: float = None


@dataclass
class Trajectory:
    """One episode of decisions, one record per (worker, step)."""
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def add(self, record):
        if not (math.isfinite(record.log_prob) and record.log_prob <= 0):
            raise ContractViolation(f"bad log-probability {record.log_prob}")
        key = (record.worker_id, record.step)
        if any((r.worker_id, r.step) == key for r in self.records):
            raise ContractViolation(f"duplicate record for worker {record.worker_id} step {record.step}")
        self.records.append(record)

    def credit(self, worker_id, step, reward):
        for r in reversed(self.records):
            if r.worker_id == worker_id and r.step == step:
                r.reward = float(reward)
                return r
        raise ContractViolation(f"no trajectory record for worker {worker_id} step {step}")

    def credited(self):
        return [r for r in self.records if r.reward is not None]

    def by_worker(self):
        out = {}
        for r in self.records:
            out.setdefault(r.worker_id, []).append(r)
        for recs in out.values():
            recs.sort(key=lambda r: r.step)
        return out


# ══════════════════════════════════════════════
# 5. Objective, gradient and update
# ══════════════════════════════════════════════

class UpdateMode(str, enum.Enum):
    SIMPLIFIED = "simplified"
    CLIPPED = "clipped"


@dataclass(frozen=True)
class PPOConfig:
    epsilon: float = 0.2
    learning_rate: float = 0.05
    entropy_bonus: float = 0.01
    mode: UpdateMode = UpdateMode.SIMPLIFIED
    epochs: int = 10
    max_grad_norm: float = 5.0          # None disables clipping
    baseline: str = "linear"            # linear | batch | step | none
    normalize_advantages: bool = True
    hidden: int = DEFAULT_HIDDEN

    def __post_init__(self):
        object.__setattr__(self, "mode", UpdateMode(self.mode))
        if not 0 < self.epsilon < 1:
            raise ConfigError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.entropy_bonus < 0:
            raise ConfigError("entropy_bonus must be >= 0")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.baseline not in ("linear", "batch", "step", "none"):
            raise ConfigError(f"unknown baseline {self.baseline!r}")


@dataclass
class UpdateBatch:
    states: np.ndarray
    actions: np.ndarray
    advantages: np.ndarray
    old_log_probs: np.ndarray


def _linear_baseline(returns, states, steps):
    """Least-squares fit of the centered returns on state and step-fraction features.

    Falls back to the batch mean when there are too few records to fit
    without absorbing the returns themselves.
    """
    centered = returns - returns.mean()
    frac = steps / max(float(steps.max()), 1.0)
    features = np.column_stack([states, frac, frac ** 2, frac ** 3])
    if len(returns) < LINEAR_BASELINE_MIN_RATIO * features.shape[1]:
        return centered
    features = features - features.mean(axis=0)
    coef, *_ = np.linalg.lstsq(features, centered, rcond=None)
    return centered - features @ coef


def compute_advantages(trajectory, gamma, config):
    """Reward-to-go per worker, minus the configured baseline, in record order."""
    records, returns, steps = [], [], []
    for _, recs in sorted(trajectory.by_worker().items()):
        recs = [r for r in recs if r.reward is not None]
        if not recs:
            continue
        g = rewards_to_go([r.reward for r in recs], gamma)
        records.extend(recs)
        returns.extend(g)
        steps.extend(r.step for r in recs)
    returns = np.asarray(returns, dtype=float)
    steps = np.asarray(steps)
    if config.baseline == "linear" and records:
        adv = _linear_baseline(returns, np.stack([r.state for r in records]), steps.astype(float))
    elif config.baseline == "batch":
        adv = returns - returns.mean()
    elif config.baseline == "step":
        adv = returns.copy()
        for s in np.unique(steps):
            mask = steps == s
            adv[mask] -= returns[mask].mean()
    else:
        adv = returns.copy()
    if config.normalize_advantages and adv.size > 1:
        std = adv.std()
        if std > 1e-12:
            adv = adv / std
    return records, returns, adv


def build_update_batch(params_old, trajectory, gamma, config):
    records, _, adv = compute_advantages(trajectory, gamma, config)
    if not records:
        raise ContractViolation("update needs at least one credited trajectory record")
    states = np.stack([r.state for r in records])
    actions = np.array([r.action_index for r in records], dtype=int)
    old_lp = log_softmax(forward(params_old, states), axis=-1)[np.arange(len(actions)), actions]
    return UpdateBatch(states, actions, adv, old_lp)


def surrogate_objective(params, batch, config):
    """Scalar objective being ascended (policy term + entropy bonus)."""
    return policy_gradient(params, batch, config, want_grad=False)[0]


def policy_gradient(params, batch, config, want_grad=True):
    """Objective value and its exact gradient w.r.t. every weight and bias."""
    acts = _forward_cache(params, batch.states)
    logits = acts[-1]
    n = logits.shape[0]
    rows = np.arange(n)
    logp_all = log_softmax(logits, axis=-1)
    probs = np.exp(logp_all)
    logp = logp_all[rows, batch.actions]
    adv = batch.advantages

    onehot = np.zeros_like(probs)
    onehot[rows, batch.actions] = 1.0
    dlogp = onehot - probs                      # ∂ log π(a) / ∂ logits

    if config.mode is UpdateMode.CLIPPED:
        ratio = np.exp(logp - batch.old_log_probs)
        clipped = np.clip(ratio, 1 - config.epsilon, 1 + config.epsilon)
        unclipped_term = ratio * adv
        clipped_term = clipped * adv
        terms = np.minimum(unclipped_term, clipped_term)
        active = unclipped_term <= clipped_term
        coef = np.where(active, adv * ratio, 0.0)
    else:
        terms = logp * adv
        coef = adv

    entropy = -(probs * logp_all).sum(axis=1)
    objective = float(terms.mean() + config.entropy_bonus * entropy.mean())
    if not want_grad:
        return objective, None

    dH = -probs * (logp_all + entropy[:, None])  # ∂H / ∂ logits
    delta = (coef[:, None] * dlogp + config.entropy_bonus * dH) / n

    grads_w = [None] * len(params.weights)
    grads_b = [None] * len(params.biases)
    for layer in range(len(params.weights) - 1, -1, -1):
        grads_w[layer] = delta.T @ acts[layer]
        grads_b[layer] = delta.sum(axis=0)
        if layer > 0:
            delta = (delta @ params.weights[layer]) * (1.0 - acts[layer] ** 2)
    return objective, (grads_w, grads_b)


def _global_norm(grads_w, grads_b):
    return math.sqrt(sum(float((g ** 2).sum()) for g in grads_w + grads_b))


def update_policy(params, trajectories, coeffs, config):
    """One policy update over an episode's trajectory; returns new params (version + 1)."""
    if isinstance(trajectories, Trajectory):
        trajectories = [trajectories]
    merged = Trajectory()
    for t in trajectories:
        merged.records.extend(t.records)
    if not merged.credited():
        raise ContractViolation("update_policy needs at least one credited trajectory record")
    if not all(math.isfinite(r.reward) for r in merged.credited()):
        raise PolicyUpdateError("non-finite reward in trajectory")

    old = params.copy()
    batch = build_update_batch(old, merged, coeffs.gamma, config)
    new = params.copy()
    objective = float("nan")
    for epoch in range(config.epochs):
        objective, (gw, gb) = policy_gradient(new, batch, config)
        norm = _global_norm(gw, gb)
        if not math.isfinite(norm):
            raise PolicyUpdateError(f"non-finite gradient at epoch {epoch} (version {params.version})")
        scale = config.learning_rate
        if config.max_grad_norm is not None and norm > config.max_grad_norm:
            scale *= config.max_grad_norm / norm
        for w, g in zip(new.weights, gw):
            w += scale * g
        for b, g in zip(new.biases, gb):
            b += scale * g
    if not new.is_finite():
        raise PolicyUpdateError(f"update produced non-finite parameters (version {params.version})")
    new.version = params.version + 1
    logger.info("policy v%d: %d records, objective=%.4f", new.version, len(batch.actions), objective)
    return new


# ══════════════════════════════════════════════
# 6. Checkpoints
# ══════════════════════════════════════════════

def save_checkpoint(params, path):
    dims = params.dims
    header = CHECKPOINT_MAGIC + struct.pack("<IQI", CHECKPOINT_FORMAT, params.version, len(params.weights))
    header += struct.pack(f"<{len(dims)}I", *dims)
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in params.arrays())
    Path(path).write_bytes(header + body)


def load_checkpoint(path, expected_dims=None):
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if raw[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a DYNAMIX policy checkpoint (bad magic)")
    off = len(CHECKPOINT_MAGIC)
    try:
        fmt, version, n_layers = struct.unpack_from("<IQI", raw, off)
        off += struct.calcsize("<IQI")
        if fmt != CHECKPOINT_FORMAT:
            raise CheckpointError(f"{path}: checkpoint format {fmt}, expected {CHECKPOINT_FORMAT}")
        dims = list(struct.unpack_from(f"<{n_layers + 1}I", raw, off))
        off += 4 * (n_layers + 1)
    except struct.error as e:
        raise CheckpointError(f"{path}: truncated header") from e
    if expected_dims is not None and list(expected_dims) != dims:
        raise CheckpointError(f"{path}: layer dims {dims} do not match expected {list(expected_dims)}")
    expected_size = off + 8 * sum(o * i + o for i, o in zip(dims[:-1], dims[1:]))
    if len(raw) != expected_size:
        raise CheckpointError(f"{path}: size {len(raw)} bytes, expected {expected_size}")
    weights, biases = [], []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        w = np.frombuffer(raw, dtype="<f8", count=d_out * d_in, offset=off).reshape(d_out, d_in)
        off += 8 * d_out * d_in
        b = np.frombuffer(raw, dtype="<f8", count=d_out, offset=off)
        off += 8 * d_out
        weights.append(w.astype(float))
        biases.append(b.astype(float))
    params = PolicyParams(weights, biases, version=int(version))
    if not params.is_finite():
        raise CheckpointError(f"{path}: checkpoint holds non-finite parameters")
    return params
