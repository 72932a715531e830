import math

import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from dynamix.errors import ConfigError, ContractViolation
from dynamix.metrics import LocalState
from dynamix.reward import (
    Regime,
    RewardCoefficients,
    compute_reward,
    discounted_return,
    reward_adaptive,
    reward_sgd,
    rewards_to_go,
)

COEFFS = RewardCoefficients(alpha=2.0, beta=0.5, delta=0.05, eta=0.5, gamma=0.99)

accuracy = st.floats(0.0, 1.0)
gain = st.floats(-5.0, 5.0)
t_iter = st.floats(1e-3, 10.0)
batch = st.integers(32, 1024)
sigma = st.floats(0.0, 1.0)
coeffs = st.builds(
    RewardCoefficients,
    alpha=st.floats(0.0, 5.0), beta=st.floats(0.0, 5.0), delta=st.floats(0.0, 1.0),
    eta=st.floats(0.0, 5.0), gamma=st.floats(0.0, 1.0),
)


def brute_sgd(A, dA, T, B, c):
    return A + c.alpha * max(0.0, dA) - c.beta * T - c.delta * (math.log2(B) - 5)


def test_reward_sgd_hand_example():
    r = reward_sgd(0.5, 0.1, 0.2, 64, COEFFS)
    assert r.value == pytest.approx(0.5 + 0.2 - 0.1 - 0.05, abs=1e-12)
    assert r.regime is Regime.SGD


def test_reward_sgd_worked_example():
    c = RewardCoefficients(alpha=1.0, beta=0.4, delta=0.05)
    assert reward_sgd(0.8, 0.02, 0.5, 128, c).value == pytest.approx(0.52, abs=1e-12)


def test_regularization_vanishes_at_smallest_batch():
    r = reward_sgd(0.7, 0.0, 1.0, 32, COEFFS)
    assert r.components["regularization"] == 0.0


def test_negative_gain_is_not_rewarded():
    assert reward_sgd(0.5, -3.0, 0.2, 64, COEFFS).value == reward_sgd(0.5, 0.0, 0.2, 64, COEFFS).value


@given(accuracy, gain, t_iter, batch, coeffs)
def test_reward_sgd_matches_brute_force(A, dA, T, B, c):
    assert reward_sgd(A, dA, T, B, c).value == pytest.approx(brute_sgd(A, dA, T, B, c), abs=1e-10)


@given(accuracy, gain, t_iter, sigma, batch, coeffs)
def test_reward_adaptive_matches_brute_force(A, dA, T, s, B, c):
    expected = brute_sgd(A, dA, T, B, c) - c.eta * (s * s + s)
    assert reward_adaptive(A, dA, T, s, s * s, B, c).value == pytest.approx(expected, abs=1e-10)


@given(accuracy, gain, t_iter, sigma, batch)
def test_adaptive_never_exceeds_sgd(A, dA, T, s, B):
    assert reward_adaptive(A, dA, T, s, s * s, B, COEFFS).value <= reward_sgd(A, dA, T, B, COEFFS).value


@given(accuracy, gain, t_iter, batch)
def test_components_sum_to_value(A, dA, T, B):
    r = reward_sgd(A, dA, T, B, COEFFS)
    total = 0.0
    for v in r.components.values():
        total += v
    assert total == r.value


@given(t_iter, t_iter)
def test_slower_iterations_never_pay_more(fast, slow):
    lo, hi = sorted([fast, slow])
    assert reward_sgd(0.5, 0.1, hi, 128, COEFFS).value <= reward_sgd(0.5, 0.1, lo, 128, COEFFS).value


@given(accuracy, accuracy, gain, t_iter, batch, coeffs)
def test_reward_increases_with_accuracy(a1, a2, dA, T, B, c):
    assume(abs(a1 - a2) > 1e-9)
    lo, hi = sorted([a1, a2])
    assert reward_sgd(hi, dA, T, B, c).value > reward_sgd(lo, dA, T, B, c).value


@given(batch, batch, accuracy, gain, t_iter, coeffs)
def test_reward_decreases_with_batch_size(b1, b2, A, dA, T, c):
    assume(b1 != b2 and c.delta > 0.01)
    small, large = sorted([b1, b2])
    assert reward_sgd(A, dA, T, large, c).value < reward_sgd(A, dA, T, small, c).value


@given(st.floats(-5.0, 0.0), st.floats(-5.0, 0.0), accuracy, t_iter, batch, coeffs)
def test_reward_flat_in_non_positive_gain(g1, g2, A, T, B, c):
    assert reward_sgd(A, g1, T, B, c).value == reward_sgd(A, g2, T, B, c).value


@pytest.mark.parametrize("B", [16, 2048])
def test_reward_rejects_batch_outside_range(B):
    with pytest.raises(ContractViolation):
        reward_sgd(0.5, 0.0, 0.1, B, COEFFS)


def test_reward_rejects_non_positive_iteration_time():
    with pytest.raises(ContractViolation):
        reward_sgd(0.5, 0.0, 0.0, 64, COEFFS)


def test_reward_rejects_negative_sigma():
    with pytest.raises(ContractViolation):
        reward_adaptive(0.5, 0.0, 0.1, -0.1, 0.01, 64, COEFFS)


def test_compute_reward_dispatches_on_regime():
    local = LocalState(Tp=1e9, Rtx=0.0, cpu_ratio=1.0, mem_util=0.25, A_bar=0.6, sigma_batch=0.0,
                       delta_A=0.5, T_iter=0.2, sigma_norm=0.1, sigma_norm_sq=0.01, batch_size_norm=0.6)
    sgd = compute_reward(local, 256, COEFFS, Regime.SGD)
    adaptive = compute_reward(local, 256, COEFFS, "adaptive")
    assert sgd.value == pytest.approx(brute_sgd(0.6, 0.5, 0.2, 256, COEFFS))
    assert adaptive.value == pytest.approx(sgd.value - 0.5 * 0.11)
    assert sgd.to_dict()["r_time"] == pytest.approx(-0.1)


# ── returns ──

def test_discounted_return_hand_example():
    assert discounted_return([1.0, 1.0, 1.0], 0.5) == 1.75


def test_discounted_return_empty_is_zero():
    assert discounted_return([], 0.99) == 0.0


@given(st.lists(st.floats(-10.0, 10.0), max_size=20), st.floats(-10.0, 10.0), st.floats(0.0, 1.0))
def test_discounted_return_prefix_law(rewards, extra, gamma):
    expected = discounted_return(rewards, gamma) + gamma ** len(rewards) * extra
    assert discounted_return(rewards + [extra], gamma) == pytest.approx(expected, abs=1e-10)


@given(st.lists(st.floats(-10.0, 10.0), min_size=1, max_size=20), st.floats(0.0, 1.0))
def test_rewards_to_go_head_is_discounted_return(rewards, gamma):
    togo = rewards_to_go(rewards, gamma)
    assert len(togo) == len(rewards)
    assert togo[0] == pytest.approx(discounted_return(rewards, gamma), abs=1e-9)
    assert togo[-1] == rewards[-1]


# ── coefficients ──

def test_coefficients_validate():
    with pytest.raises(ConfigError):
        RewardCoefficients(alpha=-1.0)
    with pytest.raises(ConfigError):
        RewardCoefficients(gamma=1.5)


def test_coefficient_overrides():
    c = COEFFS.with_overrides({"beta": "1.5"})
    assert c.beta == 1.5 and c.alpha == COEFFS.alpha
    with pytest.raises(ConfigError):
        COEFFS.with_overrides({"zeta": 1.0})
