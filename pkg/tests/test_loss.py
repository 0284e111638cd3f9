import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dense_align.loss import (
    LN2,
    LossConfig,
    TabularSoftmaxPolicy,
    clip_ratios,
    clipped_log_ratio,
    dpo_trajectory_variant,
    loss_and_gradient,
    loss_at_steps,
    loss_bounds,
    loss_full,
    loss_gradient,
    loss_sampled,
    timestep_distribution,
)
from dense_align.mdp import Trajectory, enumerate_trajectories, random_mdp, random_policy
from dense_align.nn import grad_check
from dense_align.preference import PreferencePair


def identity(traj):
    """Evaluator for pairs whose 'trajectories' are the per-step ratios themselves."""
    return np.asarray(traj, dtype=np.float64)


def ratio_pair(l1, l2):
    return PreferencePair(0, np.asarray(l1, float), np.asarray(l2, float), 1.0, 0.0)


ratios = st.lists(st.floats(-5, 5, allow_nan=False), min_size=1, max_size=6)


# -- timestep distribution --------------------------------------------------------

def test_timestep_uniform():
    assert np.array_equal(timestep_distribution(1.0, 4), np.full(4, 0.25))


def test_timestep_discounted():
    p = timestep_distribution(0.9, 3)
    assert np.allclose(p, np.array([1, 0.9, 0.81]) / 2.71, atol=1e-15)
    assert np.allclose(p, [0.36900, 0.33210, 0.29889], atol=5e-6)


def test_timestep_single():
    assert np.array_equal(timestep_distribution(0.5, 1), [1.0])


@pytest.mark.parametrize("gamma", [0.0, -0.3])
def test_timestep_rejects_gamma(gamma):
    with pytest.raises(ValueError):
        timestep_distribution(gamma, 3)


@given(st.floats(0.01, 0.999), st.integers(2, 60))
def test_timestep_strictly_decreasing(gamma, n):
    p = timestep_distribution(gamma, n)
    assert abs(p.sum() - 1) <= 1e-12
    assert np.all(np.diff(p) < 0)


# -- clipping --------------------------------------------------------------------

@pytest.mark.parametrize("lp, lq, eps, expected", [
    (5.0, 0.0, 1e-4, 1e-4),
    (-3e-4, 0.0, 5e-4, -3e-4),
    (-1.2, -1.2, 1e-4, 0.0),
    (0.7, 0.1, 0.0, 0.0),
    (0.7, 0.1, None, 0.6),
])
def test_clipped_log_ratio(lp, lq, eps, expected):
    assert clipped_log_ratio(lp, lq, eps) == pytest.approx(expected, abs=1e-15)


def test_clip_mask_marks_saturation():
    value, inside = clip_ratios([-2.0, 0.05, 0.3], 0.1)
    assert np.array_equal(value, [-0.1, 0.05, 0.1])
    assert inside.tolist() == [False, True, False]


# -- loss ------------------------------------------------------------------------

def test_loss_at_reference():
    pair = ratio_pair([0, 0, 0], [0, 0, 0])
    assert loss_full(pair, identity, LossConfig(C=3.0)) == pytest.approx(LN2, abs=1e-15)


def test_loss_identical_trajectories():
    t = np.array([0.3, -0.2, 1.1])
    assert loss_full(ratio_pair(t, t), identity, LossConfig(C=5.0, gamma=0.8)) == pytest.approx(LN2, abs=1e-15)


def test_loss_worked_example():
    cfg = LossConfig(C=1.0, gamma=1.0, clip_eps=None)
    pair = ratio_pair([0.1, -0.05, 0.2], [0, 0, 0])
    expected = -math.log(1 / (1 + math.exp(-0.25 / 3)))
    assert loss_full(pair, identity, cfg) == pytest.approx(expected, abs=1e-15)
    # hand value: log(1 + exp(-1/12))
    assert loss_full(pair, identity, cfg) == pytest.approx(0.6523483, abs=1e-7)


def test_loss_zero_eps_disables_ratio_term():
    cfg = LossConfig(C=4.0, clip_eps=0.0)
    assert loss_full(ratio_pair([3, -2], [-1, 5]), identity, cfg) == pytest.approx(LN2, abs=1e-15)


@given(ratios, st.floats(0.1, 20), st.sampled_from([0.5, 0.9, 1.0]), st.sampled_from([0.01, 0.5, 2.0]))
def test_loss_bounds_property(l1, C, gamma, eps):
    l2 = l1[::-1]
    value = loss_full(ratio_pair(l1, l2), identity, LossConfig(C=C, gamma=gamma, clip_eps=eps))
    lo, hi = loss_bounds(C, eps)
    assert lo - 1e-12 <= value <= hi + 1e-12
    assert value >= 0


@given(st.floats(-10, 10), st.floats(0.0, 10), st.floats(0.1, 10))
def test_loss_monotone_in_margin(m, dm, C):
    cfg = LossConfig(C=C, gamma=1.0)
    lo = loss_full(ratio_pair([m], [0.0]), identity, cfg)
    hi = loss_full(ratio_pair([m + dm + 1e-3], [0.0]), identity, cfg)
    assert hi < lo or (lo == 0.0 and hi == 0.0)


@given(ratios, st.floats(0.1, 10))
def test_loss_antisymmetry(l1, C):
    l2 = [0.5 * x - 0.1 for x in l1]
    cfg = LossConfig(C=C, gamma=0.9)
    a = loss_full(ratio_pair(l1, l2), identity, cfg)
    b = loss_full(ratio_pair(l2, l1), identity, cfg)
    assert a + b >= 2 * LN2 - 1e-12
    if np.allclose(l1, l2, atol=0):
        assert a + b == pytest.approx(2 * LN2)


def test_sampled_exhaustive_matches_full():
    cfg = LossConfig(C=2.0, gamma=1.0, n_step=4)
    pair = ratio_pair([0.2, -0.4, 0.1, 0.3], [0.0, 0.1, -0.2, 0.0])
    assert loss_at_steps(pair, identity, cfg, [0, 1, 2, 3]) == pytest.approx(loss_full(pair, identity, cfg), abs=1e-15)


def test_sampled_at_reference_any_seed():
    pair = ratio_pair(np.zeros(5), np.zeros(5))
    for seed in range(20):
        assert loss_sampled(pair, identity, LossConfig(), np.random.default_rng(seed)) == LN2


def test_sampled_deterministic():
    pair = ratio_pair([0.2, -0.4, 0.1, 0.3], [0.0, 0.1, -0.2, 0.0])
    a = loss_sampled(pair, identity, LossConfig(), np.random.default_rng(9))
    b = loss_sampled(pair, identity, LossConfig(), np.random.default_rng(9))
    assert a == b


def test_sampled_inner_mean_consistent():
    # mean of the sampled inner average over 1e5 draws vs the exact expectation
    gamma, n, n_step = 0.9, 6, 3
    diff = np.array([0.3, -0.1, 0.5, 0.2, -0.4, 0.05])
    p = timestep_distribution(gamma, n)
    steps = np.random.default_rng(0).choice(n, size=(100_000, n_step), p=p)
    inner = diff[steps].mean(axis=1)
    se = inner.std(ddof=1) / math.sqrt(inner.size)
    assert abs(inner.mean() - p @ diff) <= 3 * se


# -- trajectory-level variant --------------------------------------------------------

def test_dpo_equals_full_at_gamma_one():
    cfg = LossConfig(C=3.0, gamma=1.0, clip_eps=0.5)
    pair = ratio_pair([0.2, -0.4, 0.9], [0.0, 0.1, -0.2])
    assert dpo_trajectory_variant(pair, identity, cfg) == loss_full(pair, identity, cfg)


@given(st.permutations([0.3, -0.2, 0.7, 0.1]))
def test_dpo_permutation_invariant(perm):
    cfg = LossConfig(C=2.0, gamma=0.9)
    base = dpo_trajectory_variant(ratio_pair([0.3, -0.2, 0.7, 0.1], np.zeros(4)), identity, cfg)
    assert dpo_trajectory_variant(ratio_pair(perm, np.zeros(4)), identity, cfg) == pytest.approx(base, abs=1e-15)


def test_dpo_favours_late_wins():
    # preferred trajectory ahead only at the last steps
    pair = ratio_pair([-0.2, -0.2, 0.4, 0.4], np.zeros(4))
    cfg = LossConfig(C=5.0, gamma=0.9)
    assert dpo_trajectory_variant(pair, identity, cfg) < loss_full(pair, identity, cfg)


# -- gradients -------------------------------------------------------------------

def tabular_setup(seed, horizon=3):
    rng = np.random.default_rng(seed)
    mdp = random_mdp(rng, 4, 3, horizon)
    pi_I = np.maximum(random_policy(rng, 4, 3), 0.05)
    pi_I /= pi_I.sum(axis=1, keepdims=True)
    trajs = enumerate_trajectories(mdp)
    i, j = rng.choice(len(trajs), 2, replace=False)
    pair = PreferencePair(trajs[i].prompt_id, trajs[i], trajs[j], 1.0, 0.0)
    policy = TabularSoftmaxPolicy(np.log(pi_I) + rng.normal(0, 0.3, pi_I.shape), pi_I)
    return rng, pair, policy


def test_zero_gradient_at_reference_on_identical():
    rng, pair, _ = tabular_setup(0)
    policy = TabularSoftmaxPolicy.from_reference(np.full((4, 3), 1 / 3))
    same = PreferencePair(pair.prompt_id, pair.better, pair.better, 1.0, 0.0)
    loss, grad = loss_and_gradient(same, policy, LossConfig(C=2.0))
    assert loss == pytest.approx(LN2, abs=1e-15)
    assert np.abs(grad).max() == 0.0


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("gamma", [0.9, 1.0])
def test_tabular_gradient_finite_difference(seed, gamma):
    _, pair, policy = tabular_setup(seed)
    cfg = LossConfig(C=1.5, gamma=gamma)
    grad = loss_gradient(pair, policy, cfg)
    x0 = policy.params.copy()

    def f(x):
        policy.params = x
        return loss_full(pair, policy.log_ratios, cfg)

    report = grad_check(f, x0, grad, step=1e-6, tolerance=1e-5)
    policy.params = x0
    assert report.passed, report


def test_sampled_gradient_finite_difference():
    _, pair, policy = tabular_setup(3, horizon=4)
    cfg = LossConfig(C=2.0, gamma=0.9, clip_eps=0.3)
    steps = [0, 0, 3]
    grad = loss_gradient(pair, policy, cfg, steps=steps)
    x0 = policy.params.copy()

    def f(x):
        policy.params = x
        return loss_at_steps(pair, policy.log_ratios, cfg, steps)

    assert grad_check(f, x0, grad).passed


def test_descent_step_raises_preferred_likelihood():
    _, pair, policy = tabular_setup(5)
    cfg = LossConfig(C=1.0, gamma=0.9)
    shared = set(pair.better.states) & set(pair.worse.states)
    if shared:
        # use a pair without shared states so the two terms cannot cancel
        t1 = Trajectory((0, 1), (0, 1))
        t2 = Trajectory((2, 3), (2, 0))
        pair = PreferencePair(t1.prompt_id, t1, t2, 1.0, 0.0)
    w = 0.9 ** np.arange(len(pair.better))

    def preferred_loglik(p):
        probs = p.probs()
        return float(np.dot(w, np.log(probs[list(pair.better.states), list(pair.better.actions)])))

    before = preferred_loglik(policy)
    policy.params = policy.params - 1e-3 * loss_gradient(pair, policy, cfg)
    assert preferred_loglik(policy) > before
