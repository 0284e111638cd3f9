import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dense_align.errors import UnsolvedMdpError
from dense_align.mdp import (
    ShapingFunction,
    construct_ordering_shaping,
    discounted_return,
    enumerate_trajectories,
    log_partition,
    random_mdp,
    random_policy,
    shape_reward,
    solve_regularized,
)
from dense_align.preference import (
    PreferencePair,
    bt_lower_bound,
    bt_probability,
    bt_probability_exact,
    simulate_preferences,
    tabular_log_ratios,
    win_rate,
)
from dense_align.verify import non_crossing_instance

finite = st.floats(-300, 300, allow_nan=False)


@pytest.mark.parametrize("e1, e2, expected", [
    (0.0, 0.0, 0.5),
    (2.5, 2.5, 0.5),
    (math.log(3), 0.0, 0.75),
    (0.0, 50.0, 1.9287498479639178e-22),
])
def test_bt_probability_examples(e1, e2, expected):
    assert bt_probability(e1, e2) == pytest.approx(expected, rel=1e-12)


def test_bt_probability_no_overflow():
    assert bt_probability(0.0, 700.0) > 0.0
    assert bt_probability(700.0, 0.0) == 1.0


@pytest.mark.parametrize("bad", [math.nan, math.inf, -math.inf])
def test_bt_probability_rejects_nonfinite(bad):
    with pytest.raises(ValueError):
        bt_probability(bad, 0.0)


@given(finite, finite)
def test_bt_symmetry(x, y):
    assert abs(bt_probability(x, y) + bt_probability(y, x) - 1.0) <= 1e-12


@given(finite, finite, st.floats(-100, 100))
def test_bt_translation(x, y, shift):
    assert bt_probability(x + shift, y + shift) == pytest.approx(bt_probability(x, y), abs=1e-12)


def solved(seed, C=1.0, gamma=0.9):
    rng = np.random.default_rng(seed)
    mdp = random_mdp(rng, 4, 2, 3)
    pi = np.maximum(random_policy(rng, 4, 2), 1e-3)
    pi /= pi.sum(axis=1, keepdims=True)
    return mdp, pi, solve_regularized(mdp, pi, C)


def pairs_of(mdp, gamma):
    trajs = enumerate_trajectories(mdp)
    e = [discounted_return(t, mdp.reward, gamma) for t in trajs]
    return simulate_preferences(trajs, e), e


@pytest.mark.parametrize("seed", range(5))
def test_exact_matches_raw_reward_bt(seed):
    mdp, pi, sol = solved(seed, C=1.5)
    pairs, _ = pairs_of(mdp, 0.9)
    for p in pairs:
        raw = bt_probability(p.better_score, p.worse_score)
        assert abs(bt_probability_exact(p, sol, pi, 1.5, 0.9) - raw) <= 1e-8


def test_exact_identical_values_is_half():
    mdp, pi, sol = solved(0)
    t = enumerate_trajectories(mdp)[0]
    pair = PreferencePair(t.prompt_id, t, t, 1.0, 0.0)
    assert bt_probability_exact(pair, sol, pi, 1.0, 0.9) == pytest.approx(0.5, abs=1e-15)


def test_exact_unchanged_by_shaping():
    mdp, pi, sol = solved(7)
    phi = ShapingFunction(np.random.default_rng(0).normal(size=mdp.n_states))
    shaped_sol = solve_regularized(shape_reward(mdp, phi), pi, 1.0)
    pairs, _ = pairs_of(mdp, 1.0)
    for p in pairs[:30]:
        # shaping by phi adds sum_t phi(s_t) to both evaluations; the exact form tracks it
        delta = float(np.sum(phi.phi[list(p.better.states)]) - np.sum(phi.phi[list(p.worse.states)]))
        raw = bt_probability(p.better_score + delta, p.worse_score)
        assert abs(bt_probability_exact(p, shaped_sol, pi, 1.0, 1.0) - raw) <= 1e-8


def test_exact_requires_solution():
    mdp, pi, _ = solved(0)
    t = enumerate_trajectories(mdp)[0]
    with pytest.raises(UnsolvedMdpError):
        bt_probability_exact(PreferencePair(t.prompt_id, t, t, 1.0, 0.0), None, pi, 1.0, 0.9)


def test_lower_bound_at_reference_is_half():
    mdp, pi, _ = solved(1)
    pairs, _ = pairs_of(mdp, 0.9)
    lr = tabular_log_ratios(pi, pi)
    assert all(bt_lower_bound(p, lr, 1.0, 0.9) == 0.5 for p in pairs)


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("K", [2, 3])
def test_lower_bound_below_exact_after_shaping(seed, K):
    rng = np.random.default_rng(seed)
    C, gamma = 1.0, 0.9
    mdp, trajs = non_crossing_instance(rng, K)
    order = sorted(trajs, key=lambda t: -discounted_return(t, mdp.reward, gamma))
    e = [discounted_return(t, mdp.reward, gamma) for t in order]
    if len(set(e)) < K:
        pytest.skip("tied instance")
    shaped = shape_reward(mdp, construct_ordering_shaping(mdp, order, C, gamma))
    pi = random_policy(rng, mdp.n_states, mdp.n_actions)
    sol = solve_regularized(shaped, pi, C)
    se = [discounted_return(t, shaped.reward, gamma) for t in order]
    lr = tabular_log_ratios(sol.pi_star, pi)
    for p in simulate_preferences(order, se):
        assert log_partition(p.better, sol, gamma) >= log_partition(p.worse, sol, gamma)
        assert bt_lower_bound(p, lr, C, gamma) <= bt_probability_exact(p, sol, pi, C, gamma) + 1e-10


def test_pair_invariants():
    with pytest.raises(ValueError):
        PreferencePair(0, [0, 1], [1, 0], 1.0, 1.0)
    with pytest.raises(ValueError):
        PreferencePair(0, [0, 1], [1], 2.0, 1.0)


@pytest.mark.parametrize("scores, n_pairs", [([3, 1], 1), ([5, 5], 0), ([1, 2, 3, 4, 5], 10), ([1, 1, 2], 2)])
def test_simulate_preferences_counts(scores, n_pairs):
    trajs = [np.full(2, i) for i in range(len(scores))]
    pairs = simulate_preferences(trajs, scores, prompt_id=0)
    assert len(pairs) == n_pairs
    for p in pairs:
        assert p.better_score > p.worse_score


def test_simulate_preferences_orientation():
    a, b = np.zeros(2), np.ones(2)
    (pair,) = simulate_preferences([a, b], [3, 1], prompt_id=0)
    assert pair.better is a and pair.worse is b


@given(st.lists(st.integers(0, 4), min_size=2, max_size=8))
def test_simulate_preferences_count_property(scores):
    k = len(scores)
    ties = sum(scores[i] == scores[j] for i in range(k) for j in range(i + 1, k))
    pairs = simulate_preferences([np.zeros(1)] * k, scores, prompt_id=0)
    assert len(pairs) == k * (k - 1) // 2 - ties


def test_simulate_preferences_length_mismatch():
    with pytest.raises(ValueError):
        simulate_preferences([np.zeros(1)], [1.0, 2.0])


@pytest.mark.parametrize("a, b, expected", [
    ([1, 2], [0, 3], 0.5),
    ([1, 2, 3], [1, 2, 3], 0.5),
    ([2, 3], [1, 2], 1.0),
])
def test_win_rate_examples(a, b, expected):
    assert win_rate(a, b) == expected


def test_win_rate_errors():
    with pytest.raises(ValueError):
        win_rate([1, 2], [1])
    with pytest.raises(ValueError):
        win_rate([], [])
