"""Brute-force verification tier.

Each registered check runs over ``count`` random instances derived from a
master seed and reports its worst residual against a fixed tolerance. Checks
are independent, and the report keeps registry order.
"""
from __future__ import annotations

import itertools
import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .diffusion import DiffusionPolicy, DiffusionTrajectory, make_schedule, sample_batch
from .loss import (
    LN2,
    LossConfig,
    TabularSoftmaxPolicy,
    loss_and_gradient,
    loss_at_steps,
    loss_bounds,
    loss_full,
    step_weights,
    timestep_distribution,
)
from .mdp import (
    DiscreteMdp,
    ShapingFunction,
    Trajectory,
    construct_ordering_shaping,
    discounted_return,
    e_tau_via_policy,
    enumerate_arrays,
    enumerate_trajectories,
    implied_reward,
    log_partition,
    random_mdp,
    random_policy,
    shape_reward,
    solve_regularized,
    validate_C,
)
from .nn import LowRankAdapter, grad_check
from .preference import PreferencePair

C_GRID = (0.56, 1.0, 10.0)


@dataclass
class CheckResult:
    name: str
    passed: bool
    residual: float
    seed: int | None
    tolerance: float
    seconds: float = 0.0

    def to_dict(self):
        return {"name": self.name, "passed": self.passed, "residual": self.residual,
                "seed": self.seed, "tolerance": self.tolerance}


@dataclass
class VerificationReport:
    results: list
    master_seed: int
    count: int
    backend: str = field(default_factory=lambda: kernels.BACKEND)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def to_dict(self):
        return {"master_seed": self.master_seed, "count": self.count, "backend": self.backend,
                "passed": self.passed, "checks": [r.to_dict() for r in self.results]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def table(self) -> str:
        width = max(len(r.name) for r in self.results)
        lines = [f"{'check':<{width}}  status  {'worst residual':>14}  {'tolerance':>9}  seed"]
        for r in self.results:
            status = "pass" if r.passed else "FAIL"
            seed = "-" if r.seed is None else str(r.seed)
            lines.append(f"{r.name:<{width}}  {status:<6}  {r.residual:>14.3e}  {r.tolerance:>9.1e}  {seed}")
        lines.append(f"overall: {'pass' if self.passed else 'FAIL'} "
                     f"({sum(r.passed for r in self.results)}/{len(self.results)})")
        return "\n".join(lines)


class _Worst:
    """Tracks the largest residual seen and the instance that produced it."""

    def __init__(self):
        self.value, self.seed = 0.0, None

    def update(self, value, seed):
        value = float(value)
        if not math.isfinite(value):
            value = math.inf
        if self.seed is None or value > self.value:
            self.value, self.seed = value, seed


REGISTRY = {}


def check(name, tolerance, covers, section):
    def wrap(fn):
        REGISTRY[name] = {"fn": fn, "tolerance": tolerance, "covers": tuple(covers), "section": section}
        return fn
    return wrap


def _instances(master, count, tag):
    for i in range(count):
        seed = master + i
        yield seed, np.random.default_rng([tag, seed])


def _random_instance(rng, max_states=6, max_actions=4, max_horizon=4, positive_pi=True):
    ns = int(rng.integers(1, max_states + 1))
    na = int(rng.integers(1, max_actions + 1))
    n = int(rng.integers(1, max_horizon + 1))
    mdp = random_mdp(rng, ns, na, n)
    pi_I = random_policy(rng, ns, na)
    if positive_pi:
        pi_I = np.maximum(pi_I, 1e-3)
        pi_I /= pi_I.sum(axis=1, keepdims=True)
    C = C_GRID[int(rng.integers(len(C_GRID)))]
    gamma = float(rng.choice([0.5, 0.9, 1.0]))
    return mdp, pi_I, C, gamma


# -- optimal policy ------------------------------------------------------------

@check("optimal_policy.normalization", 1e-10, ["optimal_policy"], "optimal_policy")
def _normalization(master, count):
    w = _Worst()
    for seed, rng in _instances(master, count, 1):
        mdp, pi_I, C, _ = _random_instance(rng, positive_pi=False)
        sol = solve_regularized(mdp, pi_I, C)
        w.update(np.abs(sol.pi_star.sum(axis=1) - 1.0).max(), seed)
    return w


@check("optimal_policy.reward_roundtrip", 1e-8, ["reward_relation"], "optimal_policy")
def _roundtrip(master, count):
    w = _Worst()
    for seed, rng in _instances(master, count, 2):
        mdp, pi_I, C, _ = _random_instance(rng)
        sol = solve_regularized(mdp, pi_I, C)
        w.update(np.abs(implied_reward(sol, pi_I, C) - mdp.reward).max(), seed)
    return w


@check("optimal_policy.trajectory_evaluation", 1e-8, ["trajectory_evaluation"], "optimal_policy")
def _evaluation(master, count):
    w = _Worst()
    for seed, rng in _instances(master, count, 3):
        mdp, pi_I, C, gamma = _random_instance(rng)
        sol = solve_regularized(mdp, pi_I, C)
        for traj in enumerate_trajectories(mdp):
            direct = discounted_return(traj, mdp.reward, gamma)
            w.update(abs(e_tau_via_policy(traj, sol, pi_I, C, gamma) - direct), seed)
    return w


@check("optimal_policy.constant_reward", 1e-12, ["optimal_policy"], "optimal_policy")
def _constant_reward(master, count):
    w = _Worst()
    for seed, rng in _instances(master, count, 4):
        mdp, pi_I, C, _ = _random_instance(rng, positive_pi=False)
        flat = DiscreteMdp(np.full(mdp.reward.shape, rng.uniform()), mdp.transition, mdp.horizon,
                           mdp.initial_dist)
        w.update(np.abs(solve_regularized(flat, pi_I, C).pi_star - pi_I).max(), seed)
    return w


@check("optimal_policy.large_C", 1e-5, ["optimal_policy"], "optimal_policy")
def _large_C(master, count):
    w = _Worst()
    for seed, rng in _instances(master, count, 5):
        mdp, pi_I, _, _ = _random_instance(rng, positive_pi=False)
        w.update(np.abs(solve_regularized(mdp, pi_I, 1e6).pi_star - pi_I).max(), seed)
    return w


@check("coefficient.validate_C", 0.0, ["coefficient"], "optimal_policy")
def _validate_C(master, count):
    w = _Worst()
    ok = validate_C(0.56, 1.0) and not validate_C(0.5, 1.0)
    # scale invariance: the check depends on r_max / C only
    for seed, rng in _instances(master, count, 6):
        r = float(rng.uniform(0.1, 10.0))
        x = float(rng.uniform(0.1, 3.0))
        ok &= validate_C(r / x, r) == validate_C(1.0 / x, 1.0)
        w.update(0.0, seed)
    w.update(0.0 if ok else 1.0, master)
    return w


# -- shaping and partition ordering -------------------------------------------

@check("shaping.invariance", 1e-10, ["shaping_invariance"], "shaping")
def _invariance(master, count):
    w = _Worst()
    for seed, rng in _instances(master, count, 7):
        mdp, pi_I, C, _ = _random_instance(rng, positive_pi=False)
        phi = rng.normal(0.0, 2.0, size=mdp.n_states)
        shaped = shape_reward(mdp, ShapingFunction(phi))
        a = solve_regularized(mdp, pi_I, C)
        b = solve_regularized(shaped, pi_I, C)
        w.update(np.abs(a.pi_star - b.pi_star).max(), seed)
        w.update(np.abs(b.log_Z - a.log_Z - phi / C).max(), seed)
    return w


def _deterministic_policy(rng, ns, na):
    pi = np.zeros((ns, na))
    pi[np.arange(ns), rng.integers(0, na, size=ns)] = 1.0
    return pi


def _follow(mdp, pi, start):
    states, actions, s = [], [], start
    for _ in range(mdp.horizon):
        a = int(np.argmax(pi[s]))
        states.append(s)
        actions.append(a)
        s = int(mdp.transition[s, a])
    return Trajectory(tuple(states), tuple(actions))


@check("shaping.deterministic_ordering", 1e-12, ["partition_ordering"], "shaping")
def _deterministic(master, count):
    """With a deterministic reference, C log Z(tau) equals e(tau) on its support."""
    w = _Worst()
    for seed, rng in _instances(master, count, 8):
        mdp, _, C, gamma = _random_instance(rng)
        pi_I = _deterministic_policy(rng, mdp.n_states, mdp.n_actions)
        sol = solve_regularized(mdp, pi_I, C)
        trajs = [_follow(mdp, pi_I, s) for s in range(mdp.n_states)]
        e = np.array([discounted_return(t, mdp.reward, gamma) for t in trajs])
        z = np.array([log_partition(t, sol, gamma) for t in trajs])
        resid = float(np.abs(C * z - e).max())
        for i, j in itertools.combinations(range(len(trajs)), 2):
            # orderings must agree wherever e separates the pair beyond rounding
            if abs(e[i] - e[j]) > 1e-9 and np.sign(e[i] - e[j]) != np.sign(z[i] - z[j]):
                resid = math.inf
        w.update(resid, seed)
    return w


def non_crossing_instance(rng, K, n_actions=None, horizon=None, extra_states=2):
    """MDP with ``K`` planted trajectories over pairwise disjoint state sets.

    Returns ``(mdp, trajectories)``; transitions off the planted paths go to
    random states.
    """
    n_actions = int(rng.integers(2, 4)) if n_actions is None else n_actions
    horizon = int(rng.integers(1, 4)) if horizon is None else horizon
    ns = K * horizon + extra_states
    order = rng.permutation(ns)
    transition = rng.integers(0, ns, size=(ns, n_actions))
    trajs = []
    for k in range(K):
        states = [int(s) for s in order[k * horizon:(k + 1) * horizon]]
        actions = [int(a) for a in rng.integers(0, n_actions, size=horizon)]
        for i in range(horizon - 1):
            transition[states[i], actions[i]] = states[i + 1]
        trajs.append(Trajectory(tuple(states), tuple(actions)))
    rho = np.full(ns, 1.0 / ns)
    reward = rng.uniform(0.0, 1.0, size=(ns, n_actions))
    return DiscreteMdp(reward, transition, horizon, rho), trajs


def _ranked_instance(rng, K):
    while True:
        mdp, trajs = non_crossing_instance(rng, K)
        gamma = float(rng.choice([0.5, 0.9, 1.0]))
        e = [discounted_return(t, mdp.reward, gamma) for t in trajs]
        if len(set(e)) == K:
            order = np.argsort(e)[::-1]
            return mdp, [trajs[i] for i in order], gamma


@check("shaping.constructed_ordering", 0.0, ["partition_ordering", "shaping_construction"], "shaping")
def _constructed(master, count):
    """Residual: largest violation of log Z(tau_k) > log Z(tau_{k+1}) (0 when ordered)."""
    w = _Worst()
    for seed, rng in _instances(master, count, 9):
        for K in (2, 3, 4):
            mdp, ranked, gamma = _ranked_instance(rng, K)
            C = C_GRID[int(rng.integers(len(C_GRID)))]
            phi = construct_ordering_shaping(mdp, ranked, C, gamma)
            shaped = shape_reward(mdp, phi)
            pi_I = random_policy(rng, mdp.n_states, mdp.n_actions)
            sol = solve_regularized(shaped, pi_I, C)
            z = [log_partition(t, sol, gamma) for t in ranked]
            w.update(max(0.0, max(z[k + 1] - z[k] for k in range(K - 1))), seed)
    return w


def bound_gap(mdp, pi_I, C, gamma):
    """Smallest (exact - lower bound) over enumerated pairs with ordered partitions."""
    sol = solve_regularized(mdp, pi_I, C)
    states, actions = enumerate_arrays(mdp)
    with np.errstate(divide="ignore"):
        ratio_table = np.log(sol.pi_star) - np.log(pi_I)
    ratio = kernels.discounted_path_sums(ratio_table, states, actions, gamma)
    log_z = kernels.discounted_path_sums(np.repeat(sol.log_Z[:, None], mdp.n_actions, axis=1),
                                         states, actions, gamma)
    score = C * ratio + C * log_z
    return kernels.min_pairwise_gap(score, log_z, ratio, C)


@check("shaping.bound_vs_exact", 1e-10, ["bt_bound", "bt_exact"], "shaping")
def _bound(master, count):
    """Residual: the most negative exact-minus-bound gap, sign flipped."""
    w = _Worst()
    for seed, rng in _instances(master, count, 10):
        mdp, pi_I, C, gamma = _random_instance(rng)
        gap, _ = bound_gap(mdp, pi_I, C, gamma)
        w.update(max(0.0, -gap), seed)
        K = int(rng.integers(2, 5))
        smdp, ranked, g2 = _ranked_instance(rng, K)
        C2 = C_GRID[int(rng.integers(len(C_GRID)))]
        shaped = shape_reward(smdp, construct_ordering_shaping(smdp, ranked, C2, g2))
        pi2 = np.maximum(random_policy(rng, smdp.n_states, smdp.n_actions), 1e-3)
        gap, _ = bound_gap(shaped, pi2 / pi2.sum(axis=1, keepdims=True), C2, g2)
        w.update(max(0.0, -gap), seed)
    return w


# -- loss and gradient ---------------------------------------------------------

class _Rows:
    """Minimal trajectory stand-in carrying precomputed per-step ratios."""

    def __init__(self, values):
        self.values = np.asarray(values, dtype=np.float64)

    def __len__(self):
        return self.values.size


def _pair(r1, r2):
    return PreferencePair("0", _Rows(r1), _Rows(r2), 1.0, 0.0)


def _ratios(traj):
    return traj.values


@check("loss.identical_pair", 1e-12, ["loss"], "loss")
def _identical(master, count):
    w = _Worst()
    for seed, rng in _instances(master, count, 11):
        n = int(rng.integers(1, 8))
        r = rng.normal(size=n)
        cfg = LossConfig(C=float(rng.uniform(0.1, 20)), gamma=float(rng.uniform(0.5, 1.0)))
        w.update(abs(loss_full(_pair(r, r), _ratios, cfg) - LN2), seed)
    return w


@check("loss.monotone_margin", 0.0, ["loss"], "loss")
def _monotone(master, count):
    """Residual: largest increase of the loss along an increasing margin."""
    w = _Worst()
    for seed, rng in _instances(master, count, 12):
        n = int(rng.integers(1, 8))
        cfg = LossConfig(C=float(rng.uniform(0.1, 20)), gamma=float(rng.uniform(0.5, 1.0)))
        base = rng.normal(size=n)
        shifts = np.sort(rng.normal(0, 0.5, size=20))
        losses = [loss_full(_pair(base + s, base), _ratios, cfg) for s in shifts]
        w.update(max(0.0, float(np.max(np.diff(losses), initial=0.0))), seed)
    return w


@check("loss.clip_bounds", 1e-12, ["loss", "clipping"], "loss")
def _clip(master, count):
    w = _Worst()
    for seed, rng in _instances(master, count, 13):
        n = int(rng.integers(1, 8))
        eps = float(rng.uniform(0.01, 1.0))
        cfg = LossConfig(C=float(rng.uniform(0.1, 20)), gamma=float(rng.uniform(0.5, 1.0)), clip_eps=eps)
        lo, hi = loss_bounds(cfg.C, eps)
        val = loss_full(_pair(rng.normal(0, 3, n), rng.normal(0, 3, n)), _ratios, cfg)
        w.update(max(0.0, lo - val, val - hi), seed)
    return w


@check("loss.gamma_one", 1e-12, ["gamma_one"], "loss")
def _gamma_one(master, count):
    w = _Worst()
    for seed, rng in _instances(master, count, 14):
        n = int(rng.integers(1, 10))
        w.update(np.abs(timestep_distribution(1.0, n) - 1.0 / n).max(), seed)
        cfg = LossConfig(C=float(rng.uniform(0.1, 20)), gamma=1.0)
        r1, r2 = rng.normal(size=n), rng.normal(size=n)
        perm = rng.permutation(n)
        a = loss_full(_pair(r1, r2), _ratios, cfg)
        b = loss_full(_pair(r1[perm], r2[perm]), _ratios, cfg)
        w.update(abs(a - b), seed)
    return w


@check("loss.sampled_consistency", 1e-10, ["loss", "timestep_sampling"], "loss")
def _sampled(master, count):
    """The expected sampled margin over all draw sequences is the full margin."""
    w = _Worst()
    for seed, rng in _instances(master, count, 15):
        n = int(rng.integers(1, 6))
        n_step = int(rng.integers(1, min(n, 3) + 1))
        cfg = LossConfig(C=1.0, gamma=float(rng.uniform(0.5, 1.0)), n_step=n_step)
        probs = timestep_distribution(cfg.gamma, n)
        d = rng.normal(size=n)
        expected = 0.0
        for draw in itertools.product(range(n), repeat=n_step):
            expected += np.prod(probs[list(draw)]) * float(np.dot(step_weights(draw, n), d))
        w.update(abs(expected - float(np.dot(probs, d))), seed)
        # drawing every step exactly once gives the uniform-weight loss
        steps = np.arange(n)
        full = loss_full(_pair(d, np.zeros(n)), _ratios, LossConfig(C=1.0, gamma=1.0))
        w.update(abs(loss_at_steps(_pair(d, np.zeros(n)), _ratios, cfg, steps) - full), seed)
    return w


def _tabular_pair(rng, mdp, pi_I):
    trajs = enumerate_trajectories(mdp)
    i, j = rng.choice(len(trajs), size=2, replace=len(trajs) < 2)
    return PreferencePair("0", trajs[i], trajs[j], 1.0, 0.0)


@check("gradient.tabular", 1e-5, ["loss_gradient"], "loss")
def _grad_tabular(master, count):
    w = _Worst()
    for seed, rng in _instances(master, count, 16):
        mdp, pi_I, _, gamma = _random_instance(rng)
        policy = TabularSoftmaxPolicy(rng.normal(size=pi_I.shape), pi_I)
        pair = _tabular_pair(rng, mdp, pi_I)
        cfg = LossConfig(C=float(rng.choice([1.0, 2.0])), gamma=gamma)
        _, grad = loss_and_gradient(pair, policy, cfg)

        def f(theta):
            old = policy.params
            policy.params = theta
            try:
                return loss_full(pair, policy.log_ratios, cfg)
            finally:
                policy.params = old

        w.update(grad_check(f, policy.params.copy(), grad).max_rel_error, seed)
    return w


@check("gradient.tabular_direction", 1e-5, ["loss_gradient"], "loss")
def _grad_direction(master, count):
    """Prefactor and sign: -grad = sigmoid(-C m) C (grad L1 - grad L2).

    Residual is the prefactor mismatch; a step along -grad must also raise
    the preferred trajectory's discounted log-likelihood and lower the other
    one (planted trajectories have disjoint states).
    """
    w = _Worst()
    for seed, rng in _instances(master, count, 17):
        mdp, (t1, t2) = non_crossing_instance(rng, 2)
        pi_I = random_policy(rng, mdp.n_states, mdp.n_actions)
        policy = TabularSoftmaxPolicy(np.log(pi_I) + rng.normal(0, 0.3, pi_I.shape), pi_I)
        gamma = float(rng.choice([0.5, 0.9, 1.0]))
        cfg = LossConfig(C=float(rng.choice(C_GRID)), gamma=gamma)
        pair = PreferencePair("0", t1, t2, 1.0, 0.0)
        loss, grad = loss_and_gradient(pair, policy, cfg)
        p = timestep_distribution(gamma, len(t1))
        m = float(np.dot(p, policy.log_ratios(t1) - policy.log_ratios(t2)))
        g1 = policy.log_prob_vjp(t1, p)
        g2 = policy.log_prob_vjp(t2, p)
        pref = 1.0 / (1.0 + math.exp(cfg.C * m))
        expected = -pref * cfg.C * (g1 - g2)
        scale = max(np.abs(grad).max(), 1e-300)
        w.update(np.abs(grad - expected).max() / scale, seed)
        before = (np.dot(p, policy.log_ratios(t1)), np.dot(p, policy.log_ratios(t2)))
        policy.params = policy.params - 1e-4 * grad
        after = (np.dot(p, policy.log_ratios(t1)), np.dot(p, policy.log_ratios(t2)))
        if not (after[0] > before[0] and after[1] < before[1]):
            w.update(math.inf, seed)
    return w


def _toy_diffusion(rng, horizon=4, hidden=(8, 8), rank=2):
    sched = make_schedule(horizon, 0.05, 0.3)
    n_prompts = 2
    guidance = float(rng.choice([1.0, 2.0]))
    base = DiffusionPolicy.create(sched, n_prompts, hidden=hidden, n_freqs=2, guidance=guidance, rng=rng)
    base.net.params = base.net.params + rng.normal(0, 0.1, base.net.n_params)
    adapter = LowRankAdapter(base.net, rank, 1.0, rng.normal(0, 0.3, LowRankAdapter(base.net, rank).n_params))
    return base, base.with_adapter(adapter)


@check("gradient.diffusion_adapter", 1e-5, ["loss_gradient", "diffusion"], "loss")
def _grad_diffusion(master, count):
    w = _Worst()
    for seed, rng in _instances(master, count, 18):
        base, policy = _toy_diffusion(rng)
        N = base.schedule.n_steps
        prompt = int(rng.integers(base.n_prompts))
        noise = rng.standard_normal((2, N + 1, base.dim))
        lat, means = sample_batch(base, prompt, noise)
        t1 = DiffusionTrajectory(prompt, lat[0], means[0])
        t2 = DiffusionTrajectory(prompt, lat[1], means[1])
        pair = PreferencePair(prompt, t1, t2, 1.0, 0.0)
        cfg = LossConfig(C=1.0, gamma=float(rng.choice([0.9, 1.0])))
        _, grad = loss_and_gradient(pair, policy, cfg)

        def f(theta):
            old = policy.params
            policy.params = theta
            try:
                return loss_full(pair, policy.log_ratios, cfg)
            finally:
                policy.params = old

        w.update(grad_check(f, policy.params.copy(), grad, max_coords=60, rng=rng).max_rel_error, seed)
    return w


# -- driver --------------------------------------------------------------------

SECTIONS = ("optimal_policy", "shaping", "loss")


def run_checks(names, master_seed=0, count=100) -> list[CheckResult]:
    out = []
    for name in names:
        entry = REGISTRY[name]
        t0 = time.perf_counter()
        try:
            worst = entry["fn"](master_seed, count)
            residual, seed = worst.value, worst.seed
        except Exception as exc:  # a crashing check is a failing check
            residual, seed = math.inf, None
            name_err = f"{name} ({type(exc).__name__}: {exc})"
            out.append(CheckResult(name_err, False, residual, seed, entry["tolerance"],
                                   time.perf_counter() - t0))
            continue
        out.append(CheckResult(name, residual <= entry["tolerance"], residual, seed,
                               entry["tolerance"], time.perf_counter() - t0))
    return out


def _section(section, master_seed, count):
    names = [n for n, e in REGISTRY.items() if e["section"] == section]
    return run_checks(names, master_seed, count)


def check_optimal_policy(count=100, master_seed=0) -> list[CheckResult]:
    return _section("optimal_policy", master_seed, count)


def check_shaping_and_theorem(count=100, master_seed=0) -> list[CheckResult]:
    return _section("shaping", master_seed, count)


def check_loss_and_gradient(count=100, master_seed=0) -> list[CheckResult]:
    return _section("loss", master_seed, count)


def run_suite(master_seed=0, count=100, gradient_count=20) -> VerificationReport:
    """Every registered check; gradient checks use ``min(count, gradient_count)`` seeds."""
    if count < 1:
        raise ValueError("count must be positive")
    results = []
    for name in REGISTRY:
        n = min(count, gradient_count) if name.startswith("gradient.") else count
        results.extend(run_checks([name], master_seed, n))
    return VerificationReport(results, master_seed, count)


__all__ = [
    "CheckResult",
    "REGISTRY",
    "VerificationReport",
    "bound_gap",
    "check_loss_and_gradient",
    "check_optimal_policy",
    "check_shaping_and_theorem",
    "non_crossing_instance",
    "run_suite",
]
