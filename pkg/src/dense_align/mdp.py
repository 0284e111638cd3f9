"""Finite-horizon discrete MDPs and the exact KL-regularized solution.

Everything here is exact and pure: the optimal regularized policy, the reward
it implies, discounted trajectory evaluation in both the raw-reward and the
policy/partition forms, state-only reward shaping and the canonical shaping
that orders trajectory partition values.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from . import kernels
from .errors import (
    AmbiguousOrderingError,
    InvalidCoefficientError,
    InvalidTrajectoryError,
    ShapingInfeasibleError,
    UndefinedRatioError,
)

ENUMERATION_CAP = 10**6

# positive root of exp(x) = 1 + x + x**2; below it exp(x) <= 1 + x + x**2
EXP_QUADRATIC_ROOT = 1.793282132900598


@dataclass(frozen=True, eq=False)
class DiscreteMdp:
    """Deterministic-transition MDP with ``horizon`` state-action steps.

    ``shaped`` marks reward tables produced by :func:`shape_reward`; only
    unshaped tables are required to lie in [0, 1].
    """

    reward: np.ndarray
    transition: np.ndarray
    horizon: int
    initial_dist: np.ndarray
    shaped: bool = False

    def __post_init__(self):
        reward = np.array(self.reward, dtype=np.float64)
        transition = np.array(self.transition, dtype=np.int64)
        rho = np.array(self.initial_dist, dtype=np.float64)
        if reward.ndim != 2 or reward.shape[0] < 1 or reward.shape[1] < 1:
            raise ValueError("reward must be a non-empty (n_states, n_actions) table")
        if transition.shape != reward.shape:
            raise ValueError(f"transition shape {transition.shape} != reward shape {reward.shape}")
        n_states = reward.shape[0]
        if not np.all(np.isfinite(reward)):
            raise ValueError("reward entries must be finite")
        if not self.shaped and (reward.min() < 0.0 or reward.max() > 1.0):
            raise ValueError("reward entries must lie in [0, 1]")
        if transition.min() < 0 or transition.max() >= n_states:
            raise ValueError("transition entries must be valid state indices")
        if int(self.horizon) != self.horizon or self.horizon < 1:
            raise ValueError("horizon must be a positive integer")
        if rho.shape != (n_states,) or rho.min() < 0 or abs(rho.sum() - 1.0) > 1e-12:
            raise ValueError("initial_dist must be a probability vector over states")
        for arr in (reward, transition, rho):
            arr.setflags(write=False)
        object.__setattr__(self, "reward", reward)
        object.__setattr__(self, "transition", transition)
        object.__setattr__(self, "initial_dist", rho)
        object.__setattr__(self, "horizon", int(self.horizon))

    @property
    def n_states(self) -> int:
        return self.reward.shape[0]

    @property
    def n_actions(self) -> int:
        return self.reward.shape[1]


@dataclass(frozen=True)
class Trajectory:
    """``horizon`` (state, action) steps; step 0 is the noisiest step."""

    states: tuple
    actions: tuple
    prompt_id: str = "0"

    def __post_init__(self):
        if len(self.states) != len(self.actions):
            raise InvalidTrajectoryError("states and actions differ in length")
        object.__setattr__(self, "states", tuple(int(s) for s in self.states))
        object.__setattr__(self, "actions", tuple(int(a) for a in self.actions))

    def __len__(self):
        return len(self.states)

    @property
    def steps(self):
        return list(zip(self.states, self.actions))


@dataclass(frozen=True, eq=False)
class RegularizedSolution:
    pi_star: np.ndarray
    log_Z: np.ndarray


@dataclass(frozen=True, eq=False)
class ShapingFunction:
    phi: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        phi = np.array(self.phi, dtype=np.float64)
        if phi.ndim != 1 or not np.all(np.isfinite(phi)):
            raise ValueError("shaping values must be a finite 1-D table")
        object.__setattr__(self, "phi", phi)


def _check_indices(traj, n_states, n_actions):
    s = np.asarray(traj.states, dtype=np.int64)
    a = np.asarray(traj.actions, dtype=np.int64)
    if s.size and (s.min() < 0 or s.max() >= n_states or a.min() < 0 or a.max() >= n_actions):
        raise InvalidTrajectoryError("trajectory indexes outside the reward table")
    return s, a


def check_trajectory(mdp: DiscreteMdp, traj: Trajectory) -> None:
    """Raise unless ``traj`` has the MDP's horizon and follows its transitions."""
    if len(traj) != mdp.horizon:
        raise InvalidTrajectoryError(f"trajectory length {len(traj)} != horizon {mdp.horizon}")
    s, a = _check_indices(traj, mdp.n_states, mdp.n_actions)
    nxt = mdp.transition[s[:-1], a[:-1]]
    if np.any(nxt != s[1:]):
        raise InvalidTrajectoryError("consecutive states violate the transition table")


def _discount_weights(gamma, n):
    return gamma ** np.arange(n, dtype=np.float64)


def discounted_return(traj: Trajectory, reward, gamma: float) -> float:
    """e(tau) = sum_i gamma**i r(s_i, a_i)."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    reward = np.asarray(reward, dtype=np.float64)
    s, a = _check_indices(traj, *reward.shape)
    return float(np.dot(_discount_weights(gamma, len(s)), reward[s, a]))


def solve_regularized(mdp: DiscreteMdp, pi_I, C: float) -> RegularizedSolution:
    """Per-state optimum of the KL-regularized objective.

    pi*(a|s) = exp(r(s,a)/C) pi_I(a|s) / Z(s). Computed in log space so that
    zero-probability reference actions stay exactly zero.
    """
    if not C > 0:
        raise InvalidCoefficientError(f"C must be positive, got {C}")
    pi_I = np.asarray(pi_I, dtype=np.float64)
    if pi_I.shape != mdp.reward.shape:
        raise ValueError("pi_I must have shape (n_states, n_actions)")
    if pi_I.min() < 0 or np.any(np.abs(pi_I.sum(axis=1) - 1.0) > 1e-10):
        raise ValueError("pi_I rows must be probability vectors")
    with np.errstate(divide="ignore"):
        logits = mdp.reward / C + np.log(pi_I)
    log_Z = logsumexp(logits, axis=1)
    pi_star = np.exp(logits - log_Z[:, None])
    return RegularizedSolution(pi_star=pi_star, log_Z=log_Z)


def _log_ratio_table(sol, pi_I):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.log(sol.pi_star) - np.log(np.asarray(pi_I, dtype=np.float64))


def implied_reward(sol: RegularizedSolution, pi_I, C: float) -> np.ndarray:
    """r(s,a) = C log(pi*/pi_I) + C log Z(s); inverse of :func:`solve_regularized`."""
    pi_I = np.asarray(pi_I, dtype=np.float64)
    if np.any(pi_I <= 0):
        raise UndefinedRatioError("pi_I has zero probability at some action")
    return C * _log_ratio_table(sol, pi_I) + C * sol.log_Z[:, None]


def log_partition(traj: Trajectory, sol: RegularizedSolution, gamma: float) -> float:
    """log Z(tau) = sum_i gamma**i log Z(s_i)."""
    s = np.asarray(traj.states, dtype=np.int64)
    return float(np.dot(_discount_weights(gamma, len(s)), sol.log_Z[s]))


def policy_log_ratios(traj: Trajectory, policy, pi_I) -> np.ndarray:
    """Per-step log(policy(a_i|s_i) / pi_I(a_i|s_i))."""
    pi_I = np.asarray(pi_I, dtype=np.float64)
    s, a = _check_indices(traj, *pi_I.shape)
    ref = pi_I[s, a]
    if np.any(ref <= 0):
        raise UndefinedRatioError("pi_I has zero probability at a visited action")
    return np.log(np.asarray(policy)[s, a]) - np.log(ref)


def e_tau_via_policy(traj: Trajectory, sol: RegularizedSolution, pi_I, C: float, gamma: float) -> float:
    """e(tau) = C sum_i gamma**i log(pi*/pi_I) + C log Z(tau)."""
    ratios = policy_log_ratios(traj, sol.pi_star, pi_I)
    w = _discount_weights(gamma, len(ratios))
    return float(C * np.dot(w, ratios) + C * log_partition(traj, sol, gamma))


def shape_reward(mdp: DiscreteMdp, phi: ShapingFunction) -> DiscreteMdp:
    """r'(s,a) = r(s,a) + phi(s)."""
    values = phi.phi
    if values.shape != (mdp.n_states,):
        raise ValueError("shaping table must have one entry per state")
    return replace(mdp, reward=mdp.reward + values[:, None], shaped=True)


def enumerate_trajectories(mdp: DiscreteMdp, cap: int = ENUMERATION_CAP) -> list[Trajectory]:
    """Every trajectory from a start state with positive initial probability."""
    states, actions = enumerate_arrays(mdp, cap)
    return [Trajectory(tuple(s), tuple(a)) for s, a in zip(states.tolist(), actions.tolist())]


def enumerate_arrays(mdp: DiscreteMdp, cap: int = ENUMERATION_CAP):
    """Array form of :func:`enumerate_trajectories`: ``(states, actions)``, each (M, N)."""
    from .errors import EnumerationTooLargeError

    size = mdp.n_actions**mdp.horizon * mdp.n_states
    if size > cap:
        raise EnumerationTooLargeError(f"{size} trajectories exceed the cap of {cap}")
    starts = np.flatnonzero(mdp.initial_dist > 0)
    return kernels.enumerate_paths(mdp.transition, starts, mdp.n_actions, mdp.horizon)


def validate_C(C: float, r_max: float) -> bool:
    """Whether r_max / C stays inside the region where exp(x) <= 1 + x + x**2."""
    if not r_max > 0:
        raise ValueError("r_max must be positive")
    return C > 0 and r_max / C <= EXP_QUADRATIC_ROOT


def shaping_threshold(C: float, gamma: float, horizon: int) -> float:
    """Lower bound each adjacent discounted shaping difference has to reach."""
    return (C + 1.0) / C * float(_discount_weights(gamma, horizon).sum())


def construct_ordering_shaping(mdp: DiscreteMdp, ranked: list[Trajectory], C: float,
                               gamma: float, margin: float = 1.0) -> ShapingFunction:
    """Canonical shaping that orders partition values along ``ranked``.

    ``ranked`` is sorted by strictly decreasing e(tau). The lowest-ranked
    trajectory keeps phi = 0; walking upwards, each trajectory's states get a
    common value chosen so that its discounted shaping surplus over the next
    one equals the threshold plus ``margin``. Requires pairwise disjoint state
    sets between trajectories.
    """
    r_max = float(mdp.reward.max())
    if r_max > 0 and not validate_C(C, r_max):
        raise InvalidCoefficientError(f"C={C} too small for r_max={r_max}")
    phi = np.zeros(mdp.n_states)
    if len(ranked) <= 1:
        return ShapingFunction(phi)
    for traj in ranked:
        check_trajectory(mdp, traj)
    values = [discounted_return(t, mdp.reward, gamma) for t in ranked]
    for k in range(len(ranked) - 1):
        if values[k] == values[k + 1]:
            raise AmbiguousOrderingError(f"trajectories {k} and {k + 1} have equal e(tau)")
        if values[k] < values[k + 1]:
            raise ValueError(f"trajectory {k + 1} has a higher e(tau) than trajectory {k}")

    owner = {}
    for k, traj in enumerate(ranked):
        for s in set(traj.states):
            if s in owner:
                other = owner[s]
                clash = any(a == b for a, b in zip(ranked[other].states, traj.states))
                kind = "cross" if clash else "share states"
                raise ShapingInfeasibleError(f"trajectories {other} and {k} {kind} (state {s})")
            owner[s] = k

    weight_sum = float(_discount_weights(gamma, mdp.horizon).sum())
    lift = (shaping_threshold(C, gamma, mdp.horizon) + margin) / weight_sum
    level = 0.0
    for k in range(len(ranked) - 2, -1, -1):
        level += lift
        phi[list(set(ranked[k].states))] = level
    return ShapingFunction(phi)


def random_mdp(rng: np.random.Generator, n_states: int, n_actions: int, horizon: int,
               all_initial: bool = False) -> DiscreteMdp:
    """Random bounded-reward MDP, used by the verification suite."""
    reward = rng.uniform(0.0, 1.0, size=(n_states, n_actions))
    transition = rng.integers(0, n_states, size=(n_states, n_actions))
    if all_initial:
        rho = np.full(n_states, 1.0 / n_states)
    else:
        rho = rng.dirichlet(np.ones(n_states))
        drop = rng.random(n_states) < 0.3
        drop[rng.integers(n_states)] = False
        rho[drop] = 0.0
        rho /= rho.sum()
    return DiscreteMdp(reward, transition, horizon, rho)


def random_policy(rng: np.random.Generator, n_states: int, n_actions: int) -> np.ndarray:
    return rng.dirichlet(np.ones(n_actions), size=n_states)


_FIELDS = ("n_states", "n_actions", "reward", "transition", "horizon", "initial_dist")


def mdp_from_dict(doc) -> DiscreteMdp:
    """Build an MDP from the JSON document layout (row-major flattened tables)."""
    if not isinstance(doc, dict):
        raise ValueError("document root must be an object")
    missing = [k for k in _FIELDS if k not in doc]
    if missing:
        raise ValueError(f"missing field(s): {', '.join(missing)}")
    unknown = sorted(set(doc) - set(_FIELDS))
    if unknown:
        raise ValueError(f"unknown field(s): {', '.join(unknown)}")
    for key in ("n_states", "n_actions", "horizon"):
        if not isinstance(doc[key], int) or isinstance(doc[key], bool) or doc[key] < 1:
            raise ValueError(f"field '{key}': expected a positive integer, got {doc[key]!r}")
    ns, na = doc["n_states"], doc["n_actions"]

    def table(key, size, kind, label):
        vals = doc[key]
        if not isinstance(vals, list):
            raise ValueError(f"field '{key}': expected a list")
        if vals and isinstance(vals[0], list):
            vals = [v for row in vals for v in row]
        if len(vals) != size:
            raise ValueError(f"field '{key}': expected {size} entries, got {len(vals)}")
        for i, v in enumerate(vals):
            if isinstance(v, bool) or not isinstance(v, kind):
                raise ValueError(f"field '{key}'[{i}]: expected {label}, got {v!r}")
        return vals

    reward = table("reward", ns * na, (int, float), "a number")
    for i, v in enumerate(reward):
        if not (0.0 <= v <= 1.0) or not math.isfinite(v):
            raise ValueError(f"field 'reward'[{i}]: {v} outside [0, 1]")
    transition = table("transition", ns * na, int, "an integer")
    for i, v in enumerate(transition):
        if not 0 <= v < ns:
            raise ValueError(f"field 'transition'[{i}]: {v} is not a state index")
    rho = table("initial_dist", ns, (int, float), "a number")
    if min(rho) < 0 or abs(sum(rho) - 1.0) > 1e-12:
        raise ValueError("field 'initial_dist': must be non-negative and sum to 1")
    return DiscreteMdp(
        np.reshape(reward, (ns, na)), np.reshape(transition, (ns, na)), doc["horizon"], rho
    )


def load_mdp_json(source) -> DiscreteMdp:
    """Load from a path or a JSON string; errors name the offending line or field."""
    if isinstance(source, Path) or (isinstance(source, str) and not source.lstrip().startswith("{")):
        text = Path(source).read_text()
    else:
        text = source
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValueError(f"line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return mdp_from_dict(doc)


def mdp_to_dict(mdp: DiscreteMdp) -> dict:
    return {
        "n_states": mdp.n_states,
        "n_actions": mdp.n_actions,
        "reward": mdp.reward.ravel().tolist(),
        "transition": mdp.transition.ravel().tolist(),
        "horizon": mdp.horizon,
        "initial_dist": mdp.initial_dist.tolist(),
    }
