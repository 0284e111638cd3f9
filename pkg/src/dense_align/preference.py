"""Bradley-Terry preference probabilities and pair formation."""
from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations
from typing import Any, Callable, Sequence

import numpy as np
from scipy.special import expit

from .errors import UnsolvedMdpError
from .mdp import RegularizedSolution, log_partition, policy_log_ratios


@dataclass(frozen=True, eq=False)
class PreferencePair:
    prompt_id: Any
    better: Any
    worse: Any
    better_score: float
    worse_score: float

    def __post_init__(self):
        if not self.better_score > self.worse_score:
            raise ValueError("better_score must strictly exceed worse_score")
        if len(self.better) != len(self.worse):
            raise ValueError("paired trajectories must have equal length")
        for traj in (self.better, self.worse):
            pid = getattr(traj, "prompt_id", self.prompt_id)
            if pid != self.prompt_id:
                raise ValueError("paired trajectories must share the prompt id")


def bt_probability(e1: float, e2: float) -> float:
    """P(first preferred) = sigmoid(e1 - e2)."""
    if not (math.isfinite(e1) and math.isfinite(e2)):
        raise ValueError("Bradley-Terry inputs must be finite")
    return float(expit(e1 - e2))


def _discounted(values, gamma):
    return float(np.dot(gamma ** np.arange(len(values), dtype=np.float64), values))


def bt_probability_exact(pair: PreferencePair, sol: RegularizedSolution | None, pi_I,
                         C: float, gamma: float) -> float:
    """Partition-function form: both evaluations written through pi* and Z."""
    if sol is None or getattr(sol, "log_Z", None) is None:
        raise UnsolvedMdpError("exact preference probability needs a solved MDP")
    evals = []
    for traj in (pair.better, pair.worse):
        ratios = policy_log_ratios(traj, sol.pi_star, pi_I)
        evals.append(C * _discounted(ratios, gamma) + C * log_partition(traj, sol, gamma))
    return bt_probability(*evals)


def bt_lower_bound(pair: PreferencePair, log_ratios: Callable[[Any], np.ndarray],
                   C: float, gamma: float) -> float:
    """Partition-free form, a lower bound whenever Z(better) >= Z(worse).

    ``log_ratios(traj)`` returns the per-step log(pi(a|s) / pi_I(a|s)).
    """
    e1 = C * _discounted(log_ratios(pair.better), gamma)
    e2 = C * _discounted(log_ratios(pair.worse), gamma)
    return bt_probability(e1, e2)


def tabular_log_ratios(policy, pi_I):
    return lambda traj: policy_log_ratios(traj, policy, pi_I)


def simulate_preferences(trajs: Sequence, scores: Sequence[float], prompt_id=None) -> list[PreferencePair]:
    """All distinctly scored pairs among one prompt's samples, better first."""
    if len(trajs) != len(scores):
        raise ValueError(f"{len(trajs)} trajectories but {len(scores)} scores")
    if prompt_id is None and trajs:
        prompt_id = getattr(trajs[0], "prompt_id", None)
    pairs = []
    for i, j in combinations(range(len(trajs)), 2):
        if scores[i] == scores[j]:
            continue
        if scores[i] < scores[j]:
            i, j = j, i
        pairs.append(PreferencePair(prompt_id, trajs[i], trajs[j], float(scores[i]), float(scores[j])))
    return pairs


def win_rate(scores_a: Sequence[float], scores_b: Sequence[float]) -> float:
    """Fraction of paired indices where ``a`` beats ``b``; ties count one half."""
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("score lists must have equal length")
    if a.size == 0:
        raise ValueError("win rate of empty score lists")
    return float(((a > b).sum() + 0.5 * (a == b).sum()) / a.size)
