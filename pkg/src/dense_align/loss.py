"""Discounted preference-alignment loss and its gradient.

For a pair (better, worse) with per-step log ratios
l_t = log(pi_theta(a_t|s_t) / pi_I(a_t|s_t)) the loss is

    -log sigmoid(C * E_{t ~ Cat(gamma**t)}[clip(l1_t) - clip(l2_t)])

where C already absorbs the normalisation of the discount weights. With
gamma = 1 the timestep weights are uniform and the loss is the
trajectory-level (DPO-style) objective.

A log-ratio evaluator is any callable ``traj -> per-step ratios``. A
differentiable policy additionally provides ``params`` (flat array, settable)
and ``log_ratio_vjp(traj, weights)`` returning sum_t weights[t] * grad l_t.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Literal

import numpy as np
from scipy.special import expit

from .mdp import EXP_QUADRATIC_ROOT, policy_log_ratios, validate_C
from .preference import PreferencePair

log = logging.getLogger(__name__)

LN2 = math.log(2.0)

Estimator = Literal["full_expectation", "sampled"]


@dataclass(frozen=True)
class LossConfig:
    """Loss hyperparameters.

    ``clip_eps`` is the half-width of the log-ratio clip band; ``None``
    disables clipping and ``0`` switches the ratio term off entirely.
    """

    C: float = 10.0
    gamma: float = 0.9
    clip_eps: float | None = None
    n_step: int = 3
    estimator: Estimator = "sampled"

    def __post_init__(self):
        if not self.C > 0:
            raise ValueError("C must be positive")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if self.clip_eps is not None and not self.clip_eps >= 0:
            raise ValueError("clip_eps must be non-negative or None")
        if int(self.n_step) != self.n_step or self.n_step < 1:
            raise ValueError("n_step must be a positive integer")
        if self.estimator not in ("full_expectation", "sampled"):
            raise ValueError(f"unknown estimator {self.estimator!r}")

    def check_horizon(self, horizon: int) -> bool:
        """Validate against a trajectory length; warn when the de-absorbed C is small.

        Returns whether the de-absorbed coefficient passes :func:`validate_C`.
        """
        if self.n_step > horizon:
            raise ValueError(f"n_step={self.n_step} exceeds horizon {horizon}")
        if self.gamma == 1.0:
            raw = self.C / horizon
        else:
            raw = self.C * (1 - self.gamma) / (1 - self.gamma**horizon)
        ok = validate_C(raw, 1.0)
        if not ok:
            log.warning("de-absorbed KL coefficient %.4g is below 1/%.4f; partition ordering "
                        "is not guaranteed", raw, EXP_QUADRATIC_ROOT)
        return ok


def timestep_distribution(gamma: float, n: int) -> np.ndarray:
    """Cat(gamma**t) over t = 0..n-1."""
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    if n < 1:
        raise ValueError("n must be positive")
    if gamma == 1.0:
        return np.full(n, 1.0 / n)
    w = gamma ** np.arange(n, dtype=np.float64)
    return w / w.sum()


def clip_ratios(ratios, clip_eps):
    """Clamp to [-eps, eps]; returns the clipped values and the pass-through mask."""
    ratios = np.asarray(ratios, dtype=np.float64)
    if clip_eps is None:
        return ratios, np.ones(ratios.shape, dtype=bool)
    inside = np.abs(ratios) < clip_eps
    return np.clip(ratios, -clip_eps, clip_eps), inside


def clipped_log_ratio(log_p_theta: float, log_p_I: float, clip_eps: float | None) -> float:
    value, _ = clip_ratios(log_p_theta - log_p_I, clip_eps)
    return float(value)


def softplus(x):
    return np.logaddexp(0.0, x)


def _weighted_margin(pair, log_ratios, cfg, weights):
    l1, m1 = clip_ratios(log_ratios(pair.better), cfg.clip_eps)
    l2, m2 = clip_ratios(log_ratios(pair.worse), cfg.clip_eps)
    margin = float(np.dot(weights, l1 - l2))
    return margin, m1, m2


def loss_full(pair: PreferencePair, log_ratios, cfg: LossConfig) -> float:
    """Loss with the exact expectation over timesteps."""
    weights = timestep_distribution(cfg.gamma, len(pair.better))
    margin, _, _ = _weighted_margin(pair, log_ratios, cfg, weights)
    return float(softplus(-cfg.C * margin))


def draw_timesteps(cfg: LossConfig, horizon: int, rng: np.random.Generator) -> np.ndarray:
    """``n_step`` i.i.d. draws from Cat(gamma**t), with replacement."""
    probs = timestep_distribution(cfg.gamma, horizon)
    return rng.choice(horizon, size=cfg.n_step, replace=True, p=probs)


def step_weights(steps, horizon: int) -> np.ndarray:
    """Empirical weights of a set of drawn timesteps (the sample mean as a dot product)."""
    steps = np.asarray(steps, dtype=np.int64)
    return np.bincount(steps, minlength=horizon).astype(np.float64) / steps.size


def loss_at_steps(pair: PreferencePair, log_ratios, cfg: LossConfig, steps) -> float:
    """Sampled-estimator loss for a fixed set of timestep draws."""
    weights = step_weights(steps, len(pair.better))
    margin, _, _ = _weighted_margin(pair, log_ratios, cfg, weights)
    return float(softplus(-cfg.C * margin))


def loss_sampled(pair: PreferencePair, log_ratios, cfg: LossConfig, rng: np.random.Generator) -> float:
    """Average the clipped differences at ``n_step`` drawn timesteps, inside the sigmoid."""
    steps = draw_timesteps(cfg, len(pair.better), rng)
    return loss_at_steps(pair, log_ratios, cfg, steps)


def loss_and_gradient(pair: PreferencePair, policy, cfg: LossConfig, steps=None):
    """Loss and its parameter gradient.

    With ``steps=None`` the exact timestep expectation is used, otherwise the
    sampled estimator with those (frozen) draws. The descent direction is

        -grad = sigmoid(-C m) * C * sum_t w_t (grad l1_t - grad l2_t)

    with saturated (clipped) steps contributing nothing.
    """
    horizon = len(pair.better)
    if steps is None:
        weights = timestep_distribution(cfg.gamma, horizon)
    else:
        weights = step_weights(steps, horizon)
    margin, m1, m2 = _weighted_margin(pair, policy.log_ratios, cfg, weights)
    loss = float(softplus(-cfg.C * margin))
    coef = -cfg.C * float(expit(-cfg.C * margin))
    grad = policy.log_ratio_vjp(pair.better, coef * weights * m1)
    grad -= policy.log_ratio_vjp(pair.worse, coef * weights * m2)
    return loss, grad


def loss_gradient(pair: PreferencePair, policy, cfg: LossConfig, steps=None) -> np.ndarray:
    return loss_and_gradient(pair, policy, cfg, steps)[1]


def dpo_trajectory_variant(pair: PreferencePair, log_ratios, cfg: LossConfig) -> float:
    """Trajectory-level reward variant: the loss at gamma = 1."""
    if cfg.gamma != 1.0:
        cfg = replace(cfg, gamma=1.0)
    return loss_full(pair, log_ratios, cfg)


class TabularSoftmaxPolicy:
    """pi_theta(a|s) = softmax(logits[s])[a], differentiable in ``logits``."""

    def __init__(self, logits, pi_I):
        self.pi_I = np.asarray(pi_I, dtype=np.float64)
        self.shape = self.pi_I.shape
        self.params = np.array(logits, dtype=np.float64).reshape(-1)
        if self.params.size != self.pi_I.size:
            raise ValueError("logits and pi_I shapes differ")

    @classmethod
    def from_reference(cls, pi_I):
        """Start exactly at pi_I (logits = log pi_I)."""
        return cls(np.log(np.asarray(pi_I, dtype=np.float64)), pi_I)

    def probs(self):
        z = self.params.reshape(self.shape)
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def log_ratios(self, traj):
        return policy_log_ratios(traj, self.probs(), self.pi_I)

    def log_prob_vjp(self, traj, weights):
        """sum_t weights[t] * grad log pi_theta(a_t|s_t)."""
        p = self.probs()
        grad = np.zeros(self.shape)
        for s, a, w in zip(traj.states, traj.actions, weights):
            if w == 0.0:
                continue
            grad[s] -= w * p[s]
            grad[s, a] += w
        return grad.reshape(-1)

    # pi_I is fixed, so the ratio gradient is the log-likelihood gradient
    log_ratio_vjp = log_prob_vjp


def loss_bounds(C: float, clip_eps: float) -> tuple[float, float]:
    """Range of the loss when every ratio is clipped to [-eps, eps]."""
    b = C * clip_eps
    return float(softplus(-2 * b)), float(softplus(2 * b))


__all__ = [
    "LossConfig",
    "TabularSoftmaxPolicy",
    "clip_ratios",
    "clipped_log_ratio",
    "dpo_trajectory_variant",
    "draw_timesteps",
    "loss_and_gradient",
    "loss_bounds",
    "loss_at_steps",
    "loss_full",
    "loss_gradient",
    "loss_sampled",
    "softplus",
    "step_weights",
    "timestep_distribution",
]
