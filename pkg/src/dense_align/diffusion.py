"""Toy conditional Gaussian diffusion over low-dimensional points.

The reverse chain x_N -> x_0 is read as an MDP: step ``i`` (0 = noisiest)
has state x_t with diffusion time ``t = N - i`` and action x_{t-1}. Every
policy shares the schedule's fixed reverse variance, so log density ratios
between two policies depend only on their means.
"""
from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .errors import DegenerateDensityError, SamplingDivergedError, TrainingDivergenceError
from .nn import AdamWState, DenseNet, LowRankAdapter, adamw_step, backward, forward
from .preference import win_rate


@dataclass(frozen=True, eq=False)
class DiffusionSchedule:
    """Per-step arrays are indexed by diffusion time ``t - 1`` for t = 1..N.

    The posterior variance at t = 1 is zero; with ``clip_first_variance`` it
    is replaced by the t = 2 value (or beta_1 when N = 1) so every step has a
    proper density.
    """

    betas: np.ndarray
    clip_first_variance: bool = True

    def __post_init__(self):
        betas = np.array(self.betas, dtype=np.float64).reshape(-1)
        if betas.size < 1 or betas.min() <= 0 or betas.max() >= 1:
            raise ValueError("betas must lie in (0, 1)")
        alphas = 1.0 - betas
        alpha_bar = np.cumprod(alphas)
        prev = np.concatenate([[1.0], alpha_bar[:-1]])
        sigma2 = (1.0 - prev) / (1.0 - alpha_bar) * betas
        if self.clip_first_variance:
            sigma2[0] = sigma2[1] if betas.size > 1 else betas[0]
        for name, val in (("betas", betas), ("alphas", alphas), ("alpha_bar", alpha_bar),
                          ("sigma2", sigma2)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)
        object.__setattr__(self, "mean_scale", 1.0 / np.sqrt(alphas))
        object.__setattr__(self, "eps_scale", betas / np.sqrt(1.0 - alpha_bar))

    @property
    def n_steps(self) -> int:
        return self.betas.size

    def to_dict(self):
        return {"betas": self.betas.tolist(), "clip_first_variance": self.clip_first_variance}


def make_schedule(n_steps: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> DiffusionSchedule:
    """Linear beta schedule."""
    if n_steps < 1:
        raise ValueError("n_steps must be positive")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    return DiffusionSchedule(np.linspace(beta_start, beta_end, n_steps))


@dataclass(frozen=True, eq=False)
class Prompt:
    """Isotropic Gaussian-mixture target for one prompt."""

    name: str
    means: np.ndarray
    stds: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        stds = np.asarray(self.stds, dtype=np.float64).reshape(-1)
        weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if not (means.shape[0] == stds.size == weights.size) or stds.size == 0:
            raise ValueError(f"prompt {self.name!r}: component arrays disagree in length")
        if stds.min() <= 0:
            raise ValueError(f"prompt {self.name!r}: stds must be positive")
        if weights.min() < 0 or abs(weights.sum() - 1.0) > 1e-9:
            raise ValueError(f"prompt {self.name!r}: weights must sum to 1")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "stds", stds)
        object.__setattr__(self, "weights", weights)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def log_density(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        d = self.dim
        sq = ((x[:, None, :] - self.means[None, :, :]) ** 2).sum(axis=-1)
        comp = (np.log(self.weights) - d * np.log(self.stds) - 0.5 * d * math.log(2 * math.pi)
                - sq / (2 * self.stds**2))
        return logsumexp(comp, axis=1)

    def sample(self, rng, n: int) -> np.ndarray:
        k = rng.choice(self.weights.size, size=n, p=self.weights)
        return self.means[k] + self.stds[k, None] * rng.standard_normal((n, self.dim))


class PromptSet:
    def __init__(self, prompts):
        self.prompts = list(prompts)
        if not self.prompts:
            raise ValueError("empty prompt set")
        dims = {p.dim for p in self.prompts}
        if len(dims) != 1:
            raise ValueError("all prompts must share the data dimension")
        self.dim = dims.pop()
        names = [p.name for p in self.prompts]
        if len(set(names)) != len(names):
            raise ValueError("prompt names must be unique")

    def __len__(self):
        return len(self.prompts)

    def __getitem__(self, i):
        return self.prompts[i]

    @property
    def names(self):
        return [p.name for p in self.prompts]

    def index(self, name) -> int:
        return self.names.index(name)

    def score(self, x0, prompt_id: int):
        """Target log density of final samples (higher is preferred)."""
        out = self.prompts[prompt_id].log_density(x0)
        return float(out[0]) if np.ndim(x0) == 1 else out

    def to_json(self) -> list:
        return [
            {
                "name": p.name,
                "components": [
                    {"mean": m.tolist(), "std": float(s), "weight": float(w)}
                    for m, s, w in zip(p.means, p.stds, p.weights)
                ],
            }
            for p in self.prompts
        ]

    @classmethod
    def from_json(cls, doc) -> "PromptSet":
        if not isinstance(doc, list):
            raise ValueError("prompt set must be a JSON list")
        prompts = []
        for i, entry in enumerate(doc):
            try:
                comps = entry["components"]
                prompts.append(Prompt(
                    str(entry["name"]),
                    [c["mean"] for c in comps],
                    [c["std"] for c in comps],
                    [c["weight"] for c in comps],
                ))
            except (KeyError, TypeError) as exc:
                raise ValueError(f"prompt [{i}]: missing or malformed field {exc}") from None
        return cls(prompts)

    @classmethod
    def load(cls, path) -> "PromptSet":
        return cls.from_json(json.loads(Path(path).read_text()))


def default_prompts() -> PromptSet:
    """Four 2-D targets: one blob, four blobs, two separated blobs, an off-centre blob."""
    return PromptSet([
        Prompt("single", [[0.0, 0.0]], [0.5], [1.0]),
        Prompt("four", [[1.5, 1.5], [-1.5, 1.5], [-1.5, -1.5], [1.5, -1.5]], [0.3] * 4, [0.25] * 4),
        Prompt("two", [[-2.0, 0.0], [2.0, 0.0]], [0.4, 0.4], [0.5, 0.5]),
        Prompt("offcenter", [[2.0, -1.0]], [0.35], [1.0]),
    ])


def score(prompt_set: PromptSet, x0, prompt_id: int):
    return prompt_set.score(x0, prompt_id)


def gaussian_log_prob(x, mean, sigma2):
    """Isotropic Gaussian log density, row-wise."""
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[-1]
    sq = ((x - mean) ** 2).sum(axis=-1)
    return -sq / (2 * sigma2) - 0.5 * d * np.log(2 * math.pi * sigma2)


@dataclass(frozen=True, eq=False)
class DiffusionTrajectory:
    """Stored reverse chain: ``latents[i]`` is x_{N-i}; ``means[i]`` produced latents[i+1]."""

    prompt_id: int
    latents: np.ndarray
    means: np.ndarray
    seed: int | None = None

    def __len__(self):
        return self.means.shape[0]


class DiffusionPolicy:
    """Noise predictor on (x, sinusoidal time embedding, prompt one-hot).

    Without an adapter this is the frozen reference policy. Guidance mixes
    the conditional and unconditional (all-zero prompt code) predictions as
    ``eps_u + w * (eps_c - eps_u)``; ``w = 1`` uses the conditional branch only.
    """

    def __init__(self, net: DenseNet, schedule: DiffusionSchedule, n_prompts: int, dim: int = 2,
                 n_freqs: int = 4, adapter: LowRankAdapter | None = None, guidance: float = 1.0):
        if guidance < 0:
            raise ValueError("guidance weight must be non-negative")
        self.net = net
        self.schedule = schedule
        self.n_prompts = int(n_prompts)
        self.dim = int(dim)
        self.n_freqs = int(n_freqs)
        self.adapter = adapter
        self.guidance = float(guidance)
        expected = self.dim + 2 * self.n_freqs + self.n_prompts
        if net.layer_widths[0] != expected or net.layer_widths[-1] != self.dim:
            raise ValueError(f"network must map {expected} inputs to {self.dim} outputs")

    @classmethod
    def create(cls, schedule, n_prompts, hidden=(64, 64), activation="silu", dim=2, n_freqs=4,
               guidance=1.0, rng=None):
        widths = [dim + 2 * n_freqs + n_prompts, *hidden, dim]
        return cls(DenseNet.init(widths, activation, rng), schedule, n_prompts, dim, n_freqs,
                   guidance=guidance)

    def reference(self) -> "DiffusionPolicy":
        return DiffusionPolicy(self.net, self.schedule, self.n_prompts, self.dim, self.n_freqs,
                               None, self.guidance)

    def with_adapter(self, adapter: LowRankAdapter | None) -> "DiffusionPolicy":
        return DiffusionPolicy(self.net, self.schedule, self.n_prompts, self.dim, self.n_freqs,
                               adapter, self.guidance)

    @property
    def params(self):
        return self.adapter.params

    @params.setter
    def params(self, value):
        self.adapter.params = np.asarray(value, dtype=np.float64)

    def features(self, x, t, prompts, cond=True):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        n = x.shape[0]
        tau = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,)) / self.schedule.n_steps
        ang = tau[:, None] * (math.pi * 2.0 ** np.arange(self.n_freqs))[None, :]
        code = np.zeros((n, self.n_prompts))
        if cond:
            code[np.arange(n), np.broadcast_to(np.asarray(prompts, dtype=np.int64), (n,))] = 1.0
        return np.concatenate([x, np.sin(ang), np.cos(ang), code], axis=1)

    def _guided(self):
        return self.guidance != 1.0

    def eps(self, x, t, prompts, return_cache=False):
        out_c, cache_c = forward(self.net, self.adapter, self.features(x, t, prompts), True)
        if not self._guided():
            return (out_c, (cache_c, None)) if return_cache else out_c
        out_u, cache_u = forward(self.net, self.adapter, self.features(x, t, prompts, cond=False), True)
        out = out_u + self.guidance * (out_c - out_u)
        return (out, (cache_c, cache_u)) if return_cache else out

    def mean(self, x, t, prompts, return_cache=False):
        """Reverse-step mean at diffusion time ``t`` (scalar or per row)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        idx = np.broadcast_to(np.asarray(t, dtype=np.int64), (x.shape[0],)) - 1
        e, cache = self.eps(x, t, prompts, return_cache=True)
        c1 = self.schedule.mean_scale[idx][:, None]
        c2 = self.schedule.eps_scale[idx][:, None]
        mu = c1 * (x - c2 * e)
        return (mu, (cache, c1 * c2)) if return_cache else mu

    def mean_vjp(self, cache, grad_mu):
        """Adapter (or full-network, without adapter) gradient of sum(grad_mu * mean)."""
        (cache_c, cache_u), dmu_deps = cache
        g_eps = -dmu_deps * grad_mu
        if cache_u is None:
            grad = backward(self.net, self.adapter, cache_c, g_eps)
            return grad.adapter if self.adapter is not None else grad.base
        w = self.guidance
        gc = backward(self.net, self.adapter, cache_c, w * g_eps)
        gu = backward(self.net, self.adapter, cache_u, (1.0 - w) * g_eps)
        if self.adapter is not None:
            return gc.adapter + gu.adapter
        return gc.base + gu.base

    def sigma2_at(self, t):
        sigma2 = self.schedule.sigma2[np.asarray(t, dtype=np.int64) - 1]
        if np.any(sigma2 <= 0):
            raise DegenerateDensityError("zero reverse variance at a stochastic step")
        return sigma2

    # -- batched log ratios against the reference policy ------------------

    def log_ratio_rows(self, x, t, prompts, actions, ref_means):
        """log pi(a|s) - log pi_I(a|s) for rows sharing the fixed reverse variance."""
        mu, cache = self.mean(x, t, prompts, return_cache=True)
        sigma2 = self.sigma2_at(np.broadcast_to(t, (mu.shape[0],)))
        actions = np.atleast_2d(actions)
        ratios = (((actions - ref_means) ** 2).sum(axis=1) - ((actions - mu) ** 2).sum(axis=1)) / (2 * sigma2)
        return ratios, (cache, (actions - mu) / sigma2[:, None])

    def log_ratio_rows_vjp(self, row_cache, weights):
        cache, dratio_dmu = row_cache
        return self.mean_vjp(cache, np.asarray(weights)[:, None] * dratio_dmu)

    # -- per-trajectory protocol used by the generic loss ------------------

    def _rows(self, traj):
        n = len(traj)
        t = self.schedule.n_steps - np.arange(n)
        return traj.latents[:-1], t, np.full(n, traj.prompt_id), traj.latents[1:]

    def log_ratios(self, traj):
        x, t, p, a = self._rows(traj)
        ref = self.reference().mean(x, t, p)
        return self.log_ratio_rows(x, t, p, a, ref)[0]

    def log_ratio_vjp(self, traj, weights):
        x, t, p, a = self._rows(traj)
        ref = self.reference().mean(x, t, p)
        _, cache = self.log_ratio_rows(x, t, p, a, ref)
        return self.log_ratio_rows_vjp(cache, weights)


def sample_batch(policy: DiffusionPolicy, prompts, noise, noiseless: bool = False):
    """Run reverse chains from explicit noise of shape (n, N+1, d).

    ``noise[:, 0]`` is x_N; ``noise[:, i+1]`` drives step i. Returns
    ``(latents, means)`` with shapes (n, N+1, d) and (n, N, d).
    """
    noise = np.asarray(noise, dtype=np.float64)
    n, n1, d = noise.shape
    N = policy.schedule.n_steps
    if n1 != N + 1:
        raise ValueError(f"noise has {n1 - 1} steps, schedule has {N}")
    prompts = np.broadcast_to(np.asarray(prompts, dtype=np.int64), (n,))
    latents = np.empty((n, N + 1, d))
    means = np.empty((n, N, d))
    latents[:, 0] = noise[:, 0]
    for i in range(N):
        t = N - i
        mu = policy.mean(latents[:, i], t, prompts)
        means[:, i] = mu
        if noiseless:
            latents[:, i + 1] = mu
        else:
            latents[:, i + 1] = mu + math.sqrt(policy.schedule.sigma2[t - 1]) * noise[:, i + 1]
        if not np.all(np.isfinite(latents[:, i + 1])):
            raise SamplingDivergedError(f"non-finite latent at step {i}")
    return latents, means


def _as_rng(rng):
    if isinstance(rng, np.random.Generator):
        return rng, None
    return np.random.default_rng(rng), int(rng) if isinstance(rng, (int, np.integer)) else None


def sample_trajectory(policy: DiffusionPolicy, prompt_id: int, rng, noiseless: bool = False) -> DiffusionTrajectory:
    """One reverse chain; ``rng`` is a Generator or an integer seed (recorded)."""
    if not 0 <= prompt_id < policy.n_prompts:
        raise ValueError(f"invalid prompt id {prompt_id}")
    gen, seed = _as_rng(rng)
    noise = gen.standard_normal((1, policy.schedule.n_steps + 1, policy.dim))
    latents, means = sample_batch(policy, [prompt_id], noise, noiseless)
    return DiffusionTrajectory(prompt_id, latents[0], means[0], seed)


def step_log_prob(policy: DiffusionPolicy, traj: DiffusionTrajectory, i: int) -> float:
    """log pi(x_{t-1} | x_t) of the stored action at step ``i`` under ``policy``."""
    N = policy.schedule.n_steps
    if not 0 <= i < len(traj):
        raise IndexError(f"step {i} outside 0..{len(traj) - 1}")
    t = N - i
    sigma2 = float(policy.sigma2_at(t))
    mu = policy.mean(traj.latents[i], t, [traj.prompt_id])[0]
    return float(gaussian_log_prob(traj.latents[i + 1], mu, sigma2))


def forward_noise(schedule: DiffusionSchedule, x0, t, eps):
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    ab = schedule.alpha_bar[np.asarray(t) - 1]
    ab = np.reshape(ab, np.shape(ab) + (1,) * (np.ndim(x0) - np.ndim(ab)))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


@dataclass
class PretrainResult:
    policy: DiffusionPolicy
    losses: list = field(default_factory=list)


def pretrain_base(policy: DiffusionPolicy, prompt_set: PromptSet, n_iters: int, rng,
                  batch_size: int = 256, lr: float = 1e-3, uncond_prob: float = 0.1,
                  prompt_weights=None) -> PretrainResult:
    """Denoising regression of the noise predictor; returns a new frozen base."""
    if policy.adapter is not None:
        raise ValueError("pretraining expects a policy without adapter")
    net = copy.deepcopy(policy.net)
    base = DiffusionPolicy(net, policy.schedule, policy.n_prompts, policy.dim, policy.n_freqs,
                           None, policy.guidance)
    state = AdamWState.zeros(net.n_params)
    N = policy.schedule.n_steps
    probs = None if prompt_weights is None else np.asarray(prompt_weights, dtype=np.float64)
    losses = []
    for it in range(n_iters):
        prompts = rng.choice(len(prompt_set), size=batch_size, p=probs)
        x0 = np.empty((batch_size, policy.dim))
        for p in np.unique(prompts):
            rows = prompts == p
            x0[rows] = prompt_set[p].sample(rng, int(rows.sum()))
        t = rng.integers(1, N + 1, size=batch_size)
        eps = rng.standard_normal((batch_size, policy.dim))
        xt = forward_noise(policy.schedule, x0, t, eps)
        feats = base.features(xt, t, prompts)
        drop = rng.random(batch_size) < uncond_prob
        feats[drop, policy.dim + 2 * policy.n_freqs:] = 0.0
        pred, cache = forward(net, None, feats, return_cache=True)
        resid = pred - eps
        loss = float((resid**2).sum(axis=1).mean())
        if not math.isfinite(loss):
            raise TrainingDivergenceError("non-finite pretraining loss", step=it)
        losses.append(loss)
        grad = backward(net, None, cache, 2.0 * resid / batch_size).base
        net.params, state = adamw_step(net.params, grad, state, lr, 0.0)
    return PretrainResult(base, losses)


@dataclass
class EvalResult:
    mean_score_per_prompt: dict
    mean_score: float
    win_rate: float
    scores: np.ndarray
    baseline_scores: np.ndarray
    latents: np.ndarray = field(repr=False, default=None)


def eval_noise(policy: DiffusionPolicy, n_prompts: int, n_samples: int, rng) -> np.ndarray:
    gen, _ = _as_rng(rng)
    return gen.standard_normal((n_prompts, n_samples, policy.schedule.n_steps + 1, policy.dim))


def evaluate_policy(policy: DiffusionPolicy, baseline: DiffusionPolicy, prompt_set: PromptSet,
                    n_samples: int = 100, rng=0, prompt_ids=None, noise=None,
                    baseline_scores=None) -> EvalResult:
    """Mean scores and the seed-paired win rate of ``policy`` over ``baseline``.

    Sample ``j`` of each prompt uses identical noise for both policies.
    ``baseline_scores`` may be passed to skip re-sampling a fixed baseline.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be positive")
    ids = list(range(len(prompt_set))) if prompt_ids is None else list(prompt_ids)
    if noise is None:
        noise = eval_noise(policy, len(ids), n_samples, rng)
    scores = np.empty((len(ids), n_samples))
    base = np.empty((len(ids), n_samples)) if baseline_scores is None else np.asarray(baseline_scores)
    finals = np.empty((len(ids), n_samples, policy.dim))
    for k, p in enumerate(ids):
        lat, _ = sample_batch(policy, p, noise[k])
        finals[k] = lat[:, -1]
        scores[k] = prompt_set.score(lat[:, -1], p)
        if baseline_scores is None:
            blat, _ = sample_batch(baseline, p, noise[k])
            base[k] = prompt_set.score(blat[:, -1], p)
    per_prompt = {prompt_set[p].name: float(scores[k].mean()) for k, p in enumerate(ids)}
    return EvalResult(per_prompt, float(scores.mean()), win_rate(scores.ravel(), base.ravel()),
                      scores, base, finals)
