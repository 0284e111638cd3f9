"""Staged off-policy alignment loop.

Every ``m_col`` steps the current policy samples ``n_traj`` chains for each
of ``n_pr`` prompts drawn from p(c); the previous stage's storage is
discarded. Each optimisation step samples within-group preference pairs,
draws ``n_step`` timesteps per pair from Cat(gamma**t) and takes one
clipped-gradient AdamW step on the adapter only.

All randomness is derived from the master seed through
:class:`numpy.random.SeedSequence` keyed by (purpose, stage/step, ...), so a
run is reproducible and can be resumed from any checkpoint.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np
from scipy.special import expit

from . import container
from .diffusion import (
    DiffusionPolicy,
    DiffusionSchedule,
    DiffusionTrajectory,
    PromptSet,
    sample_batch,
)
from .errors import ConfigError, EmptyPoolError, IntegrityError, TrainingDivergenceError
from .loss import LossConfig, clip_ratios, softplus, timestep_distribution
from .nn import AdamWState, DenseNet, LowRankAdapter, adamw_step, clip_grad_norm
from .preference import PreferencePair, win_rate

_COLLECT_PROMPTS, _COLLECT_NOISE, _STEP, _EVAL, _ADAPTER = 1, 2, 3, 4, 0


def _rng(*key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


@dataclass(frozen=True)
class TrainerConfig:
    m_tr: int = 2000
    m_col: int = 500
    n_pr: int = 50
    n_traj: int = 5
    batch_size: int = 128
    lr: float = 1e-4
    weight_decay: float = 2e-3
    grad_clip: float = 1.0
    eval_every: int | None = None
    eval_samples: int = 100
    seed: int = 0
    prompt_ids: tuple = (0,)
    rank: int = 4
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        problems = []
        for name in ("m_tr", "m_col", "n_pr", "n_traj", "batch_size", "eval_samples", "rank"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < (0 if name == "m_tr" else 1):
                problems.append((name, f"expected a {'non-negative' if name == 'm_tr' else 'positive'} integer, got {v!r}"))
        if not problems:
            if self.m_tr % self.m_col:
                problems.append(("m_col", f"{self.m_col} does not divide m_tr={self.m_tr}"))
            if self.n_traj < 2:
                problems.append(("n_traj", "need at least two trajectories per prompt"))
        if self.eval_every is not None and (not isinstance(self.eval_every, int) or self.eval_every < 1):
            problems.append(("eval_every", "expected a positive integer or null"))
        if not self.lr > 0:
            problems.append(("lr", "must be positive"))
        if self.weight_decay < 0:
            problems.append(("weight_decay", "must be non-negative"))
        if not self.grad_clip > 0:
            problems.append(("grad_clip", "must be positive"))
        if len(self.prompt_ids) < 1:
            problems.append(("prompt_ids", "need at least one prompt"))
        if problems:
            raise ConfigError(problems)
        object.__setattr__(self, "prompt_ids", tuple(int(p) for p in self.prompt_ids))

    @property
    def eval_interval(self) -> int:
        if self.eval_every is not None:
            return self.eval_every
        return max(1, self.m_tr // 10)

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass
class TrajectoryStore:
    """One stage of collected chains, kept as arrays (row k is one trajectory)."""

    stage: int
    prompt_ids: np.ndarray
    group: np.ndarray
    latents: np.ndarray
    means: np.ndarray
    scores: np.ndarray
    pairs: np.ndarray

    def __len__(self):
        return self.scores.size

    def trajectory(self, k: int) -> DiffusionTrajectory:
        return DiffusionTrajectory(int(self.prompt_ids[k]), self.latents[k], self.means[k])

    @property
    def entries(self) -> dict:
        """prompt id -> list of (trajectory, score)."""
        out = {}
        for k in range(len(self)):
            out.setdefault(int(self.prompt_ids[k]), []).append((self.trajectory(k), float(self.scores[k])))
        return out

    def arrays(self) -> dict:
        return {f"store.{k}": getattr(self, k) for k in
                ("prompt_ids", "group", "latents", "means", "scores", "pairs")}

    @classmethod
    def from_arrays(cls, stage, arrays):
        return cls(stage, **{k.split(".", 1)[1]: v for k, v in arrays.items() if k.startswith("store.")})


def _group_pairs(group, scores):
    pairs = []
    for g in np.unique(group):
        members = np.flatnonzero(group == g)
        for i, j in combinations(members, 2):
            if scores[i] == scores[j]:
                continue
            pairs.append((i, j) if scores[i] > scores[j] else (j, i))
    return np.asarray(pairs, dtype=np.int64).reshape(-1, 2)


def stepwise_means(policy: DiffusionPolicy, latents, prompt_ids):
    """Policy means at every stored step, batched over all rows."""
    k, n1, d = latents.shape
    N = n1 - 1
    x = latents[:, :-1].reshape(-1, d)
    t = np.tile(N - np.arange(N), k)
    p = np.repeat(prompt_ids, N)
    return policy.mean(x, t, p).reshape(k, N, d)


def reference_means(policy: DiffusionPolicy, latents, prompt_ids):
    """pi_I means at every stored step, batched over all rows."""
    return stepwise_means(policy.reference(), latents, prompt_ids)


def collect_stage(policy: DiffusionPolicy, prompt_set: PromptSet, cfg: TrainerConfig, stage: int) -> TrajectoryStore:
    """Sample ``n_pr`` prompts from p(c) and ``n_traj`` scored chains for each."""
    N, d = policy.schedule.n_steps, policy.dim
    choices = np.asarray(cfg.prompt_ids)
    slots = _rng(cfg.seed, _COLLECT_PROMPTS, stage).choice(choices, size=cfg.n_pr, replace=True)
    prompt_ids = np.repeat(slots, cfg.n_traj)
    group = np.repeat(np.arange(cfg.n_pr), cfg.n_traj)
    noise = np.empty((cfg.n_pr * cfg.n_traj, N + 1, d))
    for slot in range(cfg.n_pr):
        for j in range(cfg.n_traj):
            gen = _rng(cfg.seed, _COLLECT_NOISE, stage, slot, j)
            noise[slot * cfg.n_traj + j] = gen.standard_normal((N + 1, d))
    latents = np.empty_like(noise)
    means = np.empty((noise.shape[0], N, d))
    scores = np.empty(noise.shape[0])
    for p in np.unique(prompt_ids):
        rows = np.flatnonzero(prompt_ids == p)
        latents[rows], means[rows] = sample_batch(policy, int(p), noise[rows])
        scores[rows] = prompt_set.score(latents[rows, -1], int(p))
    return TrajectoryStore(stage, prompt_ids, group, latents, means, scores,
                           _group_pairs(group, scores))


def _pair_indices(store: TrajectoryStore, batch_size: int, rng) -> np.ndarray:
    if store.pairs.shape[0] == 0:
        raise EmptyPoolError("every stored group is fully tied; no preference pair exists")
    return rng.integers(0, store.pairs.shape[0], size=batch_size)


def sample_minibatch(store: TrajectoryStore, batch_size: int, rng) -> list[PreferencePair]:
    """Uniform draw (with replacement) from the within-group pair pool."""
    out = []
    for k in _pair_indices(store, batch_size, rng):
        i, j = store.pairs[k]
        out.append(PreferencePair(int(store.prompt_ids[i]), store.trajectory(i), store.trajectory(j),
                                  float(store.scores[i]), float(store.scores[j])))
    return out


def batch_loss_and_grad(policy: DiffusionPolicy, store: TrajectoryStore, pair_idx, steps, loss_cfg: LossConfig):
    """Mean sampled-estimator loss over the mini-batch and its adapter gradient.

    ``steps`` has shape (batch, n_step): the timestep draws of every pair.
    Returns ``(loss, grad, mean_abs_ratio, per_pair_losses)``.
    """
    steps = np.asarray(steps, dtype=np.int64)
    B, n = steps.shape
    N = store.means.shape[1]
    better = np.repeat(store.pairs[pair_idx, 0], n)
    worse = np.repeat(store.pairs[pair_idx, 1], n)
    traj = np.concatenate([better, worse])
    step = np.concatenate([steps.ravel(), steps.ravel()])
    x = store.latents[traj, step]
    a = store.latents[traj, step + 1]
    t, p = N - step, store.prompt_ids[traj]
    # reference means from the same batched call as the policy means, so a
    # zero adapter gives bit-identical rows and exactly zero ratios
    ref = policy.reference().mean(x, t, p)
    ratios, cache = policy.log_ratio_rows(x, t, p, a, ref)
    clipped, inside = clip_ratios(ratios, loss_cfg.clip_eps)
    half = B * n
    margin = (clipped[:half] - clipped[half:]).reshape(B, n).mean(axis=1)
    losses = softplus(-loss_cfg.C * margin)
    coef = -loss_cfg.C * expit(-loss_cfg.C * margin) / (B * n)
    weights = np.concatenate([np.repeat(coef, n), -np.repeat(coef, n)]) * inside
    grad = policy.log_ratio_rows_vjp(cache, weights)
    return float(losses.mean()), grad, float(np.abs(ratios).mean()), losses


@dataclass(frozen=True)
class MetricsRecord:
    step: int
    stage: int
    loss: float
    mean_score: float
    win_rate: float
    mean_abs_logratio: float


METRIC_FIELDS = ("step", "stage", "loss", "mean_score", "win_rate", "mean_abs_logratio")


def metrics_csv(records) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRIC_FIELDS)
    for r in records:
        writer.writerow([r.step, r.stage, repr(r.loss), repr(r.mean_score), repr(r.win_rate),
                         repr(r.mean_abs_logratio)])
    return buf.getvalue()


def write_metrics_csv(path, records) -> None:
    Path(path).write_text(metrics_csv(records))


@dataclass
class TrainState:
    step: int
    adapter: LowRankAdapter
    optim: AdamWState
    store: TrajectoryStore | None = None
    metrics: list = field(default_factory=list)
    loss_sum: float = 0.0
    loss_count: int = 0


def initial_state(base: DiffusionPolicy, cfg: TrainerConfig) -> TrainState:
    adapter = LowRankAdapter.init(base.net, cfg.rank, _rng(cfg.seed, _ADAPTER))
    return TrainState(0, adapter, AdamWState.zeros(adapter.n_params))


class Evaluator:
    """Seed-paired evaluation against the frozen reference on fixed noise."""

    def __init__(self, base: DiffusionPolicy, prompt_set: PromptSet, cfg: TrainerConfig):
        self.prompt_set = prompt_set
        self.prompt_ids = list(cfg.prompt_ids)
        N, d = base.schedule.n_steps, base.dim
        self.noise = _rng(cfg.seed, _EVAL).standard_normal((len(self.prompt_ids), cfg.eval_samples, N + 1, d))
        self.base_scores = np.stack([
            prompt_set.score(sample_batch(base, p, self.noise[k])[0][:, -1], p)
            for k, p in enumerate(self.prompt_ids)
        ])

    def __call__(self, policy: DiffusionPolicy):
        scores, ratios = [], []
        for k, p in enumerate(self.prompt_ids):
            lat, means = sample_batch(policy, p, self.noise[k])
            scores.append(self.prompt_set.score(lat[:, -1], p))
            if policy.adapter is not None:
                prompts = np.full(lat.shape[0], p)
                ref = reference_means(policy, lat, prompts)
                means = stepwise_means(policy, lat, prompts)
                N = means.shape[1]
                sigma2 = policy.schedule.sigma2[N - np.arange(N) - 1]
                a = lat[:, 1:]
                r = (((a - ref) ** 2).sum(-1) - ((a - means) ** 2).sum(-1)) / (2 * sigma2)
                ratios.append(np.abs(r).ravel())
        scores = np.stack(scores)
        mean_abs = float(np.concatenate(ratios).mean()) if ratios else 0.0
        return float(scores.mean()), win_rate(scores.ravel(), self.base_scores.ravel()), mean_abs


@dataclass
class TrainResult:
    policy: DiffusionPolicy
    metrics: list
    state: TrainState


def train(base: DiffusionPolicy, prompt_set: PromptSet, cfg: TrainerConfig, state: TrainState | None = None,
          on_step=None) -> TrainResult:
    """Run (or resume) the alignment loop up to ``cfg.m_tr`` steps.

    ``on_step(state)`` is called after every completed step, e.g. to write
    checkpoints. Base network parameters are never modified.
    """
    if base.adapter is not None:
        raise ValueError("train expects the frozen reference policy (no adapter)")
    for p in cfg.prompt_ids:
        if not 0 <= p < len(prompt_set):
            raise ConfigError([("prompt_ids", f"prompt id {p} outside the prompt set")])
    N = base.schedule.n_steps
    cfg.loss.check_horizon(N)
    state = initial_state(base, cfg) if state is None else state
    policy = base.with_adapter(state.adapter)
    if cfg.m_tr == 0:
        return TrainResult(policy, state.metrics, state)
    evaluate = Evaluator(base, prompt_set, cfg)
    probs = timestep_distribution(cfg.loss.gamma, N)
    interval = cfg.eval_interval

    while state.step < cfg.m_tr:
        it = state.step
        stage = it // cfg.m_col
        if state.store is None or state.store.stage != stage:
            state.store = collect_stage(policy, prompt_set, cfg, stage)
        rng = _rng(cfg.seed, _STEP, it)
        pair_idx = _pair_indices(state.store, cfg.batch_size, rng)
        steps = rng.choice(N, size=(cfg.batch_size, cfg.loss.n_step), replace=True, p=probs)
        loss, grad, _, _ = batch_loss_and_grad(policy, state.store, pair_idx, steps, cfg.loss)
        if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
            raise TrainingDivergenceError(f"non-finite loss or gradient at step {it}", step=it)
        if it == 0:
            score, wr, mean_abs = evaluate(policy)
            state.metrics.append(MetricsRecord(0, 0, loss, score, wr, mean_abs))
        grad = clip_grad_norm(grad, cfg.grad_clip)
        new_params, state.optim = adamw_step(state.adapter.params, grad, state.optim, cfg.lr, cfg.weight_decay)
        state.adapter.params = new_params
        state.step += 1
        state.loss_sum += loss
        state.loss_count += 1
        if state.step % interval == 0 or state.step == cfg.m_tr:
            score, wr, mean_abs = evaluate(policy)
            state.metrics.append(MetricsRecord(state.step, stage, state.loss_sum / state.loss_count,
                                               score, wr, mean_abs))
            state.loss_sum, state.loss_count = 0.0, 0
        if on_step is not None:
            on_step(state)
    return TrainResult(policy, state.metrics, state)


# -- checkpoints ---------------------------------------------------------------

def policy_meta(policy: DiffusionPolicy) -> dict:
    return {
        "layer_widths": policy.net.layer_widths,
        "activation": policy.net.activation,
        "n_prompts": policy.n_prompts,
        "dim": policy.dim,
        "n_freqs": policy.n_freqs,
        "guidance": policy.guidance,
        "schedule": policy.schedule.to_dict(),
    }


def base_digest(policy: DiffusionPolicy) -> str:
    return hashlib.sha256(np.ascontiguousarray(policy.net.params, dtype="<f8").tobytes()).hexdigest()


def save_policy(path, policy: DiffusionPolicy, prompt_set: PromptSet | None = None, seed=None) -> None:
    """Base (pi_I) checkpoint."""
    meta = {"kind": "base", "policy": policy_meta(policy), "seed": seed,
            "counts": {"base": policy.net.n_params},
            "prompts": prompt_set.to_json() if prompt_set is not None else None}
    container.save(path, meta, {"base": policy.net.params})


def _policy_from_meta(meta, params) -> DiffusionPolicy:
    m = meta["policy"]
    sched = DiffusionSchedule(np.asarray(m["schedule"]["betas"]), m["schedule"]["clip_first_variance"])
    net = DenseNet(m["layer_widths"], m["activation"], params)
    return DiffusionPolicy(net, sched, m["n_prompts"], m["dim"], m["n_freqs"], guidance=m["guidance"])


def load_policy(path):
    """Returns ``(policy, prompt_set or None, meta)``."""
    meta, arrays = container.load(path)
    if meta.get("kind") != "base":
        raise IntegrityError(f"{path} is not a base checkpoint")
    prompts = PromptSet.from_json(meta["prompts"]) if meta.get("prompts") else None
    return _policy_from_meta(meta, arrays["base"]), prompts, meta


def save_train_state(path, base: DiffusionPolicy, state: TrainState, cfg: TrainerConfig) -> None:
    """Adapter, optimizer, storage and progress; bit-exact on reload."""
    meta = {
        "kind": "aligned",
        "policy": policy_meta(base),
        "base_sha256": base_digest(base),
        "config_digest": cfg.digest(),
        "seed": cfg.seed,
        "rank": state.adapter.rank,
        "scale": state.adapter.scale,
        "counts": {"adapter": state.adapter.n_params},
        "step": state.step,
        "optim": {"step": state.optim.step, "beta1": state.optim.beta1, "beta2": state.optim.beta2,
                  "eps": state.optim.eps},
        "rng": {"scheme": "seedsequence", "master_seed": cfg.seed, "next_step": state.step},
        "loss_sum": state.loss_sum.hex(),
        "loss_count": state.loss_count,
        "store_stage": None if state.store is None else state.store.stage,
        "metrics": [[r.step, r.stage] + [float(v).hex() for v in (r.loss, r.mean_score, r.win_rate, r.mean_abs_logratio)]
                    for r in state.metrics],
    }
    arrays = {"adapter": state.adapter.params, "adam.m": state.optim.m, "adam.v": state.optim.v}
    if state.store is not None:
        arrays.update(state.store.arrays())
    container.save(path, meta, arrays)


def load_train_state(path, base: DiffusionPolicy, cfg: TrainerConfig | None = None) -> TrainState:
    meta, arrays = container.load(path)
    if meta.get("kind") != "aligned":
        raise IntegrityError(f"{path} is not an alignment checkpoint")
    if meta["base_sha256"] != base_digest(base):
        raise IntegrityError("checkpoint was trained on a different base model")
    if cfg is not None and meta["config_digest"] != cfg.digest():
        raise ConfigError([("", "checkpoint configuration digest does not match the given configuration")])
    adapter = LowRankAdapter(base.net, meta["rank"], meta["scale"], arrays["adapter"])
    o = meta["optim"]
    optim = AdamWState(arrays["adam.m"], arrays["adam.v"], o["step"], o["beta1"], o["beta2"], o["eps"])
    store = None
    if meta["store_stage"] is not None:
        store = TrajectoryStore.from_arrays(meta["store_stage"], arrays)
    metrics = [MetricsRecord(s, g, *(float.fromhex(v) for v in rest)) for s, g, *rest in meta["metrics"]]
    return TrainState(meta["step"], adapter, optim, store, metrics, float.fromhex(meta["loss_sum"]),
                      meta["loss_count"])


checkpoint = save_train_state
restore = load_train_state


def load_aligned_policy(path, base: DiffusionPolicy) -> DiffusionPolicy:
    return base.with_adapter(load_train_state(path, base).adapter)


__all__ = [
    "MetricsRecord",
    "TrainState",
    "TrainerConfig",
    "TrajectoryStore",
    "batch_loss_and_grad",
    "checkpoint",
    "collect_stage",
    "load_policy",
    "load_train_state",
    "metrics_csv",
    "restore",
    "sample_minibatch",
    "save_policy",
    "save_train_state",
    "train",
    "write_metrics_csv",
]
