"""Versioned JSON run configuration.

One document describes a whole experiment: the noise schedule, the network,
pretraining, the alignment loop and the loss. Missing fields take defaults,
unknown fields are errors, and every problem is reported with its field path
(``train.lr``, ``loss.gamma`` ...). Values given on the command line are
applied on top of the file, so precedence is flags > file > defaults.
"""
from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError, FormatVersionError
from .loss import LossConfig
from .trainer import TrainerConfig

FORMAT_VERSION = 1


@dataclass(frozen=True)
class ScheduleSection:
    n_steps: int = 50
    beta_start: float = 0.004
    beta_end: float = 0.14


@dataclass(frozen=True)
class ModelSection:
    hidden: tuple[int, ...] = (64, 64)
    activation: str = "silu"
    n_freqs: int = 4
    guidance: float = 1.0


@dataclass(frozen=True)
class PretrainSection:
    iters: int = 3000
    batch_size: int = 256
    lr: float = 2e-3
    uncond_prob: float = 0.1


@dataclass(frozen=True)
class TrainSection:
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
    rank: int = 4
    prompts: tuple[str, ...] = ("single",)
    checkpoint_every: int | None = None


SINGLE_PROMPT_C = 10.0
MULTI_PROMPT_C = 12.5


@dataclass(frozen=True)
class LossSection:
    # null picks the single- or multi-prompt default from train.prompts
    C: float | None = None
    gamma: float = 0.9
    clip_eps: float | None = 1.0
    n_step: int = 3
    estimator: str = "sampled"


@dataclass(frozen=True)
class RunConfig:
    format_version: int = FORMAT_VERSION
    seed: int = 0
    output_dir: str = "runs/default"
    prompts_file: str | None = None
    eval_samples: int = 200
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    model: ModelSection = field(default_factory=ModelSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    train: TrainSection = field(default_factory=TrainSection)
    loss: LossSection = field(default_factory=LossSection)

    @property
    def effective_C(self) -> float:
        if self.loss.C is not None:
            return self.loss.C
        return MULTI_PROMPT_C if len(self.train.prompts) > 1 else SINGLE_PROMPT_C

    def loss_config(self) -> LossConfig:
        return LossConfig(**{**dataclasses.asdict(self.loss), "C": self.effective_C})

    def trainer_config(self, prompt_ids, seed=None) -> TrainerConfig:
        t = dataclasses.asdict(self.train)
        t.pop("prompts")
        t.pop("checkpoint_every")
        return TrainerConfig(seed=self.seed if seed is None else seed, prompt_ids=tuple(prompt_ids),
                             loss=self.loss_config(), **t)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _type_ok(value, hint):
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        return any(_type_ok(value, h) for h in typing.get_args(hint))
    if hint is type(None):
        return value is None
    if hint is bool:
        return isinstance(value, bool)
    if hint is int:
        return isinstance(value, int) and not isinstance(value, bool)
    if hint is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if hint is str:
        return isinstance(value, str)
    if origin is tuple:
        inner = typing.get_args(hint)[0]
        return isinstance(value, (list, tuple)) and all(_type_ok(v, inner) for v in value)
    return False


def _describe(hint):
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        return " or ".join(_describe(h) for h in typing.get_args(hint))
    if hint is type(None):
        return "null"
    if origin is tuple:
        return f"list of {_describe(typing.get_args(hint)[0])}"
    return {int: "integer", float: "number", str: "string", bool: "boolean"}.get(hint, str(hint))


def _convert(value, hint):
    if typing.get_origin(hint) is tuple:
        return tuple(value)
    if hint is float or (typing.get_origin(hint) in (typing.Union, types.UnionType)
                         and float in typing.get_args(hint) and isinstance(value, int)):
        return float(value)
    return value


def _build(cls, doc, path, problems):
    if not isinstance(doc, dict):
        problems.append((path, "expected an object"))
        return cls()
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key in doc:
        if key not in names:
            problems.append((f"{path}.{key}" if path else key, "unknown field"))
    for name in names:
        if name not in doc:
            continue
        where = f"{path}.{name}" if path else name
        hint, value = hints[name], doc[name]
        if dataclasses.is_dataclass(hint):
            kwargs[name] = _build(hint, value, where, problems)
        elif not _type_ok(value, hint):
            problems.append((where, f"expected {_describe(hint)}, got {json.dumps(value)}"))
        else:
            kwargs[name] = _convert(value, hint)
    return cls(**kwargs)


def _semantic_checks(cfg: RunConfig, problems):
    try:
        cfg.loss_config()
    except ValueError as exc:
        problems.append(("loss", str(exc)))
    try:
        cfg.trainer_config([0])
    except ConfigError as exc:
        problems.extend((f"train.{p}" if p else "train", m) for p, m in exc.problems)
    except ValueError as exc:
        problems.append(("train", str(exc)))
    s = cfg.schedule
    if s.n_steps < 1:
        problems.append(("schedule.n_steps", "must be positive"))
    if not 0 < s.beta_start <= s.beta_end < 1:
        problems.append(("schedule", "need 0 < beta_start <= beta_end < 1"))
    if cfg.model.activation not in ("tanh", "relu", "silu"):
        problems.append(("model.activation", "must be one of tanh, relu, silu"))
    if not cfg.model.hidden or min(cfg.model.hidden) < 1:
        problems.append(("model.hidden", "need at least one positive width"))
    if cfg.model.n_freqs < 0:
        problems.append(("model.n_freqs", "must be non-negative"))
    if cfg.model.guidance < 0:
        problems.append(("model.guidance", "must be non-negative"))
    if cfg.pretrain.iters < 0:
        problems.append(("pretrain.iters", "must be non-negative"))
    if cfg.pretrain.batch_size < 1:
        problems.append(("pretrain.batch_size", "must be positive"))
    if not cfg.pretrain.lr > 0:
        problems.append(("pretrain.lr", "must be positive"))
    if not 0 <= cfg.pretrain.uncond_prob <= 1:
        problems.append(("pretrain.uncond_prob", "must lie in [0, 1]"))
    if cfg.eval_samples < 1:
        problems.append(("eval_samples", "must be positive"))
    if not cfg.train.prompts:
        problems.append(("train.prompts", "need at least one prompt name"))
    if cfg.train.checkpoint_every is not None and cfg.train.checkpoint_every < 1:
        problems.append(("train.checkpoint_every", "must be positive or null"))
    if s.n_steps >= 1 and cfg.loss.n_step > s.n_steps:
        problems.append(("loss.n_step", f"exceeds schedule.n_steps={s.n_steps}"))


def config_from_dict(doc) -> RunConfig:
    if isinstance(doc, dict) and "format_version" in doc and doc["format_version"] != FORMAT_VERSION:
        raise FormatVersionError(f"unsupported config format_version {doc['format_version']!r}; "
                                 f"this build reads version {FORMAT_VERSION}")
    problems = []
    cfg = _build(RunConfig, doc, "", problems)
    if not problems:
        _semantic_checks(cfg, problems)
    if problems:
        raise ConfigError(problems)
    return cfg


def load_config(path) -> RunConfig:
    """Parse a config file; decoding problems carry the line and column."""
    path = Path(path)
    text = path.read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError([("", f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}")])
    return config_from_dict(doc)


def parse_override(text):
    """``section.field=value`` where value is JSON (bare words are taken as strings)."""
    if "=" not in text:
        raise ConfigError([("", f"override {text!r} is not of the form key=value")])
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def apply_overrides(doc: dict, overrides) -> dict:
    """Set dotted keys in a (copied) config document."""
    doc = json.loads(json.dumps(doc))
    for key, value in overrides:
        parts = key.split(".")
        node = doc
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError([(key, "cannot descend into a non-object")])
        node[parts[-1]] = value
    return doc


def default_config_path() -> Path:
    return Path(__file__).with_name("data") / "default_config.json"


def write_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(cfg.to_json())


__all__ = [
    "FORMAT_VERSION",
    "LossSection",
    "ModelSection",
    "PretrainSection",
    "RunConfig",
    "ScheduleSection",
    "TrainSection",
    "apply_overrides",
    "config_from_dict",
    "default_config_path",
    "load_config",
    "parse_override",
    "write_config",
]
