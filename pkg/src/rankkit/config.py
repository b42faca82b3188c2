"""Experiment configuration: nested dataclasses loaded from JSON with
unknown-key rejection."""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field

from .datagen import WorldConfig
from .embeddings import EmbeddingConfig
from .errors import ConfigError
from .model import ModelConfig
from .training import IncrementalConfig, OptimizerConfig


@dataclass
class BanditConfig:
    prior_scale: float = 1.0
    noise_variance: float = 1.0
    rounds: int = 2000
    arm_means: tuple = (0.9, 0.1)
    noise_sd: float = 1.0
    explore_pulls: int = 10
    update_every: int = 1
    candidates: int = 8
    buffer_capacity: int = 100_000
    task: str = "click"

    def validate(self):
        if not (self.prior_scale > 0 and self.noise_variance > 0):
            raise ConfigError("bandit prior_scale and noise_variance must be positive")
        if self.rounds < 1 or self.update_every < 1:
            raise ConfigError("bandit rounds and update_every must be positive")


@dataclass
class DataConfig:
    rows_per_window: int = 10_000
    cold_rows: int = 30_000
    test_rows: int = 20_000
    windows: int = 2
    replay_sessions: int = 1000
    top_n: int = 5
    replay_candidates: int = 8
    train_path: str | None = None
    test_path: str | None = None
    replay_path: str | None = None

    def validate(self):
        if min(self.rows_per_window, self.cold_rows, self.test_rows) < 1:
            raise ConfigError("row counts must be positive")
        if self.windows < 1:
            raise ConfigError("windows must be >= 1")
        if self.top_n < 2:
            raise ConfigError("top_n must be >= 2")


@dataclass
class ExperimentConfig:
    seed: int = 0
    world: WorldConfig = field(default_factory=WorldConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    incremental: IncrementalConfig = field(default_factory=IncrementalConfig)
    bandit: BanditConfig = field(default_factory=BanditConfig)
    data: DataConfig = field(default_factory=DataConfig)
    quantize_embeddings: bool = False

    def validate(self) -> "ExperimentConfig":
        self.model.validate()
        self.optimizer.validate()
        self.incremental.validate()
        self.bandit.validate()
        self.data.validate()
        if self.model.dense_dim != self.world.dense_dim:
            raise ConfigError("model.dense_dim must equal world.dense_dim")
        unknown_tasks = set(self.model.tasks) - set(self.world.tasks)
        if unknown_tasks:
            raise ConfigError(f"model tasks {sorted(unknown_tasks)} are not produced by the world")
        return self

    def to_dict(self) -> dict:
        return _to_plain(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(x) for x in obj]
    if isinstance(obj, dict):
        return {k: _to_plain(v) for k, v in obj.items()}
    return obj


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'} must be an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown config keys at {path or 'top level'}: {sorted(unknown)}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        hint = hints.get(f.name)
        sub = f"{path}.{f.name}" if path else f.name
        if dataclasses.is_dataclass(hint):
            value = _build(hint, value, sub)
        elif isinstance(f.default, tuple) and isinstance(value, list):
            value = tuple(value)
        kwargs[f.name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config at {path or 'top level'}: {exc}") from exc


def config_from_dict(data: dict) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, data, "")
    if isinstance(cfg.world.tasks, list):
        cfg.world.tasks = tuple(cfg.world.tasks)
    return cfg.validate()


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return config_from_dict(data)


__all__ = [
    "BanditConfig",
    "DataConfig",
    "EmbeddingConfig",
    "ExperimentConfig",
    "IncrementalConfig",
    "ModelConfig",
    "OptimizerConfig",
    "WorldConfig",
    "config_from_dict",
    "load_config",
]
