"""Experiment configuration: nested dataclasses, strict JSON loading, dotted overrides."""

from __future__ import annotations

import copy
import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .data import SyntheticConfig
from .losses import SclConfig
from .model import ModelConfig

LOSS_VARIANTS = ("softmax", "softmax+scl", "softmax+center", "softmax+triplet")


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig(SyntheticConfig):
    root: str = "runs/corpus"
    frames_real: int = 80
    frames_fake: int = 20

    def synthetic(self) -> SyntheticConfig:
        names = {f.name for f in dataclasses.fields(SyntheticConfig)}
        return SyntheticConfig(**{k: copy.deepcopy(v) for k, v in dataclasses.asdict(self).items() if k in names})


@dataclass
class LossConfig:
    variant: str = "softmax+scl"
    scl: SclConfig = field(default_factory=SclConfig)
    center_weight: float = 0.01
    triplet_weight: float = 0.01
    triplet_margin: float = 0.3


@dataclass
class OptimConfig:
    kind: str = "adam"
    lr: float = 2e-4
    weight_decay: float = 1e-5
    warmup_steps: int = 0


@dataclass
class RunConfig:
    epochs: int = 1
    max_steps: int = 0  # 0: derive from epochs
    batch_size: int = 32
    seed: int = 0
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    eval_every: int = 100
    eval_split: str = "val"
    test_split: str = "test"
    float64: bool = False
    out: str = "runs/exp"


@dataclass
class TrainConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def validate(self) -> "TrainConfig":
        if self.loss.variant not in LOSS_VARIANTS:
            raise ConfigError(f"unknown loss variant {self.loss.variant!r}")
        if self.run.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.optim.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if self.optim.kind not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optim.kind!r}")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def copy(self) -> "TrainConfig":
        return copy.deepcopy(self)


def _hints(cls) -> dict[str, Any]:
    return typing.get_type_hints(cls)


def _is_dataclass_type(tp) -> bool:
    return isinstance(tp, type) and dataclasses.is_dataclass(tp)


def _check_value(tp, value, key: str):
    """Coerce/validate a JSON value against a field annotation."""
    origin = typing.get_origin(tp)
    if _is_dataclass_type(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{key}: expected an object")
        return from_dict(tp, value, prefix=key + ".")
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(tp)
        if value is None and type(None) in args:
            return None
        for a in args:
            if a is type(None):
                continue
            try:
                return _check_value(a, value, key)
            except ConfigError:
                pass
        raise ConfigError(f"{key}: {value!r} does not match {tp}")
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        (arg,) = typing.get_args(tp) or (Any,)
        return [_check_value(arg, v, key) for v in value]
    if origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{key}: expected an object, got {value!r}")
        _, varg = typing.get_args(tp) or (str, Any)
        return {str(k): _check_value(varg, v, key) for k, v in value.items()}
    if tp is Any:
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    return value


def from_dict(cls, d: dict, prefix: str = ""):
    """Build dataclass ``cls`` from ``d``; unknown keys are rejected."""
    hints = _hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(prefix + k for k in sorted(unknown))}")
    kwargs = {k: _check_value(hints[k], v, prefix + k) for k, v in d.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{prefix or 'config'}: {e}") from e


def load_config(path: str | Path | None) -> TrainConfig:
    if path is None:
        return TrainConfig()
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    return from_dict(TrainConfig, raw).validate()


def _parse_scalar(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: TrainConfig, overrides: list[str]) -> TrainConfig:
    """Apply ``section.key=value`` strings; values are parsed as JSON when possible."""
    d = cfg.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not KEY=VALUE")
        key, text = item.split("=", 1)
        parts = key.strip().split(".")
        node = d
        for p in parts[:-1]:
            if not isinstance(node, dict) or p not in node or not isinstance(node[p], dict):
                raise ConfigError(f"unknown config key {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = _parse_scalar(text)
    return from_dict(TrainConfig, d).validate()


def save_config(cfg: TrainConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2))
