"""Run configuration: nested dataclasses loaded from / dumped to YAML.

Every section validates itself in ``__post_init__``; :func:`from_dict`
rejects unknown keys and reports the dotted path of the offending field.
"""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .encoder import EncoderConfig
from .errors import ConfigError
from .gate import GateConfig
from .prompts import PromptConfig
from .router import RoutingConfig
from .synthetic import StreamConfig


@dataclass
class OptimConfig:
    lr: float = 2.0
    epochs: int = 10
    batch_size: int = 32
    eval_batch_size: int = 64

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError("optim.lr must be non-negative")
        if self.epochs < 0 or self.batch_size <= 0 or self.eval_batch_size <= 0:
            raise ConfigError("optim.epochs must be >= 0 and batch sizes positive")


@dataclass
class PretrainConfig:
    steps: int = 400
    lr: float = 2e-3
    batch_size: int = 128
    cache_dir: Optional[str] = None

    def __post_init__(self):
        if self.steps < 0 or self.batch_size <= 0 or self.lr <= 0:
            raise ConfigError("pretrain.steps must be >= 0, batch_size and lr positive")


@dataclass
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    prompt: PromptConfig = field(default_factory=PromptConfig)
    gate: GateConfig = field(default_factory=GateConfig)
    routing: RoutingConfig = field(default_factory=RoutingConfig)
    stream: StreamConfig = field(default_factory=StreamConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    seed: int = 0
    threads: int = 1
    output_dir: str = "runs/default"

    def __post_init__(self):
        if self.threads <= 0:
            raise ConfigError("threads must be positive")


def _build(cls, data: Any, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for key, value in data.items():
        where = f"{path}.{key}" if path else key
        kwargs[key] = _coerce(hints[key], value, where)
    try:
        return cls(**kwargs)
    except ConfigError as e:
        raise ConfigError(f"{path or 'config'}: {e}") from None


def _coerce(tp, value, where: str):
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, where)
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _coerce(args[0], value, where)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    return value


def from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data or {}, "")


def to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def load_config(path: str | Path) -> RunConfig:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: not valid YAML ({e})") from None
    return from_dict(data or {})


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)


def replace(cfg: RunConfig, **sections) -> RunConfig:
    """Copy of ``cfg`` with dotted overrides, e.g. ``replace(cfg, **{"gate.mode": "soft"})``."""
    data = to_dict(cfg)
    for dotted, value in sections.items():
        node = data
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node[p]
        if leaf not in node:
            raise ConfigError(f"unknown config field {dotted!r}")
        node[leaf] = value
    return from_dict(data)
