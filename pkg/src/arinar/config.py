"""Run configuration: dataclasses plus a strict JSON loader.

A run config is one JSON object with optional sections ``model``, ``train``,
``sampler``, ``data`` and ``paths``; each maps onto the dataclass of the same
role. Unknown keys anywhere raise :class:`ConfigError`.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from typing import Optional

from .data import SyntheticProcessSpec
from .model import ModelConfig


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 0.02
    adam_betas: tuple = (0.9, 0.95)
    adam_eps: float = 1e-8
    epochs: int = 100
    warmup_epochs: float = 10
    batch_size: int = 64
    label_dropout_prob: float = 0.1
    seed: int = 0
    K: int = 4
    grad_clip: Optional[float] = None
    dtype: str = "float32"
    log_every: int = 50

    def __post_init__(self):
        self.adam_betas = tuple(float(b) for b in self.adam_betas)
        if len(self.adam_betas) != 2 or not all(0 <= b < 1 for b in self.adam_betas):
            raise ConfigError(f"adam_betas must be two values in [0, 1), got {self.adam_betas}")
        if not 0 <= self.label_dropout_prob <= 1:
            raise ConfigError("label_dropout_prob must lie in [0, 1]")
        for name in ("learning_rate", "adam_eps", "epochs", "batch_size", "K"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.weight_decay < 0 or self.warmup_epochs < 0:
            raise ConfigError("weight_decay and warmup_epochs must be >= 0")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ConfigError("grad_clip must be positive or null")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")

    @classmethod
    def paper(cls) -> "TrainConfig":
        """The ImageNet recipe: 400 epochs, 100 warmup, batch 256, constant 1e-4."""
        return cls(epochs=400, warmup_epochs=100, batch_size=256)


@dataclass
class SamplerConfig:
    temperature: float = 1.0
    cfg_scale: float = 0.0
    seed: int = 0
    class_label: int = 0
    num_images: int = 1

    def __post_init__(self):
        if not (math.isfinite(self.temperature) and self.temperature > 0):
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if not (math.isfinite(self.cfg_scale) and self.cfg_scale >= 0):
            raise ConfigError(f"cfg_scale must be >= 0, got {self.cfg_scale}")
        if self.num_images < 0 or self.class_label < 0 or self.seed < 0:
            raise ConfigError("num_images, class_label and seed must be >= 0")


@dataclass
class DataConfig:
    """What to train on. ``kind`` is ``"synthetic"`` or ``"shapes"``."""

    kind: str = "synthetic"
    n: int = 20000
    seed: int = 0
    synthetic: SyntheticProcessSpec = field(default_factory=SyntheticProcessSpec)
    image_size: int = 16
    patch_size: int = 4
    num_classes: int = 3

    def __post_init__(self):
        if self.kind not in ("synthetic", "shapes"):
            raise ConfigError(f"data.kind must be 'synthetic' or 'shapes', got {self.kind!r}")
        if self.n < 1:
            raise ConfigError("data.n must be >= 1")


@dataclass
class PathsConfig:
    data: Optional[str] = None
    log: Optional[str] = None


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)


_NESTED = {
    RunConfig: {"model": ModelConfig, "train": TrainConfig, "sampler": SamplerConfig,
                "data": DataConfig, "paths": PathsConfig},
    DataConfig: {"synthetic": SyntheticProcessSpec},
}


def _build(cls, obj, where: str):
    if not isinstance(obj, dict):
        raise ConfigError(f"{where or 'config'}: expected an object, got {type(obj).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(obj) - names)
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown keys {unknown}")
    kwargs = {}
    for key, value in obj.items():
        sub = _NESTED.get(cls, {}).get(key)
        kwargs[key] = _build(sub, value, f"{where}.{key}".lstrip(".")) if sub else value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where or 'config'}: {e}") from e


def from_dict(cls, obj: dict):
    return _build(cls, obj, "")


def to_dict(cfg) -> dict:
    out = dataclasses.asdict(cfg)

    def _lists(v):
        if isinstance(v, dict):
            return {k: _lists(x) for k, x in v.items()}
        if isinstance(v, tuple):
            return list(v)
        return v

    return _lists(out)


def load_run_config(path) -> RunConfig:
    with open(path) as f:
        try:
            obj = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
    return from_dict(RunConfig, obj)


def dump_json(cfg) -> bytes:
    return json.dumps(to_dict(cfg), sort_keys=True).encode("utf-8")
