"""Run configuration: nested dataclasses <-> JSON with unknown keys rejected."""
from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .backbones import BackboneSpec
from .data import IMAGENET_MEAN, IMAGENET_STD, AugmentRecipe
from .optim import OptimConfig, ScheduleConfig
from .ssl_methods import SslConfig


class ConfigError(ValueError):
    pass


@dataclass
class LinearEvalConfig:
    epochs: int = 100
    batch_size: int = 64
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    crop_scale: tuple[float, float] = (0.08, 1.0)
    optim: OptimConfig = field(default_factory=lambda: OptimConfig(
        optimizer="lars", base_lr=0.6, momentum=0.9, weight_decay=0.0, reference_batch=None))
    schedule: ScheduleConfig = field(default_factory=lambda: ScheduleConfig(
        base_lr=0.6, warmup_epochs=0, total_epochs=100))


@dataclass
class Normalization:
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD


@dataclass
class DataPaths:
    pretrain: str | None = None       # CSV manifest or image folder
    layout: str = "flat"              # for image folders
    train_manifest: str | None = None
    val_manifest: str | None = None


@dataclass
class RunConfig:
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    ssl: SslConfig = field(default_factory=SslConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    recipe: AugmentRecipe = field(default_factory=AugmentRecipe)
    normalization: Normalization = field(default_factory=Normalization)
    linear_eval: LinearEvalConfig = field(default_factory=LinearEvalConfig)
    data: DataPaths = field(default_factory=DataPaths)
    seed: int = 0
    save_every: int = 10
    out: str = "runs/default"

    def to_dict(self) -> dict:
        return to_dict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return from_dict(cls, d)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")


def to_dict(obj) -> Any:
    if dataclasses.is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [to_dict(x) for x in obj]
    return obj


def _coerce(tp, value, where: str):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected an object")
        return from_dict(tp, value, where)
    if origin is tuple and isinstance(value, (list, tuple)):
        return tuple(value)
    if origin in (typing.Union, getattr(__import__("types"), "UnionType", None)):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        if len(args) == 1:
            return _coerce(args[0], value, where)
    if origin is list and isinstance(value, (list, tuple)):
        return list(value)
    return value


def from_dict(cls, d: dict, where: str = "config"):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {k: _coerce(hints[k], v, f"{where}.{k}") for k, v in d.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc
