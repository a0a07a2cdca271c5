"""YAML-backed configuration shared by every pipeline subcommand.

The file mirrors the dataclasses of the individual modules; every section
is optional and missing values fall back to the module defaults. Lists in
the file become tuples so nested configs stay hashable and frozen.
"""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field

import yaml

from .dataset import ROLES
from .loss import CostWeights, FocalParams
from .model import ModelConfig
from .preprocess import PreprocessConfig
from .synth import SynthConfig
from .train import OptimConfig


class ConfigError(ValueError):
    """Malformed or contradictory configuration file."""


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    scan_dir: str = "data/scans"
    annotations: str = "data/scans/annotations.csv"
    output_root: str = "out"
    version: str = "v1"
    synth: SynthConfig = field(default_factory=SynthConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    thickness_mm: float = 7.5
    stride_mm: float | None = None
    ratios: tuple = (0.7, 0.2, 0.1)
    rates: tuple = (("train", 0.127), ("val", 0.127), ("test", 0.03))
    augment_copies: int = 1
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    focal: FocalParams = field(default_factory=FocalParams)
    # lambda_class compensates the per-query averaging in the set loss; the
    # low matching-cost default would starve classification during training
    loss_weights: CostWeights = field(
        default_factory=lambda: CostWeights(lambda_class=40.0)
    )
    iou_threshold: float = 0.5
    operating_threshold: float | None = None

    def __post_init__(self):
        if self.thickness_mm <= 0:
            raise ConfigError("thickness_mm must be positive")
        if self.augment_copies < 0:
            raise ConfigError("augment_copies must be >= 0")
        roles = tuple(role for role, _ in self.rates)
        if roles != ROLES:
            raise ConfigError(f"rates must name roles {ROLES} in order, got {roles}")

    def rate_for(self, role: str) -> float:
        return dict(self.rates)[role]


def _coerce(value, hint):
    origin = typing.get_origin(hint)
    if dataclasses.is_dataclass(hint):
        if not isinstance(value, dict):
            raise ConfigError(f"expected a mapping for {hint.__name__}, got {value!r}")
        return _build(hint, value)
    if (origin is tuple or hint is tuple) and isinstance(value, (list, tuple)):
        return tuple(tuple(v) if isinstance(v, list) else v for v in value)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if value is None:
            return None
        if len(args) == 1:
            return _coerce(value, args[0])
    return value


def _build(cls, data: dict):
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    kwargs = {key: _coerce(value, hints[key]) for key, value in data.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad {cls.__name__} section: {exc}") from exc


def from_dict(data: dict) -> PipelineConfig:
    if not isinstance(data, dict):
        raise ConfigError(f"config root must be a mapping, got {type(data).__name__}")
    data = dict(data)
    if "rates" in data and isinstance(data["rates"], dict):
        data["rates"] = [[role, rate] for role, rate in data["rates"].items()]
    return _build(PipelineConfig, data)


def load_config(path) -> PipelineConfig:
    with open(path, "r", encoding="utf-8") as fh:
        data = yaml.safe_load(fh)
    return from_dict(data or {})


def dump_config(config: PipelineConfig) -> str:
    """Round-trippable YAML of the full effective configuration."""
    def plain(value):
        if dataclasses.is_dataclass(value):
            return {f.name: plain(getattr(value, f.name))
                    for f in dataclasses.fields(value)}
        if isinstance(value, tuple):
            return [plain(v) for v in value]
        return value

    payload = plain(config)
    payload["rates"] = {role: rate for role, rate in config.rates}
    return yaml.safe_dump(payload, sort_keys=False)
