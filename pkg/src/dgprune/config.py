"""Declarative experiment configuration with strict schema checking.

Config files are YAML or JSON. Every mapping is checked against the matching
dataclass: unknown keys are rejected, and nested sections are built from
their own dataclasses.
"""
from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .domains import SyntheticSpec
from .exceptions import ConfigError
from .importance import IoRConfig
from .losses import LOSSES
from .nn import ArchConfig
from .pruning import CRITERIA, PruneSchedule


def benchmark_spec(**overrides) -> SyntheticSpec:
    """The leave-one-domain-out benchmark used by default experiments.

    Three training domains with colour agreement rho 0.8/0.9/0.95 and a held
    out domain at -0.9. Each class has three grating prototypes whose
    orientation and period only name the class jointly, so shape recognition
    needs many filters while colour needs few.
    """
    base = dict(rhos=(0.8, 0.9, 0.95, -0.9), prototypes_per_class=3, grating_period=3.0, period_ratio=1.6,
                shape_contrast=1.0, color_strength=0.5, noise_sigma=0.3)
    base.update(overrides)
    return SyntheticSpec(**base)


@dataclass(frozen=True)
class PretrainConfig:
    method: str = "erm"
    epochs: int = 30
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 63
    coral_lambda: float = 1.0
    mixup_alpha: float = 0.2

    def __post_init__(self):
        if self.method not in LOSSES:
            raise ConfigError(f"pretrain.method must be one of {LOSSES}, got {self.method!r}")
        if self.epochs < 0 or self.learning_rate < 0 or self.batch_size < 1:
            raise ConfigError("pretrain epochs/learning_rate must be >= 0 and batch_size >= 1")
        if self.coral_lambda < 0 or self.mixup_alpha <= 0:
            raise ConfigError("coral_lambda must be >= 0 and mixup_alpha > 0")


@dataclass(frozen=True)
class PruningConfig:
    criterion: str = "taylor"
    ior: IoRConfig = field(default_factory=IoRConfig)
    schedule: PruneSchedule = field(default_factory=PruneSchedule)
    finetune_epochs: int = 30
    learning_rate: float = 0.001
    momentum: float = 0.9
    batch_size: int = 63

    def __post_init__(self):
        if self.criterion not in CRITERIA:
            raise ConfigError(f"pruning.criterion must be one of {CRITERIA}, got {self.criterion!r}")
        if self.finetune_epochs < 0 or self.learning_rate < 0 or self.batch_size < 1:
            raise ConfigError("pruning finetune_epochs/learning_rate must be >= 0 and batch_size >= 1")


@dataclass(frozen=True)
class ExperimentConfig:
    data: SyntheticSpec = field(default_factory=benchmark_spec)
    dataset_path: str | None = None
    held_out_domain: int = 3
    arch: ArchConfig = field(default_factory=ArchConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    pruning: PruningConfig = field(default_factory=PruningConfig)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    output_dir: str = "runs/experiment"
    name: str = "experiment"

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        if self.dataset_path is None:
            if not 0 <= self.held_out_domain < self.data.n_domains:
                raise ConfigError(f"held_out_domain {self.held_out_domain} not among {self.data.n_domains} domains")
            if self.data.n_classes != self.arch.n_classes or self.data.image_size != self.arch.image_size:
                raise ConfigError("data n_classes/image_size must match arch n_classes/image_size")

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return _plain(asdict(self))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def from_dict(cls, data: Any, where: str = "config"):
    """Build dataclass ``cls`` from a mapping, rejecting unknown keys."""
    if isinstance(data, cls):
        return data
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}; allowed: {sorted(known)}")
    kwargs = {}
    for key, value in data.items():
        hint = hints[key]
        if dataclasses.is_dataclass(hint):
            value = from_dict(hint, value, f"{where}.{key}")
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except ConfigError as err:
        raise ConfigError(f"{where}: {err}") from None
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{where}: {err}") from None


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    text = path.read_text()
    try:
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as err:
        raise ConfigError(f"{path}: cannot parse config: {err}") from None
    return from_dict(ExperimentConfig, data or {}, str(path))


def dump_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
