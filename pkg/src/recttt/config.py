"""Declarative experiment configuration.

A config is a tree of dataclasses loaded from JSON.  Unknown keys are
rejected, every field has a default, and ``--set section.key=value``
overrides are applied on top of the file.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .data import CORRUPTIONS

METHODS = ("recttt", "source", "ptbn", "simsiam_ttt")
SWEEP_AXES = ("iterations", "batch_size", "depth", "ensemble")
ENSEMBLE_MODES = ("two", "one_train", "one_infer")


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    n_train: int = 4000
    n_test: int = 1000
    corruptions: list[str] = field(default_factory=lambda: list(CORRUPTIONS))
    severity: int = 5


@dataclass
class ModelConfig:
    channels: list[int] = field(default_factory=lambda: [16, 32, 64, 128])
    n_classes: int = 4
    bn_momentum: float = 0.1


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    milestones: list[int] = field(default_factory=lambda: [25, 35])
    lr_decay: float = 0.1
    # supervised pretraining of the frozen reference encoder
    pretrain_epochs: int = 20
    pretrain_milestones: list[int] = field(default_factory=lambda: [12, 17])
    ce_weight: float = 1.0
    aux_weight: float = 1.0
    kl_weight: float = 1.0
    kl_symmetric: bool = True


@dataclass
class AdaptConfig:
    iterations: int = 20
    lr: float = 0.005
    momentum: float = 0.0
    depth: int = 3
    batch_size: int = 64


@dataclass
class SimSiamConfig:
    proj_hidden: int = 128
    proj_out: int = 64
    pred_hidden: int = 64
    # which branch sits behind the stop-gradient: "predictor" or "projector"
    stop_grad: str = "predictor"
    weight: float = 1.0


@dataclass
class AblationConfig:
    single_encoder_inference: bool = False
    single_encoder_train: bool = False
    kl_off: bool = False
    aux_off: bool = False


@dataclass
class SweepConfig:
    iterations: list[int] = field(default_factory=lambda: [0, 1, 5, 10, 20, 50])
    batch_sizes: list[int] = field(default_factory=lambda: [8, 32, 64, 128])
    depths: list[int] = field(default_factory=lambda: [1, 2, 3])
    ensemble: list[str] = field(default_factory=lambda: list(ENSEMBLE_MODES))


@dataclass
class ExperimentConfig:
    seed: int = 0
    # seeds to run; empty means just ``seed``
    seeds: list[int] = field(default_factory=list)
    method: str = "recttt"
    out_dir: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    simsiam: SimSiamConfig = field(default_factory=SimSiamConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    def validate(self) -> "ExperimentConfig":
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        bad = [c for c in self.data.corruptions if c not in CORRUPTIONS]
        if bad:
            raise ConfigError(f"unknown corruptions {bad}")
        if not 1 <= self.data.severity <= 5:
            raise ConfigError("data.severity must be in 1..5")
        if min(self.data.n_train, self.data.n_test) < 1:
            raise ConfigError("dataset sizes must be >= 1")
        if len(self.model.channels) < 2 or min(self.model.channels) < 1:
            raise ConfigError("model.channels needs a stem width plus at least one block")
        if not 1 <= self.adapt.depth <= len(self.model.channels) - 1:
            raise ConfigError(f"adapt.depth must be in 1..{len(self.model.channels) - 1}")
        if self.adapt.iterations < 0:
            raise ConfigError("adapt.iterations must be >= 0")
        if self.adapt.batch_size < 2 or self.train.batch_size < 2:
            raise ConfigError("batch sizes must be >= 2 (batch-statistics normalization)")
        if self.simsiam.stop_grad not in ("predictor", "projector"):
            raise ConfigError("simsiam.stop_grad must be 'predictor' or 'projector'")
        bad = [m for m in self.sweep.ensemble if m not in ENSEMBLE_MODES]
        if bad:
            raise ConfigError(f"unknown ensemble modes {bad}")
        if any(isinstance(s, bool) or not isinstance(s, int) for s in self.seeds):
            raise ConfigError(f"seeds must be integers, got {self.seeds!r}")
        if not self.seeds:
            self.seeds = [self.seed]
        return self

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def content_dict(self) -> dict[str, Any]:
        """Everything that affects results; ``out_dir`` only says where they go."""
        d = self.to_dict()
        d.pop("out_dir")
        return d

    def hash(self) -> str:
        blob = json.dumps(self.content_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _coerce(value: Any, default: Any, where: str) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected bool, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected int, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected list, got {value!r}")
        if default:
            return [_coerce(v, default[0], f"{where}[{i}]") for i, v in enumerate(value)]
        return list(value)
    return value


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected an object")
    obj = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    for key, value in data.items():
        path = f"{where}.{key}" if where else key
        if key not in names:
            raise ConfigError(f"unknown config key {path!r}")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            setattr(obj, key, _build(type(current), value, path))
        else:
            setattr(obj, key, _coerce(value, current, path))
    return obj


def from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data, "").validate()


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``a.b.c=value`` strings to a raw config dict (values parsed as JSON when possible)."""
    data = json.loads(json.dumps(data))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, text = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r}: {p!r} is not a section")
        node[parts[-1]] = _parse_value(text.strip())
    return data


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> ExperimentConfig:
    data: dict = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return from_dict(apply_overrides(data, overrides or []))
