"""Experiment configuration: one YAML file (schema version 1) drives every command.

Example::

    version: 1
    seed: 1
    seeds: [1, 2, 3]
    output_dir: runs/mnist
    dataset:
      kind: idx                      # or "synthetic"
      train_images: data/train-images-idx3-ubyte
      train_labels: data/train-labels-idx1-ubyte
      test_images: data/t10k-images-idx3-ubyte
      test_labels: data/t10k-labels-idx1-ubyte
    partition: {client_count: 5, alpha: 0.9, skewed_class: null}
    model: {hidden: 128, dropout: 0.2}
    pretrain: {local_epochs: 2, global_rounds: 30, batch_size: 64, learning_rate: 0.01, momentum: 0.5}
    unlearn: {ascent_steps: 50, ascent_lr: 0.01, radius_scale: 0.04, batch_size: 64}
    recovery: {ae_epochs: 20, denoise_k: 5, fed: {global_rounds: 10}}
    variant: rt_smote_denoise
    variants: [plain_finetune, rt_smote, rt_smote_denoise]
    alphas: [0.8, 0.85, 0.9]
    k_values: [1, 3, 5, 10, 15, 25]

Relative paths resolve against the config file's directory.  Any key can be
overridden from the environment: ``FEDSKEW_RECOVERY__AE_EPOCHS=5`` sets
``recovery.ae_epochs``; values are parsed as YAML scalars.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from ..errors import ValidationError
from ..fed import FedRoundConfig
from ..recovery.recover import VARIANTS, RecoveryConfig

SCHEMA_VERSION = 1
ENV_PREFIX = "FEDSKEW_"


@dataclass
class DatasetConfig:
    kind: str = "synthetic"
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    class_count: int = 10
    per_class: int = 600
    test_per_class: int = 200
    dim: int = 20
    cluster_std: float = 0.3
    data_seed: int = 0

    def validate(self) -> None:
        if self.kind == "idx":
            for name in ("train_images", "train_labels", "test_images", "test_labels"):
                path = getattr(self, name)
                if path is None:
                    raise ValidationError(f"dataset.{name} is required for kind 'idx'")
                if not Path(path).is_file():
                    raise ValidationError(f"dataset.{name}: no such file {path}")
        elif self.kind == "synthetic":
            if min(self.class_count, self.per_class, self.test_per_class, self.dim) < 1:
                raise ValidationError("synthetic dataset sizes must be positive")
            if not self.cluster_std > 0:
                raise ValidationError("dataset.cluster_std must be positive")
        else:
            raise ValidationError(f"dataset.kind must be 'idx' or 'synthetic', got {self.kind!r}")


@dataclass
class PartitionConfig:
    client_count: int = 5
    alpha: float = 0.8
    skewed_class: int | None = None


@dataclass
class ModelConfig:
    hidden: int = 128
    dropout: float = 0.2


@dataclass
class UnlearnSettings:
    ascent_steps: int = 50
    ascent_lr: float = 0.01
    radius: float | None = None
    radius_scale: float = 0.04
    batch_size: int = 64


@dataclass
class ExperimentConfig:
    version: int = SCHEMA_VERSION
    seed: int = 1
    seeds: list[int] = field(default_factory=lambda: [1, 2, 3])
    output_dir: str = "runs"
    threads: int = 1
    eval_batch_size: int = 128
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: FedRoundConfig = field(default_factory=lambda: FedRoundConfig(global_rounds=30))
    unlearn: UnlearnSettings = field(default_factory=UnlearnSettings)
    recovery: RecoveryConfig = field(default_factory=RecoveryConfig)
    variant: str = "rt_smote_denoise"
    variants: list[str] = field(default_factory=lambda: list(VARIANTS))
    alphas: list[float] = field(default_factory=lambda: [0.8, 0.85, 0.9])
    k_values: list[int] = field(default_factory=lambda: [1, 3, 5, 10, 15, 25])

    def validate(self) -> "ExperimentConfig":
        if self.version != SCHEMA_VERSION:
            raise ValidationError(f"unsupported config version {self.version}")
        self.dataset.validate()
        if not self.seeds or not self.variants or not self.alphas or not self.k_values:
            raise ValidationError("seeds, variants, alphas and k_values must be nonempty")
        for v in [self.variant, *self.variants]:
            if v not in VARIANTS:
                raise ValidationError(f"unknown variant {v!r}; choose from {VARIANTS}")
        for a in [self.partition.alpha, *self.alphas]:
            if not 0 < a < 1:
                raise ValidationError(f"alpha {a} outside (0, 1)")
        if any(k < 1 for k in self.k_values):
            raise ValidationError("k_values must be >= 1")
        if self.threads < 1:
            raise ValidationError("threads must be >= 1")
        if not 0 <= self.model.dropout < 1 or self.model.hidden < 1:
            raise ValidationError("model.hidden must be >= 1 and model.dropout in [0, 1)")
        u = self.unlearn
        if u.ascent_steps < 1 or not u.ascent_lr > 0 or u.batch_size < 1:
            raise ValidationError("unlearn settings must be positive")
        if u.radius is None and not u.radius_scale >= 0:
            raise ValidationError("unlearn.radius_scale must be >= 0")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


_SECTIONS = {
    "dataset": DatasetConfig,
    "partition": PartitionConfig,
    "model": ModelConfig,
    "pretrain": FedRoundConfig,
    "unlearn": UnlearnSettings,
}


def _build(cls, raw: Mapping[str, Any], where: str):
    if not isinstance(raw, Mapping):
        raise ValidationError(f"{where} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - names
    if unknown:
        raise ValidationError(f"unknown keys in {where}: {sorted(unknown)}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"{where}: {exc}") from exc


def _apply_env(raw: dict, env: Mapping[str, str]) -> dict:
    raw = copy.deepcopy(raw)
    for key, value in env.items():
        if not key.startswith(ENV_PREFIX):
            continue
        path = [p.lower() for p in key[len(ENV_PREFIX):].split("__") if p]
        if not path:
            continue
        node = raw
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ValidationError(f"{key}: {part} is not a section")
        node[path[-1]] = yaml.safe_load(value)
    return raw


def config_from_dict(raw: Mapping[str, Any], base_dir: Path | None = None,
                     env: Mapping[str, str] | None = None) -> ExperimentConfig:
    raw = dict(raw or {})
    if env:
        raw = _apply_env(raw, env)
    top = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(raw) - top
    if unknown:
        raise ValidationError(f"unknown top-level keys: {sorted(unknown)}")
    kwargs = {}
    for name, value in raw.items():
        if name in _SECTIONS:
            kwargs[name] = _build(_SECTIONS[name], value or {}, name)
        elif name == "recovery":
            value = dict(value or {})
            fed = _build(FedRoundConfig, {"global_rounds": 10, **(value.pop("fed", None) or {})}, "recovery.fed")
            kwargs[name] = _build(RecoveryConfig, {**value, "fed": fed}, "recovery")
        else:
            kwargs[name] = value
    cfg = ExperimentConfig(**kwargs)
    if base_dir is not None:
        ds = cfg.dataset
        for name in ("train_images", "train_labels", "test_images", "test_labels"):
            p = getattr(ds, name)
            if p is not None and not Path(p).is_absolute():
                setattr(ds, name, str((base_dir / p).resolve()))
        if not Path(cfg.output_dir).is_absolute():
            cfg.output_dir = str((base_dir / cfg.output_dir).resolve())
    cfg.seeds = [int(s) for s in cfg.seeds]
    cfg.alphas = [float(a) for a in cfg.alphas]
    cfg.k_values = [int(k) for k in cfg.k_values]
    return cfg.validate()


def load_config(path, env: Mapping[str, str] | None = None) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"config file not found: {path}")
    raw = yaml.safe_load(path.read_text()) or {}
    return config_from_dict(raw, base_dir=path.parent.resolve(), env=os.environ if env is None else env)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
