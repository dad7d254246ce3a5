"""Experiment configuration: nested dataclasses with strict JSON (de)serialization."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .data import AugmentationConfig
from .encoder import EncoderConfig
from .errors import ConfigError, ContractError

SCHEMA_VERSION = 1
MECHANISMS = ("moco", "end_to_end", "memory_bank")


@dataclass
class DataConfig:
    source: str = "synth"
    path: str | None = None
    n_classes: int = 10
    n_train_per_class: int = 500
    n_val_per_class: int = 100
    shape: list[int] = field(default_factory=lambda: [64])
    class_sep: float = 4.0
    noise_sigma: float = 1.0
    seed: int = 0
    prefetch: bool = False
    noise_smooth: float = 0.0
    nuisance: dict | None = None  # AugmentationConfig fields baked into the corpus


@dataclass
class EvalConfig:
    eval_every: int = 1
    knn_k: int = 20
    knn_temperature: float | None = 0.07
    knn_tap: str = "projection_output"
    probe: bool = True
    probe_tap: str = "pre_projection"
    probe_lrs: list[float] = field(default_factory=lambda: [0.3, 3.0, 30.0])
    probe_epochs: int = 30
    probe_weight_decay: float = 0.0


@dataclass
class ExperimentConfig:
    mechanism: str = "moco"
    K: int = 1024
    m: float = 0.999
    tau: float = 0.07
    batch_size: int = 64
    epochs: int = 30
    lr: float = 0.03
    lr_milestones: list[int] | None = None
    lr_decay: float = 0.1
    sgd_momentum: float = 0.9
    weight_decay: float = 1e-4
    shuffle_bn: bool = True
    bn_shards: int = 4
    queue_init: str = "warm"
    bank_momentum: float = 0.5
    e2e_two_towers: bool = False
    max_batch: int = 1024
    linear_lr_scaling: bool = True
    seed: int = 0
    deterministic: bool = True
    max_steps: int | None = None
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    data: DataConfig = field(default_factory=DataConfig)
    augment: AugmentationConfig = field(default_factory=AugmentationConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    schema_version: int = SCHEMA_VERSION

    def milestones(self) -> list[int]:
        if self.lr_milestones is not None:
            return list(self.lr_milestones)
        return [int(round(0.6 * self.epochs)), int(round(0.8 * self.epochs))]

    def lr_at(self, epoch: int) -> float:
        lr = self.effective_lr()
        return lr * self.lr_decay ** sum(epoch >= e for e in self.milestones())

    def effective_lr(self) -> float:
        if self.mechanism == "end_to_end" and self.linear_lr_scaling and self.batch_size > 256:
            return self.lr * self.batch_size / 256
        return self.lr

    def validate(self) -> "ExperimentConfig":
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"config schema_version {self.schema_version} unsupported (expected {SCHEMA_VERSION})")
        if self.mechanism not in MECHANISMS:
            raise ConfigError(f"mechanism must be one of {MECHANISMS}, got {self.mechanism!r}")
        if not 0.0 <= self.m < 1.0:
            raise ConfigError(f"momentum m must lie in [0, 1), got {self.m}")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.K < 1:
            raise ConfigError("K must be positive")
        if self.batch_size < 2 or self.batch_size % self.bn_shards:
            raise ConfigError(f"batch_size {self.batch_size} must be >= 2 and divisible by bn_shards {self.bn_shards}")
        if self.batch_size // self.bn_shards < 2 and self.encoder.use_bn:
            raise ConfigError("each BN shard needs at least 2 samples")
        if self.epochs < 1 or self.lr <= 0:
            raise ConfigError("epochs and lr must be positive")
        if not 0.0 <= self.sgd_momentum < 1.0 or self.weight_decay < 0:
            raise ConfigError("invalid optimizer settings")
        if self.queue_init not in ("warm", "fill_first"):
            raise ConfigError(f"queue_init must be 'warm' or 'fill_first', got {self.queue_init!r}")
        if not 0.0 <= self.bank_momentum < 1.0:
            raise ConfigError("bank_momentum must lie in [0, 1)")
        if self.data.source not in ("synth", "idx"):
            raise ConfigError(f"data.source must be 'synth' or 'idx', got {self.data.source!r}")
        if self.data.source == "idx" and not self.data.path:
            raise ConfigError("data.source 'idx' needs data.path")
        if self.eval.eval_every < 0 or self.eval.knn_k < 1:
            raise ConfigError("invalid eval cadence or knn_k")
        for tap in (self.eval.knn_tap, self.eval.probe_tap):
            if tap not in ("projection_output", "pre_projection"):
                raise ConfigError(f"unknown feature tap {tap!r}")
        n_train = self.data.n_classes * self.data.n_train_per_class
        if self.data.source == "synth":
            if self.batch_size > n_train:
                raise ConfigError("batch_size exceeds the training set")
            if self.mechanism == "memory_bank" and self.K > n_train - self.batch_size:
                raise ConfigError(f"memory bank K={self.K} exceeds D - N = {n_train - self.batch_size}")
            if tuple(self.data.shape) != tuple(self.encoder.input_shape):
                raise ConfigError(f"data.shape {self.data.shape} != encoder.input_shape {list(self.encoder.input_shape)}")
        return self

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["encoder"]["input_shape"] = list(self.encoder.input_shape)
        return d

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


_NESTED = {"encoder": EncoderConfig, "data": DataConfig, "augment": AugmentationConfig, "eval": EvalConfig}


def _build(cls, raw: dict, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must be a JSON object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown config keys in {where}: {', '.join(unknown)}")
    kwargs = {}
    for k, v in raw.items():
        if cls is ExperimentConfig and k in _NESTED:
            v = _build(_NESTED[k], v, f"{where}.{k}")
        kwargs[k] = v
    try:
        return cls(**kwargs)
    except (ContractError, TypeError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(raw: dict) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, raw, "config")
    cfg.encoder.bn_shards = cfg.bn_shards
    return cfg.validate()


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(raw)


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
