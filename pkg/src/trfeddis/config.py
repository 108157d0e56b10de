"""Experiment configuration, loaded from JSON and validated up front."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .model import ModelConfig

__all__ = ["ConfigError", "DataConfig", "ExperimentConfig", "ModelSection", "ScheduleConfig", "load_config"]

STRATEGIES = ("SingleSet", "FedAvg", "FedBN", "TrFedDis")


class ConfigError(ValueError):
    pass


def _build(cls, raw, where):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object, got {type(raw).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**raw)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


@dataclass
class Ablation:
    enable_dis: bool = True
    enable_un: bool = True
    enable_ce: bool = True


@dataclass
class ModelSection:
    arch: str = "conv"  # "conv" or "mlp"
    conv_channels: list = field(default_factory=lambda: [8, 16])
    feat_dim: int = 64
    head_width: int = 64
    head_depth: int = 3
    use_batchnorm: bool = True

    def validate(self):
        if self.arch not in ("conv", "mlp"):
            raise ConfigError(f"model.arch must be 'conv' or 'mlp', got {self.arch!r}")
        if min(self.feat_dim, self.head_width, self.head_depth) < 1 or any(int(c) < 1 for c in self.conv_channels):
            raise ConfigError("model widths must be positive")

    def build(self, input_shape, num_classes, dual_head) -> ModelConfig:
        if self.arch == "conv":
            encoder = [
                {"type": "conv", "out": int(c), "kernel": 3, "stride": 1, "padding": 1, "pool": 2} for c in self.conv_channels
            ]
        else:
            encoder = [{"type": "dense", "out": self.feat_dim}]
        encoder.append({"type": "dense", "out": self.feat_dim})
        return ModelConfig(
            input_shape=tuple(input_shape),
            num_classes=num_classes,
            encoder=encoder,
            head_width=self.head_width,
            head_depth=self.head_depth,
            use_batchnorm=self.use_batchnorm,
            dual_head=dual_head,
        )


@dataclass
class DataConfig:
    """``source`` is "synthetic" or "idx".

    For IDX, ``clients`` is a list of ``{"images": path, "labels": path,
    "n_train": int}`` objects, one per client.
    """

    source: str = "synthetic"
    num_clients: int = 4
    per_client_n: int = 2500
    test_fraction: float = 0.2
    num_classes: int = 5
    image_size: int = 16
    channels: int = 3
    seed: int | None = None
    domains: list | None = None
    jitter: float = 1.5
    clients: list | None = None

    def validate(self):
        if self.source not in ("synthetic", "idx"):
            raise ConfigError(f"data.source must be 'synthetic' or 'idx', got {self.source!r}")
        if self.source == "idx":
            if not self.clients:
                raise ConfigError("data.clients is required for IDX data")
            for i, c in enumerate(self.clients):
                if not isinstance(c, dict) or not {"images", "labels", "n_train"} <= set(c):
                    raise ConfigError(f"data.clients[{i}] needs images, labels and n_train")
        else:
            if self.num_clients < 2 or self.num_classes < 2:
                raise ConfigError("data needs num_clients >= 2 and num_classes >= 2")
            if not 0 < self.test_fraction < 1:
                raise ConfigError("data.test_fraction must lie in (0, 1)")
            if self.domains is not None and len(self.domains) != self.num_clients:
                raise ConfigError("data.domains needs one entry per client")


@dataclass
class ScheduleConfig:
    lambda_u: float = 1.0
    lambda_d: float = 0.1
    ramp_fraction: float = 0.5


@dataclass
class ExperimentConfig:
    strategy: str = "TrFedDis"
    ablation: Ablation = field(default_factory=Ablation)
    model: ModelSection = field(default_factory=ModelSection)
    data: DataConfig = field(default_factory=DataConfig)
    rounds: int = 50
    local_epochs: int = 1
    lr: float = 1e-2
    batch_size: int = 32
    eval_batch_size: int = 500
    seeds: list = field(default_factory=lambda: [0])
    schedules: ScheduleConfig = field(default_factory=ScheduleConfig)
    un_weights: list = field(default_factory=lambda: [1.0, 1.0, 1.0])
    aggregation_weights: str = "size"
    workers: int = 1
    output_dir: str = "runs/default"

    def __post_init__(self):
        for name, cls in (("ablation", Ablation), ("model", ModelSection), ("data", DataConfig), ("schedules", ScheduleConfig)):
            val = getattr(self, name)
            if isinstance(val, dict):
                setattr(self, name, _build(cls, val, name))
        self.validate()

    def validate(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.rounds < 0 or self.local_epochs < 0:
            raise ConfigError("rounds and local_epochs must be >= 0")
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if self.batch_size < 2 or self.eval_batch_size < 1:
            raise ConfigError("batch_size must be >= 2 (batch norm) and eval_batch_size >= 1")
        if not self.seeds or any(int(s) < 0 for s in self.seeds):
            raise ConfigError("seeds must be a non-empty list of non-negative integers")
        if len(self.un_weights) != 3:
            raise ConfigError("un_weights needs three entries (global, local, fused)")
        if self.aggregation_weights not in ("size", "uniform"):
            raise ConfigError("aggregation_weights must be 'size' or 'uniform'")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        s = self.schedules
        if s.lambda_u < 0 or s.lambda_d < 0 or not 0 <= s.ramp_fraction <= 1:
            raise ConfigError("schedule targets must be >= 0 and ramp_fraction in [0, 1]")
        self.model.validate()
        self.data.validate()

    @classmethod
    def from_dict(cls, raw) -> "ExperimentConfig":
        return _build(cls, raw, "config")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "ExperimentConfig":
        d = self.to_dict()
        d.update(changes)
        return ExperimentConfig.from_dict(d)


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from None
    return ExperimentConfig.from_dict(raw)
