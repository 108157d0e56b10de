"""Disentangling client network: shared encoder, global head, local head.

Every stored array carries a :class:`PartitionTag` that the federation
engine uses to decide what is uploaded and averaged. BN running statistics
live alongside the trainable parameters so checkpoints and aggregation see
one flat, ordered namespace.
"""
from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .specfun import RngStream

__all__ = [
    "FeatureBatch",
    "Model",
    "ModelConfig",
    "ParamSet",
    "PartitionTag",
    "encode",
    "forward",
    "head_forward",
    "init_model",
    "partition_view",
]


class PartitionTag(str, enum.Enum):
    SHARED_ENCODER = "SharedEncoder"
    SHARED_GLOBAL_HEAD = "SharedGlobalHead"
    LOCAL_HEAD = "LocalHead"
    LOCAL_BN = "LocalBN"


ALL_TAGS = frozenset(PartitionTag)


@dataclass
class ModelConfig:
    """Architecture description.

    ``encoder`` is a list of blocks, each either
    ``{"type": "conv", "out": 8, "kernel": 3, "stride": 1, "padding": 1, "pool": 2}``
    or ``{"type": "dense", "out": 64}``. Every block is followed by BN (when
    enabled) and ReLU; conv blocks then max-pool when ``pool`` > 1. Both
    heads are ``head_depth`` dense layers of width ``head_width`` ending in
    ``num_classes`` outputs.
    """

    input_shape: tuple
    num_classes: int
    encoder: list = field(default_factory=list)
    head_width: int = 64
    head_depth: int = 3
    use_batchnorm: bool = True
    dual_head: bool = True
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        self.input_shape = tuple(int(n) for n in self.input_shape)
        self.encoder = [dict(b) for b in self.encoder]
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.head_width < 1 or self.head_depth < 1:
            raise ValueError("head_width and head_depth must be positive")
        if not self.encoder:
            raise ValueError("encoder needs at least one block")
        if len(self.input_shape) not in (1, 3):
            raise ValueError(f"input_shape must be (D,) or (C, H, W), got {self.input_shape}")
        for block in self.encoder:
            if block.get("type") not in ("conv", "dense"):
                raise ValueError(f"unknown encoder block {block!r}")
            if int(block.get("out", 0)) < 1:
                raise ValueError(f"encoder block width must be positive: {block!r}")

    @classmethod
    def conv_default(cls, input_shape=(3, 16, 16), num_classes=5, **kw):
        """Two conv blocks (8, 16 channels) then a dense block to 64 features."""
        encoder = [
            {"type": "conv", "out": 8, "kernel": 3, "stride": 1, "padding": 1, "pool": 2},
            {"type": "conv", "out": 16, "kernel": 3, "stride": 1, "padding": 1, "pool": 2},
            {"type": "dense", "out": 64},
        ]
        return cls(input_shape=input_shape, num_classes=num_classes, encoder=encoder, **kw)

    @classmethod
    def mlp_default(cls, input_dim=32, num_classes=5, **kw):
        encoder = [{"type": "dense", "out": 64}, {"type": "dense", "out": 64}]
        return cls(input_shape=(input_dim,), num_classes=num_classes, encoder=encoder, **kw)

    def to_dict(self):
        return dataclasses.asdict(self) | {"input_shape": list(self.input_shape)}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class ParamSet(dict):
    """Ordered mapping ``name -> ndarray`` plus a parallel ``tags`` mapping."""

    def __init__(self, arrays=(), tags=None):
        super().__init__(arrays)
        self.tags = dict(tags or {})

    def copy(self):
        return ParamSet({k: v.copy() for k, v in self.items()}, self.tags)

    def equal(self, other) -> bool:
        return list(self) == list(other) and all(np.array_equal(self[k], other[k]) for k in self)


@dataclass
class FeatureBatch:
    features: T.Tensor


@dataclass
class Model:
    config: ModelConfig
    params: ParamSet
    trainable: tuple  # names that receive gradients; the rest are BN buffers

    def copy(self) -> "Model":
        return Model(self.config, self.params.copy(), self.trainable)

    @property
    def feat_dim(self) -> int:
        return _encoder_out_dim(self.config)

    def load(self, params) -> None:
        """Copy ``params`` (a subset is fine) into this model in place."""
        for name, arr in params.items():
            if name not in self.params:
                raise KeyError(f"unknown parameter {name!r}")
            if self.params[name].shape != arr.shape:
                raise ValueError(f"shape mismatch for {name!r}: {self.params[name].shape} vs {arr.shape}")
            np.copyto(self.params[name], arr)


def _encoder_out_dim(config: ModelConfig) -> int:
    shape = config.input_shape
    for block in config.encoder:
        if block["type"] == "conv":
            c, h, w = shape
            k, s, p = int(block.get("kernel", 3)), int(block.get("stride", 1)), int(block.get("padding", 0))
            h = (h + 2 * p - k) // s + 1
            w = (w + 2 * p - k) // s + 1
            pool = int(block.get("pool", 1))
            shape = (int(block["out"]), h // pool, w // pool)
        else:
            shape = (int(block["out"]),)
    return int(np.prod(shape))


def init_model(config: ModelConfig, rng: RngStream) -> Model:
    """Fan-in scaled uniform weights, zero biases, BN gamma=1 / beta=0."""
    gen = rng.generator
    arrays, tags, trainable = {}, {}, []

    def weight(name, shape, fan_in, tag):
        # U(-sqrt(3/fan_in), sqrt(3/fan_in)) has variance 1/fan_in
        bound = np.sqrt(3.0 / fan_in)
        arrays[name] = gen.uniform(-bound, bound, size=shape).astype(np.float32)
        tags[name] = tag
        trainable.append(name)

    def zeros(name, shape, tag, train=True, fill=0.0):
        arrays[name] = np.full(shape, fill, dtype=np.float32)
        tags[name] = tag
        if train:
            trainable.append(name)

    enc, bn = PartitionTag.SHARED_ENCODER, PartitionTag.LOCAL_BN
    shape = config.input_shape
    for i, block in enumerate(config.encoder):
        out = int(block["out"])
        if block["type"] == "conv":
            if len(shape) != 3:
                raise ValueError("conv block needs a (C, H, W) input")
            c, h, w = shape
            k, s, p = int(block.get("kernel", 3)), int(block.get("stride", 1)), int(block.get("padding", 0))
            if (h + 2 * p - k) % s or (w + 2 * p - k) % s:
                raise ValueError(f"block {i}: non-integral conv output extent")
            h, w = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
            weight(f"enc.{i}.weight", (out, c, k, k), c * k * k, enc)
            zeros(f"enc.{i}.bias", (out,), enc)
            pool = int(block.get("pool", 1))
            if h % pool or w % pool:
                raise ValueError(f"block {i}: extent {h}x{w} not divisible by pool {pool}")
            shape = (out, h // pool, w // pool)
        else:
            fan_in = int(np.prod(shape))
            weight(f"enc.{i}.weight", (fan_in, out), fan_in, enc)
            zeros(f"enc.{i}.bias", (out,), enc)
            shape = (out,)
        if config.use_batchnorm:
            zeros(f"enc.{i}.bn.gamma", (out,), bn, fill=1.0)
            zeros(f"enc.{i}.bn.beta", (out,), bn)
            zeros(f"enc.{i}.bn.running_mean", (out,), bn, train=False)
            zeros(f"enc.{i}.bn.running_var", (out,), bn, train=False, fill=1.0)

    feat = int(np.prod(shape))
    heads = [("head_g", PartitionTag.SHARED_GLOBAL_HEAD)]
    if config.dual_head:
        heads.append(("head_l", PartitionTag.LOCAL_HEAD))
    for prefix, tag in heads:
        widths = [feat] + [config.head_width] * (config.head_depth - 1) + [config.num_classes]
        for j in range(config.head_depth):
            weight(f"{prefix}.{j}.weight", (widths[j], widths[j + 1]), widths[j], tag)
            zeros(f"{prefix}.{j}.bias", (widths[j + 1],), tag)
    return Model(config, ParamSet(arrays, tags), tuple(trainable))


def _param(model, name, leaves):
    if leaves is None:
        return model.params[name]
    t = leaves.get(name)
    if t is None:
        t = leaves[name] = T.Tensor(model.params[name], requires_grad=True)
    return t


def encode(model: Model, x, mode: str = "eval", leaves=None) -> FeatureBatch:
    """Run the encoder. ``leaves`` (name -> Tensor) collects trainable leaves."""
    cfg = model.config
    x = T.as_tensor(x, np.float32)
    if tuple(x.shape[1:]) != cfg.input_shape:
        raise ValueError(f"input shape {x.shape[1:]} does not match {cfg.input_shape}")
    training = mode == "train"
    h = x
    for i, block in enumerate(cfg.encoder):
        w, b = _param(model, f"enc.{i}.weight", leaves), _param(model, f"enc.{i}.bias", leaves)
        if block["type"] == "conv":
            h = T.conv2d(h, w, b, int(block.get("stride", 1)), int(block.get("padding", 0)))
        else:
            if h.ndim > 2:
                h = T.flatten(h)
            h = T.dense(h, w, b)
        if cfg.use_batchnorm:
            h = T.batchnorm(
                h,
                _param(model, f"enc.{i}.bn.gamma", leaves),
                _param(model, f"enc.{i}.bn.beta", leaves),
                model.params[f"enc.{i}.bn.running_mean"],
                model.params[f"enc.{i}.bn.running_var"],
                training,
                momentum=cfg.bn_momentum,
                eps=cfg.bn_eps,
            )
        h = T.relu(h)
        if block["type"] == "conv" and int(block.get("pool", 1)) > 1:
            h = T.maxpool2d(h, int(block["pool"]))
    if h.ndim > 2:
        h = T.flatten(h)
    return FeatureBatch(h)


def head_forward(model: Model, features, head: str = "global", leaves=None) -> T.Tensor:
    """Raw (pre-Softplus) [B, K] output of the global or local head."""
    prefix = {"global": "head_g", "local": "head_l"}[head]
    if prefix == "head_l" and not model.config.dual_head:
        raise ValueError("model has no local head")
    h = features.features if isinstance(features, FeatureBatch) else T.as_tensor(features, np.float32)
    w0 = model.params[f"{prefix}.0.weight"]
    if h.shape[1] != w0.shape[0]:
        raise ValueError(f"feature width {h.shape[1]} does not match head input {w0.shape[0]}")
    depth = model.config.head_depth
    for j in range(depth):
        h = T.dense(h, _param(model, f"{prefix}.{j}.weight", leaves), _param(model, f"{prefix}.{j}.bias", leaves))
        if j < depth - 1:
            h = T.relu(h)
    return h


def forward(model: Model, x, mode: str = "eval", leaves=None):
    """One encoder pass feeding both heads: ``(features, raw_global, raw_local)``.

    ``raw_local`` is None for single-head models.
    """
    feats = encode(model, x, mode, leaves)
    raw_g = head_forward(model, feats, "global", leaves)
    raw_l = head_forward(model, feats, "local", leaves) if model.config.dual_head else None
    return feats, raw_g, raw_l


def partition_view(model: Model, tags) -> ParamSet:
    """Copy of the parameters carrying any of ``tags``, in model order."""
    tags = {PartitionTag(t) for t in tags}
    if not tags:
        raise ValueError("tags must be non-empty")
    names = [n for n, t in model.params.tags.items() if t in tags]
    return ParamSet({n: model.params[n].copy() for n in names}, {n: model.params.tags[n] for n in names})
