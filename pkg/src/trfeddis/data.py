"""Synthetic domain-shifted datasets, IDX files, and Gaussian corruption.

Every synthetic domain shares the same class templates and exactly the same
label counts; only the input distribution moves (rotation, per-channel
gain, brightness, pixel noise). That is the non-IID *feature* setting:
P(Y) is equal across clients while P(X) differs.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .specfun import RngStream

__all__ = [
    "Dataset",
    "DomainSpec",
    "IdxFormatError",
    "IdxMagicError",
    "IdxTruncatedError",
    "IdxTypeError",
    "batches",
    "corrupt_gaussian",
    "default_domain_specs",
    "make_synthetic",
    "read_idx",
    "write_idx",
]


@dataclass(frozen=True)
class DomainSpec:
    rotation: float = 0.0  # degrees
    scale: tuple = (1.0,)  # per channel, broadcast if length 1
    brightness: float = 0.0
    noise_sigma: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "scale", tuple(float(s) for s in np.atleast_1d(self.scale)))
        if any(s <= 0 for s in self.scale):
            raise ValueError("channel scales must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")

    def to_dict(self):
        return {"rotation": self.rotation, "scale": list(self.scale), "brightness": self.brightness, "noise_sigma": self.noise_sigma}


def default_domain_specs(num_domains: int, channels: int = 3) -> list[DomainSpec]:
    """Deterministic, clearly distinct domains: rotations in 90 degree steps
    combined with channel gains, brightness shifts and noise levels."""
    specs = []
    for d in range(num_domains):
        gains = np.full(channels, 0.4)
        gains[d % channels] = 1.6
        specs.append(
            DomainSpec(
                rotation=90.0 * (d % 4) + 45.0 * (d // 4),
                scale=tuple(gains),
                brightness=0.25 * ((d * 3) % 5) - 0.4,
                noise_sigma=0.15 + 0.05 * (d % 3),
            )
        )
    return specs


@dataclass
class Dataset:
    """Inputs, integer labels, and a train/test boundary (first ``n_train`` rows train)."""

    inputs: np.ndarray
    labels: np.ndarray
    n_train: int
    num_classes: int
    name: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.inputs) != len(self.labels):
            raise ValueError("inputs and labels differ in length")
        if not 0 <= self.n_train <= len(self.labels):
            raise ValueError("n_train out of range")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels must lie in [0, K)")

    def __len__(self):
        return len(self.labels)

    @property
    def train(self) -> "Dataset":
        n = self.n_train
        return Dataset(self.inputs[:n], self.labels[:n], n, self.num_classes, self.name, self.meta)

    @property
    def test(self) -> "Dataset":
        n = self.n_train
        return Dataset(self.inputs[n:], self.labels[n:], len(self.labels) - n, self.num_classes, self.name, self.meta)

    def with_inputs(self, inputs) -> "Dataset":
        return Dataset(np.asarray(inputs), self.labels, self.n_train, self.num_classes, self.name, self.meta)


def _balanced_labels(n, k, gen):
    if n % k:
        raise ValueError(f"split size {n} is not divisible by num_classes {k}")
    return gen.permutation(np.repeat(np.arange(k), n // k))


def _templates(k, image_size, channels, blobs, gen):
    # blob centres kept away from the border so rotations stay in frame
    lo, hi = 0.25 * (image_size - 1), 0.75 * (image_size - 1)
    centres = gen.uniform(lo, hi, size=(k, blobs, 2))
    colours = gen.uniform(0.2, 1.0, size=(k, blobs, channels))
    return centres, colours


def _render(centres, colours, amps, image_size, width):
    # centres [N, M, 2], colours [N, M, C], amps [N, M] -> [N, C, H, W]
    grid = np.arange(image_size, dtype=np.float64)
    dy = grid[None, None, :] - centres[:, :, 0:1]
    dx = grid[None, None, :] - centres[:, :, 1:2]
    gy = np.exp(-0.5 * (dy / width) ** 2)  # [N, M, H]
    gx = np.exp(-0.5 * (dx / width) ** 2)  # [N, M, W]
    return np.einsum("nm,nmc,nmh,nmw->nchw", amps, colours, gy, gx, optimize=True)


def make_synthetic(
    base_seed: int,
    num_domains: int,
    per_domain_n: int,
    num_classes: int,
    image_size: int = 16,
    *,
    channels: int = 3,
    test_fraction: float = 0.2,
    domain_specs=None,
    blobs: int = 3,
    blob_width: float | None = None,
    jitter: float = 1.5,
) -> list[Dataset]:
    """One labelled dataset per domain, identical label counts everywhere.

    Each class is a fixed arrangement of Gaussian blobs; every sample
    jitters the blob positions and amplitudes, then the domain's rotation
    (about the image centre), channel gains, brightness offset and pixel
    noise are applied. Deterministic in ``base_seed``.
    """
    if num_domains < 2 or num_classes < 2:
        raise ValueError("need num_domains >= 2 and num_classes >= 2")
    if per_domain_n <= 0 or image_size < 4 or channels < 1:
        raise ValueError("invalid sizes")
    n_test = int(round(per_domain_n * test_fraction))
    n_train = per_domain_n - n_test
    specs = list(domain_specs) if domain_specs is not None else default_domain_specs(num_domains, channels)
    if len(specs) != num_domains:
        raise ValueError("need one DomainSpec per domain")
    width = blob_width if blob_width is not None else image_size / 10.0
    centres, colours = _templates(num_classes, image_size, channels, blobs, RngStream.keyed(base_seed, "templates").generator)
    mid = 0.5 * (image_size - 1)

    out = []
    for d, spec in enumerate(specs):
        gen = RngStream.keyed(base_seed, "domain", d).generator
        labels = np.concatenate([_balanced_labels(n_train, num_classes, gen), _balanced_labels(n_test, num_classes, gen)])
        n = len(labels)
        c = centres[labels] + gen.normal(0.0, jitter, size=(n, blobs, 2))
        amps = gen.uniform(0.6, 1.4, size=(n, blobs))
        theta = np.deg2rad(spec.rotation)
        rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
        c = (c - mid) @ rot.T + mid
        x = _render(c, colours[labels], amps, image_size, width)
        scale = np.broadcast_to(np.asarray(spec.scale), (channels,))
        x = x * scale[None, :, None, None] + spec.brightness
        if spec.noise_sigma > 0:
            x = x + spec.noise_sigma * gen.standard_normal(x.shape)
        out.append(
            Dataset(x.astype(np.float32), labels.astype(np.int64), n_train, num_classes, f"domain{d}", {"spec": spec.to_dict()})
        )
    return out


# ------------------------------------------------------------------------ IDX


class IdxFormatError(ValueError):
    pass


class IdxMagicError(IdxFormatError):
    pass


class IdxTruncatedError(IdxFormatError):
    pass


class IdxTypeError(IdxFormatError):
    pass


_IDX_TYPES = {0x08: np.dtype(">u1"), 0x0D: np.dtype(">f4")}


def read_idx(path, scale: bool = True) -> T.Tensor:
    """Parse an IDX file; unsigned-byte payloads are divided by 255 when ``scale``."""
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise IdxMagicError(f"{path}: bad IDX magic")
    code, ndim = raw[2], raw[3]
    if code not in _IDX_TYPES:
        raise IdxTypeError(f"{path}: unsupported IDX type code 0x{code:02X}")
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise IdxTruncatedError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    dtype = _IDX_TYPES[code]
    need = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(raw) - head < need:
        raise IdxTruncatedError(f"{path}: payload has {len(raw) - head} bytes, expected {need}")
    arr = np.frombuffer(raw, dtype=dtype, count=need // dtype.itemsize, offset=head).reshape(dims)
    if code == 0x08:
        arr = arr.astype(np.float32) / np.float32(255.0) if scale else arr.astype(np.float32)
    else:
        arr = arr.astype(np.float32)
    return T.Tensor(arr)


def write_idx(path, array) -> None:
    """Write uint8 arrays as type 0x08 and anything else as big-endian float32 (0x0D)."""
    arr = np.asarray(array)
    if arr.dtype == np.uint8:
        code, payload = 0x08, arr.astype(">u1").tobytes()
    else:
        code, payload = 0x0D, arr.astype(">f4").tobytes()
    header = bytes([0, 0, code, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + payload)


# ------------------------------------------------------------------ utilities


def corrupt_gaussian(x, sigma: float, rng: RngStream):
    """``x + sigma * N(0, 1)`` per element, without clipping; ``x`` is not modified."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    is_tensor = isinstance(x, T.Tensor)
    arr = x.data if is_tensor else np.asarray(x)
    if sigma == 0:
        out = arr.copy()
    else:
        out = (arr + sigma * rng.generator.standard_normal(arr.shape)).astype(arr.dtype)
    return T.Tensor(out) if is_tensor else out


def batches(ds: Dataset, batch_size: int, rng: RngStream | None = None, shuffle: bool = True, mode: str = "train"):
    """Yield ``(x, y)`` mini-batches over all of ``ds``.

    Train mode drops the last short batch (BN needs at least two rows); eval
    mode keeps it so every sample is scored.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    n = len(ds)
    order = rng.permutation(n) if shuffle else np.arange(n)
    stop = (n // batch_size) * batch_size if mode == "train" else n
    for start in range(0, stop, batch_size):
        idx = order[start : start + batch_size]
        yield ds.inputs[idx], ds.labels[idx]
