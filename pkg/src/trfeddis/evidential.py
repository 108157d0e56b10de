"""Evidence, Dirichlet opinions and two-source Dempster-Shafer fusion.

All functions take and return :class:`~trfeddis.tensor.Tensor` values so the
fused opinion stays differentiable with respect to the raw head outputs.
Plain arrays are accepted and wrapped as float64.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T

__all__ = [
    "DirichletBatch",
    "FusionDiagnostics",
    "Opinion",
    "TotalConflictError",
    "ds_fuse",
    "opinion_to_dirichlet",
    "predict",
    "to_evidence",
    "to_opinion",
]


class TotalConflictError(ValueError):
    """The two opinions are in (numerically) total conflict, C >= 1."""


@dataclass
class DirichletBatch:
    alpha: T.Tensor  # [B, K]
    strength: T.Tensor  # [B, 1]


@dataclass
class Opinion:
    belief: T.Tensor  # [B, K]
    uncertainty: T.Tensor  # [B, 1]

    @property
    def b(self) -> np.ndarray:
        return self.belief.data

    @property
    def u(self) -> np.ndarray:
        return self.uncertainty.data[:, 0]

    @classmethod
    def from_arrays(cls, b, u) -> "Opinion":
        b = np.atleast_2d(np.asarray(b, dtype=np.float64))
        u = np.asarray(u, dtype=np.float64).reshape(-1, 1)
        return cls(T.Tensor(b), T.Tensor(u))

    @classmethod
    def vacuous(cls, batch: int, num_classes: int) -> "Opinion":
        return cls.from_arrays(np.zeros((batch, num_classes)), np.ones(batch))


@dataclass
class FusionDiagnostics:
    conflict: np.ndarray  # [B]
    renormalizer: np.ndarray  # [B], 1 - C


def _f64(x) -> T.Tensor:
    return x if isinstance(x, T.Tensor) else T.as_tensor(np.asarray(x, dtype=np.float64))


def to_evidence(raw) -> T.Tensor:
    """Non-negative evidence via Softplus."""
    return T.softplus_t(_f64(raw))


def to_opinion(evidence) -> tuple[DirichletBatch, Opinion]:
    """alpha = e + 1, S = sum(alpha), b = e / S, u = K / S."""
    e = _f64(evidence)
    if np.any(e.data < 0):
        raise ValueError("evidence must be non-negative")
    k = e.shape[-1]
    alpha = e + 1.0
    strength = T.sum(alpha, axis=-1, keepdims=True)
    return DirichletBatch(alpha, strength), Opinion(e / strength, T.div(float(k), strength))


def ds_fuse(g: Opinion, l: Opinion) -> tuple[Opinion, FusionDiagnostics]:
    """Dempster's rule for two opinions over the same K singletons.

    C = sum_{i != j} bG_i bL_j
    b_k = (bG_k bL_k + bG_k uL + bL_k uG) / (1 - C)
    u = uG uL / (1 - C)
    """
    bg, bl, ug, ul = g.belief, l.belief, g.uncertainty, l.uncertainty
    if bg.shape != bl.shape:
        raise ValueError(f"opinion shapes differ: {bg.shape} vs {bl.shape}")
    agree = T.sum(bg * bl, axis=-1, keepdims=True)
    conflict = T.sum(bg, axis=-1, keepdims=True) * T.sum(bl, axis=-1, keepdims=True) - agree
    if np.any(conflict.data >= 1.0 - 1e-12):
        raise TotalConflictError("total conflict between opinions (C >= 1)")
    norm = 1.0 - conflict
    belief = (bg * bl + bg * ul + bl * ug) / norm
    uncertainty = ug * ul / norm
    c = conflict.data[:, 0].copy()
    return Opinion(belief, uncertainty), FusionDiagnostics(c, 1.0 - c)


def opinion_to_dirichlet(o: Opinion) -> DirichletBatch:
    """Invert the opinion map: S = K / u, alpha = b S + 1."""
    if np.any(o.uncertainty.data <= 0):
        raise ValueError("uncertainty must be positive to recover a Dirichlet")
    k = o.belief.shape[-1]
    strength = T.div(float(k), o.uncertainty)
    return DirichletBatch(o.belief * strength + 1.0, strength)


def predict(o: Opinion):
    """Argmax class (ties go to the lowest index), its belief, and u."""
    b = o.b
    cls = np.argmax(b, axis=-1)
    return cls, b[np.arange(b.shape[0]), cls], o.u.copy()
