"""Scalar special functions and keyed random streams.

The gamma-family functions accept floats or numpy arrays and always compute
in float64. ``digamma`` and ``trigamma`` shift the argument above 6 with the
recurrence and finish with the asymptotic series.
"""
from __future__ import annotations

import zlib

import numpy as np
from scipy import special as _sp

__all__ = [
    "RngStream",
    "digamma",
    "lgamma",
    "softplus",
    "standard_normal",
    "trigamma",
]

_SHIFT_TO = 6.0
_SHIFTS = np.arange(6, dtype=np.float64)

# Bernoulli-number coefficients B_2k / (2k) for the digamma series
_DIGAMMA_COEFS = (
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32760.0,
    1.0 / 12.0,
)
# B_2k for the trigamma series
_TRIGAMMA_COEFS = (
    1.0 / 6.0,
    -1.0 / 30.0,
    1.0 / 42.0,
    -1.0 / 30.0,
    5.0 / 66.0,
    -691.0 / 2730.0,
    7.0 / 6.0,
)


def _positive_array(x, name):
    arr = np.asarray(x, dtype=np.float64)
    if not (arr > 0).all():
        raise ValueError(f"{name} requires x > 0")
    return arr


def _restore(arr, like):
    if np.ndim(like) == 0 and not isinstance(like, np.ndarray):
        return float(arr)
    return arr


def lgamma(x):
    """Natural log of the gamma function for positive arguments."""
    arr = _positive_array(x, "lgamma")
    return _restore(_sp.gammaln(arr), x)


def digamma(x):
    """Digamma function psi(x) = d/dx ln Gamma(x), for x > 0."""
    arr = _positive_array(x, "digamma")
    # psi(x) = psi(x + 6) - sum_{i<6} 1/(x + i), then the series at x + 6
    shifted = arr[..., None] + _SHIFTS
    acc = -np.sum(1.0 / shifted, axis=-1)
    z = arr + _SHIFT_TO
    inv2 = 1.0 / (z * z)
    series = np.zeros_like(z)
    for c in reversed(_DIGAMMA_COEFS):
        series = inv2 * (c + series)
    out = acc + np.log(z) - 0.5 / z - series
    return _restore(out, x)


def trigamma(x):
    """First derivative of the digamma function, for x > 0."""
    arr = _positive_array(x, "trigamma")
    shifted = arr[..., None] + _SHIFTS
    acc = np.sum(1.0 / (shifted * shifted), axis=-1)
    z = arr + _SHIFT_TO
    inv = 1.0 / z
    inv2 = inv * inv
    # psi'(z) ~ 1/z + 1/(2z^2) + sum_k B_2k / z^(2k+1)
    series = np.zeros_like(z)
    for c in reversed(_TRIGAMMA_COEFS):
        series = inv2 * (c + series)
    out = acc + inv + 0.5 * inv2 + inv * series
    return _restore(out, x)


def softplus(x):
    """ln(1 + e^x) without overflow; strictly positive for finite input."""
    arr = np.asarray(x, dtype=np.float64)
    out = np.where(arr > 30.0, arr + np.log1p(np.exp(-np.abs(arr))), np.log1p(np.exp(np.minimum(arr, 30.0))))
    return _restore(out, x)


def _purpose_code(purpose) -> int:
    if isinstance(purpose, (int, np.integer)):
        return int(purpose)
    return zlib.crc32(str(purpose).encode("utf-8"))


class RngStream:
    """Counter-based random stream keyed by ``(seed, stream_id)``.

    Backed by numpy's Philox generator, so two streams with equal keys
    yield identical sequences and streams with different ids are
    statistically independent.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        if seed < 0 or stream_id < 0:
            raise ValueError("seed and stream_id must be non-negative")
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream_id,))
        self.generator = np.random.Generator(np.random.Philox(ss))

    @classmethod
    def keyed(cls, seed: int, purpose, *ids: int) -> "RngStream":
        """Stream for ``(seed, purpose, *ids)``, e.g. ``keyed(3, "shuffle", client_id)``."""
        key = _purpose_code(purpose)
        for i in ids:
            key = zlib.crc32(int(i).to_bytes(8, "little"), key)
        return cls(seed, key)

    def normal(self, size=None):
        return self.generator.standard_normal(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def permutation(self, n: int):
        return self.generator.permutation(n)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def __getstate__(self):
        return {"seed": self.seed, "stream_id": self.stream_id, "state": self.generator.bit_generator.state}

    def __setstate__(self, state):
        self.__init__(state["seed"], state["stream_id"])
        self.generator.bit_generator.state = state["state"]

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"


def standard_normal(rng: RngStream) -> float:
    """Single N(0, 1) draw from ``rng``."""
    return float(rng.generator.standard_normal())
