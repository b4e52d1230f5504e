"""Dense-grid arithmetic helpers and deterministic, stream-splittable randomness.

Grids are plain ``numpy.float64`` arrays: images are ``(H, W)``, probability
grids carry a trailing class axis ``(H, W, C)``. The helpers here are the only
places that touch raw exp/log stability and random-number generation, so that
everything downstream is bitwise reproducible from a single master seed.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "softmax",
    "safe_log",
    "require_finite",
    "RngStream",
    "stream_id",
    "PURPOSE_DATA",
    "PURPOSE_SPLIT",
    "PURPOSE_INIT",
    "PURPOSE_TRAIN",
    "PURPOSE_SCHEDULE",
    "PURPOSE_POOL",
]

PROB_FLOOR = 1e-12  # floor applied inside logs of probabilities

_U64 = np.uint64
_MASK64 = (1 << 64) - 1
# SplitMix64 constants (Steele, Lea & Flood's mixing function).
_GAMMA = _U64(0x9E3779B97F4A7C15)
_MIX1 = _U64(0xBF58476D1CE4E5B9)
_MIX2 = _U64(0x94D049BB133111EB)
_INV_2_53 = 1.0 / float(1 << 53)


def require_finite(values, what: str):
    """Raise ``ValueError`` naming ``what`` if ``values`` contains NaN/Inf."""
    arr = np.asarray(values)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"non-finite {what}")
    return arr


def softmax(logits, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax along ``axis``.

    Accepts a single class vector or any array with a class axis of size >= 2.
    Raises ``ValueError("non-finite logits")`` on NaN/Inf input.
    """
    z = np.asarray(logits, dtype=np.float64)
    if z.shape[axis] < 2:
        raise ValueError("softmax needs at least 2 classes")
    if not np.all(np.isfinite(z)):
        raise ValueError("non-finite logits")
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def safe_log(probs) -> np.ndarray:
    """log with probabilities floored at ``PROB_FLOOR`` to avoid -inf."""
    return np.log(np.maximum(probs, PROB_FLOOR))


def _mix64(z: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer, vectorized over uint64 arrays (wrapping mod 2^64)."""
    with np.errstate(over="ignore"):
        z = (z ^ (z >> _U64(30))) * _MIX1
        z = (z ^ (z >> _U64(27))) * _MIX2
        return z ^ (z >> _U64(31))


def _stream_key(seed: int, stream: int) -> int:
    # Hash-derived base state keeps streams with adjacent ids uncorrelated.
    h = hashlib.blake2b(digest_size=8)
    h.update((seed & _MASK64).to_bytes(8, "little"))
    h.update((stream & _MASK64).to_bytes(8, "little"))
    return int.from_bytes(h.digest(), "little")


# Purpose tags composed into stream ids; keeps per-site streams disjoint
# across the different consumers of randomness.
PURPOSE_DATA = 1
PURPOSE_SPLIT = 2
PURPOSE_INIT = 3
PURPOSE_TRAIN = 4
PURPOSE_SCHEDULE = 5
PURPOSE_POOL = 6


def stream_id(purpose: int, index: int = 0) -> int:
    """Compose a 64-bit stream id from a purpose tag and a site/trial index."""
    return ((purpose & 0xFFFFFFFF) << 32) | (index & 0xFFFFFFFF)


@dataclass
class RngStream:
    """Counter-based uniform generator: the k-th draw is a pure function of
    ``(seed, stream_id, k)``.

    Draws therefore do not depend on how they are batched, and streams with
    different ``(seed, stream_id)`` are independent. Advancing the counter is
    the only mutation; everything else is stateless.
    """

    seed: int
    stream: int
    counter: int = 0
    _key: int = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        self._key = _stream_key(self.seed, self.stream)

    def _raw(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter, self.counter + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            state = _U64(self._key) + (idx + _U64(1)) * _GAMMA
        return _mix64(state)

    def uniforms(self, n: int) -> np.ndarray:
        """``n`` doubles uniform in [0, 1), consuming ``n`` counter slots."""
        return (self._raw(n) >> _U64(11)).astype(np.float64) * _INV_2_53

    def next_uniform(self) -> float:
        return float(self.uniforms(1)[0])

    def normals(self, n: int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        """``n`` Gaussian draws via Box-Muller; consumes ``2n`` counter slots."""
        u = self.uniforms(2 * n)
        u1 = 1.0 - u[:n]  # (0, 1]: keeps the log finite
        u2 = u[n:]
        z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * math.pi * u2)
        return mean + std * z

    def integers(self, bound: int, n: int = 1) -> np.ndarray:
        """``n`` ints uniform in [0, bound); modulo-free floor construction."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        return np.minimum((self.uniforms(n) * bound).astype(np.int64), bound - 1)

    def integer(self, bound: int) -> int:
        return int(self.integers(bound, 1)[0])

    def int_range(self, lo: int, hi: int) -> int:
        """Uniform integer in the inclusive range [lo, hi]."""
        if hi < lo:
            raise ValueError("empty range")
        return lo + self.integer(hi - lo + 1)

    def shuffled(self, items) -> list:
        """Fisher-Yates shuffle of ``items`` (returns a new list)."""
        out = list(items)
        for i in range(len(out) - 1, 0, -1):
            j = self.integer(i + 1)
            out[i], out[j] = out[j], out[i]
        return out
