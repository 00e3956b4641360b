"""Dense tensor primitives shared by every other module.

Tensors are plain numpy ndarrays in row-major layout. Verification paths
work in float64; training paths may run in float32. Randomness always goes
through :class:`SeededRng`, which wraps numpy's Philox counter-based bit
generator: the same (seed, stream) pair yields the same draw sequence on
every platform, and child streams for workers / items / epochs are derived
by key, never by sharing a generator.
"""

from __future__ import annotations

import ctypes
import hashlib
import os
import sys

import numpy as np

__all__ = [
    "ShapeError",
    "NumericError",
    "SeededRng",
    "matmul",
    "pearson",
    "pearson_flagged",
    "shuffle",
    "require_finite",
]


def _tune_allocator() -> None:
    """Keep glibc from bouncing the layer-sized temporaries through
    mmap/munmap: with the default thresholds every forward/backward pays
    page faults for each ~0.1-1 MB scratch array, which dominates step
    time. Raising the mmap and trim thresholds makes the arena reuse them.
    Set RAPA_NO_MALLOC_TUNING=1 to skip. No-op off glibc/Linux.
    """
    if os.environ.get("RAPA_NO_MALLOC_TUNING") == "1" or not sys.platform.startswith("linux"):
        return
    try:
        libc = ctypes.CDLL("libc.so.6", use_errno=True)
        m_trim_threshold, m_top_pad, m_mmap_threshold = -1, -2, -3
        libc.mallopt(m_mmap_threshold, 64 * 1024 * 1024)
        libc.mallopt(m_trim_threshold, 64 * 1024 * 1024)
        libc.mallopt(m_top_pad, 4 * 1024 * 1024)
    except OSError:
        pass


_tune_allocator()


class ShapeError(ValueError):
    """Operand extents do not satisfy an operation's precondition."""


class NumericError(ValueError):
    """A public operation produced or received non-finite values."""


def _entropy(key) -> int:
    """Map a stream key (int or str) to a 64-bit entropy word."""
    if isinstance(key, (int, np.integer)):
        return int(key)
    if isinstance(key, str):
        digest = hashlib.sha256(key.encode("utf-8")).digest()
        return int.from_bytes(digest[:8], "little")
    raise TypeError(f"stream keys must be int or str, got {type(key).__name__}")


class SeededRng:
    """Deterministic random stream (Philox) addressed by (seed, *stream).

    `derive(*keys)` produces an independent child stream; keys may be ints
    or strings (hashed with sha256, so names like "train" are stable across
    runs and platforms).
    """

    def __init__(self, seed: int, stream: tuple = ()):
        self.seed = int(seed)
        self.stream = tuple(_entropy(k) for k in stream)
        seq = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, *self.stream])
        self.generator = np.random.Generator(np.random.Philox(seq))

    def derive(self, *keys) -> "SeededRng":
        return SeededRng(self.seed, (*self.stream, *keys))

    # Thin draw helpers so call sites never touch `.generator` directly.
    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def random(self, size=None):
        return self.generator.random(size)

    def uniform(self, low: float, high: float, size=None):
        return self.generator.uniform(low, high, size)

    def normal(self, loc: float, scale: float, size=None):
        return self.generator.normal(loc, scale, size)

    def integers(self, low: int, high=None, size=None):
        return self.generator.integers(low, high, size=size)

    def __repr__(self):
        return f"SeededRng(seed={self.seed}, stream={self.stream})"


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product of two 2-D arrays with shape diagnostics.

    Accumulates in the operands' dtype; verification paths pass float64.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(
            f"matmul needs 2-D operands, got {a.ndim}-D and {b.ndim}-D"
        )
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul inner extents differ: {a.shape} x {b.shape}"
        )
    return a @ b


def pearson_flagged(u, v) -> tuple[float, bool]:
    """Sample correlation coefficient plus a degeneracy flag.

    Returns (0.0, True) when either input has zero variance: a constant
    filter is reported as "no correlation" so similarity averages stay
    well-defined.
    """
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise ShapeError(f"pearson inputs differ in length: {u.size} vs {v.size}")
    if u.size < 2:
        raise ShapeError(f"pearson needs length >= 2, got {u.size}")
    du = u - u.mean()
    dv = v - v.mean()
    su = float(np.sqrt(np.dot(du, du)))
    sv = float(np.sqrt(np.dot(dv, dv)))
    if su == 0.0 or sv == 0.0:
        return 0.0, True
    r = float(np.dot(du, dv) / (su * sv))
    # Rounding can push |r| a hair past 1 for near-collinear inputs.
    return min(1.0, max(-1.0, r)), False


def pearson(u, v) -> float:
    r, _ = pearson_flagged(u, v)
    return r


def shuffle(n: int, rng: SeededRng) -> np.ndarray:
    """Uniform permutation of 0..n-1; n = 0 yields an empty permutation."""
    if n < 0:
        raise ValueError(f"shuffle needs n >= 0, got {n}")
    return rng.permutation(n)


def require_finite(name: str, arr: np.ndarray) -> np.ndarray:
    """Raise NumericError if `arr` contains NaN or Inf."""
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} contains non-finite values")
    return arr
