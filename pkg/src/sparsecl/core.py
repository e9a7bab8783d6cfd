"""Dense math helpers and the seeded, splittable random streams.

Matrices are plain 2-D numpy arrays in C (row-major) order. Training state is
float32; every function here preserves the input dtype so the same code path
can be driven in float64 for finite-difference checks.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float32

# Divisor used for the per-row standard deviation: 0 gives the population
# form (divide by n), 1 the sample form (divide by n - 1).
STD_DDOF = 0

_MASK64 = (1 << 64) - 1


def as_matrix(x, dtype=None) -> np.ndarray:
    """Return ``x`` as a C-contiguous 2-D array (a single row if 1-D)."""
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {arr.shape}")
    return np.ascontiguousarray(arr)


def matmul(a: np.ndarray, b: np.ndarray, check_finite: bool = True) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    out = a @ b
    if check_finite and not np.isfinite(out).all():
        raise FloatingPointError("matmul produced non-finite values")
    return out


def row_mean_std(x: np.ndarray, ddof: int = STD_DDOF) -> tuple[np.ndarray, np.ndarray]:
    """Per-row mean and standard deviation over the last axis.

    Works on a single row (returns scalars as 0-d arrays) or a batch of rows.
    A single-element row has std 0 whatever ``ddof`` is.
    """
    x = np.asarray(x)
    n = x.shape[-1]
    if n < 1:
        raise ValueError("row_mean_std needs at least one element")
    mean = x.mean(axis=-1)
    if n - ddof <= 0:
        return mean, np.zeros_like(mean)
    centered = x - mean[..., None]
    var = np.einsum("...i,...i->...", centered, centered) / (n - ddof)
    return mean, np.sqrt(var)


def _hash64(*parts) -> int:
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        h.update(repr(p).encode())
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "little")


@dataclass
class RngStream:
    """A counter-based random stream identified by ``(seed, stream_id)``.

    Values come from the Philox-4x64 counter generator keyed on the pair, so a
    stream is fully reproducible from those two numbers and the number of
    draws taken so far. Child streams are made with :meth:`derive`, never by
    sharing a generator.
    """

    seed: int
    stream_id: int = 0
    _gen: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        self.seed &= _MASK64
        self.stream_id &= _MASK64
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    @classmethod
    def root(cls, seed: int) -> "RngStream":
        return cls(seed, 0)

    def derive(self, *labels) -> "RngStream":
        """Child stream that depends only on this stream's identity and ``labels``."""
        return RngStream(self.seed, _hash64(self.stream_id, *labels))

    @property
    def counter(self) -> int:
        """Philox block counter (low 64 bits): how far the stream has advanced."""
        return int(self._gen.bit_generator.state["state"]["counter"][0])

    def uniform(self, lo: float = 0.0, hi: float = 1.0, size=None):
        if not lo < hi:
            raise ValueError(f"uniform needs lo < hi, got [{lo}, {hi})")
        return self._gen.uniform(lo, hi, size)

    def gaussian(self, size=None, dtype=np.float64):
        return self._gen.standard_normal(size, dtype=dtype)

    def permutation(self, n: int) -> np.ndarray:
        if n < 1:
            raise ValueError(f"permutation needs n >= 1, got {n}")
        return self._gen.permutation(n)


def derive_stream(parent: RngStream, *labels) -> RngStream:
    return parent.derive(*labels)


def rng_uniform(s: RngStream, lo: float = 0.0, hi: float = 1.0, size=None):
    return s.uniform(lo, hi, size)


def rng_gaussian(s: RngStream, size=None):
    return s.gaussian(size)


def rng_permutation(s: RngStream, n: int) -> np.ndarray:
    return s.permutation(n)
