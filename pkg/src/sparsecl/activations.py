"""Hidden-layer activation functions with hand-written backward passes.

Every function works per example: statistics, winners and thresholds are
computed along the last axis of a ``(batch, width)`` array, never across the
batch. Forward functions return ``(out, cache)``; :func:`activation_backward`
turns an upstream gradient into a gradient w.r.t. the pre-activation using
only the cache.

For ASH and Hard ASH the row mean and std are treated as constants in the
backward pass, and so is the subtracted k-th value of Top-K subtract. Passing
``frozen=cache`` to :func:`activation_forward` evaluates the forward function
with those quantities pinned to the cached values, which is the function whose
derivative the backward pass returns.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from enum import Enum

import numpy as np

from .core import row_mean_std


class Kind(str, Enum):
    ASH = "ash"
    HARD_ASH = "hard_ash"
    TOPK_SUBTRACT = "topk_subtract"
    TOPK_MASK = "topk_mask"
    LWTA = "lwta"
    RELU = "relu"
    SWISH = "swish"
    SIGMOID = "sigmoid"
    HARD_SIGMOID = "hard_sigmoid"


ASH_FAMILY = (Kind.ASH, Kind.HARD_ASH)
SPARSE_KINDS = (Kind.ASH, Kind.HARD_ASH, Kind.TOPK_SUBTRACT, Kind.TOPK_MASK, Kind.LWTA)
DENSE_KINDS = (Kind.RELU, Kind.SWISH, Kind.SIGMOID, Kind.HARD_SIGMOID)

# Which optional fields each kind uses; anything else must be left unset.
_PARAMS = {
    Kind.ASH: ("alpha", "z_k"),
    Kind.HARD_ASH: ("alpha", "z_k", "x_max"),
    Kind.TOPK_SUBTRACT: ("k",),
    Kind.TOPK_MASK: ("k",),
    Kind.LWTA: ("groups",),
}

# Magnitude below which an output counts as inactive.
EXACT_ZERO_TOL = 1e-6
SOFT_ZERO_TOL = 1e-2


@dataclass(frozen=True)
class ActivationSpec:
    kind: Kind
    alpha: float | None = None
    z_k: float | None = None
    x_max: float | None = None
    k: int | None = None
    groups: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        needed = _PARAMS.get(self.kind, ())
        for name in ("alpha", "z_k", "x_max", "k", "groups"):
            value = getattr(self, name)
            if name in needed and value is None:
                if name == "x_max":
                    object.__setattr__(self, "x_max", 2.0)
                    continue
                raise ValueError(f"{self.kind.value} activation needs '{name}'")
            if name not in needed and value is not None:
                raise ValueError(f"'{name}' is not a parameter of {self.kind.value}")
        if self.alpha is not None and self.alpha <= 0:
            raise ValueError("alpha must be > 0")
        if self.x_max is not None and self.x_max <= 0:
            raise ValueError("x_max must be > 0")
        if self.k is not None and self.k < 1:
            raise ValueError("k must be >= 1")
        if self.groups is not None and self.groups < 1:
            raise ValueError("groups must be >= 1")

    def check_width(self, n: int) -> None:
        if self.k is not None and not 1 <= self.k <= n:
            raise ValueError(f"k={self.k} out of range for width {n}")
        if self.groups is not None and n % self.groups:
            raise ValueError(f"groups={self.groups} does not divide width {n}")

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if v is not None}
        d["kind"] = self.kind.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ActivationSpec":
        return cls(**d)

    @property
    def is_sparse(self) -> bool:
        return self.kind in SPARSE_KINDS

    @property
    def zero_tol(self) -> float:
        return SOFT_ZERO_TOL if self.kind in (Kind.ASH, Kind.SWISH) else EXACT_ZERO_TOL


@dataclass
class ActivationCache:
    kind: Kind
    x: np.ndarray
    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    threshold: np.ndarray | None = None  # per row, shape (batch, 1)
    mask: np.ndarray | None = None  # winners for Top-K / LWTA


def sigmoid(x):
    # tanh form never overflows and gives exactly 0.5 at 0
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def hard_sigmoid(v):
    return np.clip(v + 3.0, 0.0, 6.0) / 6.0


def _rows(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    if x.ndim == 1:
        return x[None, :], True
    if x.ndim != 2:
        raise ValueError(f"activations take a row or a batch of rows, got shape {x.shape}")
    return x, False


def _ash_threshold(x, z_k, frozen):
    if frozen is not None:
        return frozen.mean, frozen.std, frozen.threshold
    mean, std = row_mean_std(x)
    mean = mean[:, None]
    std = std[:, None]
    return mean, std, mean + x.dtype.type(z_k) * std


def ash_forward(x, alpha, z_k, frozen=None):
    x, squeeze = _rows(x)
    mean, std, thr = _ash_threshold(x, z_k, frozen)
    out = x * sigmoid(x.dtype.type(alpha) * (x - thr))
    cache = ActivationCache(Kind.ASH, x, mean, std, thr)
    return (out[0] if squeeze else out), cache


def hard_ash_forward(x, alpha, z_k, x_max=2.0, frozen=None):
    x, squeeze = _rows(x)
    mean, std, thr = _ash_threshold(x, z_k, frozen)
    out = np.clip(x, 0.0, x_max) * hard_sigmoid(x.dtype.type(alpha) * (x - thr))
    cache = ActivationCache(Kind.HARD_ASH, x, mean, std, thr)
    return (out[0] if squeeze else out), cache


def _topk_winners(x, k):
    """Boolean mask of the k largest entries per row; ties go to the lower index."""
    n = x.shape[1]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range for width {n}")
    kth = np.partition(x, n - k, axis=1)[:, n - k : n - k + 1]
    above = x > kth
    tied = x == kth
    need = k - above.sum(axis=1, keepdims=True)
    return above | (tied & (np.cumsum(tied, axis=1) <= need)), kth


def topk_subtract(x, k, frozen=None):
    x, squeeze = _rows(x)
    mask, kth = _topk_winners(x, k)
    if frozen is not None:
        kth = frozen.threshold
    out = np.where(mask, x - kth, 0.0).astype(x.dtype, copy=False)
    cache = ActivationCache(Kind.TOPK_SUBTRACT, x, threshold=kth, mask=mask)
    return (out[0] if squeeze else out), cache


def topk_mask(x, k, frozen=None):
    x, squeeze = _rows(x)
    mask, kth = _topk_winners(x, k)
    out = np.where(mask, x, 0.0).astype(x.dtype, copy=False)
    cache = ActivationCache(Kind.TOPK_MASK, x, threshold=kth, mask=mask)
    return (out[0] if squeeze else out), cache


def lwta(x, groups, frozen=None):
    x, squeeze = _rows(x)
    b, n = x.shape
    if groups < 1 or n % groups:
        raise ValueError(f"groups={groups} does not divide width {n}")
    blocks = x.reshape(b, groups, n // groups)
    winner = blocks.argmax(axis=2)  # first maximum wins ties
    mask = np.zeros(blocks.shape, dtype=bool)
    np.put_along_axis(mask, winner[..., None], True, axis=2)
    mask = mask.reshape(b, n)
    out = np.where(mask, x, 0.0).astype(x.dtype, copy=False)
    cache = ActivationCache(Kind.LWTA, x, mask=mask)
    return (out[0] if squeeze else out), cache


def pointwise_forward(kind, x, frozen=None):
    kind = Kind(kind)
    x, squeeze = _rows(x)
    if kind is Kind.RELU:
        out = np.maximum(x, 0.0)
    elif kind is Kind.SWISH:
        out = x * sigmoid(x)
    elif kind is Kind.SIGMOID:
        out = sigmoid(x)
    elif kind is Kind.HARD_SIGMOID:
        out = hard_sigmoid(x)
    else:
        raise ValueError(f"{kind.value} is not a pointwise activation")
    out = out.astype(x.dtype, copy=False)
    return (out[0] if squeeze else out), ActivationCache(kind, x)


def activation_forward(spec: ActivationSpec, x, frozen: ActivationCache | None = None):
    """Dispatch on ``spec.kind``. ``frozen`` pins the detached statistics."""
    kind = spec.kind
    if frozen is not None and frozen.kind is not kind:
        raise ValueError(f"frozen cache is for {frozen.kind.value}, spec is {kind.value}")
    if kind is Kind.ASH:
        return ash_forward(x, spec.alpha, spec.z_k, frozen)
    if kind is Kind.HARD_ASH:
        return hard_ash_forward(x, spec.alpha, spec.z_k, spec.x_max, frozen)
    if kind is Kind.TOPK_SUBTRACT:
        return topk_subtract(x, spec.k, frozen)
    if kind is Kind.TOPK_MASK:
        return topk_mask(x, spec.k, frozen)
    if kind is Kind.LWTA:
        return lwta(x, spec.groups, frozen)
    return pointwise_forward(kind, x, frozen)


def activation_backward(spec: ActivationSpec, cache: ActivationCache, upstream):
    if cache.kind is not spec.kind:
        raise ValueError(f"cache is from {cache.kind.value}, spec is {spec.kind.value}")
    up, squeeze = _rows(upstream)
    x = cache.x
    if up.shape != x.shape:
        raise ValueError(f"upstream shape {up.shape} does not match cache {x.shape}")
    kind = spec.kind
    one = x.dtype.type(1)

    if kind is Kind.ASH:
        a = x.dtype.type(spec.alpha)
        s = sigmoid(a * (x - cache.threshold))
        grad = up * (s + a * x * s * (one - s))
    elif kind is Kind.HARD_ASH:
        a = x.dtype.type(spec.alpha)
        u = a * (x - cache.threshold)
        h = hard_sigmoid(u)
        clip_slope = (x > 0) & (x < spec.x_max)
        hs_slope = (u > -3) & (u < 3)
        grad = up * (clip_slope * h + np.clip(x, 0.0, spec.x_max) * hs_slope * (a / 6))
    elif kind in (Kind.TOPK_SUBTRACT, Kind.TOPK_MASK, Kind.LWTA):
        grad = up * cache.mask
    elif kind is Kind.RELU:
        grad = up * (x > 0)
    elif kind is Kind.SWISH:
        s = sigmoid(x)
        grad = up * (s + x * s * (one - s))
    elif kind is Kind.SIGMOID:
        s = sigmoid(x)
        grad = up * s * (one - s)
    elif kind is Kind.HARD_SIGMOID:
        grad = up * (((x > -3) & (x < 3)) / 6)
    else:  # pragma: no cover
        raise ValueError(kind)
    grad = grad.astype(x.dtype, copy=False)
    return grad[0] if squeeze else grad


def regime(spec: ActivationSpec, cache: ActivationCache) -> np.ndarray:
    """Discrete piece of the piecewise definition each unit sits in.

    Two inputs with equal regimes lie on the same smooth piece, so a finite
    difference between them is free of kinks. Smooth activations return an
    empty array.
    """
    x = cache.x
    kind = spec.kind
    if kind is Kind.HARD_ASH:
        u = spec.alpha * (x - cache.threshold)
        return np.stack([np.sign(x), np.sign(x - spec.x_max), np.sign(u + 3), np.sign(u - 3)])
    if kind in (Kind.TOPK_SUBTRACT, Kind.TOPK_MASK, Kind.LWTA):
        return cache.mask
    if kind is Kind.RELU:
        return np.sign(x)
    if kind is Kind.HARD_SIGMOID:
        return np.stack([np.sign(x + 3), np.sign(x - 3)])
    return np.empty(0)


def kink_distance(spec: ActivationSpec, cache: ActivationCache) -> np.ndarray:
    """Per-element distance (in input units) to the nearest kink; inf if smooth."""
    x = cache.x
    kind = spec.kind
    inf = np.full(x.shape, np.inf)
    if kind is Kind.HARD_ASH:
        thr = cache.threshold
        edges = [x, x - spec.x_max, x - (thr - 3 / spec.alpha), x - (thr + 3 / spec.alpha)]
        return np.min(np.abs(np.stack(edges)), axis=0)
    if kind is Kind.RELU:
        return np.abs(x)
    if kind is Kind.HARD_SIGMOID:
        return np.minimum(np.abs(x + 3), np.abs(x - 3))
    if kind in (Kind.TOPK_SUBTRACT, Kind.TOPK_MASK):
        # a winner flips when some value crosses the k-th value
        d = np.abs(x - cache.threshold)
        d[x == cache.threshold] = np.inf
        nearest = d.min(axis=1, keepdims=True)
        return np.broadcast_to(nearest, x.shape).copy()
    if kind is Kind.LWTA:
        b, n = x.shape
        g = spec.groups
        blocks = np.sort(x.reshape(b, g, n // g), axis=2)
        if n // g == 1:
            return inf
        gap = blocks[:, :, -1] - blocks[:, :, -2]
        return np.repeat(gap, n // g, axis=1)
    return inf


def sparsity(spec: ActivationSpec, out: np.ndarray) -> float:
    """Fraction of outputs counted as inactive under the kind's zero tolerance."""
    return float(np.mean(np.abs(out) <= spec.zero_tol))
