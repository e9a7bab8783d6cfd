"""Single-hidden-layer MLP with manual forward/backward.

Layer 1 is weight-normalized with a fixed gain of 1 by default: the stored
``w1`` holds direction vectors ``v`` and the layer uses ``v / ||v||`` column
by column, one column per hidden unit (its incoming weights).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .activations import ActivationCache, ActivationSpec, activation_backward, activation_forward
from .core import DTYPE, RngStream, matmul

PARAM_NAMES = ("w1", "b1", "w2", "b2")
CHECKPOINT_MAGIC = b"SCL1"


def kaiming_init(fan_in: int, fan_out: int, rng: RngStream, dtype=DTYPE) -> np.ndarray:
    """Gaussian He init, fan-in mode: N(0, 2 / fan_in), shape (fan_in, fan_out)."""
    if fan_in < 1 or fan_out < 1:
        raise ValueError(f"fan_in and fan_out must be >= 1, got {fan_in}, {fan_out}")
    w = rng.gaussian((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
    return w.astype(dtype)


def _column_norms(v: np.ndarray) -> np.ndarray:
    norms = np.sqrt(np.einsum("ij,ij->j", v, v))
    if np.any(norms == 0):
        bad = int(np.flatnonzero(norms == 0)[0])
        raise ValueError(f"cannot weight-normalize: unit {bad} has an all-zero weight vector")
    return norms


def weightnorm_apply(v: np.ndarray) -> np.ndarray:
    """Scale each column of ``v`` to unit L2 norm (g fixed to 1)."""
    v = np.asarray(v)
    if v.ndim == 1:
        return v / _column_norms(v[:, None])[0]
    return v / _column_norms(v)


def weightnorm_backward(w: np.ndarray, norms: np.ndarray, dw: np.ndarray) -> np.ndarray:
    """Map a gradient w.r.t. the normalized weights back to the directions v.

    Per column: dv = (I - w w^T) dw / ||v||, which is orthogonal to v.
    """
    proj = np.einsum("ij,ij->j", w, dw)
    return (dw - w * proj) / norms


@dataclass
class MlpParams:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    weightnorm_layer1: bool = True
    weightnorm_layer2: bool = False

    def __post_init__(self):
        d_in, d_hidden = self.w1.shape
        if self.b1.shape != (d_hidden,) or self.w2.shape[0] != d_hidden:
            raise ValueError("inconsistent layer-1 / layer-2 shapes")
        if self.b2.shape != (self.w2.shape[1],):
            raise ValueError("b2 does not match w2")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.w1.shape[0], self.w1.shape[1], self.w2.shape[1]

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def astype(self, dtype) -> "MlpParams":
        return MlpParams(
            *(getattr(self, n).astype(dtype) for n in PARAM_NAMES),
            weightnorm_layer1=self.weightnorm_layer1,
            weightnorm_layer2=self.weightnorm_layer2,
        )

    def copy(self) -> "MlpParams":
        return self.astype(self.w1.dtype)


def init_params(
    rng: RngStream,
    input_dim: int = 784,
    hidden_dim: int = 1000,
    output_dim: int = 10,
    weightnorm_layer1: bool = True,
    weightnorm_layer2: bool = False,
) -> MlpParams:
    return MlpParams(
        w1=kaiming_init(input_dim, hidden_dim, rng.derive("w1")),
        b1=np.zeros(hidden_dim, DTYPE),
        w2=kaiming_init(hidden_dim, output_dim, rng.derive("w2")),
        b2=np.zeros(output_dim, DTYPE),
        weightnorm_layer1=weightnorm_layer1,
        weightnorm_layer2=weightnorm_layer2,
    )


@dataclass
class ForwardCache:
    batch: np.ndarray
    pre: np.ndarray
    act: ActivationCache
    hidden: np.ndarray
    logits: np.ndarray
    w1_eff: np.ndarray
    w2_eff: np.ndarray
    norms1: np.ndarray | None = None
    norms2: np.ndarray | None = None
    spec: ActivationSpec | None = field(default=None, repr=False)


def _effective(w, enabled):
    if not enabled:
        return w, None
    norms = _column_norms(w)
    return w / norms, norms


def mlp_forward(params: MlpParams, spec: ActivationSpec, batch: np.ndarray, frozen=None):
    """Logits for a batch of flattened images, plus everything backward needs."""
    batch = np.asarray(batch)
    if batch.ndim != 2 or batch.shape[1] != params.w1.shape[0]:
        raise ValueError(f"batch shape {batch.shape} does not fit input dim {params.w1.shape[0]}")
    spec.check_width(params.w1.shape[1])
    w1_eff, norms1 = _effective(params.w1, params.weightnorm_layer1)
    w2_eff, norms2 = _effective(params.w2, params.weightnorm_layer2)
    pre = matmul(batch, w1_eff) + params.b1
    hidden, act = activation_forward(spec, pre, frozen)
    logits = matmul(hidden, w2_eff) + params.b2
    cache = ForwardCache(batch, pre, act, hidden, logits, w1_eff, w2_eff, norms1, norms2, spec)
    return logits, cache


def predict(params: MlpParams, spec: ActivationSpec, images: np.ndarray, chunk: int = 10000) -> np.ndarray:
    """Argmax class per row (ties go to the lowest class id)."""
    out = []
    for start in range(0, len(images), chunk):
        logits, _ = mlp_forward(params, spec, images[start : start + chunk])
        out.append(logits.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def softmax_cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    labels = np.asarray(labels)
    b, c = logits.shape
    if labels.shape != (b,):
        raise ValueError(f"expected {b} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in 0..{c - 1}")
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    total = exp.sum(axis=1, keepdims=True)
    rows = np.arange(b)
    loss = float(np.mean(np.log(total[:, 0]) - shifted[rows, labels]))
    dlogits = exp / total
    dlogits[rows, labels] -= 1
    dlogits /= b
    return loss, dlogits


def mlp_backward(cache: ForwardCache, spec: ActivationSpec, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    if dlogits.shape != cache.logits.shape:
        raise ValueError(f"dlogits shape {dlogits.shape} does not match logits {cache.logits.shape}")
    if cache.spec is not None and cache.spec != spec:
        raise ValueError("activation spec differs from the one used in forward")
    dw2 = matmul(cache.hidden.T, dlogits)
    db2 = dlogits.sum(axis=0)
    dhidden = matmul(dlogits, cache.w2_eff.T)
    dpre = activation_backward(spec, cache.act, dhidden)
    dw1 = matmul(cache.batch.T, dpre)
    db1 = dpre.sum(axis=0)
    if cache.norms1 is not None:
        dw1 = weightnorm_backward(cache.w1_eff, cache.norms1, dw1)
    if cache.norms2 is not None:
        dw2 = weightnorm_backward(cache.w2_eff, cache.norms2, dw2)
    return {"w1": dw1, "b1": db1, "w2": dw2, "b2": db2}


def loss_and_grads(params: MlpParams, spec: ActivationSpec, images, labels):
    logits, cache = mlp_forward(params, spec, images)
    loss, dlogits = softmax_cross_entropy(logits, labels)
    return loss, mlp_backward(cache, spec, dlogits)


def save_checkpoint(params: MlpParams, path) -> None:
    """Write ``SCL1``, the three layer sizes (uint32 LE), then w1, b1, w2, b2 as float32 LE."""
    d_in, d_hidden, d_out = params.dims
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<3I", d_in, d_hidden, d_out))
        for name in PARAM_NAMES:
            f.write(np.ascontiguousarray(getattr(params, name), dtype="<f4").tobytes())


def load_checkpoint(path, weightnorm_layer1: bool = True, weightnorm_layer2: bool = False) -> MlpParams:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic {raw[:4]!r}")
    if len(raw) < 16:
        raise ValueError(f"{path}: truncated checkpoint header")
    d_in, d_hidden, d_out = struct.unpack("<3I", raw[4:16])
    shapes = {"w1": (d_in, d_hidden), "b1": (d_hidden,), "w2": (d_hidden, d_out), "b2": (d_out,)}
    expected = 16 + 4 * sum(int(np.prod(s)) for s in shapes.values())
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes for dims {d_in}x{d_hidden}x{d_out}, got {len(raw)}")
    arrays, offset = {}, 16
    for name, shape in shapes.items():
        count = int(np.prod(shape))
        arrays[name] = np.frombuffer(raw, "<f4", count, offset).astype(DTYPE).reshape(shape)
        offset += 4 * count
    return MlpParams(**arrays, weightnorm_layer1=weightnorm_layer1, weightnorm_layer2=weightnorm_layer2)
