"""SGD, SGD with momentum, Adagrad, RMSprop and Adam over named numpy arrays.

Updates are elementwise and happen in place on the parameter arrays. Gradients
are expected to be clipped already (see :func:`clip_gradients`).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np


CLIP_MODES = ("value", "norm")


class OptKind(str, Enum):
    SGD = "sgd"
    SGDM = "sgdm"
    ADAGRAD = "adagrad"
    RMSPROP = "rmsprop"
    ADAM = "adam"


@dataclass(frozen=True)
class ExpDecay:
    base_lr: float
    decay_factor: float
    interval_steps: int

    def __post_init__(self):
        if self.interval_steps < 1:
            raise ValueError("interval_steps must be >= 1")


@dataclass(frozen=True)
class OptimizerSpec:
    kind: OptKind
    learning_rate: float
    momentum: float = 0.0
    decay: float = 0.999
    beta1: float = 0.9
    beta2: float = 0.999
    bias_correction: bool = True
    adagrad_initial: float = 1e-6
    epsilon: float = 1e-8
    clip_value: float | None = 0.01
    clip_mode: str = "value"
    schedule: ExpDecay | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", OptKind(self.kind))
        if isinstance(self.schedule, dict):
            object.__setattr__(self, "schedule", ExpDecay(**self.schedule))
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        for name in ("momentum", "decay", "beta1", "beta2"):
            if not 0 <= getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in [0, 1)")
        if not self.adagrad_initial > 0:
            raise ValueError("adagrad_initial must be > 0")
        if self.clip_value is not None and not self.clip_value > 0:
            raise ValueError("clip_value must be > 0 (or None to disable)")
        if self.clip_mode not in CLIP_MODES:
            raise ValueError(f"clip_mode must be one of {CLIP_MODES}, got {self.clip_mode!r}")

    def lr_at(self, step: int) -> float:
        if self.schedule is None:
            return self.learning_rate
        s = self.schedule
        return exp_decay_lr(step, s.base_lr, s.decay_factor, s.interval_steps)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizerSpec":
        return cls(**d)


@dataclass
class OptimizerState:
    step: int = 0
    buffers: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)


def exp_decay_lr(step: int, base_lr: float, decay_factor: float, interval_steps: int) -> float:
    """Staircase decay: ``base_lr * decay_factor ** floor(step / interval_steps)``."""
    if interval_steps < 1:
        raise ValueError("interval_steps must be >= 1")
    return base_lr * decay_factor ** (step // interval_steps)


def clip_gradients(
    grads: dict[str, np.ndarray],
    clip_value: float | None,
    inplace: bool = False,
    mode: str = "value",
):
    """Clamp every gradient element to ``[-clip_value, clip_value]``.

    With ``mode="norm"`` all gradients are instead rescaled together so their
    joint L2 norm is at most ``clip_value``.
    """
    if clip_value is None:
        return grads
    if not clip_value > 0:
        raise ValueError("clip_value must be > 0")
    if mode not in CLIP_MODES:
        raise ValueError(f"clip mode must be one of {CLIP_MODES}, got {mode!r}")
    out = grads if inplace else {}
    if mode == "norm":
        total = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))
        scale = min(1.0, clip_value / total) if total > 0 else 1.0
        for name, g in grads.items():
            if inplace:
                g *= g.dtype.type(scale)
            else:
                out[name] = g * g.dtype.type(scale)
        return out
    for name, g in grads.items():
        out[name] = np.clip(g, -clip_value, clip_value, out=g if inplace else None)
    return out


def init_state(spec: OptimizerSpec, params: dict[str, np.ndarray]) -> OptimizerState:
    state = OptimizerState()
    for name, p in params.items():
        if spec.kind is OptKind.SGDM:
            bufs = {"m": np.zeros_like(p)}
        elif spec.kind is OptKind.ADAGRAD:
            bufs = {"acc": np.full_like(p, spec.adagrad_initial)}
        elif spec.kind is OptKind.RMSPROP:
            bufs = {"v": np.zeros_like(p)}
        elif spec.kind is OptKind.ADAM:
            bufs = {"m": np.zeros_like(p), "v": np.zeros_like(p)}
        else:
            bufs = {}
        state.buffers[name] = bufs
    return state


def _ema_sq(v, g, rate):
    # v <- rate * v + (1 - rate) * g^2, shared by RMSprop and Adam
    v *= v.dtype.type(rate)
    v += v.dtype.type(1 - rate) * np.square(g)


def _scaled_step(p, lr, num, v, eps):
    # p <- p - lr * num / (sqrt(v) + eps), shared by RMSprop and Adam
    denom = np.sqrt(v)
    denom += p.dtype.type(eps)
    p -= p.dtype.type(lr) * num / denom


def apply_step(
    spec: OptimizerSpec,
    state: OptimizerState,
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
):
    """One in-place update of ``params``; returns ``(params, state)``."""
    if params.keys() != grads.keys():
        raise ValueError(f"parameter names {sorted(params)} differ from gradients {sorted(grads)}")
    lr = spec.lr_at(state.step)
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        bufs = state.buffers[name]
        f = p.dtype.type
        if spec.kind is OptKind.SGD:
            p -= f(lr) * g
        elif spec.kind is OptKind.SGDM:
            m = bufs["m"]
            m *= f(spec.momentum)
            m += g
            p -= f(lr) * m
        elif spec.kind is OptKind.ADAGRAD:
            acc = bufs["acc"]
            acc += np.square(g)
            p -= f(lr) * g / np.sqrt(acc)
        elif spec.kind is OptKind.RMSPROP:
            v = bufs["v"]
            _ema_sq(v, g, spec.decay)
            _scaled_step(p, lr, g, v, spec.epsilon)
        elif spec.kind is OptKind.ADAM:
            m, v = bufs["m"], bufs["v"]
            m *= f(spec.beta1)
            m += f(1 - spec.beta1) * g
            _ema_sq(v, g, spec.beta2)
            if spec.bias_correction:
                m_hat = m / f(1 - spec.beta1**t)
                v_hat = v / f(1 - spec.beta2**t)
                _scaled_step(p, lr, m_hat, v_hat, spec.epsilon)
            else:
                _scaled_step(p, lr, m, v, spec.epsilon)
        else:  # pragma: no cover
            raise ValueError(spec.kind)
    return params, state

