"""Sparse activations and adaptive optimizers for class-incremental MNIST."""

from .activations import ActivationSpec, Kind
from .config import ConfigError, RunConfig
from .optim import OptimizerSpec, OptKind

__all__ = ["ActivationSpec", "Kind", "ConfigError", "RunConfig", "OptimizerSpec", "OptKind"]
__version__ = "0.1.0"
