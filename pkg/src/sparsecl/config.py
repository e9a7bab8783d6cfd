"""Run configuration: a JSON-serializable description of one experiment."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from .activations import ActivationSpec
from .data import INPUT_NORMS
from .optim import ExpDecay, OptimizerSpec

MODES = ("split", "iid", "permuted")


class ConfigError(ValueError):
    pass


def _check_keys(cls, d: dict, where: str) -> None:
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")


@dataclass(frozen=True)
class RunConfig:
    activation: ActivationSpec
    optimizer: OptimizerSpec
    mode: str = "split"
    seed: int = 0
    epochs_per_task: int = 1
    n_tasks: int = 20
    eval_every_steps: int = 50
    batch_size: int = 64
    hidden_dim: int = 1000
    weightnorm_layer1: bool = True
    weightnorm_layer2: bool = False
    input_norm: str = "none"
    data_dir: str | None = None
    out_dir: str | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.epochs_per_task < 1 or self.batch_size < 1 or self.n_tasks < 1:
            raise ConfigError("epochs_per_task, batch_size and n_tasks must be >= 1")
        if self.input_norm not in INPUT_NORMS:
            raise ConfigError(f"input_norm must be one of {INPUT_NORMS}, got {self.input_norm!r}")
        if self.eval_every_steps < 0:
            raise ConfigError("eval_every_steps must be >= 0 (0 = task boundaries only)")
        try:
            self.activation.check_width(self.hidden_dim)
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        d["activation"] = self.activation.to_dict()
        d["optimizer"] = self.optimizer.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = copy.deepcopy(d)
        _check_keys(cls, d, "run config")
        for name in ("activation", "optimizer"):
            if name not in d:
                raise ConfigError(f"run config is missing '{name}'")
        act, opt = d.pop("activation"), d.pop("optimizer")
        _check_keys(ActivationSpec, act, "activation")
        _check_keys(OptimizerSpec, opt, "optimizer")
        if isinstance(opt.get("schedule"), dict):
            _check_keys(ExpDecay, opt["schedule"], "optimizer.schedule")
        try:
            return cls(ActivationSpec.from_dict(act), OptimizerSpec.from_dict(opt), **d)
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from None

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_json(Path(path).read_text())

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def with_overrides(self, assignment: dict) -> "RunConfig":
        """Apply dotted-key overrides such as ``{"optimizer.learning_rate": 1e-4}``."""
        d = self.to_dict()
        for key, value in assignment.items():
            node = d
            *path, leaf = key.split(".")
            for part in path:
                if not isinstance(node.get(part), dict):
                    raise ConfigError(f"cannot override {key!r}: {part!r} is not a section")
                node = node[part]
            node[leaf] = copy.deepcopy(value)
        return RunConfig.from_dict(d)

    def run_key(self) -> str:
        """Hash of everything that affects the training outcome."""
        d = self.to_dict()
        d.pop("out_dir")
        d.pop("data_dir")
        d.pop("eval_every_steps")
        if d["input_norm"] == "none":
            d.pop("input_norm")  # default preprocessing stays out of the key
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

