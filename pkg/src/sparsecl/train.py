"""Continual training loops, evaluation, the permuted-MNIST study and gradcheck."""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import data as data_mod
from .activations import ActivationSpec, kink_distance, regime
from .config import RunConfig
from .core import RngStream
from .data import Dataset, Task, TaskStream
from .model import (
    MlpParams,
    init_params,
    loss_and_grads,
    mlp_backward,
    mlp_forward,
    predict,
    softmax_cross_entropy,
)
from .optim import apply_step, clip_gradients, init_state

log = logging.getLogger(__name__)


@dataclass
class TimelineRecord:
    step: int
    training_task: int
    task_accs: tuple[float, ...]
    overall_acc: float


@dataclass
class RunResult:
    config: RunConfig
    timeline: list[TimelineRecord]
    boundaries: list[int]
    final_task_accs: tuple[float, ...]
    final_mean_acc: float
    final_overall_acc: float
    wall_seconds: float
    params: MlpParams | None = field(default=None, repr=False)

    def timeline_csv(self) -> str:
        n = len(self.final_task_accs)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "training_task", *(f"task{i}_acc" for i in range(n)), "overall_acc"])
        for r in self.timeline:
            w.writerow([r.step, r.training_task, *(f"{a:.6f}" for a in r.task_accs), f"{r.overall_acc:.6f}"])
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "run_key": self.config.run_key(),
            "final_task_accs": list(self.final_task_accs),
            "final_mean_acc": self.final_mean_acc,
            "final_overall_acc": self.final_overall_acc,
            "boundaries": self.boundaries,
            "wall_seconds": self.wall_seconds,
        }

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "timeline.csv").write_text(self.timeline_csv())
        (out / "summary.json").write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")


def evaluate(params: MlpParams, spec: ActivationSpec, stream: TaskStream) -> tuple[list[float], float]:
    """Per-task test accuracy (argmax over all logits) and accuracy over all task test sets."""
    test = stream.test
    shared = None
    if all(t.permutation is None for t in stream):
        shared = predict(params, spec, test.images)
    accs, correct, total = [], 0, 0
    for task in stream:
        if shared is not None:
            pred = shared[task.test_idx]
        else:
            pred = predict(params, spec, task.images(test, task.test_idx))
        hits = int(np.sum(pred == test.labels[task.test_idx]))
        n = len(task.test_idx)
        accs.append(hits / n if n else 0.0)
        correct += hits
        total += n
    return accs, (correct / total if total else 0.0)


def evaluate_task(params: MlpParams, spec: ActivationSpec, task: Task, test: Dataset) -> float:
    pred = predict(params, spec, task.images(test, task.test_idx))
    return float(np.mean(pred == test.labels[task.test_idx]))


def _build_stream(config: RunConfig, train: Dataset, test: Dataset) -> TaskStream:
    if config.mode == "split":
        return data_mod.make_split_tasks(train, test)
    if config.mode == "iid":
        return data_mod.make_iid_task(train, test)
    rng = RngStream.root(config.seed)
    return data_mod.make_permuted_tasks(train, test, config.n_tasks, rng)


def _load(config: RunConfig, data):
    train, test = data if data is not None else data_mod.load_mnist(config.data_dir)
    return data_mod.normalize_inputs(train, config.input_norm), data_mod.normalize_inputs(test, config.input_norm)


class Trainer:
    """Model + optimizer state that persists across task boundaries."""

    def __init__(self, config: RunConfig, input_dim: int = 784, output_dim: int = 10):
        self.config = config
        root = RngStream.root(config.seed)
        self.params = init_params(
            root.derive("init"),
            input_dim,
            config.hidden_dim,
            output_dim,
            config.weightnorm_layer1,
            config.weightnorm_layer2,
        )
        self.opt_state = init_state(config.optimizer, self.params.arrays())
        self.step = 0

    def train_batch(self, images: np.ndarray, labels: np.ndarray) -> float:
        cfg = self.config
        loss, grads = loss_and_grads(self.params, cfg.activation, images, labels)
        clip_gradients(grads, cfg.optimizer.clip_value, inplace=True, mode=cfg.optimizer.clip_mode)
        apply_step(cfg.optimizer, self.opt_state, self.params.arrays(), grads)
        self.step += 1
        return loss

    def train_task(self, task: Task, train: Dataset, on_step: Callable[[int], None] | None = None) -> None:
        cfg = self.config
        for epoch in range(cfg.epochs_per_task):
            for idx in data_mod.shuffled_batches(task, epoch, cfg.seed, cfg.batch_size):
                self.train_batch(task.images(train, idx), train.labels[idx])
                if on_step is not None:
                    on_step(self.step)


def run_continual(config: RunConfig, data: tuple[Dataset, Dataset] | None = None, keep_params: bool = False) -> RunResult:
    """Train the tasks one after another (no replay, no resets) and track accuracy."""
    if config.mode == "permuted":
        raise ValueError("permuted mode is run with run_permuted()")
    t0 = time.perf_counter()
    train, test = _load(config, data)
    stream = _build_stream(config, train, test)
    trainer = Trainer(config, train.images.shape[1])
    timeline: list[TimelineRecord] = []
    boundaries: list[int] = []
    current = [0]

    def record(step):
        if timeline and timeline[-1].step == step:
            return
        accs, overall = evaluate(trainer.params, config.activation, stream)
        timeline.append(TimelineRecord(step, current[0], tuple(accs), overall))

    def on_step(step):
        if config.eval_every_steps and step % config.eval_every_steps == 0:
            record(step)

    record(0)
    for task in stream:
        current[0] = task.task_id
        trainer.train_task(task, train, on_step)
        boundaries.append(trainer.step)
        record(trainer.step)
        log.info("task %d done at step %d: %s", task.task_id, trainer.step, timeline[-1].task_accs)

    final = timeline[-1]
    result = RunResult(
        config=config,
        timeline=timeline,
        boundaries=boundaries,
        final_task_accs=final.task_accs,
        final_mean_acc=float(np.mean(final.task_accs)),
        final_overall_acc=final.overall_acc,
        wall_seconds=time.perf_counter() - t0,
        params=trainer.params if keep_params else None,
    )
    if config.out_dir:
        result.write(config.out_dir)
    return result


@dataclass
class PermutedResult:
    config: RunConfig
    latest_task_acc: list[float]  # accuracy on task i right after training it
    first_task_acc: list[float]  # accuracy on task 0 after training task i
    wall_seconds: float

    def curves_csv(self) -> tuple[str, str]:
        plast, stab = io.StringIO(), io.StringIO()
        wp = csv.writer(plast, lineterminator="\n")
        ws = csv.writer(stab, lineterminator="\n")
        wp.writerow(["task", "latest_task_acc"])
        ws.writerow(["task", "task0_acc"])
        for i, (a, b) in enumerate(zip(self.latest_task_acc, self.first_task_acc)):
            wp.writerow([i, f"{a:.6f}"])
            ws.writerow([i, f"{b:.6f}"])
        return plast.getvalue(), stab.getvalue()

    @property
    def task0_drop(self) -> float:
        return self.first_task_acc[0] - self.first_task_acc[-1]

    def summary(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "run_key": self.config.run_key(),
            "latest_task_acc": self.latest_task_acc,
            "first_task_acc": self.first_task_acc,
            "mean_latest_task_acc": float(np.mean(self.latest_task_acc)),
            "task0_drop": self.task0_drop,
            "wall_seconds": self.wall_seconds,
        }

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        plast, stab = self.curves_csv()
        (out / "plasticity.csv").write_text(plast)
        (out / "stability.csv").write_text(stab)
        (out / "summary.json").write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")


def run_permuted(config: RunConfig, data: tuple[Dataset, Dataset] | None = None) -> PermutedResult:
    """Train on a sequence of pixel-permuted MNIST tasks, tracking plasticity and stability."""
    if config.mode != "permuted":
        raise ValueError(f"run_permuted needs mode='permuted', got {config.mode!r}")
    t0 = time.perf_counter()
    train, test = _load(config, data)
    stream = _build_stream(config, train, test)
    trainer = Trainer(config, train.images.shape[1])
    latest, first = [], []
    for task in stream:
        trainer.train_task(task, train)
        acc = evaluate_task(trainer.params, config.activation, task, test)
        latest.append(acc)
        first.append(acc if task.task_id == 0 else evaluate_task(trainer.params, config.activation, stream[0], test))
        log.info("permuted task %d: latest %.4f, task0 %.4f", task.task_id, latest[-1], first[-1])
    result = PermutedResult(config, latest, first, time.perf_counter() - t0)
    if config.out_dir:
        result.write(config.out_dir)
    return result


@dataclass
class GradcheckReport:
    kind: str
    max_rel_error: float
    checked: int
    skipped: int
    tolerance: float
    worst: str = ""

    @property
    def passed(self) -> bool:
        return self.checked > 0 and self.max_rel_error <= self.tolerance


def relative_error(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def gradcheck(
    spec: ActivationSpec,
    seed: int = 0,
    dims: tuple[int, int, int] = (784, 1000, 10),
    batch: int = 8,
    per_tensor: int = 24,
    h: float = 1e-4,
    tolerance: float = 1e-4,
    kink_radius: float = 1e-3,
    weightnorm_layer1: bool = True,
    weightnorm_layer2: bool = False,
    backward: Callable | None = None,
) -> GradcheckReport:
    """Compare analytic gradients with central differences in float64.

    The ASH statistics and the Top-K subtract threshold are pinned to their
    values at the unperturbed point, matching what the backward pass
    differentiates. Coordinates whose perturbation moves any unit to another
    piece of a piecewise activation are skipped, as are base points with a
    pre-activation within ``kink_radius`` of a kink.
    """
    backward = backward or mlp_backward
    rng = RngStream.root(seed).derive("gradcheck", spec.kind.value)
    d_in, d_hidden, d_out = dims
    params = init_params(rng.derive("init"), d_in, d_hidden, d_out, weightnorm_layer1, weightnorm_layer2).astype(np.float64)
    params.b1[:] = rng.derive("b1").gaussian(d_hidden) * 0.1
    params.b2[:] = rng.derive("b2").gaussian(d_out) * 0.1
    x = rng.derive("x").uniform(0.0, 1.0, (batch, d_in))
    y = rng.derive("y").permutation(max(batch, d_out))[:batch] % d_out

    logits, cache = mlp_forward(params, spec, x)
    _, dlogits = softmax_cross_entropy(logits, y)
    grads = backward(cache, spec, dlogits)
    base_regime = regime(spec, cache.act)
    near_kink = kink_distance(spec, cache.act) < kink_radius

    def loss_at():
        lg, c = mlp_forward(params, spec, x, frozen=cache.act)
        loss, _ = softmax_cross_entropy(lg, y)
        return loss, regime(spec, c.act)

    pick = rng.derive("coords")
    worst, worst_where, checked, skipped = 0.0, "", 0, 0
    for name, p in params.arrays().items():
        g = grads[name]
        flat = p.reshape(-1)
        nonzero = np.flatnonzero(g.reshape(-1))
        half = per_tensor // 2
        coords = list(pick.permutation(flat.size)[: per_tensor - min(half, nonzero.size)])
        if nonzero.size:
            coords += list(nonzero[pick.permutation(nonzero.size)[:half]])
        for c in coords:
            if name in ("w1", "b1"):
                unit = c % d_hidden
                if near_kink[:, unit].any():
                    skipped += 1
                    continue
            orig = flat[c]
            flat[c] = orig + h
            lp, rp = loss_at()
            flat[c] = orig - h
            lm, rm = loss_at()
            flat[c] = orig
            if not (np.array_equal(rp, base_regime) and np.array_equal(rm, base_regime)):
                skipped += 1
                continue
            numeric = (lp - lm) / (2 * h)
            err = relative_error(float(g.reshape(-1)[c]), numeric)
            checked += 1
            if err > worst:
                worst, worst_where = err, f"{name}[{c}] analytic={g.reshape(-1)[c]:.6e} numeric={numeric:.6e}"
    return GradcheckReport(spec.kind.value, worst, checked, skipped, tolerance, worst_where)
