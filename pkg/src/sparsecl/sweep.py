"""Grid sweeps over run configs, multi-seed aggregation and summary tables."""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

from .config import ConfigError, RunConfig
from .data import Dataset
from .train import run_continual, run_permuted

log = logging.getLogger(__name__)

SEEDS = (0, 1, 2, 3, 4)
CSV_FIELDS = ("point", "assignment", "seed", "final_mean_acc", "final_overall_acc", "run_key")


def aggregate_ci(values: Sequence[float], confidence: float = 0.95) -> tuple[float, float]:
    """Mean and Student-t half-width ``t * s / sqrt(n)`` with the sample std."""
    x = np.asarray(values, dtype=np.float64)
    n = x.size
    if n < 2:
        raise ValueError(f"a confidence interval needs at least 2 values, got {n}")
    mean = float(np.mean(x))
    s = float(np.std(x, ddof=1))
    t = float(stats.t.ppf(0.5 + confidence / 2, n - 1))
    return mean, t * s / math.sqrt(n)


def expand_grid(grid: dict[str, Sequence]) -> list[dict]:
    """Cartesian product of dotted-key axes, in axis insertion order."""
    if not grid:
        raise ConfigError("sweep grid is empty")
    for key, values in grid.items():
        if isinstance(values, (str, bytes)) or not hasattr(values, "__iter__"):
            raise ConfigError(f"grid axis {key!r} must be a list of values")
        if len(values) == 0:
            raise ConfigError(f"grid axis {key!r} has no values")
    keys = list(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


# run cache -------------------------------------------------------------------


def cached_run(config: RunConfig, data=None, cache_dir=None) -> dict:
    """Run ``config`` unless a summary with the same run key is already stored."""
    path = None
    if cache_dir is not None:
        path = Path(cache_dir) / f"{config.run_key()}.json"
        if path.exists():
            return json.loads(path.read_text())
    runner = run_permuted if config.mode == "permuted" else run_continual
    summary = runner(config, data).summary()
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        os.replace(tmp, path)
    return summary


def _worker(config_json: str, cache_dir) -> dict:
    return cached_run(RunConfig.from_json(config_json), None, cache_dir)


# sweep -----------------------------------------------------------------------


@dataclass(frozen=True)
class SweepPoint:
    index: int
    assignment: dict
    seeds: tuple[int, ...]
    accs: tuple[float, ...]
    overall: tuple[float, ...]

    @property
    def mean(self) -> float:
        return float(np.mean(self.accs))

    @property
    def half_width(self) -> float:
        return aggregate_ci(self.accs)[1] if len(self.accs) > 1 else float("nan")


@dataclass
class SweepResult:
    points: list[SweepPoint]
    run_keys: dict[tuple[int, int], str]

    @property
    def winner(self) -> SweepPoint:
        # ties go to the earliest grid point
        return max(self.points, key=lambda p: (p.mean, -p.index))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for p in self.points:
            blob = json.dumps(p.assignment, sort_keys=True)
            for seed, acc, ov in zip(p.seeds, p.accs, p.overall):
                w.writerow([p.index, blob, seed, f"{acc:.6f}", f"{ov:.6f}", self.run_keys[(p.index, seed)]])
        return buf.getvalue()

    def summary(self) -> dict:
        win = self.winner
        return {
            "winner": {"assignment": win.assignment, "mean": win.mean, "half_width": win.half_width},
            "points": [
                {"assignment": p.assignment, "mean": p.mean, "half_width": p.half_width, "accs": list(p.accs)}
                for p in self.points
            ],
        }

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "sweep.csv").write_text(self.to_csv())
        (out / "sweep_summary.json").write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")


def _run_points(base, assignments, indices, seeds, data, cache_dir, workers) -> SweepResult:
    seeds = tuple(seeds)
    if not seeds:
        raise ConfigError("sweep needs at least one seed")
    configs = {}
    for i, a in zip(indices, assignments):
        cfg = base.with_overrides(a).replace(out_dir=None, eval_every_steps=0)
        for s in seeds:
            configs[(i, s)] = cfg.replace(seed=s)

    summaries: dict[tuple[int, int], dict] = {}
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {pool.submit(_worker, c.to_json(), cache_dir): k for k, c in configs.items()}
            for fut in as_completed(futures):
                summaries[futures[fut]] = fut.result()
    else:
        for k, c in configs.items():
            summaries[k] = cached_run(c, data, cache_dir)
            log.info("point %d seed %d: %.4f", k[0], k[1], summaries[k]["final_mean_acc"])

    points = []
    for i, a in zip(indices, assignments):
        runs = [summaries[(i, s)] for s in seeds]
        points.append(
            SweepPoint(
                index=i,
                assignment=a,
                seeds=seeds,
                accs=tuple(r["final_mean_acc"] for r in runs),
                overall=tuple(r["final_overall_acc"] for r in runs),
            )
        )
    return SweepResult(points, {k: v["run_key"] for k, v in summaries.items()})


def sweep(
    base: RunConfig,
    grid: dict[str, Sequence],
    seeds: Sequence[int] = SEEDS,
    out_dir=None,
    data: tuple[Dataset, Dataset] | None = None,
    cache_dir=None,
    workers: int = 1,
) -> SweepResult:
    """Run every grid point on every seed and aggregate per point.

    Aggregation depends only on the (point, seed) keys, never on the order
    in which runs finish. With ``workers > 1`` runs go to a process pool and
    each worker loads MNIST from ``base.data_dir`` itself.
    """
    assignments = expand_grid(grid)
    result = _run_points(base, assignments, range(len(assignments)), seeds, data, cache_dir, workers)
    if out_dir is not None:
        result.write(out_dir)
    return result


def replicate(
    config: RunConfig,
    seeds: Sequence[int] = SEEDS,
    data: tuple[Dataset, Dataset] | None = None,
    cache_dir=None,
    workers: int = 1,
) -> SweepPoint:
    """One config run on every seed (a singleton grid)."""
    return _run_points(config, [{}], [0], seeds, data, cache_dir, workers).points[0]


def screened_sweep(
    base: RunConfig,
    grid: dict[str, Sequence],
    seeds: Sequence[int] = SEEDS,
    top: int = 2,
    screen_seed: int | None = None,
    out_dir=None,
    data: tuple[Dataset, Dataset] | None = None,
    cache_dir=None,
    workers: int = 1,
) -> tuple[SweepResult, SweepResult]:
    """Run the whole grid on one seed, then the best ``top`` points on all seeds.

    Returns ``(screen, confirmed)``; the winner is taken from ``confirmed``,
    whose points keep their grid indices.
    """
    seeds = tuple(seeds)
    if top < 1:
        raise ConfigError("top must be >= 1")
    screen_seed = seeds[0] if screen_seed is None else screen_seed
    assignments = expand_grid(grid)
    screen = _run_points(base, assignments, range(len(assignments)), (screen_seed,), data, cache_dir, workers)
    keep = sorted(p.index for p in sorted(screen.points, key=lambda p: (-p.mean, p.index))[:top])
    confirmed = _run_points(base, [assignments[i] for i in keep], keep, seeds, data, cache_dir, workers)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "screen.csv").write_text(screen.to_csv())
        confirmed.write(out)
    return screen, confirmed


# reading results back --------------------------------------------------------


def read_sweep_csv(path) -> list[SweepPoint]:
    rows: dict[int, list[dict]] = {}
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        missing = set(CSV_FIELDS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing column(s) {sorted(missing)}")
        for row in reader:
            rows.setdefault(int(row["point"]), []).append(row)
    points = []
    for i in sorted(rows):
        rs = sorted(rows[i], key=lambda r: int(r["seed"]))
        points.append(
            SweepPoint(
                index=i,
                assignment=json.loads(rs[0]["assignment"]),
                seeds=tuple(int(r["seed"]) for r in rs),
                accs=tuple(float(r["final_mean_acc"]) for r in rs),
                overall=tuple(float(r["final_overall_acc"]) for r in rs),
            )
        )
    return points


def winner_from_csv(path) -> SweepPoint:
    points = read_sweep_csv(path)
    if not points:
        raise ValueError(f"{path}: no rows")
    return max(points, key=lambda p: (p.mean, -p.index))


def report(paths: Sequence, labels: Sequence[str] | None = None) -> str:
    """One line per sweep: best mean accuracy with its 95% interval."""
    labels = list(labels) if labels is not None else [Path(p).parent.name or str(p) for p in paths]
    if len(labels) != len(paths):
        raise ValueError("need one label per sweep file")
    width = max([len("sweep")] + [len(x) for x in labels])
    lines = [f"{'sweep':<{width}}  mean accuracy      n  best assignment"]
    for label, path in zip(labels, paths):
        win = winner_from_csv(path)
        hw = win.half_width
        ci = f"(±{100 * hw:.1f}%)" if not math.isnan(hw) else "(n/a)"
        blob = json.dumps(win.assignment, sort_keys=True)
        lines.append(f"{label:<{width}}  {100 * win.mean:5.1f}% {ci:<10} {len(win.accs):2d}  {blob}")
    return "\n".join(lines) + "\n"
