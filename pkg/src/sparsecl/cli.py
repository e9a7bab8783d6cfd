"""Command line entry point: ``sparsecl {train,sweep,permuted,gradcheck,report}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .activations import ActivationSpec, Kind
from .config import ConfigError, RunConfig
from .data import IdxFormatError
from .sweep import SEEDS, report, screened_sweep, sweep
from .train import gradcheck, run_continual, run_permuted

# parameters used by `gradcheck --all`
DEFAULT_ACTIVATIONS = {
    Kind.ASH: {"alpha": 4.0, "z_k": 2.3},
    Kind.HARD_ASH: {"alpha": 4.0, "z_k": 2.3, "x_max": 2.0},
    Kind.TOPK_SUBTRACT: {"k": 64},
    Kind.TOPK_MASK: {"k": 64},
    Kind.LWTA: {"groups": 50},
    Kind.RELU: {},
    Kind.SWISH: {},
    Kind.SIGMOID: {},
    Kind.HARD_SIGMOID: {},
}


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config)
    overrides = {}
    for item in args.set or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        overrides[key] = _parse_value(value)
    if overrides:
        cfg = cfg.with_overrides(overrides)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out_dir is not None:
        changes["out_dir"] = args.out_dir
    if args.data_dir is not None:
        changes["data_dir"] = args.data_dir
    return cfg.replace(**changes) if changes else cfg


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if cfg.out_dir is None:
        cfg = cfg.replace(out_dir=f"runs/{cfg.run_key()}")
    result = run_continual(cfg)
    accs = " ".join(f"{a:.4f}" for a in result.final_task_accs)
    print(f"final mean accuracy {result.final_mean_acc:.4f} (overall {result.final_overall_acc:.4f})")
    print(f"per-task {accs}")
    print(f"wrote {cfg.out_dir}/timeline.csv and summary.json")
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    grid = json.loads(Path(args.grid).read_text())
    if not isinstance(grid, dict):
        raise ConfigError("grid file must hold a JSON object of axis -> list of values")
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else SEEDS
    out = args.out_dir or "sweeps/latest"
    if args.screen_top:
        _, result = screened_sweep(
            cfg, grid, seeds, top=args.screen_top, out_dir=out, cache_dir=args.cache_dir, workers=args.workers
        )
    else:
        result = sweep(cfg, grid, seeds, out_dir=out, cache_dir=args.cache_dir, workers=args.workers)
    for p in result.points:
        print(f"{json.dumps(p.assignment, sort_keys=True)}  {100 * p.mean:.2f}%")
    win = result.winner
    print(f"winner {json.dumps(win.assignment, sort_keys=True)}: {100 * win.mean:.2f}% (±{100 * win.half_width:.2f}%)")
    print(f"wrote {out}/sweep.csv")
    return 0


def cmd_permuted(args) -> int:
    cfg = _load_config(args)
    changes = {"mode": "permuted"}
    if args.n_tasks is not None:
        changes["n_tasks"] = args.n_tasks
    cfg = cfg.replace(**changes)
    if cfg.out_dir is None:
        cfg = cfg.replace(out_dir=f"runs/permuted-{cfg.run_key()}")
    result = run_permuted(cfg)
    print(f"tasks {len(result.latest_task_acc)}; last latest-task acc {result.latest_task_acc[-1]:.4f}")
    print(f"task 0 accuracy {result.first_task_acc[0]:.4f} -> {result.first_task_acc[-1]:.4f}")
    print(f"wrote {cfg.out_dir}/plasticity.csv and stability.csv")
    return 0


def cmd_gradcheck(args) -> int:
    if args.all:
        specs = [ActivationSpec(kind, **p) for kind, p in DEFAULT_ACTIVATIONS.items()]
    elif args.config:
        specs = [RunConfig.load(args.config).activation]
    elif args.activation:
        specs = [ActivationSpec.from_dict(json.loads(args.activation))]
    else:
        raise ConfigError("gradcheck needs --config, --activation or --all")
    ok = True
    for spec in specs:
        rep = gradcheck(spec, seed=args.seed or 0, tolerance=args.tolerance)
        status = "PASS" if rep.passed else "FAIL"
        print(f"{status} {rep.kind:<14} max rel error {rep.max_rel_error:.3e} ({rep.checked} checked, {rep.skipped} skipped)")
        ok &= rep.passed
    return 0 if ok else 1


def cmd_report(args) -> int:
    sys.stdout.write(report(args.csv, args.labels))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparsecl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def run_args(p, config_required=True):
        p.add_argument("--config", required=config_required, help="RunConfig JSON file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out-dir")
        p.add_argument("--data-dir", help="MNIST IDX directory (default: $SPARSECL_DATA_DIR)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted override, e.g. optimizer.learning_rate=2e-4")

    p = sub.add_parser("train", help="one continual run")
    run_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="grid sweep over several seeds")
    run_args(p)
    p.add_argument("--grid", required=True, help="JSON object mapping dotted keys to value lists")
    p.add_argument("--seeds", help="comma-separated seeds (default 0,1,2,3,4)")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--cache-dir", help="reuse finished runs stored here by run key")
    p.add_argument("--screen-top", type=int, help="screen the grid on the first seed, then run the best N on all seeds")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("permuted", help="permuted-MNIST plasticity and stability curves")
    run_args(p)
    p.add_argument("--n-tasks", type=int, help="number of tasks (default from config, 20)")
    p.set_defaults(func=cmd_permuted)

    p = sub.add_parser("gradcheck", help="finite-difference check of the network gradients")
    p.add_argument("--config")
    p.add_argument("--activation", help="ActivationSpec as inline JSON")
    p.add_argument("--all", action="store_true", help="check all nine activations")
    p.add_argument("--seed", type=int)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("report", help="summarize sweep.csv files")
    p.add_argument("csv", nargs="+")
    p.add_argument("--labels", nargs="+")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, IdxFormatError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
