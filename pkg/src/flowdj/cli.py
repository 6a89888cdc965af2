"""Command-line interface: train, sweep, diagnose, report.

Exit codes are a stable scripting contract: 0 success, 2 usage/validation,
3 numeric failure, 4 integrity failure. Every command materialises a complete
run directory (outputs + manifest) atomically or nothing at all. The env var
FLOWDJ_OUT overrides the default output root.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .diagnostics import (
    build_knn_index,
    curvature_probe,
    drift_curves,
    lipschitz_probe,
    make_probe_pairs,
    probe_table_csv,
)
from .errors import (
    CorruptCheckpoint,
    DegenerateGridPoint,
    DomainError,
    IntegrationDiverged,
    IntegrityFailure,
    InvalidArgument,
    TrainingDiverged,
    UnsupportedVersion,
)
from .manifest import verify_run_dir, write_run_dir
from .model import checkpoint_to_text, load_checkpoint
from .solvers import build_schedule, marginal_field
from .tasks import (
    TASK_KINDS,
    default_task,
    eval_table_csv,
    evaluate,
    generate_dataset,
    load_dataset,
    save_dataset,
)
from .training import (
    TimeSchedule,
    TrainConfig,
    fit,
    history_to_csv,
    split_by_episode,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3
EXIT_INTEGRITY = 4

METHOD_ORDER = ("Vanilla FM", "FM-β", "FM-DJ", "FM-DJβ")


def _out_root() -> str:
    return os.environ.get("FLOWDJ_OUT", "runs")


# ---------------------------------------------------------------- train

_TRAIN_FIELD_TYPES = {
    "task": str,
    "n_episodes": int,
    "dataset_seed": int,
    "dataset_path": str,
    "epochs": int,
    "batch_size": int,
    "seed": int,
    "time_schedule": dict,
    "hidden": list,
    "learning_rate": (int, float),
    "beta1": (int, float),
    "beta2": (int, float),
    "epsilon": (int, float),
    "checkpoint_every": int,
    "val_fraction": (int, float),
    "out_dir": str,
}
_TRAIN_REQUIRED = ("epochs", "batch_size", "seed", "time_schedule")


def parse_train_config(doc: dict):
    """Strict validation of the train config JSON; unknown keys are errors."""
    if not isinstance(doc, dict):
        raise InvalidArgument("config must be a JSON object")
    unknown = sorted(set(doc) - set(_TRAIN_FIELD_TYPES))
    if unknown:
        raise InvalidArgument(f"unknown config key(s): {', '.join(unknown)}")
    for key in _TRAIN_REQUIRED:
        if key not in doc:
            raise InvalidArgument(f"missing required config key: {key}")
    for key, val in doc.items():
        want = _TRAIN_FIELD_TYPES[key]
        if not isinstance(val, want) or isinstance(val, bool):
            raise InvalidArgument(f"config key {key}: expected {want}, got {type(val).__name__}")

    has_task = "task" in doc
    has_path = "dataset_path" in doc
    if has_task == has_path:
        raise InvalidArgument("config needs exactly one of 'task' or 'dataset_path'")
    if has_task and doc["task"] not in TASK_KINDS:
        raise InvalidArgument(f"config key task: unknown task {doc['task']!r}")

    ts = doc["time_schedule"]
    ts_unknown = sorted(set(ts) - {"kind", "alpha"})
    if ts_unknown:
        raise InvalidArgument(f"unknown time_schedule key(s): {', '.join(ts_unknown)}")
    if "kind" not in ts:
        raise InvalidArgument("time_schedule needs a 'kind'")
    schedule = TimeSchedule(ts["kind"], float(ts.get("alpha", 1.0)))

    cfg = TrainConfig(
        epochs=doc["epochs"],
        batch_size=doc["batch_size"],
        seed=doc["seed"],
        time_schedule=schedule,
        hidden=list(doc.get("hidden", [128, 128])),
        learning_rate=float(doc.get("learning_rate", 1e-3)),
        beta1=float(doc.get("beta1", 0.9)),
        beta2=float(doc.get("beta2", 0.999)),
        epsilon=float(doc.get("epsilon", 1e-8)),
        checkpoint_every=doc.get("checkpoint_every", 100),
        val_fraction=float(doc.get("val_fraction", 0.1)),
    )
    return cfg


def cmd_train(args) -> int:
    with open(args.config, "r", encoding="utf-8") as f:
        doc = json.load(f)
    cfg = parse_train_config(doc)

    if "task" in doc:
        spec = default_task(doc["task"])
        dataset_seed = doc.get("dataset_seed", cfg.seed)
        dataset = generate_dataset(spec, doc.get("n_episodes", 50), dataset_seed)
    else:
        dataset = load_dataset(doc["dataset_path"])

    ckpt, history = fit(dataset, cfg)

    echo = cfg.to_dict()
    for key in ("task", "n_episodes", "dataset_seed", "dataset_path"):
        if key in doc:
            echo[key] = doc[key]
    if "task" in doc and "dataset_seed" not in doc:
        echo["dataset_seed"] = cfg.seed
    ckpt.config = echo

    out_dir = args.out or doc.get("out_dir") or os.path.join(
        _out_root(), f"train-{doc.get('task', 'dataset')}-seed{cfg.seed}"
    )
    write_run_dir(
        out_dir, "train", echo, [cfg.seed],
        {"checkpoint.txt": checkpoint_to_text(ckpt), "history.csv": history_to_csv(history)},
    )
    print(f"train: wrote {out_dir} (best epoch metric over {cfg.epochs} epochs)")
    return EXIT_OK


# ---------------------------------------------------------------- sweep

_SOLVER_ALIASES = {
    "uniform": "uniform_euler",
    "uniform_euler": "uniform_euler",
    "dense_jump": "dense_jump",
}


def _parse_steps(text: str):
    try:
        steps = [int(tok) for tok in text.split(",") if tok]
    except ValueError as e:
        raise InvalidArgument(f"bad --steps value {text!r}") from e
    if not steps:
        raise InvalidArgument("--steps list is empty")
    return steps


def _parse_solvers(text: str):
    kinds = []
    for tok in text.split(","):
        tok = tok.strip()
        if not tok:
            continue
        if tok not in _SOLVER_ALIASES:
            raise InvalidArgument(f"unknown solver {tok!r}")
        kinds.append(_SOLVER_ALIASES[tok])
    if not kinds:
        raise InvalidArgument("--solver list is empty")
    return kinds


def cmd_sweep(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    spec = default_task(args.task)
    steps = _parse_steps(args.steps)
    kinds = _parse_solvers(args.solver)
    schedules = [
        build_schedule(kind, n, args.t_jump if kind == "dense_jump" else None)
        for kind in kinds
        for n in steps
    ]
    rows = evaluate(spec, ckpt, schedules, args.rollouts, args.seed)
    config = {
        "checkpoint": os.fspath(args.ckpt),
        "task": args.task,
        "steps": steps,
        "solver": kinds,
        "t_jump": args.t_jump,
        "rollouts": args.rollouts,
        "seed": args.seed,
        "timing": bool(args.timing),
        "train_config": ckpt.config,
    }
    out_dir = args.out or os.path.join(_out_root(), f"sweep-{args.task}-seed{args.seed}")
    write_run_dir(
        out_dir, "sweep", config, [args.seed],
        {"sweep.csv": eval_table_csv(rows, include_timing=args.timing)},
    )
    print(f"sweep: wrote {out_dir} ({len(rows)} rows)")
    return EXIT_OK


# ---------------------------------------------------------------- diagnose

def _parse_t_grid(text: str) -> np.ndarray:
    parts = [p for p in text.split(",") if p]
    try:
        if len(parts) == 1:
            n, lo, hi = int(parts[0]), 0.05, 0.95
        elif len(parts) == 3:
            n, lo, hi = int(parts[0]), float(parts[1]), float(parts[2])
        else:
            raise ValueError("need N or N,LO,HI")
    except ValueError as e:
        raise InvalidArgument(f"bad --t-grid value {text!r}: {e}") from e
    if n < 1 or not (0.0 < lo <= hi < 1.0):
        raise InvalidArgument(f"bad --t-grid value {text!r}")
    return np.linspace(lo, hi, n)


def _lipschitz_csv(estimates) -> str:
    return probe_table_csv(
        [(e.t, e.L_hat, e.n_pairs) for e in estimates],
        ["t", "L_hat", "n_pairs"],
        "max ratio ||v(x,t)-v(y,t)|| / ||x-y|| over probe pairs",
    )


def _curvature_csv(estimates) -> str:
    return probe_table_csv(
        [(e.t, e.kappa_norm, e.fd_step) for e in estimates],
        ["t", "kappa_norm", "fd_step"],
        "norm of d/dt v + (grad_a v) v by central differences",
    )


def cmd_diagnose(args) -> int:
    rng = np.random.default_rng(args.seed)
    lipschitz_ts = [float(t) for t in args.lipschitz_t.split(",") if t]

    if args.analytic:
        field = marginal_field()
        pairs = make_probe_pairs(2, rng)
        lip = lipschitz_probe(field, lipschitz_ts, pairs)
        curv = [
            curvature_probe(field, np.ones(2), t, args.fd_step)
            for t in (0.1, 0.3, 0.5, 0.7, 0.9)
        ]
        files = {"lipschitz.csv": _lipschitz_csv(lip), "curvature.csv": _curvature_csv(curv)}
        config = {"analytic": True, "seed": args.seed, "lipschitz_t": lipschitz_ts}
        out_dir = args.out or os.path.join(_out_root(), "diagnose-analytic")
        write_run_dir(out_dir, "diagnose", config, [args.seed], files)
        print(f"diagnose: wrote {out_dir}")
        return EXIT_OK

    if not args.ckpt or not args.data:
        raise InvalidArgument("diagnose needs --ckpt and --data (or --analytic)")
    ckpt = load_checkpoint(args.ckpt)
    dataset = load_dataset(args.data)
    val_fraction = float(ckpt.config.get("val_fraction", 0.1))
    train_idx, val_idx = split_by_episode(dataset, val_fraction)
    if val_idx.size == 0:
        raise InvalidArgument(
            "heldout split is empty (checkpoint was trained with val_fraction=0)"
        )
    stats = ckpt.stats
    index = build_knn_index(stats.normalize_act(dataset.actions[train_idx]))
    heldout = dataset.subset(val_idx)
    heldout.actions = stats.normalize_act(heldout.actions)
    heldout.obs = stats.normalize_obs(heldout.obs)

    t_grid = _parse_t_grid(args.t_grid)
    report = drift_curves(
        ckpt.model, heldout, index, t_grid, rng,
        n_draws=args.draws,
        query_mode="raw_state" if args.raw_state_query else "one_jump",
    )

    o0 = np.zeros(ckpt.model.obs_dim)
    pairs = make_probe_pairs(ckpt.model.action_dim, rng)
    lip = lipschitz_probe(ckpt.model, lipschitz_ts, pairs, o=o0)
    a0 = np.zeros(ckpt.model.action_dim)
    curv = [
        curvature_probe(ckpt.model, a0, t, args.fd_step, o=o0)
        for t in (0.1, 0.3, 0.5, 0.7, 0.9)
    ]
    files = {
        "drift.csv": report.to_csv(),
        "lipschitz.csv": _lipschitz_csv(lip),
        "curvature.csv": _curvature_csv(curv),
    }
    config = {
        "checkpoint": os.fspath(args.ckpt),
        "data": os.fspath(args.data),
        "t_grid": [float(t) for t in t_grid],
        "seed": args.seed,
        "draws": args.draws,
        "lipschitz_t": lipschitz_ts,
        "fd_step": args.fd_step,
    }
    out_dir = args.out or os.path.join(_out_root(), "diagnose")
    write_run_dir(out_dir, "diagnose", config, [args.seed], files)
    print(f"diagnose: wrote {out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------- report

def method_name(train_schedule: dict, solver_kind: str) -> str:
    beta = train_schedule.get("kind") == "beta" and float(train_schedule.get("alpha", 1.0)) < 1.0
    dj = solver_kind == "dense_jump"
    return METHOD_ORDER[(1 if beta else 0) + (2 if dj else 0)]


def _parse_sweep_csv(text: str):
    lines = [ln for ln in text.split("\n") if ln and not ln.startswith("#")]
    rows = []
    for ln in lines[1:]:
        kind, n, _tj, reward, rate, _ms = ln.split(",")
        rows.append((kind, int(n), float(reward), float(rate)))
    return rows


def cmd_report(args) -> int:
    groups = {}  # (task, method, N) -> list of (reward, rate)
    used = 0
    for d in args.dirs:
        manifest = verify_run_dir(d)
        if manifest.get("command") != "sweep":
            print(f"report: skipping non-sweep run {d}", file=sys.stderr)
            continue
        cfg = manifest["config"]
        schedule = cfg.get("train_config", {}).get("time_schedule", {})
        with open(os.path.join(d, "sweep.csv"), "r", encoding="utf-8") as f:
            for kind, n, reward, rate in _parse_sweep_csv(f.read()):
                key = (cfg["task"], method_name(schedule, kind), n)
                groups.setdefault(key, []).append((reward, rate))
        used += 1
    if used == 0:
        raise InvalidArgument("no sweep runs among the given directories")

    tasks = sorted({k[0] for k in groups})
    all_steps = sorted({k[2] for k in groups})
    lines = ["task,method," + ",".join(f"steps_{n}" for n in all_steps)]
    for task in tasks:
        for method in METHOD_ORDER:
            cells = []
            present = False
            for n in all_steps:
                vals = groups.get((task, method, n))
                if vals:
                    present = True
                    r = float(np.mean([v[0] for v in vals]))
                    s = float(np.mean([v[1] for v in vals]))
                    cells.append(f"{r:.3f}({s * 100:.1f}%)")
                else:
                    cells.append("")
            if present:
                lines.append(f"{task},{method}," + ",".join(cells))
    summary = "\n".join(lines) + "\n"

    out_dir = args.out or os.path.join(_out_root(), "report")
    write_run_dir(
        out_dir, "report",
        {"dirs": [os.fspath(d) for d in args.dirs]}, [], {"summary.csv": summary},
    )
    print(f"report: wrote {out_dir} ({len(lines) - 1} method rows)")
    return EXIT_OK


# ---------------------------------------------------------------- dataset dump (helper)

def cmd_dataset(args) -> int:
    spec = default_task(args.task)
    ds = generate_dataset(spec, args.episodes, args.seed)
    save_dataset(ds, args.out)
    print(f"dataset: wrote {args.out} ({len(ds)} rows, {args.episodes} episodes)")
    return EXIT_OK


# ---------------------------------------------------------------- parser / main

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flowdj", description=__doc__)
    sub = p.add_subparsers(dest="command")

    t = sub.add_parser("train", help="train a velocity model from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--out", default=None)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", help="evaluate a checkpoint across solver schedules")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--task", required=True, choices=TASK_KINDS)
    s.add_argument("--steps", default="1,2,4,16,64")
    s.add_argument("--solver", default="uniform,dense_jump")
    s.add_argument("--t-jump", dest="t_jump", type=float, default=0.5)
    s.add_argument("--rollouts", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--timing", action="store_true",
                   help="write measured wall time into mean_eval_ms (breaks byte determinism)")
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_sweep)

    d = sub.add_parser("diagnose", help="drift curves and stability probes")
    d.add_argument("--ckpt", default=None)
    d.add_argument("--data", default=None)
    d.add_argument("--analytic", action="store_true",
                   help="probe the closed-form marginal field instead of a checkpoint")
    d.add_argument("--t-grid", dest="t_grid", default="20,0.05,0.95")
    d.add_argument("--lipschitz-t", dest="lipschitz_t", default="0.5,0.9,0.99")
    d.add_argument("--fd-step", dest="fd_step", type=float, default=1e-3)
    d.add_argument("--draws", type=int, default=4)
    d.add_argument("--raw-state-query", action="store_true",
                   help="query the KNN index with a_t instead of the one-jump prediction")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", default=None)
    d.set_defaults(func=cmd_diagnose)

    r = sub.add_parser("report", help="merge sweep runs into an ablation-grid summary")
    r.add_argument("dirs", nargs="+")
    r.add_argument("--out", default=None)
    r.set_defaults(func=cmd_report)

    g = sub.add_parser("dataset", help="generate and save an expert dataset")
    g.add_argument("--task", required=True, choices=TASK_KINDS)
    g.add_argument("--episodes", type=int, default=50)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_dataset)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    if not getattr(args, "func", None):
        parser.print_help()
        return EXIT_USAGE
    try:
        return args.func(args)
    except (InvalidArgument, DomainError, UnsupportedVersion, DegenerateGridPoint) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except json.JSONDecodeError as e:
        print(f"error: bad JSON: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, IntegrationDiverged) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CorruptCheckpoint, IntegrityFailure) as e:
        print(f"integrity failure: {e}", file=sys.stderr)
        return EXIT_INTEGRITY


if __name__ == "__main__":
    sys.exit(main())
