"""Desk-scale imitation benchmarks with scripted multimodal experts.

two_mode_reach is the workhorse: a 2-d point agent must round a disc obstacle
to reach a goal, and the expert forks 50/50 between the upper and lower
detour, making the conditional action law at early states genuinely bimodal.
The mean of the two modes points straight into the obstacle and fails, so the
task cannot be solved by regression to the mean. ring_mixture is a stateless
sanity task (hint angle -> point on a ring); point_maze is a single-mode
corridor navigation task.
"""

from __future__ import annotations

import dataclasses
import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument
from .model import Checkpoint
from .solvers import SolverSchedule, integrate

TASK_KINDS = ("two_mode_reach", "ring_mixture", "point_maze")


@dataclass(frozen=True)
class TaskSpec:
    """Geometry, noise scales, and the success predicate of one task."""

    kind: str
    action_dim: int
    obs_dim: int
    horizon: int
    goal_radius: float
    action_noise: float
    start_noise: float
    step_max: float
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise InvalidArgument(f"unknown task kind {self.kind!r}")
        if self.horizon < 1:
            raise InvalidArgument(f"horizon must be >= 1, got {self.horizon}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def default_task(kind: str) -> TaskSpec:
    if kind == "two_mode_reach":
        return TaskSpec(
            kind, 2, 3, horizon=28, goal_radius=0.06,
            action_noise=0.01, start_noise=0.05, step_max=0.15,
            params={
                "goal_x": 1.0,
                "goal_y_range": 0.4,
                "obstacle_center": [0.5, 0.0],
                "obstacle_radius": 0.18,
                "waypoint_y": 0.45,
                "step_size": 0.12,
                "dynamics_noise": 0.03,
                "crash_on_hit": False,
                "success_bonus": 10.0,
            },
        )
    if kind == "ring_mixture":
        return TaskSpec(
            kind, 2, 2, horizon=1, goal_radius=0.0,
            action_noise=0.01, start_noise=0.0, step_max=2.0,
            params={
                "radius": 1.0,
                "n_modes": 8,
                "angle_noise": 0.05,
                "radial_tol": 0.15,
                "angular_tol": 0.4,
                "success_bonus": 5.0,
            },
        )
    if kind == "point_maze":
        return TaskSpec(
            kind, 2, 2, horizon=40, goal_radius=0.12,
            action_noise=0.01, start_noise=0.05, step_max=0.15,
            params={
                "goal": [1.6, 0.0],
                "wall": [0.75, 0.85, -0.8, 0.45],
                "waypoint": [0.8, 0.62],
                "step_size": 0.12,
                "dynamics_noise": 0.02,
                "success_bonus": 10.0,
            },
        )
    raise InvalidArgument(f"unknown task kind {kind!r}")


def _clip_norm(a: np.ndarray, max_norm: float) -> np.ndarray:
    n = np.linalg.norm(a)
    return a if n <= max_norm else a * (max_norm / n)


def _blocked(spec: TaskSpec, p: np.ndarray) -> bool:
    """True when a proposed position lies inside the task's obstacle."""
    if spec.kind == "two_mode_reach":
        c = np.asarray(spec.params["obstacle_center"])
        return float(np.linalg.norm(p - c)) < spec.params["obstacle_radius"]
    if spec.kind == "point_maze":
        x0, x1, y0, y1 = spec.params["wall"]
        return x0 <= p[0] <= x1 and y0 <= p[1] <= y1
    return False


def env_reset(spec: TaskSpec, rng) -> np.ndarray:
    """Initial internal state: start position (plus the episode's goal height
    for two_mode_reach), or the ring's hint angle."""
    if spec.kind == "ring_mixture":
        k = int(rng.integers(0, spec.params["n_modes"]))
        theta = 2.0 * math.pi * k / spec.params["n_modes"]
        return np.array([theta])
    pos = rng.normal(0.0, spec.start_noise, size=2)
    if spec.kind == "two_mode_reach":
        r = spec.params["goal_y_range"]
        return np.array([pos[0], pos[1], rng.uniform(-r, r)])
    return pos


def env_obs(spec: TaskSpec, state: np.ndarray) -> np.ndarray:
    if spec.kind == "ring_mixture":
        return np.array([math.cos(state[0]), math.sin(state[0])])
    return state.copy()


def env_step(spec: TaskSpec, state: np.ndarray, action: np.ndarray, rng=None):
    """Apply one action; returns (new_state, reward, success_now, failed_now).

    Navigation tasks add actuation noise (params["dynamics_noise"]) when an
    rng is supplied, so closed-loop states wander off the expert manifold the
    way they do in physical control. Obstacle contact either cancels the move
    or, with params["crash_on_hit"], ends the episode as a failure.
    """
    action = np.asarray(action, dtype=np.float64)
    if spec.kind == "ring_mixture":
        p = spec.params
        target = p["radius"] * np.array([math.cos(state[0]), math.sin(state[0])])
        r = float(np.linalg.norm(action))
        radial_err = abs(r - p["radius"])
        ang_err = math.pi if r == 0.0 else abs(
            math.atan2(
                action[0] * target[1] - action[1] * target[0],
                float(action @ target),
            )
        )
        success = radial_err <= p["radial_tol"] and ang_err <= p["angular_tol"]
        reward = -float(np.linalg.norm(action - target))
        if success:
            reward += p["success_bonus"]
        return state, reward, success, False

    if spec.kind == "two_mode_reach":
        pos, tail = state[:2], state[2:]
        goal = np.array([spec.params["goal_x"], state[2]])
    else:
        pos, tail = state, state[:0]
        goal = np.asarray(spec.params["goal"])
    proposed = pos + _clip_norm(action, spec.step_max)
    if rng is not None and spec.params.get("dynamics_noise", 0.0) > 0.0:
        proposed = proposed + rng.normal(0.0, spec.params["dynamics_noise"], size=2)
    if _blocked(spec, proposed):
        if spec.params.get("crash_on_hit", False):
            return state, -float(np.linalg.norm(pos - goal)), False, True
        new_pos = pos
    else:
        new_pos = proposed
    dist = float(np.linalg.norm(new_pos - goal))
    success = dist <= spec.goal_radius
    reward = -dist + (spec.params["success_bonus"] if success else 0.0)
    return np.concatenate([new_pos, tail]), reward, success, False


class ExpertPolicy:
    """Scripted optimal policy; two_mode_reach commits to a detour at reset."""

    def __init__(self, spec: TaskSpec):
        self.spec = spec
        self.mode = 1.0

    def reset(self, rng) -> None:
        if self.spec.kind == "two_mode_reach":
            self.mode = 1.0 if rng.random() < 0.5 else -1.0

    def __call__(self, obs: np.ndarray, rng) -> np.ndarray:
        spec = self.spec
        p = spec.params
        if spec.kind == "ring_mixture":
            theta = math.atan2(obs[1], obs[0]) + rng.normal(0.0, p["angle_noise"])
            radius = p["radius"] + rng.normal(0.0, spec.action_noise)
            return radius * np.array([math.cos(theta), math.sin(theta)])

        if spec.kind == "two_mode_reach":
            pos = np.asarray(obs[:2], dtype=np.float64)
            goal = np.array([p["goal_x"], obs[2]])
            cx = p["obstacle_center"][0]
            if pos[0] < cx - 0.02:
                target = np.array([cx, self.mode * p["waypoint_y"]])
            elif pos[0] < cx + 0.22:
                # exit waypoint clears the obstacle before turning to the goal
                target = np.array([cx + 0.25, self.mode * 0.30])
            else:
                target = goal
        else:
            pos = np.asarray(obs, dtype=np.float64)
            goal = np.asarray(p["goal"])
            waypoint = np.asarray(p["waypoint"])
            past = pos[0] >= p["wall"][1] - 0.02
            target = goal if past or np.linalg.norm(waypoint - pos) < 0.08 else waypoint
        delta = target - pos
        dist = float(np.linalg.norm(delta))
        step = min(p["step_size"], dist)
        direction = delta / dist if dist > 0 else np.zeros(2)
        return direction * step + rng.normal(0.0, spec.action_noise, size=2)


@dataclass
class Dataset:
    """Expert demonstration rows plus provenance."""

    obs: np.ndarray
    actions: np.ndarray
    episode_ids: np.ndarray
    step_ids: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.obs.shape[0]

    def episodes(self):
        return np.unique(self.episode_ids)

    def subset(self, row_idx) -> "Dataset":
        return Dataset(
            self.obs[row_idx], self.actions[row_idx],
            self.episode_ids[row_idx], self.step_ids[row_idx], dict(self.provenance),
        )


def generate_dataset(spec: TaskSpec, n_episodes: int, seed: int) -> Dataset:
    """Roll the scripted expert; deterministic under seed, every episode succeeds.

    two_mode_reach alternates the expert's detour mode by episode parity so the
    dataset splits exactly 50/50 between the two optimal paths at any size.
    """
    if n_episodes < 1:
        raise InvalidArgument(f"n_episodes must be >= 1, got {n_episodes}")
    rng = np.random.default_rng(seed)
    expert = ExpertPolicy(spec)
    obs_rows, act_rows, ep_ids, step_ids = [], [], [], []
    for ep in range(n_episodes):
        expert.reset(rng)
        if spec.kind == "two_mode_reach":
            expert.mode = 1.0 if ep % 2 == 0 else -1.0
        state = env_reset(spec, rng)
        success = False
        for step in range(spec.horizon):
            obs = env_obs(spec, state)
            action = expert(obs, rng)
            obs_rows.append(obs)
            act_rows.append(action)
            ep_ids.append(ep)
            step_ids.append(step)
            state, _, success, failed = env_step(spec, state, action, rng)
            if failed:
                break
            if success:
                break
        if not success:
            raise RuntimeError(f"scripted expert failed episode {ep} (task bug)")
    return Dataset(
        np.asarray(obs_rows), np.asarray(act_rows),
        np.asarray(ep_ids), np.asarray(step_ids),
        {"task": spec.to_dict(), "n_episodes": n_episodes, "seed": seed},
    )


def save_dataset(ds: Dataset, path) -> None:
    """Line-delimited records, one per step; first line carries provenance."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(json.dumps({"provenance": ds.provenance}, sort_keys=True,
                           separators=(",", ":")) + "\n")
        for i in range(len(ds)):
            rec = {
                "episode": int(ds.episode_ids[i]),
                "step": int(ds.step_ids[i]),
                "obs": ds.obs[i].tolist(),
                "action": ds.actions[i].tolist(),
            }
            f.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")


def load_dataset(path) -> Dataset:
    with open(path, "r", encoding="utf-8") as f:
        lines = [ln for ln in f.read().split("\n") if ln]
    if not lines:
        raise InvalidArgument(f"empty dataset file {path}")
    header = json.loads(lines[0])
    obs, acts, eps, steps = [], [], [], []
    for ln in lines[1:]:
        rec = json.loads(ln)
        obs.append(rec["obs"])
        acts.append(rec["action"])
        eps.append(rec["episode"])
        steps.append(rec["step"])
    if not obs:
        raise InvalidArgument(f"dataset file {path} has no rows")
    return Dataset(
        np.asarray(obs, dtype=np.float64), np.asarray(acts, dtype=np.float64),
        np.asarray(eps), np.asarray(steps), header.get("provenance", {}),
    )


@dataclass
class RolloutResult:
    """One closed-loop episode's outcome."""

    total_reward: float
    success: bool
    steps_taken: int
    actions: np.ndarray
    diverged: bool = False


def flow_policy(ckpt: Checkpoint, sched: SolverSchedule):
    """Closed-loop policy: sample noise, integrate the model, de-normalise."""
    model, stats = ckpt.model, ckpt.stats

    def act(obs, rng):
        on = stats.normalize_obs(obs)
        a0 = rng.standard_normal(model.action_dim)
        traj = integrate(model, a0, on, sched)
        return stats.denormalize_act(traj.final)

    return act


def rollout(spec: TaskSpec, policy, seed: int) -> RolloutResult:
    """One episode; replans every control step; deterministic under seed."""
    rng = np.random.default_rng(seed)
    state = env_reset(spec, rng)
    if hasattr(policy, "reset"):
        policy.reset(rng)
    total = 0.0
    trace = []
    for step in range(spec.horizon):
        obs = env_obs(spec, state)
        action = np.asarray(policy(obs, rng), dtype=np.float64)
        if not np.all(np.isfinite(action)):
            return RolloutResult(total, False, step, np.asarray(trace), diverged=True)
        trace.append(action)
        state, reward, success, failed = env_step(spec, state, action, rng)
        total += reward
        if success:
            return RolloutResult(total, True, step + 1, np.asarray(trace))
        if failed:
            return RolloutResult(total, False, step + 1, np.asarray(trace))
    return RolloutResult(total, False, spec.horizon, np.asarray(trace))


@dataclass
class EvalRow:
    """Aggregate metrics for one schedule in an evaluation sweep."""

    schedule_kind: str
    steps: int
    t_jump: float | None
    mean_reward: float
    success_rate: float
    mean_eval_ms: float


def evaluate(
    spec: TaskSpec,
    ckpt: Checkpoint,
    schedules,
    n_rollouts: int,
    seed: int,
) -> list:
    """Rollout sweep; per-rollout seeds are seed + index; failures never abort."""
    if n_rollouts < 1:
        raise InvalidArgument(f"n_rollouts must be >= 1, got {n_rollouts}")
    if ckpt.model.action_dim != spec.action_dim or ckpt.model.obs_dim != spec.obs_dim:
        raise InvalidArgument(
            f"checkpoint dims ({ckpt.model.action_dim},{ckpt.model.obs_dim}) do not "
            f"match task ({spec.action_dim},{spec.obs_dim})"
        )
    rows = []
    for sched in schedules:
        base = flow_policy(ckpt, sched)
        calls = 0
        elapsed = 0.0

        def timed(obs, rng, _base=base):
            nonlocal calls, elapsed
            t0 = time.perf_counter()
            a = _base(obs, rng)
            elapsed += time.perf_counter() - t0
            calls += 1
            return a

        results = [rollout(spec, timed, seed + i) for i in range(n_rollouts)]
        rows.append(
            EvalRow(
                sched.kind,
                sched.steps,
                sched.t_jump,
                float(np.mean([r.total_reward for r in results])),
                float(np.mean([1.0 if r.success else 0.0 for r in results])),
                (elapsed / calls * 1e3) if calls else float("nan"),
            )
        )
    return rows


def eval_table_csv(rows, include_timing: bool = False) -> str:
    """Sweep CSV; timing column is nan unless explicitly measured in."""
    lines = ["schedule_kind,N,t_jump,mean_reward,success_rate,mean_eval_ms"]
    for r in rows:
        tj = "" if r.t_jump is None else repr(float(r.t_jump))
        ms = repr(r.mean_eval_ms) if include_timing else "nan"
        lines.append(
            f"{r.schedule_kind},{r.steps},{tj},{r.mean_reward!r},{r.success_rate!r},{ms}"
        )
    return "\n".join(lines) + "\n"
