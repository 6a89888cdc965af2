"""Linear-interpolation coupling and the velocity regression training loop.

Times are drawn either uniformly or from a symmetric Beta(alpha, alpha) with
alpha in (0, 1], whose U-shape concentrates mass at both endpoints of [0, 1].
Couplings pair dataset actions with standard normal noise along the straight
path a_t = (1-t) a0 + t a1, whose target velocity is the constant a1 - a0.
"""

from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, InvalidArgument, TrainingDiverged
from .model import (
    Checkpoint,
    NormStats,
    compute_norm_stats,
    forward_batch,
    init_adam,
    init_model,
    train_step,
)


@dataclass(frozen=True)
class TimeSchedule:
    """Law for training-time draws: uniform, or Beta(alpha, alpha) U-shape."""

    kind: str = "uniform"
    alpha: float = 1.0

    def __post_init__(self):
        if self.kind not in ("uniform", "beta"):
            raise InvalidArgument(f"unknown schedule kind {self.kind!r}")
        if self.kind == "beta" and not (0.0 < self.alpha <= 1.0):
            raise InvalidArgument(
                f"beta schedule needs alpha in (0, 1], got {self.alpha}"
            )

    def is_uniform(self) -> bool:
        return self.kind == "uniform" or self.alpha == 1.0


def _johnk_beta_symmetric(alpha: float, n: int, rng) -> np.ndarray:
    # Johnk: accept (u^(1/a), v^(1/a)) with sum <= 1; ratio is Beta(a, a).
    # Acceptance rate Gamma(1+a)^2 / Gamma(1+2a) stays above 0.5 for a <= 1.
    out = np.empty(n)
    filled = 0
    inv = 1.0 / alpha
    while filled < n:
        m = (n - filled) * 2 + 16
        x = rng.random(m) ** inv
        y = rng.random(m) ** inv
        s = x + y
        ok = (s <= 1.0) & (s > 0.0)
        accepted = x[ok] / s[ok]
        take = min(n - filled, accepted.size)
        out[filled : filled + take] = accepted[:take]
        filled += take
    return out


def sample_times(schedule: TimeSchedule, n: int, rng) -> np.ndarray:
    """Draw n i.i.d. times in [0,1] from the schedule's law.

    Beta with alpha = 1 routes through the identical uniform path so the two
    configurations consume the RNG stream byte-for-byte the same way.
    """
    if n < 1:
        raise InvalidArgument(f"n must be >= 1, got {n}")
    if schedule.is_uniform():
        return rng.random(n)
    return _johnk_beta_symmetric(schedule.alpha, n, rng)


def beta_density(alpha: float, t: float) -> float:
    """Density t^(a-1) (1-t)^(a-1) / B(a, a) of the symmetric Beta law."""
    if alpha <= 0:
        raise InvalidArgument(f"alpha must be > 0, got {alpha}")
    if t < 0.0 or t > 1.0:
        raise DomainError(f"t must lie in [0,1], got {t}")
    if t == 0.0 or t == 1.0:
        if alpha < 1.0:
            raise DomainError(f"density diverges at t={t} for alpha={alpha}")
        return 1.0
    if alpha == 1.0:
        return 1.0
    log_b = 2.0 * math.lgamma(alpha) - math.lgamma(2.0 * alpha)
    return math.exp((alpha - 1.0) * (math.log(t) + math.log1p(-t)) - log_b)


@dataclass
class CouplingBatch:
    """Sampled (a0, a1, t, a_t, target velocity, obs) rows for one step."""

    a0: np.ndarray
    a1: np.ndarray
    t: np.ndarray
    at: np.ndarray
    target_v: np.ndarray
    obs: np.ndarray

    def __len__(self) -> int:
        return self.a0.shape[0]


def make_coupling(dataset, batch_size: int, schedule: TimeSchedule, rng) -> CouplingBatch:
    """Sample a training batch: dataset rows with replacement, fresh noise and times.

    The dataset's actions/obs are used as stored; normalise beforehand if the
    model expects it. Interpolants are computed literally as (1-t) a0 + t a1.
    """
    actions = np.asarray(dataset.actions, dtype=np.float64)
    obs = np.asarray(dataset.obs, dtype=np.float64)
    n = actions.shape[0]
    if n == 0:
        raise InvalidArgument("empty dataset")
    if batch_size < 1:
        raise InvalidArgument(f"batch_size must be >= 1, got {batch_size}")

    idx = rng.integers(0, n, size=batch_size)
    a1 = actions[idx]
    o = obs[idx]
    t = sample_times(schedule, batch_size, rng)
    a0 = rng.standard_normal(a1.shape)
    tc = t[:, None]
    at = (1.0 - tc) * a0 + tc * a1
    target_v = a1 - a0
    return CouplingBatch(a0, a1, t, at, target_v, o)


@dataclass
class TrainConfig:
    """Everything fit() needs; mirrors the JSON config key-for-key."""

    epochs: int
    batch_size: int
    seed: int
    time_schedule: TimeSchedule = field(default_factory=TimeSchedule)
    hidden: list = field(default_factory=lambda: [128, 128])
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    checkpoint_every: int = 100
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.epochs < 1:
            raise InvalidArgument(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise InvalidArgument(f"batch_size must be >= 1, got {self.batch_size}")
        if self.checkpoint_every < 1:
            raise InvalidArgument(
                f"checkpoint_every must be >= 1, got {self.checkpoint_every}"
            )
        if not (0.0 <= self.val_fraction < 1.0):
            raise InvalidArgument(
                f"val_fraction must be in [0,1), got {self.val_fraction}"
            )

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["time_schedule"] = {
            "kind": self.time_schedule.kind,
            "alpha": self.time_schedule.alpha,
        }
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class HistoryRow:
    epoch: int
    train_loss: float
    val_loss: float
    wall_ms: float


def history_to_csv(history) -> str:
    lines = ["epoch,train_loss,val_loss,wall_ms"]
    for r in history:
        lines.append(f"{r.epoch},{r.train_loss!r},{r.val_loss!r},{r.wall_ms!r}")
    return "\n".join(lines) + "\n"


def split_by_episode(dataset, val_fraction: float):
    """Deterministic tail split: the last floor(fraction * n_episodes) episodes validate."""
    episode_ids = np.asarray(dataset.episode_ids)
    unique = np.unique(episode_ids)
    n_val_eps = int(len(unique) * val_fraction)
    if n_val_eps == 0:
        return np.arange(len(episode_ids)), np.array([], dtype=int)
    val_eps = set(unique[len(unique) - n_val_eps :].tolist())
    mask = np.array([e in val_eps for e in episode_ids])
    return np.nonzero(~mask)[0], np.nonzero(mask)[0]


class _Rows:
    """Array view consumed by make_coupling."""

    def __init__(self, actions, obs):
        self.actions = actions
        self.obs = obs


def _eval_loss(model, at, t, target_v, obs):
    out = forward_batch(model, at, t, obs)
    resid = out - target_v
    return float(np.mean(np.sum(resid * resid, axis=1)))


def fit(dataset, cfg: TrainConfig):
    """Train a velocity model; returns (best-validation Checkpoint, history).

    Deterministic in (dataset contents, cfg): one RNG stream seeded by
    cfg.seed drives the frozen validation coupling and every training batch.
    Snapshots are taken every cfg.checkpoint_every epochs (plus the final
    epoch); the one with the lowest validation loss wins, earliest on ties.
    """
    obs = np.asarray(dataset.obs, dtype=np.float64)
    actions = np.asarray(dataset.actions, dtype=np.float64)
    if actions.shape[0] == 0:
        raise InvalidArgument("empty dataset")
    action_dim = actions.shape[1]
    obs_dim = obs.shape[1]

    train_idx, val_idx = split_by_episode(dataset, cfg.val_fraction)
    stats = compute_norm_stats(obs[train_idx], actions[train_idx])
    train_rows = _Rows(stats.normalize_act(actions[train_idx]), stats.normalize_obs(obs[train_idx]))

    model = init_model(action_dim, obs_dim, cfg.hidden, cfg.seed)
    opt = init_adam(model, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon)
    rng = np.random.default_rng(cfg.seed)

    have_val = val_idx.size > 0
    if have_val:
        val_a1 = stats.normalize_act(actions[val_idx])
        val_obs = stats.normalize_obs(obs[val_idx])
        val_t = sample_times(cfg.time_schedule, val_a1.shape[0], rng)
        val_a0 = rng.standard_normal(val_a1.shape)
        vtc = val_t[:, None]
        val_at = (1.0 - vtc) * val_a0 + vtc * val_a1
        val_target = val_a1 - val_a0

    n_train = train_rows.actions.shape[0]
    steps_per_epoch = max(1, n_train // cfg.batch_size)

    history = []
    best = None  # (val_metric, epoch, model, opt)
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        epoch_loss = 0.0
        for s in range(steps_per_epoch):
            batch = make_coupling(train_rows, cfg.batch_size, cfg.time_schedule, rng)
            try:
                loss, model, opt = train_step(model, opt, batch)
            except TrainingDiverged as e:
                raise TrainingDiverged(
                    f"epoch {epoch}, step-in-epoch {s}: {e}", e.step_index
                ) from e
            epoch_loss += loss
        train_loss = epoch_loss / steps_per_epoch
        val_loss = (
            _eval_loss(model, val_at, val_t, val_target, val_obs)
            if have_val
            else float("nan")
        )
        wall_ms = (time.perf_counter() - t0) * 1e3
        history.append(HistoryRow(epoch, train_loss, val_loss, wall_ms))

        if epoch % cfg.checkpoint_every == 0 or epoch == cfg.epochs:
            metric = val_loss if have_val else train_loss
            if best is None or metric < best[0]:
                best = (metric, epoch, model.copy(), opt.copy())

    ckpt = Checkpoint(best[2], best[3], stats, cfg.to_dict(), cfg.seed)
    return ckpt, history
