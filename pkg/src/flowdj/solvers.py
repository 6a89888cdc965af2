"""ODE integration of velocity fields from t=0 to t=1.

Two schedules share one step budget N (total field evaluations): uniform
explicit Euler over [0,1], and dense-jump, which spends N-1 Euler steps on
[0, t_jump] and then extrapolates straight to t=1 with a single update
a += (1 - t_jump) * v(a, t_jump, o). At N=1 both reduce to the same
full-span step a0 + v(a0, 0, o) through one shared code path.

Analytic reference fields with closed-form solutions back the solver tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, IntegrationDiverged, InvalidArgument
from .model import VelocityModel, forward_batch


@dataclass(frozen=True)
class SolverSchedule:
    """Integration plan: solver kind, evaluation budget N, jump time."""

    kind: str  # "uniform_euler" | "dense_jump"
    steps: int
    t_jump: float | None = None

    def __post_init__(self):
        if self.kind not in ("uniform_euler", "dense_jump"):
            raise InvalidArgument(f"unknown solver kind {self.kind!r}")
        if self.steps < 1:
            raise InvalidArgument(f"steps must be >= 1, got {self.steps}")
        if self.kind == "dense_jump":
            if self.t_jump is not None and not (0.0 < self.t_jump < 1.0):
                raise InvalidArgument(f"t_jump must be in (0,1), got {self.t_jump}")
            if self.steps >= 2 and self.t_jump is None:
                raise InvalidArgument("dense_jump with N >= 2 needs a t_jump")

    @property
    def dt(self):
        """Step size of the dense phase; None for the N=1 full-span jump."""
        if self.kind == "uniform_euler":
            return 1.0 / self.steps
        if self.steps == 1:
            return None
        return self.t_jump / (self.steps - 1)


def build_schedule(kind: str, steps: int, t_jump: float | None = None) -> SolverSchedule:
    return SolverSchedule(kind, steps, t_jump)


@dataclass(frozen=True)
class AnalyticField:
    """Closed-form velocity fields used as solver oracles.

    kinds:
      constant          v = c                     exact: a0 + c t
      marginal_to_zero  v = -a / (1 - t), t < 1   exact: a0 (1 - t)
      time_poly         v = sum_k coeffs[k] t^k   exact: a0 + sum coeffs[k] t^(k+1)/(k+1)
      state_time        v = a t                   exact: a0 exp(t^2 / 2)
    """

    kind: str
    c: tuple = ()
    coeffs: tuple = ()

    def __post_init__(self):
        if self.kind not in ("constant", "marginal_to_zero", "time_poly", "state_time"):
            raise InvalidArgument(f"unknown analytic field kind {self.kind!r}")


def constant_field(c) -> AnalyticField:
    return AnalyticField("constant", c=tuple(np.atleast_1d(np.asarray(c, dtype=np.float64)).tolist()))


def marginal_field() -> AnalyticField:
    return AnalyticField("marginal_to_zero")


def time_poly_field(*coeffs) -> AnalyticField:
    return AnalyticField("time_poly", coeffs=tuple(float(c) for c in coeffs))


def state_time_field() -> AnalyticField:
    return AnalyticField("state_time")


def eval_analytic(field: AnalyticField, a, t: float) -> np.ndarray:
    """Exact closed-form velocity at (a, t)."""
    a = np.asarray(a, dtype=np.float64)
    t = float(t)
    if field.kind == "constant":
        c = np.asarray(field.c, dtype=np.float64)
        if c.shape != a.shape:
            raise InvalidArgument(f"constant field dim {c.shape} vs state {a.shape}")
        return c.copy()
    if field.kind == "marginal_to_zero":
        if t >= 1.0:
            raise DomainError(f"marginal field undefined at t={t} >= 1")
        return -a / (1.0 - t)
    if field.kind == "time_poly":
        val = 0.0
        for k, ck in enumerate(field.coeffs):
            val += ck * t**k
        return np.full_like(a, val)
    return a * t  # state_time


def exact_solution(field: AnalyticField, a0, t: float) -> np.ndarray:
    """Closed-form flow of the field started at a0, evaluated at time t."""
    a0 = np.asarray(a0, dtype=np.float64)
    t = float(t)
    if field.kind == "constant":
        return a0 + np.asarray(field.c, dtype=np.float64) * t
    if field.kind == "marginal_to_zero":
        return a0 * (1.0 - t)
    if field.kind == "time_poly":
        val = 0.0
        for k, ck in enumerate(field.coeffs):
            val += ck * t ** (k + 1) / (k + 1)
        return a0 + val
    return a0 * np.exp(t * t / 2.0)


@dataclass
class Trajectory:
    """Integration record: times from 0 to exactly 1, one state per time."""

    times: np.ndarray
    states: np.ndarray
    field_evals: int

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]


def as_field_fn(field):
    """Uniform (a, t, o) -> velocity adapter over models, analytic fields, callables."""
    if isinstance(field, AnalyticField):
        return lambda a, t, o: eval_analytic(field, a, t)
    if isinstance(field, VelocityModel):
        return lambda a, t, o: forward_batch(field, a[None, :], t, o)[0]
    if callable(field):
        return field
    raise InvalidArgument(f"cannot evaluate field of type {type(field).__name__}")


def integrate(field, a0, o, sched: SolverSchedule) -> Trajectory:
    """Integrate the field from t=0 to t=1 under the schedule's plan."""
    f = as_field_fn(field)
    a = np.array(a0, dtype=np.float64, copy=True)
    if not np.all(np.isfinite(a)):
        raise InvalidArgument("non-finite initial state")
    states = [a.copy()]
    times = [0.0]
    n = sched.steps

    def advance(a, t, span, step_index):
        a = a + span * f(a, t, o)
        if not np.all(np.isfinite(a)):
            raise IntegrationDiverged("non-finite state", step_index)
        return a

    if n == 1:
        # shared full-span reduction for both solver kinds
        a = advance(a, 0.0, 1.0, 0)
        states.append(a.copy())
        times.append(1.0)
    elif sched.kind == "uniform_euler":
        dt = 1.0 / n
        for k in range(n):
            a = advance(a, k / n, dt, k)
            states.append(a.copy())
            times.append((k + 1) / n)
    else:
        if sched.t_jump is None:
            raise InvalidArgument("dense_jump with N >= 2 needs a t_jump")
        tj = sched.t_jump
        dt = tj / (n - 1)
        for k in range(n - 1):
            a = advance(a, k * dt, dt, k)
            states.append(a.copy())
            times.append(tj if k == n - 2 else (k + 1) * dt)
        a = advance(a, tj, 1.0 - tj, n - 1)
        states.append(a.copy())
        times.append(1.0)

    return Trajectory(np.asarray(times), np.asarray(states), n)


def trajectory_to_csv(traj: Trajectory) -> str:
    """CSV dump: column t, then one column per action dimension."""
    dim = traj.states.shape[1]
    lines = ["t," + ",".join(f"a{i}" for i in range(dim))]
    for t, s in zip(traj.times, traj.states):
        lines.append(f"{t!r}," + ",".join(f"{x!r}" for x in s))
    return "\n".join(lines) + "\n"
