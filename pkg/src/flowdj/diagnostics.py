"""Probes for the two failure mechanisms of flow-matching policies.

A brute-force KNN index over training actions supports drift curves: how
strongly the learned velocity aligns with the true expert direction versus
the direction implied by the nearest stored training action, as integration
time sweeps (0,1). Numerical probes estimate the field's local Lipschitz
constant, its curvature (the leading term of one-step extrapolation error),
and solver truncation error against closed-form solutions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateGridPoint, DomainError, InvalidArgument
from .model import VelocityModel, forward_batch
from .solvers import (
    AnalyticField,
    SolverSchedule,
    as_field_fn,
    exact_solution,
    integrate,
)


@dataclass
class KnnIndex:
    """Exact (full-sort) Euclidean nearest-neighbour index over action rows."""

    actions: np.ndarray

    def query(self, q, k: int = 1):
        """Return (indices, distances) of the k nearest stored rows, ascending."""
        q = np.asarray(q, dtype=np.float64)
        d = np.linalg.norm(self.actions - q[None, :], axis=1)
        order = np.argsort(d, kind="stable")[:k]
        return order, d[order]

    def nearest_rows(self, queries) -> np.ndarray:
        """Vectorised 1-NN lookup: one stored row per query row."""
        queries = np.asarray(queries, dtype=np.float64)
        d = np.linalg.norm(queries[:, None, :] - self.actions[None, :, :], axis=2)
        return self.actions[np.argmin(d, axis=1)]


def build_knn_index(actions) -> KnnIndex:
    actions = np.asarray(actions, dtype=np.float64)
    if actions.ndim != 2 or actions.shape[0] == 0:
        raise InvalidArgument("index needs a non-empty 2-d action matrix")
    if not np.all(np.isfinite(actions)):
        raise InvalidArgument("index actions must be finite")
    return KnnIndex(actions.copy())


@dataclass
class DriftReport:
    """Mean cosine alignment curves over the time grid."""

    t_grid: np.ndarray
    cos_true: np.ndarray
    cos_knn: np.ndarray
    n_samples: np.ndarray

    def to_csv(self) -> str:
        lines = ["t,cos_true,cos_knn,n"]
        for t, ct, ck, n in zip(self.t_grid, self.cos_true, self.cos_knn, self.n_samples):
            lines.append(f"{t!r},{ct!r},{ck!r},{n}")
        return "\n".join(lines) + "\n"


def _row_cosines(u, v):
    """Per-row cosines plus a validity mask (False where a norm vanishes)."""
    nu = np.linalg.norm(u, axis=1)
    nv = np.linalg.norm(v, axis=1)
    ok = (nu > 0) & (nv > 0)
    cos = np.zeros(u.shape[0])
    cos[ok] = np.sum(u[ok] * v[ok], axis=1) / (nu[ok] * nv[ok])
    return cos, ok


def _states_from_schedule(model, a0, obs, sched, t_grid):
    """Trajectory states sampled at the grid times (nearest recorded time)."""
    out = np.empty((len(t_grid), a0.shape[0], a0.shape[1]))
    for i in range(a0.shape[0]):
        traj = integrate(model, a0[i], obs[i], sched)
        for j, t in enumerate(t_grid):
            k = int(np.argmin(np.abs(traj.times - t)))
            out[j, i] = traj.states[k]
    return out


def drift_curves(
    model: VelocityModel,
    heldout,
    index: KnnIndex,
    t_grid,
    rng,
    n_draws: int = 4,
    query_mode: str = "one_jump",
    sched_for_states: SolverSchedule | None = None,
) -> DriftReport:
    """Alignment of the learned velocity with expert vs nearest-training directions.

    For each heldout (obs, expert action) and each grid time t, noise a0 is
    drawn, the state a_t formed (exact interpolant by default, or integrated
    states when sched_for_states is given), and the learned velocity compared
    against v_true = a1 - a0 and v_knn = a_knn - a0, where a_knn is the stored
    action nearest the one-jump prediction a_t + (1-t) v_hat (query_mode
    "raw_state" queries with a_t instead). Zero-norm cosines are skipped and
    counted; a grid point with no valid samples raises DegenerateGridPoint.

    heldout rows must be disjoint from the split that built the index, and
    actions/obs must already live in the model's (normalised) input space.
    """
    if query_mode not in ("one_jump", "raw_state"):
        raise InvalidArgument(f"unknown query_mode {query_mode!r}")
    t_grid = np.asarray(t_grid, dtype=np.float64)
    if t_grid.size == 0 or np.any(t_grid <= 0.0) or np.any(t_grid >= 1.0):
        raise InvalidArgument("t_grid must lie strictly inside (0,1)")
    a1 = np.asarray(heldout.actions, dtype=np.float64)
    obs = np.asarray(heldout.obs, dtype=np.float64)
    if a1.shape[0] == 0:
        raise InvalidArgument("empty heldout set")

    a1 = np.repeat(a1, n_draws, axis=0)
    obs = np.repeat(obs, n_draws, axis=0)
    a0 = rng.standard_normal(a1.shape)

    integrated = (
        _states_from_schedule(model, a0, obs, sched_for_states, t_grid)
        if sched_for_states is not None
        else None
    )

    cos_true = np.empty(t_grid.size)
    cos_knn = np.empty(t_grid.size)
    n_samples = np.empty(t_grid.size, dtype=int)
    for j, t in enumerate(t_grid):
        at = integrated[j] if integrated is not None else (1.0 - t) * a0 + t * a1
        v_hat = forward_batch(model, at, t, obs)
        v_true = a1 - a0
        queries = at + (1.0 - t) * v_hat if query_mode == "one_jump" else at
        a_knn = index.nearest_rows(queries)
        v_knn = a_knn - a0

        ct, ok_t = _row_cosines(v_hat, v_true)
        ck, ok_k = _row_cosines(v_hat, v_knn)
        ok = ok_t & ok_k
        if not np.any(ok):
            raise DegenerateGridPoint(f"all samples skipped at t={t}")
        cos_true[j] = ct[ok].mean()
        cos_knn[j] = ck[ok].mean()
        n_samples[j] = int(ok.sum())

    return DriftReport(t_grid, cos_true, cos_knn, n_samples)


@dataclass
class LipschitzEstimate:
    """Max velocity-difference ratio over probe pairs at one time."""

    t: float
    L_hat: float
    n_pairs: int


def make_probe_pairs(dim: int, rng, radii=(0.01, 0.1, 1.0), n_pairs: int = 64):
    """Distinct probe pairs cycling through shells of the given radii."""
    pairs = []
    while len(pairs) < n_pairs:
        r = radii[len(pairs) % len(radii)]
        x = rng.standard_normal(dim)
        y = rng.standard_normal(dim)
        x *= r / np.linalg.norm(x)
        y *= r / np.linalg.norm(y)
        if np.any(x != y):
            pairs.append((x, y))
    return pairs


def lipschitz_probe(field, t_list, probe_pairs, o=None):
    """Lower-bound the local Lipschitz constant at each time by pair ratios."""
    f = as_field_fn(field)
    for x, y in probe_pairs:
        if np.array_equal(x, y):
            raise InvalidArgument("probe pair with x == y")
    out = []
    for t in t_list:
        t = float(t)
        if not (0.0 <= t < 1.0):
            raise InvalidArgument(f"t must be in [0,1), got {t}")
        best = 0.0
        for x, y in probe_pairs:
            num = np.linalg.norm(f(np.asarray(x, dtype=np.float64), t, o) - f(np.asarray(y, dtype=np.float64), t, o))
            best = max(best, num / np.linalg.norm(np.asarray(x) - np.asarray(y)))
        out.append(LipschitzEstimate(t, best, len(probe_pairs)))
    return out


@dataclass
class CurvatureEstimate:
    """Finite-difference estimate of d/dt v + (grad_a v) v at one point."""

    t: float
    a: np.ndarray
    kappa_hat: np.ndarray
    fd_step: float

    @property
    def kappa_norm(self) -> float:
        return float(np.linalg.norm(self.kappa_hat))


def curvature_probe(field, a, t: float, h: float, o=None) -> CurvatureEstimate:
    """Symmetric-difference curvature estimate; stencil must stay in [0,1)."""
    if h <= 0:
        raise InvalidArgument(f"fd step h must be > 0, got {h}")
    t = float(t)
    if t - h < 0.0 or t + h >= 1.0:
        raise DomainError(f"stencil t +- {h} leaves [0,1) at t={t}")
    f = as_field_fn(field)
    a = np.asarray(a, dtype=np.float64)

    dt_term = (f(a, t + h, o) - f(a, t - h, o)) / (2.0 * h)
    v0 = f(a, t, o)
    nv = np.linalg.norm(v0)
    if nv == 0.0:
        jvp = np.zeros_like(v0)
    else:
        u = v0 / nv
        jvp = (f(a + h * u, t, o) - f(a - h * u, t, o)) / (2.0 * h) * nv
    return CurvatureEstimate(t, a, dt_term + jvp, h)


def truncation_probe(field: AnalyticField, a0, schedules):
    """Global endpoint error of each schedule against the closed-form flow."""
    if not isinstance(field, AnalyticField):
        raise InvalidArgument("truncation_probe needs an analytic field with an exact solution")
    a0 = np.asarray(a0, dtype=np.float64)
    exact = exact_solution(field, a0, 1.0)
    rows = []
    for sched in schedules:
        traj = integrate(field, a0, None, sched)
        rows.append((sched, float(np.linalg.norm(traj.final - exact))))
    return rows


def probe_table_csv(rows, columns, header_note: str | None = None) -> str:
    """Generic CSV with a self-describing header for probe outputs."""
    lines = []
    if header_note:
        lines.append(f"# {header_note}")
    lines.append(",".join(columns))
    for row in rows:
        lines.append(",".join(repr(x) if isinstance(x, float) else str(x) for x in row))
    return "\n".join(lines) + "\n"
