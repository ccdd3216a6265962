"""Damped least squares (Levenberg-Marquardt) refinement of designs.

The merit is minimized through its residual vector: squared residual norm
and merit agree exactly, so the damped normal equations drive the same
objective the global searcher saw.  Jacobians come from central finite
differences (one-sided against the box edges), and trial steps are clipped
into the box.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .niching import EvaluationRecord

# Batched residual protocol: rows of X map to rows of R; the mask flags
# rows whose residuals exist (feasible designs).
ResidualFn = Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]

_EVAL_CHUNK = 1024


class Termination(enum.Enum):
    MERIT_STAGNATION = "merit_stagnation"
    MAX_ITERATIONS = "max_iterations"
    INFEASIBLE_STEP_WALL = "infeasible_step_wall"


class InfeasibleNeighborhood(Exception):
    """A finite-difference stencil left the feasible region."""

    def __init__(self, coordinates: list[int]):
        super().__init__(
            f"infeasible stencil points for coordinates {coordinates}")
        self.coordinates = coordinates


@dataclass(frozen=True)
class RefineSettings:
    max_iter: int = 200
    damping0: float = 1e-10
    fd_step: float = 1e-6
    stagnation_tol: float = 1e-10   # relative merit improvement
    stagnation_steps: int = 3       # consecutive accepted steps
    singular_retries: int = 20


@dataclass
class RefineResult:
    start: np.ndarray
    refined: np.ndarray
    merit_before: float
    merit_after: float
    iterations: int
    converged: bool
    termination: Termination


def batched_residuals(fn: Callable[[np.ndarray], np.ndarray]) -> ResidualFn:
    """Adapt a plain residual function of one vector to the batched form."""

    def batched(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        x = np.atleast_2d(x)
        rows = [np.asarray(fn(row), dtype=float) for row in x]
        return np.stack(rows), np.ones(x.shape[0], dtype=bool)

    return batched


def _eval_chunked(residual_fn: ResidualFn,
                  x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if x.shape[0] <= _EVAL_CHUNK:
        r, f = residual_fn(x)
        return np.atleast_2d(r), np.asarray(f, dtype=bool).reshape(-1)
    parts_r = []
    parts_f = []
    for start in range(0, x.shape[0], _EVAL_CHUNK):
        r, f = residual_fn(x[start:start + _EVAL_CHUNK])
        parts_r.append(np.atleast_2d(r))
        parts_f.append(np.asarray(f, dtype=bool).reshape(-1))
    return np.concatenate(parts_r), np.concatenate(parts_f)


def _stencil_plan(x: np.ndarray, h: float, lo: np.ndarray, hi: np.ndarray):
    """Stencil rows and per-coordinate differencing plan for one point."""
    dim = x.size
    rows = []
    plan = []  # (kind, j, row offset) with kind in {central, hi_out, lo_out, frozen}
    for j in range(dim):
        up_ok = x[j] + h <= hi[j]
        dn_ok = x[j] - h >= lo[j]
        if up_ok and dn_ok:
            xp = x.copy(); xp[j] += h
            xm = x.copy(); xm[j] -= h
            plan.append(("central", j, len(rows)))
            rows.extend([xp, xm])
        elif dn_ok:
            xm = x.copy(); xm[j] -= h
            plan.append(("hi_out", j, len(rows)))
            rows.append(xm)
        elif up_ok:
            xp = x.copy(); xp[j] += h
            plan.append(("lo_out", j, len(rows)))
            rows.append(xp)
        else:
            plan.append(("frozen", j, -1))
    return rows, plan


def _assemble_jacobian(plan, res: np.ndarray, feas: np.ndarray,
                       r0: np.ndarray, h: float, dim: int) -> np.ndarray:
    """Columns from a stencil evaluation; raises on infeasible legs."""
    bad = [j for kind, j, at in plan
           if (kind == "central" and not (feas[at] and feas[at + 1]))
           or (kind in ("hi_out", "lo_out") and not feas[at])]
    if bad:
        raise InfeasibleNeighborhood(bad)
    jac = np.zeros((r0.size, dim))
    for kind, j, at in plan:
        if kind == "central":
            jac[:, j] = (res[at] - res[at + 1]) / (2.0 * h)
        elif kind == "hi_out":
            jac[:, j] = (r0 - res[at]) / h
        elif kind == "lo_out":
            jac[:, j] = (res[at] - r0) / h
    return jac


def jacobian_fd(residual_fn: ResidualFn, x: np.ndarray, h: float,
                lo: np.ndarray | None = None, hi: np.ndarray | None = None,
                r0: np.ndarray | None = None) -> np.ndarray:
    """Finite-difference Jacobian of the residual vector at ``x``.

    Central differences per coordinate; coordinates whose stencil would
    leave the box fall back to one-sided differences (zero columns for
    degenerate coordinates with ``lo == hi``).  Raises
    :class:`InfeasibleNeighborhood` when any required stencil point has no
    residual.
    """
    x = np.asarray(x, dtype=float)
    dim = x.size
    lo_arr = np.full(dim, -np.inf) if lo is None else np.asarray(lo, float)
    hi_arr = np.full(dim, np.inf) if hi is None else np.asarray(hi, float)

    rows, plan = _stencil_plan(x, h, lo_arr, hi_arr)
    if r0 is None:
        r, f = _eval_chunked(residual_fn, x[None, :])
        if not f[0]:
            raise InfeasibleNeighborhood(list(range(dim)))
        r0 = r[0]
    if rows:
        res, feas = _eval_chunked(residual_fn, np.stack(rows))
    else:
        res = np.empty((0, r0.size))
        feas = np.empty(0, dtype=bool)
    return _assemble_jacobian(plan, res, feas, r0, h, dim)


def _solve_damped(hess: np.ndarray, grad: np.ndarray, mu: float,
                  retries: int) -> tuple[np.ndarray | None, float]:
    """Solve (H + mu I) d = -g, escalating mu tenfold on singularity."""
    eye = np.eye(hess.shape[0])
    for _ in range(retries + 1):
        try:
            delta = np.linalg.solve(hess + mu * eye, -grad)
        except np.linalg.LinAlgError:
            mu *= 10.0
            continue
        if np.all(np.isfinite(delta)):
            return delta, mu
        mu *= 10.0
    return None, mu


def lm_refine(residual_fn: ResidualFn, x0: np.ndarray,
              lo: np.ndarray | None = None, hi: np.ndarray | None = None,
              settings: RefineSettings | None = None) -> RefineResult:
    """Refine one feasible point with damped normal equations.

    The damping factor halves on accepted and doubles on rejected trial
    steps; refinement stops after three consecutive accepted steps whose
    relative merit improvement falls below the stagnation tolerance, at the
    iteration cap, or against a wall (stencil infeasibility that survives
    one tenfold step shrink, or an unresolvable singular system).
    """
    results = refine_points(residual_fn, np.asarray(x0, float)[None, :],
                            lo, hi, settings)
    return results[0]


def refine_points(residual_fn: ResidualFn, starts: np.ndarray,
                  lo: np.ndarray | None = None,
                  hi: np.ndarray | None = None,
                  settings: RefineSettings | None = None) -> list[RefineResult]:
    """Refine a batch of feasible starting points in lockstep.

    Each point follows the exact single-point algorithm (its own damping,
    Jacobian and stagnation bookkeeping); batching only shares evaluation
    calls, so results match point-by-point refinement bit for bit.
    """
    s = settings or RefineSettings()
    x = np.atleast_2d(np.asarray(starts, dtype=float)).copy()
    npts, dim = x.shape
    lo_arr = np.full(dim, -np.inf) if lo is None else np.asarray(lo, float)
    hi_arr = np.full(dim, np.inf) if hi is None else np.asarray(hi, float)

    r_mat, feas = _eval_chunked(residual_fn, x)
    if not feas.all():
        bad = np.flatnonzero(~feas)
        raise ValueError(f"starting points must be feasible; rows {bad}")
    merit = (r_mat ** 2).sum(axis=1)

    mu = np.full(npts, s.damping0)
    h = np.full(npts, s.fd_step)
    h_shrunk = np.zeros(npts, dtype=bool)
    streak = np.zeros(npts, dtype=int)
    iterations = np.zeros(npts, dtype=int)
    termination: list[Termination | None] = [None] * npts
    need_jac = np.ones(npts, dtype=bool)
    jac = [None] * npts
    merit0 = merit.copy()
    x0 = x.copy()

    active = np.ones(npts, dtype=bool)
    while active.any():
        # (Re)build Jacobians where needed, batching all stencil rows of
        # all points into shared evaluation calls.
        for _attempt in range(2):
            want = np.flatnonzero(active & need_jac)
            if want.size == 0:
                break
            all_rows = []
            plans = {}
            for i in want:
                rows, plan = _stencil_plan(x[i], float(h[i]), lo_arr, hi_arr)
                plans[i] = (plan, len(all_rows))
                all_rows.extend(rows)
            if all_rows:
                res, feas = _eval_chunked(residual_fn, np.stack(all_rows))
            else:
                res = np.empty((0, r_mat.shape[1]))
                feas = np.empty(0, dtype=bool)
            for i in want:
                plan, base_at = plans[i]
                shifted = [(kind, j, at + base_at if at >= 0 else -1)
                           for kind, j, at in plan]
                try:
                    jac[i] = _assemble_jacobian(shifted, res, feas,
                                                r_mat[i], float(h[i]), dim)
                    need_jac[i] = False
                except InfeasibleNeighborhood:
                    if not h_shrunk[i]:
                        h_shrunk[i] = True
                        h[i] *= 0.1   # one retry at the smaller step
                    else:
                        termination[i] = Termination.INFEASIBLE_STEP_WALL
                        active[i] = False

        idx = np.flatnonzero(active)
        if idx.size == 0:
            break

        # Damped step per active point.
        trial = np.empty((idx.size, dim))
        dead = []
        for row, i in enumerate(idx):
            g = jac[i].T @ r_mat[i]
            hess = jac[i].T @ jac[i]
            delta, mu_i = _solve_damped(hess, g, float(mu[i]),
                                        s.singular_retries)
            mu[i] = mu_i
            if delta is None:
                termination[i] = Termination.INFEASIBLE_STEP_WALL
                active[i] = False
                dead.append(row)
                continue
            trial[row] = np.clip(x[i] + delta, lo_arr, hi_arr)
        if dead:
            keep = np.ones(idx.size, dtype=bool)
            keep[dead] = False
            idx = idx[keep]
            trial = trial[keep]
        if idx.size == 0:
            continue

        r_trial, f_trial = _eval_chunked(residual_fn, trial)
        m_trial = np.where(f_trial, (r_trial ** 2).sum(axis=1), np.inf)

        for row, i in enumerate(idx):
            iterations[i] += 1
            if m_trial[row] < merit[i]:
                rel = (merit[i] - m_trial[row]) / max(merit[i], 1e-300)
                x[i] = trial[row]
                r_mat[i] = r_trial[row]
                merit[i] = m_trial[row]
                mu[i] *= 0.5
                need_jac[i] = True
                streak[i] = streak[i] + 1 if rel < s.stagnation_tol else 0
                if streak[i] >= s.stagnation_steps:
                    termination[i] = Termination.MERIT_STAGNATION
                    active[i] = False
            else:
                mu[i] *= 2.0
            if active[i] and iterations[i] >= s.max_iter:
                termination[i] = Termination.MAX_ITERATIONS
                active[i] = False

    out = []
    for i in range(npts):
        term = termination[i] or Termination.MAX_ITERATIONS
        out.append(RefineResult(
            start=x0[i].copy(), refined=x[i].copy(),
            merit_before=float(merit0[i]), merit_after=float(merit[i]),
            iterations=int(iterations[i]),
            converged=term is Termination.MERIT_STAGNATION,
            termination=term))
    return out


def refine_archive(archive: Sequence[EvaluationRecord], depth: int,
                   residual_fn: ResidualFn,
                   lo: np.ndarray | None = None,
                   hi: np.ndarray | None = None,
                   settings: RefineSettings | None = None,
                   ) -> tuple[list[RefineResult], int]:
    """Refine every feasible record of the last ``depth`` generations.

    Returns the refinement results in archive order plus the number of
    infeasible records that were skipped.
    """
    if depth <= 0 or not archive:
        return [], 0
    generations = sorted({rec.generation for rec in archive})
    tail = set(generations[-depth:])
    candidates = [rec for rec in archive if rec.generation in tail]
    feasible = [rec for rec in candidates if rec.feasible]
    skipped = len(candidates) - len(feasible)
    if not feasible:
        return [], skipped
    starts = np.stack([rec.vector for rec in feasible])
    return refine_points(residual_fn, starts, lo, hi, settings), skipped
