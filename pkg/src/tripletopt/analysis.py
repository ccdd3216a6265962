"""Post-hoc landscape analysis: critical-point validation via finite
differences, duplicate filtering, pairwise-distance studies and the
infeasibility subsampling pipeline with normality tests."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .swilk import DegenerateSample, shapiro_wilk

# Perturbation sweep used to validate critical points: 1e-4 .. 1e-12.
DELTA_SWEEP = tuple(10.0 ** (-k) for k in range(4, 13))

DEFAULT_DUPLICATE_TOL = 1e-4
EIGEN_ZERO_REL_TOL = 1e-6

# Objective protocol: scalar f(x); an optional batched companion
# f_batch(X) -> values speeds up the stencils.
ScalarFn = Callable[[np.ndarray], float]
BatchFn = Callable[[np.ndarray], np.ndarray]


class InfeasibleStencil(Exception):
    """A finite-difference stencil hit infeasible (penalty) evaluations."""

    def __init__(self, coordinates: Sequence[int]):
        coords = sorted(set(int(c) for c in coordinates))
        super().__init__(f"infeasible stencil legs for coordinates {coords}")
        self.coordinates = coords


class Verdict(enum.Enum):
    MINIMUM = "minimum"
    MAXIMUM = "maximum"
    SADDLE = "saddle"
    DEGENERATE_FLAT = "degenerate_flat"
    INCONSISTENT = "inconsistent_across_deltas"


@dataclass
class CriticalPointReport:
    point: np.ndarray
    delta_sweep: tuple[float, ...]
    gradient_norm_per_delta: np.ndarray          # (n_deltas,)
    hessian_spectrum_per_delta: np.ndarray       # (n_deltas, dim)
    consensus_delta: float
    gradient_norm: float                         # at the consensus delta
    condition_number: float
    dominance_ratio: float                       # |largest| / |second largest|
    verdict: Verdict


def _evaluate(f: ScalarFn, points: np.ndarray,
              f_batch: BatchFn | None) -> np.ndarray:
    if f_batch is not None:
        return np.asarray(f_batch(points), dtype=float).reshape(-1)
    return np.array([float(f(p)) for p in points])


def _check_feasible(values: np.ndarray, coords: Sequence,
                    infeasible_value: float | None) -> None:
    """``coords[k]`` holds the coordinate(s) perturbed by stencil point k."""
    if infeasible_value is None:
        return
    bad = np.flatnonzero(values >= infeasible_value)
    if bad.size:
        offending: list[int] = []
        for k in bad:
            tag = coords[k]
            offending.extend(tag if isinstance(tag, tuple) else (tag,))
        raise InfeasibleStencil(offending)


def fd_gradient(f: ScalarFn, point: np.ndarray, delta: float,
                f_batch: BatchFn | None = None,
                infeasible_value: float | None = None) -> np.ndarray:
    """Central-difference gradient with step ``delta`` per coordinate.

    Stencil legs that evaluate to the infeasibility penalty raise
    :class:`InfeasibleStencil` naming the offending coordinates.
    """
    x = np.asarray(point, dtype=float)
    dim = x.size
    pts = np.repeat(x[None, :], 2 * dim, axis=0)
    for j in range(dim):
        pts[2 * j, j] += delta
        pts[2 * j + 1, j] -= delta
    values = _evaluate(f, pts, f_batch)
    _check_feasible(values, list(np.repeat(np.arange(dim), 2)),
                    infeasible_value)
    return (values[0::2] - values[1::2]) / (2.0 * delta)


def fd_hessian(f: ScalarFn, point: np.ndarray, delta: float,
               f_batch: BatchFn | None = None,
               infeasible_value: float | None = None,
               symmetrize: bool = True) -> np.ndarray:
    """Second-order central-stencil Hessian, symmetrized as (H + H^T)/2.

    Both triangles are evaluated independently; ``symmetrize=False``
    exposes the raw matrix so the stencil symmetry itself can be checked.
    """
    x = np.asarray(point, dtype=float)
    dim = x.size

    pts = [x]
    coords: list = [()]
    for j in range(dim):
        for sgn in (delta, -delta):
            p = x.copy()
            p[j] += sgn
            pts.append(p)
            coords.append(j)
    off_at = {}
    for i in range(dim):
        for j in range(dim):
            if i == j:
                continue
            off_at[(i, j)] = len(pts)
            for si, sj in ((delta, delta), (delta, -delta),
                           (-delta, delta), (-delta, -delta)):
                p = x.copy()
                p[i] += si
                p[j] += sj
                pts.append(p)
                coords.append((i, j))
    values = _evaluate(f, np.stack(pts), f_batch)
    _check_feasible(values, coords, infeasible_value)

    f0 = values[0]
    hess = np.empty((dim, dim))
    for j in range(dim):
        fp = values[1 + 2 * j]
        fm = values[2 + 2 * j]
        hess[j, j] = (fp - 2.0 * f0 + fm) / (delta * delta)
    for i in range(dim):
        for j in range(dim):
            if i == j:
                continue
            at = off_at[(i, j)]
            fpp, fpm, fmp, fmm = values[at:at + 4]
            hess[i, j] = (fpp - fpm - fmp + fmm) / (4.0 * delta * delta)
    if not symmetrize:
        return hess
    return 0.5 * (hess + hess.T)


def classify_spectrum(eigenvalues: np.ndarray) -> Verdict:
    """Sign-pattern verdict with a relative zero tolerance."""
    ev = np.asarray(eigenvalues, dtype=float)
    tol = EIGEN_ZERO_REL_TOL * float(np.abs(ev).max()) if np.any(ev != 0) \
        else 0.0
    pos = ev > tol
    neg = ev < -tol
    if pos.all():
        return Verdict.MINIMUM
    if neg.all():
        return Verdict.MAXIMUM
    if pos.any() and neg.any():
        return Verdict.SADDLE
    return Verdict.DEGENERATE_FLAT


def classify_critical_point(f: ScalarFn, point: np.ndarray,
                            deltas: Sequence[float] = DELTA_SWEEP,
                            f_batch: BatchFn | None = None,
                            infeasible_value: float | None = None,
                            ) -> CriticalPointReport:
    """Gradient norms and Hessian spectra over a perturbation sweep.

    The consensus step is the one minimizing the gradient norm (largest
    step on ties); the verdict comes from the consensus spectrum and is
    downgraded to ``inconsistent_across_deltas`` when the two best steps
    disagree.
    """
    if not deltas:
        raise ValueError("delta sweep must be non-empty")
    x = np.asarray(point, dtype=float)
    dim = x.size
    n_d = len(deltas)
    grad_norms = np.full(n_d, np.nan)
    spectra = np.full((n_d, dim), np.nan)
    for i, dl in enumerate(deltas):
        g = fd_gradient(f, x, dl, f_batch, infeasible_value)
        h = fd_hessian(f, x, dl, f_batch, infeasible_value)
        grad_norms[i] = float(np.linalg.norm(g))
        spectra[i] = np.linalg.eigvalsh(h)

    # argmin with ties resolved toward the largest (most stable) step
    best = int(np.argmin(grad_norms))
    order = np.argsort(grad_norms, kind="stable")
    verdict = classify_spectrum(spectra[best])
    if n_d > 1:
        second = int(order[1]) if int(order[0]) == best else int(order[0])
        if classify_spectrum(spectra[second]) is not verdict:
            verdict = Verdict.INCONSISTENT

    ev_abs = np.abs(spectra[best])
    ev_sorted = np.sort(ev_abs)[::-1]
    cond = float(ev_sorted[0] / ev_sorted[-1]) if ev_sorted[-1] > 0 \
        else math.inf
    dom = float(ev_sorted[0] / ev_sorted[1]) if dim > 1 and ev_sorted[1] > 0 \
        else math.inf
    return CriticalPointReport(
        point=x.copy(), delta_sweep=tuple(deltas),
        gradient_norm_per_delta=grad_norms,
        hessian_spectrum_per_delta=spectra,
        consensus_delta=float(deltas[best]),
        gradient_norm=float(grad_norms[best]),
        condition_number=cond, dominance_ratio=dom, verdict=verdict)


# ----------------------------------------------------------------------
# Duplicate filtering and distance studies
# ----------------------------------------------------------------------

@dataclass
class DeduplicationResult:
    points: np.ndarray        # representatives, sorted by ascending merit
    merits: np.ndarray
    labels: np.ndarray        # cluster id per input point
    cluster_sizes: np.ndarray


def filter_duplicates(points: np.ndarray, merits: np.ndarray,
                      tol: float = DEFAULT_DUPLICATE_TOL,
                      ) -> DeduplicationResult:
    """Single-linkage clustering at ``tol``; keeps the best merit per
    cluster and orders representatives by ascending merit."""
    if tol <= 0:
        raise ValueError("tolerance must be positive")
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    ms = np.asarray(merits, dtype=float).reshape(-1)
    n = pts.shape[0]
    if ms.size != n:
        raise ValueError("points and merits must align")

    parent = np.arange(n)

    def find(a: int) -> int:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    # single linkage: any pair within tol joins the clusters
    for i in range(n):
        d2 = ((pts[i + 1:] - pts[i]) ** 2).sum(axis=1)
        for off in np.flatnonzero(d2 <= tol * tol):
            ra, rb = find(i), find(i + 1 + int(off))
            if ra != rb:
                parent[ra] = rb

    roots = np.array([find(i) for i in range(n)])
    reps = []
    for root in np.unique(roots):
        members = np.flatnonzero(roots == root)
        best = min(members, key=lambda k: (ms[k], tuple(pts[k])))
        reps.append((best, members.size))
    reps.sort(key=lambda br: (ms[br[0]], tuple(pts[br[0]])))

    order = [b for b, _ in reps]
    labels = np.empty(n, dtype=int)
    for new_id, (b, _) in enumerate(reps):
        labels[roots == roots[b]] = new_id
    return DeduplicationResult(
        points=pts[order].copy(), merits=ms[order].copy(), labels=labels,
        cluster_sizes=np.array([s for _, s in reps]))


@dataclass
class DistanceStudy:
    """Pairwise (or cross-pairwise) Euclidean distance portrait."""

    label: str
    distances: np.ndarray         # flat: upper triangle, or full cross grid
    per_solution: np.ndarray      # (m, ...) distance rows per left-set point
    merits: np.ndarray | None
    stats: dict

    @property
    def count(self) -> int:
        return int(self.distances.size)


def distance_study(set_a: np.ndarray, set_b: np.ndarray | None = None,
                   label: str = "", merits: np.ndarray | None = None,
                   ) -> DistanceStudy:
    """All pairwise distances within ``set_a`` or across two sets."""
    a = np.atleast_2d(np.asarray(set_a, dtype=float))
    if set_b is None:
        if a.shape[0] < 1:
            raise ValueError("need at least one point")
        diff = a[:, None, :] - a[None, :, :]
        dm = np.sqrt((diff ** 2).sum(axis=2))
        iu = np.triu_indices(a.shape[0], k=1)
        flat = dm[iu]
        per = dm
    else:
        b = np.atleast_2d(np.asarray(set_b, dtype=float))
        if a.shape[0] < 1 or b.shape[0] < 1:
            raise ValueError("both sets must be non-empty")
        diff = a[:, None, :] - b[None, :, :]
        per = np.sqrt((diff ** 2).sum(axis=2))
        flat = per.reshape(-1)
    stats = {
        "count": int(flat.size),
        "min": float(flat.min()) if flat.size else math.nan,
        "max": float(flat.max()) if flat.size else math.nan,
        "mean": float(flat.mean()) if flat.size else math.nan,
    }
    return DistanceStudy(label=label, distances=flat, per_solution=per,
                         merits=None if merits is None
                         else np.asarray(merits, dtype=float),
                         stats=stats)


# ----------------------------------------------------------------------
# Infeasibility pocket statistics
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class InfeasibilityStudyConfig:
    reps: int = 100
    subsample: int = 500
    k_minima: int = 10
    sw_subsample: int = 5000
    alpha: float = 0.05
    rng_seed: int = 0

    def __post_init__(self):
        if min(self.reps, self.subsample, self.k_minima,
               self.sw_subsample) < 1:
            raise ValueError("counts must be positive")
        n_pairs = self.subsample * (self.subsample - 1) // 2
        if self.k_minima >= n_pairs:
            raise ValueError("k_minima must be below the pair count")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")


class InsufficientPopulation(ValueError):
    pass


@dataclass
class InfeasibilityStudy:
    minima: np.ndarray          # (reps, k_minima) smallest pairwise distances
    p_values: np.ndarray        # (reps,) Shapiro-Wilk p (NaN where degenerate)
    sw_failed: np.ndarray       # (reps,) bool, degenerate-sample repetitions
    alpha: float
    eligible_count: int

    @property
    def fraction_normal(self) -> float:
        ok = ~self.sw_failed
        if not ok.any():
            return math.nan
        return float((self.p_values[ok] > self.alpha).mean())


def strictly_inside(points: np.ndarray, lo: np.ndarray, hi: np.ndarray,
                    margin: float = 1e-9) -> np.ndarray:
    """Mask of points farther than ``margin`` from every box face."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    return ((pts > np.asarray(lo) + margin)
            & (pts < np.asarray(hi) - margin)).all(axis=1)


def infeasibility_study(points: np.ndarray, cfg: InfeasibilityStudyConfig,
                        lo: np.ndarray, hi: np.ndarray,
                        ) -> InfeasibilityStudy:
    """Repeated subsampling portrait of the infeasible point cloud.

    Per repetition: draw ``subsample`` eligible points without
    replacement, record the ``k_minima`` smallest pairwise distances, then
    test ``sw_subsample`` distances (drawn without replacement) for
    normality.  Only points strictly inside the open box are eligible.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    eligible = pts[strictly_inside(pts, lo, hi)]
    if eligible.shape[0] < cfg.subsample:
        raise InsufficientPopulation(
            f"{eligible.shape[0]} eligible points < subsample "
            f"{cfg.subsample}")

    minima = np.empty((cfg.reps, cfg.k_minima))
    p_values = np.full(cfg.reps, np.nan)
    sw_failed = np.zeros(cfg.reps, dtype=bool)
    streams = np.random.SeedSequence(cfg.rng_seed).spawn(cfg.reps)
    for rep in range(cfg.reps):
        rng = np.random.default_rng(streams[rep])
        chosen = eligible[rng.choice(eligible.shape[0], cfg.subsample,
                                     replace=False)]
        diff = chosen[:, None, :] - chosen[None, :, :]
        dm = np.sqrt((diff ** 2).sum(axis=2))
        iu = np.triu_indices(cfg.subsample, k=1)
        dists = dm[iu]
        k = cfg.k_minima
        minima[rep] = np.sort(np.partition(dists, k - 1)[:k])
        take = min(cfg.sw_subsample, dists.size)
        sample = dists[rng.choice(dists.size, take, replace=False)]
        try:
            _, p_values[rep] = shapiro_wilk(sample)
        except DegenerateSample:
            sw_failed[rep] = True
    return InfeasibilityStudy(minima=minima, p_values=p_values,
                              sw_failed=sw_failed, alpha=cfg.alpha,
                              eligible_count=int(eligible.shape[0]))
