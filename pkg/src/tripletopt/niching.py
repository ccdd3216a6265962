"""Radius-based niching over parallel (1,lambda) CMA-ES kernels.

Each generation every kernel samples ``lam`` offspring from its own
Gaussian, all offspring are evaluated and archived, each kernel performs a
non-elitist (1,lambda) update from its own best offspring, and a greedy
dynamic peak set is formed over the whole generation under the fixed niche
radius.  On the reset cycle, kernels whose peaks were not admitted to the
peak set are re-seeded uniformly in the box.

Step-size control uses cumulative step-size adaptation and the covariance
follows the rank-one path update; the single-parent constants below are
the canonical choices for the search dimension (see the constants table in
the README).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .optics import DOMAIN_HI, DOMAIN_LO

Objective = Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]


class ObjectiveFailure(Exception):
    """The evaluation callback signalled an unrecoverable fault."""


@dataclass(frozen=True)
class NichingConfig:
    """Run parameters of the niching optimizer."""

    q: int = 20                  # target niches
    p: int = 5                   # extra dynamic peaks
    lam: int = 10                # offspring per kernel
    kappa: int = 20              # non-peak reset cycle, generations
    sigma0: float = 0.05         # initial global step size
    rho: float = 0.18            # niche radius
    budget: int = 25000          # max objective evaluations
    domain_lo: np.ndarray = field(
        default_factory=lambda: np.full(6, DOMAIN_LO))
    domain_hi: np.ndarray = field(
        default_factory=lambda: np.full(6, DOMAIN_HI))
    archive_depth: int = 10      # generations refined by the local searcher

    def __post_init__(self):
        lo = np.asarray(self.domain_lo, dtype=float).reshape(-1).copy()
        hi = np.asarray(self.domain_hi, dtype=float).reshape(-1).copy()
        if lo.shape != hi.shape:
            raise ValueError("domain bounds must have equal length")
        if np.any(hi < lo):
            raise ValueError("domain upper bounds must dominate lower bounds")
        if min(self.q, self.lam) < 1 or self.p < 0:
            raise ValueError("q, lam must be >= 1 and p >= 0")
        if self.kappa < 1 or self.sigma0 <= 0 or self.rho <= 0:
            raise ValueError("kappa, sigma0 and rho must be positive")
        if self.budget < self.evals_per_generation:
            raise ValueError("budget below one generation of evaluations")
        if self.archive_depth < 0:
            raise ValueError("archive depth must be non-negative")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "domain_lo", lo)
        object.__setattr__(self, "domain_hi", hi)

    @property
    def dim(self) -> int:
        return self.domain_lo.size

    @property
    def n_kernels(self) -> int:
        return self.q + self.p

    @property
    def evals_per_generation(self) -> int:
        return self.n_kernels * self.lam


@dataclass(eq=False)
class EvaluationRecord:
    """One archived objective evaluation."""

    vector: np.ndarray
    merit: float
    feasible: bool
    generation: int
    niche_id: int


@dataclass(frozen=True)
class CMAConstants:
    """Single-parent CMA strategy constants for a given dimension."""

    dim: int
    c_sigma: float
    d_sigma: float
    c_c: float
    c_1: float
    chi_n: float

    @classmethod
    def for_dimension(cls, dim: int) -> "CMAConstants":
        mu_eff = 1.0
        c_sigma = (mu_eff + 2.0) / (dim + mu_eff + 5.0)
        d_sigma = (1.0
                   + 2.0 * max(0.0, math.sqrt((mu_eff - 1.0) / (dim + 1.0)) - 1.0)
                   + c_sigma)
        c_c = (4.0 + mu_eff / dim) / (dim + 4.0 + 2.0 * mu_eff / dim)
        c_1 = 2.0 / ((dim + 1.3) ** 2 + mu_eff)
        chi_n = math.sqrt(dim) * (1.0 - 1.0 / (4.0 * dim)
                                  + 1.0 / (21.0 * dim * dim))
        return cls(dim, c_sigma, d_sigma, c_c, c_1, chi_n)


@dataclass
class NicheState:
    """One (1,lambda) kernel: peak individual plus strategy state."""

    peak: np.ndarray
    fitness: float
    sigma: float
    covariance: np.ndarray
    path_sigma: np.ndarray
    path_cov: np.ndarray
    age: int = 0

    @classmethod
    def fresh(cls, mean: np.ndarray, sigma0: float) -> "NicheState":
        dim = mean.size
        return cls(peak=np.array(mean, dtype=float), fitness=math.inf,
                   sigma=float(sigma0), covariance=np.eye(dim),
                   path_sigma=np.zeros(dim), path_cov=np.zeros(dim), age=0)

    def decomposition(self) -> tuple[np.ndarray, np.ndarray]:
        """Eigenvectors and eigenvalues of the covariance, floored to keep
        the matrix positive definite."""
        vals, vecs = np.linalg.eigh(self.covariance)
        top = vals[-1]
        if top <= 0.0:
            return np.eye(self.covariance.shape[0]), np.ones_like(vals)
        floor = 1e-14 * top
        if vals[0] < floor:
            vals = np.maximum(vals, floor)
        return vecs, vals


@dataclass
class DynamicPeakSet:
    """Greedy, fitness-ordered set of mutually separated peak records."""

    records: list[EvaluationRecord]
    rho: float

    def __len__(self) -> int:
        return len(self.records)

    def vectors(self) -> np.ndarray:
        if not self.records:
            return np.empty((0, 0))
        return np.stack([r.vector for r in self.records])

    def merits(self) -> np.ndarray:
        return np.array([r.merit for r in self.records])

    def min_separation(self) -> float:
        v = self.vectors()
        if len(self.records) < 2:
            return math.inf
        diff = v[:, None, :] - v[None, :, :]
        dist = np.sqrt((diff ** 2).sum(axis=2))
        iu = np.triu_indices(len(self.records), k=1)
        return float(dist[iu].min())

    def verify_separation(self) -> None:
        if self.min_separation() < self.rho:
            raise AssertionError(
                f"dynamic peaks closer than rho={self.rho}")


def repair_to_boundary(x: np.ndarray, lo: np.ndarray,
                       hi: np.ndarray) -> np.ndarray:
    """Coordinate-wise clip onto the closed box."""
    return np.clip(x, lo, hi)


def select_dynamic_peaks(population: Sequence[EvaluationRecord], rho: float,
                         max_peaks: int) -> DynamicPeakSet:
    """Greedy peak selection: sweep the population in ascending merit and
    accept a candidate iff it keeps distance >= rho to all accepted peaks.

    Merit ties are broken by lexicographic vector order so replays are
    deterministic.
    """
    if not population:
        raise ValueError("population must be non-empty")
    if rho <= 0:
        raise ValueError("rho must be positive")
    vectors = np.stack([r.vector for r in population])
    merits = np.array([r.merit for r in population])
    keys = tuple(vectors[:, j] for j in reversed(range(vectors.shape[1])))
    order = np.lexsort(keys + (merits,))

    accepted: list[int] = []
    accepted_vecs = np.empty((0, vectors.shape[1]))
    rho2 = rho * rho
    for i in order:
        if accepted:
            d2 = ((accepted_vecs - vectors[i]) ** 2).sum(axis=1)
            if (d2 < rho2).any():
                continue
        accepted.append(int(i))
        accepted_vecs = np.vstack([accepted_vecs, vectors[i]])
        if len(accepted) >= max_peaks:
            break
    return DynamicPeakSet([population[i] for i in accepted], rho)


def sample_offspring(kernel: NicheState, lam: int, rng: np.random.Generator,
                     lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Draw ``lam`` offspring from N(peak, sigma^2 C), boundary-repaired."""
    vecs, vals = kernel.decomposition()
    z = rng.standard_normal((lam, kernel.peak.size))
    y = (z * np.sqrt(vals)) @ vecs.T
    x = kernel.peak[None, :] + kernel.sigma * y
    return repair_to_boundary(x, lo, hi)


def update_kernel(kernel: NicheState, best_vector: np.ndarray,
                  best_merit: float,
                  constants: CMAConstants) -> NicheState:
    """Non-elitist (1,lambda) update: the best offspring replaces the peak;
    the step size and covariance adapt along the cumulative paths."""
    cs, ds = constants.c_sigma, constants.d_sigma
    cc, c1 = constants.c_c, constants.c_1
    chi = constants.chi_n

    sigma = kernel.sigma
    y = (np.asarray(best_vector, dtype=float) - kernel.peak) / sigma
    vecs, vals = kernel.decomposition()
    y_white = vecs @ ((vecs.T @ y) / np.sqrt(vals))

    p_sigma = (1.0 - cs) * kernel.path_sigma \
        + math.sqrt(cs * (2.0 - cs)) * y_white
    age = kernel.age + 1
    norm_ps = float(np.linalg.norm(p_sigma))
    denom = math.sqrt(1.0 - (1.0 - cs) ** (2 * age))
    h_sigma = 1.0 if norm_ps / denom < (1.4 + 2.0 / (constants.dim + 1.0)) * chi \
        else 0.0

    p_c = (1.0 - cc) * kernel.path_cov \
        + h_sigma * math.sqrt(cc * (2.0 - cc)) * y
    cov = ((1.0 - c1) * kernel.covariance
           + c1 * (np.outer(p_c, p_c)
                   + (1.0 - h_sigma) * cc * (2.0 - cc) * kernel.covariance))
    cov = 0.5 * (cov + cov.T)
    sigma_new = sigma * math.exp((cs / ds) * (norm_ps / chi - 1.0))
    sigma_new = max(sigma_new, 1e-300)

    return NicheState(peak=np.array(best_vector, dtype=float),
                      fitness=float(best_merit), sigma=sigma_new,
                      covariance=cov, path_sigma=p_sigma, path_cov=p_c,
                      age=age)


def reset_non_peaks(kernels: list[NicheState], dps: DynamicPeakSet,
                    generation: int, kappa: int, rng: np.random.Generator,
                    config: NichingConfig,
                    peak_records: list[EvaluationRecord]) -> list[NicheState]:
    """Re-seed kernels whose peak was not admitted to the dynamic peak set.

    Acts only on the reset cycle (generation divisible by ``kappa``);
    ``peak_records`` maps each kernel to the archived record of its current
    peak individual, matched against the peak set by identity.
    """
    if generation % kappa != 0:
        return kernels
    admitted = set(id(r) for r in dps.records)
    out: list[NicheState] = []
    for kernel, rec in zip(kernels, peak_records):
        if rec is not None and id(rec) in admitted:
            out.append(kernel)
        else:
            mean = rng.uniform(config.domain_lo, config.domain_hi)
            out.append(NicheState.fresh(mean, config.sigma0))
    return out


@dataclass
class NichingRun:
    """Archive and final peak set of one optimizer run."""

    archive: list[EvaluationRecord]
    final_peaks: DynamicPeakSet
    generations: int
    evaluations: int
    aborted: bool = False
    error: str | None = None

    def by_generation(self) -> dict[int, list[EvaluationRecord]]:
        groups: dict[int, list[EvaluationRecord]] = {}
        for rec in self.archive:
            groups.setdefault(rec.generation, []).append(rec)
        return groups


def run_niching(config: NichingConfig, objective: Objective,
                seed, verify_separation: bool = True) -> NichingRun:
    """Run the niching loop until the evaluation budget is exhausted.

    ``objective`` maps an (m, dim) array of repaired candidates to a pair
    ``(values, feasible)``; every call contributes one archived record per
    row.  Identical ``(config, objective, seed)`` reproduce the archive
    exactly.  A raising objective aborts the run with the partial archive
    flagged.
    """
    rng = np.random.default_rng(seed)
    constants = CMAConstants.for_dimension(config.dim)
    lo, hi = config.domain_lo, config.domain_hi
    kernels = [NicheState.fresh(rng.uniform(lo, hi), config.sigma0)
               for _ in range(config.n_kernels)]

    archive: list[EvaluationRecord] = []
    dps = DynamicPeakSet([], config.rho)
    evaluations = 0
    generation = 0
    per_gen = config.evals_per_generation

    while evaluations + per_gen <= config.budget:
        generation += 1
        offspring = [sample_offspring(k, config.lam, rng, lo, hi)
                     for k in kernels]
        stacked = np.concatenate(offspring, axis=0)
        try:
            values, feasible = objective(stacked)
        except Exception as exc:  # noqa: BLE001 - flagged, not swallowed
            return NichingRun(archive, dps, generation - 1, evaluations,
                              aborted=True, error=str(exc))
        values = np.asarray(values, dtype=float).reshape(-1)
        feasible = np.asarray(feasible, dtype=bool).reshape(-1)
        if values.size != stacked.shape[0]:
            return NichingRun(archive, dps, generation - 1, evaluations,
                              aborted=True,
                              error="objective returned wrong batch size")
        evaluations += stacked.shape[0]

        gen_records = [
            EvaluationRecord(vector=stacked[i].copy(), merit=float(values[i]),
                             feasible=bool(feasible[i]),
                             generation=generation,
                             niche_id=i // config.lam)
            for i in range(stacked.shape[0])
        ]
        archive.extend(gen_records)

        peak_records: list[EvaluationRecord] = []
        for k in range(config.n_kernels):
            chunk = slice(k * config.lam, (k + 1) * config.lam)
            best_local = int(np.argmin(values[chunk]))
            best_rec = gen_records[k * config.lam + best_local]
            kernels[k] = update_kernel(kernels[k], best_rec.vector,
                                       best_rec.merit, constants)
            peak_records.append(best_rec)

        dps = select_dynamic_peaks(gen_records, config.rho,
                                   config.n_kernels)
        if verify_separation:
            dps.verify_separation()
        kernels = reset_non_peaks(kernels, dps, generation, config.kappa,
                                  rng, config, peak_records)

    return NichingRun(archive, dps, generation, evaluations)


def scalar_objective(fn: Callable[[np.ndarray], float]) -> Objective:
    """Adapt a scalar function of one vector to the batched protocol."""

    def batched(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        x = np.atleast_2d(x)
        values = np.array([float(fn(row)) for row in x])
        return values, np.ones(x.shape[0], dtype=bool)

    return batched
