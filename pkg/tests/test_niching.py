import math

import numpy as np
import pytest

from tripletopt.benchmarks import himmelblau_box, himmelblau_domain, sphere_offset
from tripletopt.niching import (
    CMAConstants,
    DynamicPeakSet,
    EvaluationRecord,
    NicheState,
    NichingConfig,
    NichingRun,
    repair_to_boundary,
    reset_non_peaks,
    run_niching,
    sample_offspring,
    select_dynamic_peaks,
    update_kernel,
)


def record(vec, merit, gen=1, niche=0):
    return EvaluationRecord(vector=np.asarray(vec, dtype=float),
                            merit=float(merit), feasible=True,
                            generation=gen, niche_id=niche)


def pad(x, y=None):
    v = np.zeros(6)
    v[0] = x
    if y is not None:
        v[1] = y
    return v


def brute_force_greedy(population, rho, max_peaks):
    """Independent re-implementation of the greedy sweep for the oracle."""
    order = sorted(range(len(population)),
                   key=lambda i: (population[i].merit,
                                  tuple(population[i].vector)))
    chosen = []
    for i in order:
        v = population[i].vector
        if all(np.linalg.norm(v - population[j].vector) >= rho
               for j in chosen):
            chosen.append(i)
        if len(chosen) == max_peaks:
            break
    return [population[i] for i in chosen]


class TestDynamicPeaks:
    def test_toy_example(self):
        pop = [record(pad(0.0), 1.0), record(pad(0.05), 2.0),
               record(pad(0.5), 3.0)]
        dps = select_dynamic_peaks(pop, rho=0.18, max_peaks=2)
        got = sorted(r.vector[0] for r in dps.records)
        assert got == [0.0, 0.5]
        oracle = brute_force_greedy(pop, 0.18, 2)
        assert [r.merit for r in dps.records] == [r.merit for r in oracle]

    def test_single_individual(self):
        pop = [record(pad(0.1), 5.0)]
        dps = select_dynamic_peaks(pop, rho=0.18, max_peaks=4)
        assert len(dps) == 1 and dps.records[0] is pop[0]

    def test_all_within_radius_single_peak(self):
        pop = [record(pad(0.01 * i), float(i)) for i in range(5)]
        dps = select_dynamic_peaks(pop, rho=0.18, max_peaks=5)
        assert len(dps) == 1
        assert dps.records[0].merit == 0.0

    def test_matches_brute_force_on_random_populations(self):
        rng = np.random.default_rng(17)
        for _ in range(20):
            pop = [record(rng.uniform(-0.25, 0.25, 6), rng.uniform(0, 5))
                   for _ in range(40)]
            dps = select_dynamic_peaks(pop, rho=0.18, max_peaks=10)
            oracle = brute_force_greedy(pop, 0.18, 10)
            assert [id(r) for r in dps.records] == [id(r) for r in oracle]
            dps.verify_separation()

    def test_merit_ties_broken_lexicographically(self):
        pop = [record(pad(0.2), 1.0), record(pad(-0.2), 1.0)]
        dps = select_dynamic_peaks(pop, rho=0.18, max_peaks=1)
        assert dps.records[0].vector[0] == -0.2


class TestSampling:
    def test_sigma_zero_limit(self):
        k = NicheState.fresh(np.full(6, 0.1), sigma0=1e-300)
        lo, hi = np.full(6, -0.25), np.full(6, 0.25)
        x = sample_offspring(k, 8, np.random.default_rng(0), lo, hi)
        assert np.allclose(x, 0.1, atol=1e-250)

    def test_sample_mean_law_of_large_numbers(self):
        k = NicheState.fresh(np.zeros(6), sigma0=0.05)
        lo, hi = np.full(6, -10.0), np.full(6, 10.0)  # wide: no clipping
        x = sample_offspring(k, 100000, np.random.default_rng(42), lo, hi)
        bound = 3.0 * 0.05 / math.sqrt(100000)
        assert np.all(np.abs(x.mean(axis=0)) < bound)

    def test_seed_reproducibility(self):
        k = NicheState.fresh(np.zeros(6), sigma0=0.05)
        lo, hi = np.full(6, -0.25), np.full(6, 0.25)
        a = sample_offspring(k, 10, np.random.default_rng(9), lo, hi)
        b = sample_offspring(k, 10, np.random.default_rng(9), lo, hi)
        assert np.array_equal(a, b)

    def test_offspring_respect_boundary(self):
        k = NicheState.fresh(np.full(6, 0.24), sigma0=0.3)
        lo, hi = np.full(6, -0.25), np.full(6, 0.25)
        x = sample_offspring(k, 50, np.random.default_rng(1), lo, hi)
        assert np.all(x >= lo) and np.all(x <= hi)


class TestRepair:
    def test_clip_single_coordinate(self):
        lo, hi = np.full(6, -0.25), np.full(6, 0.25)
        out = repair_to_boundary(np.array([0.30, 0, 0, 0, 0, 0.0]), lo, hi)
        assert np.array_equal(out, [0.25, 0, 0, 0, 0, 0])

    def test_interior_identity(self):
        lo, hi = np.full(6, -0.25), np.full(6, 0.25)
        x = np.array([0.1, -0.2, 0.0, 0.05, -0.01, 0.2])
        assert np.array_equal(repair_to_boundary(x, lo, hi), x)

    def test_full_clip(self):
        lo, hi = np.full(6, -0.25), np.full(6, 0.25)
        out = repair_to_boundary(np.full(6, -0.9), lo, hi)
        assert np.array_equal(out, np.full(6, -0.25))


class TestKernelUpdate:
    def test_sphere_convergence(self):
        # single kernel on a shifted sphere: merit and sigma both shrink
        constants = CMAConstants.for_dimension(6)
        center = np.full(6, 0.05)
        objective = sphere_offset(center)
        lo, hi = np.full(6, -0.25), np.full(6, 0.25)
        rng = np.random.default_rng(123)
        k = NicheState.fresh(np.full(6, -0.2), sigma0=0.05)
        first_best = None
        for _ in range(200):
            x = sample_offspring(k, 10, rng, lo, hi)
            vals, _ = objective(x)
            i = int(np.argmin(vals))
            k = update_kernel(k, x[i], float(vals[i]), constants)
            if first_best is None:
                first_best = k.fitness
        assert k.fitness <= first_best / 10.0
        assert k.sigma <= 0.05 / 10.0
        assert np.linalg.norm(k.peak - center) < 0.01

    def test_comma_selection_is_non_elitist(self):
        constants = CMAConstants.for_dimension(6)
        k = NicheState.fresh(np.zeros(6), sigma0=0.05)
        k.fitness = 0.0  # pretend the parent was perfect
        worse = np.full(6, 0.01)
        k2 = update_kernel(k, worse, 5.0, constants)
        assert np.array_equal(k2.peak, worse)
        assert k2.fitness == 5.0
        assert k2.age == 1

    def test_covariance_stays_symmetric_positive(self):
        constants = CMAConstants.for_dimension(6)
        rng = np.random.default_rng(5)
        k = NicheState.fresh(np.zeros(6), sigma0=0.05)
        for _ in range(50):
            step = rng.normal(scale=0.01, size=6)
            k = update_kernel(k, k.peak + step, rng.uniform(), constants)
            assert np.array_equal(k.covariance, k.covariance.T)
            _, vals = k.decomposition()
            assert np.all(vals > 0)

    def test_pinned_constants_for_dimension_6(self):
        c = CMAConstants.for_dimension(6)
        assert c.c_sigma == pytest.approx(0.25)
        assert c.d_sigma == pytest.approx(1.25)
        assert c.c_c == pytest.approx(25.0 / 62.0)
        assert c.c_1 == pytest.approx(2.0 / (7.3 ** 2 + 1.0))
        assert c.chi_n == pytest.approx(
            math.sqrt(6) * (1 - 1 / 24 + 1 / (21 * 36)))


class TestResets:
    def _setup(self):
        cfg = NichingConfig(q=2, p=1, lam=2, budget=1000)
        kernels = [NicheState.fresh(np.full(6, 0.1 * i), 0.05)
                   for i in range(3)]
        recs = [record(k.peak, float(i)) for i, k in enumerate(kernels)]
        return cfg, kernels, recs

    def test_off_cycle_no_reset(self):
        cfg, kernels, recs = self._setup()
        dps = DynamicPeakSet([recs[0]], rho=0.18)  # only kernel 0 admitted
        out = reset_non_peaks(kernels, dps, generation=19, kappa=20,
                              rng=np.random.default_rng(0), config=cfg,
                              peak_records=recs)
        assert all(a is b for a, b in zip(out, kernels))

    def test_on_cycle_excluded_kernel_reset(self):
        cfg, kernels, recs = self._setup()
        kernels[1].sigma = 1e-7
        kernels[1].covariance = np.diag(np.linspace(0.1, 2.0, 6))
        dps = DynamicPeakSet([recs[0], recs[2]], rho=0.18)
        out = reset_non_peaks(kernels, dps, generation=20, kappa=20,
                              rng=np.random.default_rng(0), config=cfg,
                              peak_records=recs)
        assert out[0] is kernels[0] and out[2] is kernels[2]
        assert out[1] is not kernels[1]
        assert out[1].sigma == 0.05
        assert np.array_equal(out[1].covariance, np.eye(6))
        assert np.all(out[1].peak >= cfg.domain_lo)
        assert np.all(out[1].peak <= cfg.domain_hi)

    def test_all_admitted_no_resets(self):
        cfg, kernels, recs = self._setup()
        dps = DynamicPeakSet(list(recs), rho=0.18)
        out = reset_non_peaks(kernels, dps, generation=40, kappa=20,
                              rng=np.random.default_rng(0), config=cfg,
                              peak_records=recs)
        assert all(a is b for a, b in zip(out, kernels))


class TestRunNiching:
    def test_single_generation_budget(self):
        lo, hi = himmelblau_domain()
        cfg = NichingConfig(budget=250, domain_lo=lo, domain_hi=hi)
        run = run_niching(cfg, himmelblau_box, seed=0)
        assert run.generations == 1
        assert run.evaluations == 250
        assert len(run.archive) == 250

    def test_budget_law_and_archive_completeness(self):
        lo, hi = himmelblau_domain()
        cfg = NichingConfig(budget=1100, domain_lo=lo, domain_hi=hi)
        calls = []

        def counting(x):
            calls.append(x.shape[0])
            return himmelblau_box(x)

        run = run_niching(cfg, counting, seed=1)
        assert run.generations == 4          # 4 * 250 <= 1100 < 5 * 250
        assert sum(calls) == run.evaluations == len(run.archive) == 1000
        assert all(c == cfg.evals_per_generation for c in calls)

    def test_boundary_closure(self):
        lo, hi = himmelblau_domain()
        cfg = NichingConfig(budget=500, domain_lo=lo, domain_hi=hi)
        run = run_niching(cfg, himmelblau_box, seed=3)
        vectors = np.stack([r.vector for r in run.archive])
        assert np.all(vectors >= lo[None, :])
        assert np.all(vectors <= hi[None, :])
        # frozen coordinates stay frozen
        assert np.all(vectors[:, 2:] == 0.0)

    def test_determinism(self):
        lo, hi = himmelblau_domain()
        cfg = NichingConfig(budget=750, domain_lo=lo, domain_hi=hi)
        a = run_niching(cfg, himmelblau_box, seed=11)
        b = run_niching(cfg, himmelblau_box, seed=11)
        assert len(a.archive) == len(b.archive)
        for ra, rb in zip(a.archive, b.archive):
            assert np.array_equal(ra.vector, rb.vector)
            assert ra.merit == rb.merit
            assert (ra.generation, ra.niche_id) == (rb.generation, rb.niche_id)

    def test_objective_failure_flags_partial_archive(self):
        lo, hi = himmelblau_domain()
        cfg = NichingConfig(budget=1000, domain_lo=lo, domain_hi=hi)
        state = {"calls": 0}

        def flaky(x):
            state["calls"] += 1
            if state["calls"] >= 3:
                raise RuntimeError("simulator crashed")
            return himmelblau_box(x)

        run = run_niching(cfg, flaky, seed=2)
        assert run.aborted
        assert "simulator crashed" in run.error
        assert len(run.archive) == 500   # two full generations archived

    def test_himmelblau_minima_found(self):
        # quick two-seed check; the acceptance suite runs the full 10
        lo, hi = himmelblau_domain()
        cfg = NichingConfig(budget=10000, domain_lo=lo, domain_hi=hi)
        minima = himmelblau_minima_oracle()
        for seed in (0, 1):
            run = run_niching(cfg, himmelblau_box, seed=seed)
            peaks = run.final_peaks.vectors()
            for mpt in minima:
                target = np.concatenate([mpt, np.zeros(4)])
                d = np.linalg.norm(peaks - target[None, :], axis=1).min()
                assert d <= 0.05

    def test_by_generation_grouping(self):
        lo, hi = himmelblau_domain()
        cfg = NichingConfig(budget=500, domain_lo=lo, domain_hi=hi)
        run = run_niching(cfg, himmelblau_box, seed=5)
        groups = run.by_generation()
        assert sorted(groups) == [1, 2]
        assert all(len(g) == 250 for g in groups.values())


def himmelblau_minima_oracle(resolution=1601):
    """Locate the four benchmark minima by brute-force grid scan."""
    g = np.linspace(-0.25, 0.25, resolution)
    uu, vv = np.meshgrid(g, g, indexing="ij")
    pts = np.zeros((uu.size, 6))
    pts[:, 0] = uu.ravel()
    pts[:, 1] = vv.ravel()
    vals, _ = himmelblau_box(pts)
    grid = vals.reshape(resolution, resolution)
    is_min = np.ones_like(grid, dtype=bool)
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            if dx == dy == 0:
                continue
            is_min[1:-1, 1:-1] &= (grid[1:-1, 1:-1]
                                   <= np.roll(np.roll(grid, dx, 0), dy, 1)[1:-1, 1:-1])
    ii, jj = np.where(is_min[1:-1, 1:-1])
    cands = sorted(zip(grid[ii + 1, jj + 1], g[ii + 1], g[jj + 1]))[:4]
    return np.array([[x, y] for _, x, y in cands])


def test_himmelblau_oracle_finds_four_minima():
    minima = himmelblau_minima_oracle(401)
    assert minima.shape == (4, 2)
    vals, _ = himmelblau_box(
        np.hstack([minima, np.zeros((4, 4))]))
    assert np.all(vals < 0.5)   # coarse grid still sits in the basins
