import numpy as np
import pytest

from tripletopt.swilk import (
    DegenerateSample,
    SampleTooLarge,
    SampleTooSmall,
    shapiro_wilk,
)

# Frozen oracle values from an independent reference implementation
# (scipy.stats.shapiro) on seeded samples: (n, dist, seed, W, p).
REFERENCE = [
    (20, "normal", 120, 0.9157642534084665, 0.08214942357799054),
    (20, "expon", 220, 0.9212786201735732, 0.10486447520187148),
    (50, "normal", 150, 0.9450009968362674, 0.021346129914765383),
    (50, "expon", 250, 0.8669630151755789, 4.6055091977228316e-05),
    (500, "normal", 600, 0.9979846373732253, 0.8249314747690826),
    (500, "expon", 700, 0.8287925046722576, 9.810808377749092e-23),
    (5000, "normal", 5100, 0.9996431596291288, 0.5352233638532675),
    (5000, "expon", 5200, 0.8153200118054021, 4.302692409514285e-60),
]


def _sample(n, dist, seed):
    rng = np.random.default_rng(seed)
    return rng.standard_normal(n) if dist == "normal" \
        else rng.exponential(size=n)


@pytest.mark.parametrize("n,dist,seed,w_ref,p_ref", REFERENCE)
def test_matches_reference(n, dist, seed, w_ref, p_ref):
    w, p = shapiro_wilk(_sample(n, dist, seed))
    assert w == pytest.approx(w_ref, abs=1e-5)
    assert p == pytest.approx(p_ref, abs=2e-3)


def test_normal_samples_rarely_rejected():
    accepted = sum(
        shapiro_wilk(_sample(50, "normal", 1000 + t))[1] > 0.05
        for t in range(100))
    assert accepted >= 90


def test_exponential_samples_rejected():
    rejected = sum(
        shapiro_wilk(_sample(50, "expon", 2000 + t))[1] < 0.05
        for t in range(100))
    assert rejected >= 95


def test_small_sample_sizes():
    # the n=3 arcsin branch and the log-normal branch for 4..11
    for n in (3, 4, 7, 11):
        w, p = shapiro_wilk(_sample(n, "normal", n))
        assert 0.0 <= w <= 1.0
        assert 0.0 <= p <= 1.0


def test_sample_size_errors():
    with pytest.raises(SampleTooSmall):
        shapiro_wilk([1.0, 2.0])
    with pytest.raises(SampleTooLarge):
        shapiro_wilk(np.arange(5001, dtype=float))


def test_constant_sample_is_degenerate():
    with pytest.raises(DegenerateSample):
        shapiro_wilk(np.full(25, 3.14))
