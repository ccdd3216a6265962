import numpy as np
import pytest

from tripletopt.optics import MeritEvaluator, MeritWeights, load_prescription


@pytest.fixture(scope="session")
def cooke():
    return load_prescription("cooke_default")


@pytest.fixture(scope="session")
def evaluator(cooke):
    return MeritEvaluator(cooke, MeritWeights())


def sample_feasible(evaluator, count, seed=4242, band=0.1):
    """Deterministic feasible curvature vectors near the domain core."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(200):
        if len(out) >= count:
            break
        cand = rng.uniform(-band, band, size=(max(4 * count, 256), 6))
        _, feas = evaluator(cand)
        out.extend(cand[feas][: count - len(out)])
    if len(out) < count:
        raise RuntimeError("could not sample enough feasible designs")
    return np.stack(out)


@pytest.fixture(scope="session")
def feasible_designs(evaluator):
    return sample_feasible(evaluator, 24)
