"""Analytic benchmark objectives on the curvature box, for optimizer tests."""

from __future__ import annotations

import numpy as np

from .optics import DOMAIN_HI, DOMAIN_LO

# The classic four-minima polynomial lives on [-5, 5]^2; the first two box
# coordinates are stretched onto it so the whole benchmark fits the
# curvature domain.  Remaining coordinates are ignored (frozen by a
# degenerate domain in the optimizer config).
HIMMELBLAU_SCALE = 5.0 / DOMAIN_HI


def himmelblau_box(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched four-minima benchmark over the first two box coordinates."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    u = HIMMELBLAU_SCALE * x[:, 0]
    v = HIMMELBLAU_SCALE * x[:, 1]
    values = (u * u + v - 11.0) ** 2 + (u + v * v - 7.0) ** 2
    return values, np.ones(x.shape[0], dtype=bool)


def himmelblau_domain(dim: int = 6) -> tuple[np.ndarray, np.ndarray]:
    """Box for the benchmark: live first two coordinates, frozen tail."""
    lo = np.zeros(dim)
    hi = np.zeros(dim)
    lo[:2] = DOMAIN_LO
    hi[:2] = DOMAIN_HI
    return lo, hi


def sphere_offset(center: np.ndarray):
    """Batched shifted sphere; minimum at ``center`` with value 0."""
    center = np.asarray(center, dtype=float)

    def batched(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        values = ((x - center[None, :]) ** 2).sum(axis=1)
        return values, np.ones(x.shape[0], dtype=bool)

    return batched
