"""Shapiro-Wilk normality test, self-contained implementation.

Follows the standard approximation for the W statistic and its p-value
(Royston's AS R94 route): order-statistic weights from normal quantiles
with polynomial edge corrections, a log-normal null for 4 <= n <= 11 and a
normal null on ln(1 - W) for n >= 12.  Valid for sample sizes 3..5000;
the polynomial coefficients are pinned below and the test suite checks the
p-values against an independent reference implementation.
"""

from __future__ import annotations

import math
from statistics import NormalDist

import numpy as np

_NORMAL = NormalDist()

SW_MIN_N = 3
SW_MAX_N = 5000

# Edge-weight corrections, polynomials in 1/sqrt(n) (constant term first).
_C1 = (0.0, 0.221157, -0.147981, -2.071190, 4.434685, -2.706056)
_C2 = (0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633)

# Null-distribution moments: polynomials in n (4 <= n <= 11) ...
_G = (-2.273, 0.459)
_C3 = (0.5440, -0.39978, 0.025054, -6.714e-4)
_C4 = (1.3822, -0.77857, 0.062767, -0.0020322)
# ... and in ln(n) for n >= 12.
_C5 = (-1.5861, -0.31082, -0.083751, 0.0038915)
_C6 = (-0.4803, -0.082676, 0.0030302)


class SampleTooSmall(ValueError):
    pass


class SampleTooLarge(ValueError):
    pass


class DegenerateSample(ValueError):
    """All observations identical: W is undefined."""


def _poly(coeffs, x: float) -> float:
    acc = 0.0
    for c in reversed(coeffs):
        acc = acc * x + c
    return acc


def sw_weights(n: int) -> np.ndarray:
    """Order-statistic weight vector a of length n."""
    if n == 3:
        a1 = math.sqrt(0.5)
        return np.array([-a1, 0.0, a1])
    m = np.array([_NORMAL.inv_cdf((i - 0.375) / (n + 0.25))
                  for i in range(1, n + 1)])
    mm = float(m @ m)
    rsn = 1.0 / math.sqrt(n)
    a_n = _poly(_C1, rsn) + m[-1] / math.sqrt(mm)
    a = np.empty(n)
    if n > 5:
        a_n1 = _poly(_C2, rsn) + m[-2] / math.sqrt(mm)
        phi = (mm - 2.0 * m[-1] ** 2 - 2.0 * m[-2] ** 2) \
            / (1.0 - 2.0 * a_n ** 2 - 2.0 * a_n1 ** 2)
        a[2:n - 2] = m[2:n - 2] / math.sqrt(phi)
        a[-1] = a_n
        a[-2] = a_n1
        a[0] = -a_n
        a[1] = -a_n1
    else:
        phi = (mm - 2.0 * m[-1] ** 2) / (1.0 - 2.0 * a_n ** 2)
        a[1:n - 1] = m[1:n - 1] / math.sqrt(phi)
        a[-1] = a_n
        a[0] = -a_n
    return a


def shapiro_wilk(sample) -> tuple[float, float]:
    """(W statistic, approximate p-value) for a univariate sample.

    Raises :class:`SampleTooSmall` / :class:`SampleTooLarge` outside
    3 <= n <= 5000 and :class:`DegenerateSample` for zero-variance input.
    """
    x = np.sort(np.asarray(sample, dtype=float))
    n = x.size
    if n < SW_MIN_N:
        raise SampleTooSmall(f"need at least {SW_MIN_N} observations, got {n}")
    if n > SW_MAX_N:
        raise SampleTooLarge(f"at most {SW_MAX_N} observations, got {n}")
    if x[-1] - x[0] == 0.0:
        raise DegenerateSample("zero range: W undefined")

    a = sw_weights(n)
    xm = x - x.mean()
    ssq = float(xm @ xm)
    if ssq <= 0.0:
        raise DegenerateSample("zero variance: W undefined")
    w_stat = float(a @ x) ** 2 / ssq
    w_stat = min(w_stat, 1.0)

    if n == 3:
        p = 1.909859 * (math.asin(math.sqrt(w_stat)) - 1.047198)
        return w_stat, min(max(p, 0.0), 1.0)
    if n <= 11:
        gamma = _poly(_G, float(n))
        if gamma - math.log1p(-w_stat) <= 0.0:
            return w_stat, 1e-99
        y = -math.log(gamma - math.log1p(-w_stat))
        mu = _poly(_C3, float(n))
        sigma = math.exp(_poly(_C4, float(n)))
    else:
        ln_n = math.log(n)
        y = math.log1p(-w_stat)
        mu = _poly(_C5, ln_n)
        sigma = math.exp(_poly(_C6, ln_n))
    z = (y - mu) / sigma
    p = 1.0 - _NORMAL.cdf(z)
    return w_stat, min(max(p, 0.0), 1.0)
