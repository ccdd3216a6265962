"""Compiled inner loop of the sequential tracer.

Scalar per-ray propagation compiled with numba; semantics match the
vectorized numpy tracer in :mod:`tripletopt.optics` (which doubles as its
cross-check in the test suite).  The failure kind of an infeasible design
is decided by the earliest failing stage in propagation order, where each
surface contributes an intersection stage followed by a refraction stage
and the image transfer counts as a final intersection stage.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

# Stage codes: 2*k for a miss at surface k, 2*k+1 for TIR at surface k,
# 12 for a miss at the image plane, 13 = no failure.
_NO_FAIL = 13

# Failure codes shared with optics.FailureKind.
_RAY_MISSED = 1
_TIR = 2
_NO_CONJ = 3
_ZERO_POWER = 4

_MIN_PROP = 1e-9
_ZERO_POWER_TOL = 2e-5
_GRAZING_DZ = 1e-6


@njit(cache=True, error_model="numpy")
def trace_core(curv, thicknesses, n_media, z_vertex, px, py, hy,
               semi2, z_img, failure, s_obj, effl, pmag, spot,
               hits, disp):  # pragma: no cover - exercised via trace_batch
    m = curv.shape[0]
    nrays = px.shape[0]
    nr = nrays // 3

    for i in range(m):
        # Paraxial elements in the reduced (y, n*u) convention.
        a = 1.0
        b = 0.0
        c = 0.0
        d = 1.0
        for k in range(6):
            power = (n_media[k + 1] - n_media[k]) * curv[i, k]
            c = c - power * a
            d = d - power * b
            if k < 5:
                tau = thicknesses[k + 1] / n_media[k + 1]
                a = a + tau * c
                b = b + tau * d
        if abs(c) < _ZERO_POWER_TOL:
            failure[i] = _ZERO_POWER
            effl[i] = np.inf
            continue
        effl[i] = -1.0 / c
        s = -(1.0 + d) / c
        if not math.isfinite(s) or s <= 0.0:
            failure[i] = _NO_CONJ
            continue
        s_obj[i] = s
        denom = c * s + d
        s_img = -(a * s + b) / denom
        pmag[i] = a + s_img * c

        best_fail = _NO_FAIL
        for r in range(nrays):
            ox = 0.0
            oy = hy[r]
            oz = -s
            dx = px[r]
            dy = py[r] - hy[r]
            dz = s
            inv = 1.0 / math.sqrt(dx * dx + dy * dy + dz * dz)
            dx *= inv
            dy *= inv
            dz *= inv

            ray_fail = _NO_FAIL
            for k in range(6):
                if 2 * k >= best_fail:
                    break
                ck = curv[i, k]
                ozl = oz - z_vertex[k]
                odot = ox * dx + oy * dy + ozl * dz
                omag2 = ox * ox + oy * oy + ozl * ozl
                qb = ck * odot - dz
                qc = ck * omag2 - 2.0 * ozl
                disc = qb * qb - ck * qc
                if disc < 0.0:
                    ray_fail = 2 * k
                    break
                sq = math.sqrt(disc)
                if qb >= 0.0:
                    q = -(qb + sq)
                else:
                    q = -(qb - sq)
                t_sel = np.nan
                if ck != 0.0:
                    t1 = q / ck
                    if t1 > _MIN_PROP and math.isfinite(t1):
                        zl = ozl + t1 * dz
                        if 1.0 - ck * zl > 0.0:
                            t_sel = t1
                if q != 0.0:
                    t2 = qc / q
                    if t2 > _MIN_PROP and math.isfinite(t2):
                        zl = ozl + t2 * dz
                        if 1.0 - ck * zl > 0.0:
                            if not (t_sel == t_sel) or t2 < t_sel:
                                t_sel = t2
                elif ck == 0.0 and qb != 0.0:
                    t2 = -qc / (2.0 * qb)
                    if t2 > _MIN_PROP and math.isfinite(t2):
                        if not (t_sel == t_sel) or t2 < t_sel:
                            t_sel = t2
                if not (t_sel == t_sel):
                    ray_fail = 2 * k
                    break
                hx = ox + t_sel * dx
                hyy = oy + t_sel * dy
                hz = ozl + t_sel * dz
                if hx * hx + hyy * hyy > semi2:
                    ray_fail = 2 * k
                    break

                nx = ck * hx
                ny = ck * hyy
                nz = ck * hz - 1.0
                cosi = -(dx * nx + dy * ny + dz * nz)
                if cosi < 0.0:
                    nx = -nx
                    ny = -ny
                    nz = -nz
                    cosi = -cosi
                eta = n_media[k] / n_media[k + 1]
                krad = 1.0 - eta * eta * (1.0 - cosi * cosi)
                if krad < 0.0:
                    if 2 * k + 1 < best_fail:
                        ray_fail = 2 * k + 1
                    break
                coeff = eta * cosi - math.sqrt(krad)
                dx = eta * dx + coeff * nx
                dy = eta * dy + coeff * ny
                dz = eta * dz + coeff * nz
                inv = 1.0 / math.sqrt(dx * dx + dy * dy + dz * dz)
                dx *= inv
                dy *= inv
                dz *= inv
                ox = hx
                oy = hyy
                oz = hz + z_vertex[k]

            if ray_fail < best_fail:
                best_fail = ray_fail
                continue
            if ray_fail != _NO_FAIL or best_fail < 12:
                continue

            # Image plane transfer; grazing rays never reach the plane.
            if dz <= _GRAZING_DZ:
                best_fail = 12
                continue
            t_img = (z_img - oz) / dz
            if not math.isfinite(t_img) or t_img <= _MIN_PROP:
                best_fail = 12
                continue
            hits[i, r, 0] = ox + t_img * dx
            hits[i, r, 1] = oy + t_img * dy

        if best_fail != _NO_FAIL:
            failure[i] = _TIR if best_fail % 2 == 1 else _RAY_MISSED
            continue

        # Per-height centroids and the pooled RMS of centroid distances.
        acc = 0.0
        for hgt in range(3):
            base = hgt * nr
            cx = 0.0
            cy = 0.0
            for r in range(nr):
                cx += hits[i, base + r, 0]
                cy += hits[i, base + r, 1]
            cx /= nr
            cy /= nr
            for r in range(nr):
                ddx = hits[i, base + r, 0] - cx
                ddy = hits[i, base + r, 1] - cy
                disp[i, base + r, 0] = ddx
                disp[i, base + r, 1] = ddy
                acc += ddx * ddx + ddy * ddy
        spot[i] = math.sqrt(acc / nrays)
        failure[i] = 0
