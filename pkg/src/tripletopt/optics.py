"""Sequential ray tracing, paraxial analysis and the scalar merit for a
six-surface (three element) lens with curvature-only degrees of freedom.

The tracer is a deterministic replacement for an external optics simulator:
meridionally arbitrary skew rays are propagated surface by surface through
spherical boundaries, the object distance is re-solved per design so the
paraxial transverse magnification is -1, and the design quality collapses
into one scalar that mixes spot blur against focal-length and magnification
targets.  Everything is pure: the same curvature vector always produces the
bit-identical merit value.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field, replace
from importlib import resources

import numpy as np

try:
    from ._tracecore import trace_core as _trace_core
except ImportError:  # numba unavailable: fall back to the numpy route
    _trace_core = None

# Search box for the six curvatures, 1/mm.  Candidate vectors produced by the
# optimizer are repaired into this closed box before evaluation.
DOMAIN_LO = -0.25
DOMAIN_HI = 0.25

# Minimum propagation distance: intersections closer than this to the ray
# origin are treated as the surface the ray just left.
MIN_PROPAGATION = 1e-9

# Below this |C| element of the system matrix the design counts as unpowered:
# the focal length would exceed 50 m for a system with a 30 mm target, and no
# practical unit-magnification conjugate exists.  Together with the grazing
# cutoff below this also bounds every feasible merit far below the
# infeasibility penalty.
ZERO_POWER_TOL = 2e-5

# Rays leaving the last surface within ~0.2 arcsec of the image plane would
# travel kilometres sideways before "hitting" it; they count as lost.
GRAZING_DZ = 1e-6

DEFAULT_INFEASIBLE_PENALTY = 1.0e10


class FailureKind(enum.Enum):
    """Why a design could not be traced to the image plane."""

    NONE = "none"
    RAY_MISSED_SURFACE = "ray_missed_surface"
    TOTAL_INTERNAL_REFLECTION = "total_internal_reflection"
    NO_PARAXIAL_CONJUGATE = "no_paraxial_conjugate"
    ZERO_POWER = "zero_power"


_FAILURE_BY_CODE = {
    0: FailureKind.NONE,
    1: FailureKind.RAY_MISSED_SURFACE,
    2: FailureKind.TOTAL_INTERNAL_REFLECTION,
    3: FailureKind.NO_PARAXIAL_CONJUGATE,
    4: FailureKind.ZERO_POWER,
}
_CODE_BY_FAILURE = {v: k for k, v in _FAILURE_BY_CODE.items()}


class OpticsError(Exception):
    pass


class TotalInternalReflectionError(OpticsError):
    """Snell radicand went negative: the ray reflects instead of refracting."""


class NoParaxialConjugate(OpticsError):
    """No positive object distance achieves transverse magnification -1.

    ``reason`` is ``"zero_power"`` when the system matrix has no power and
    ``"nonpositive_distance"`` when the conjugate exists but lies on the
    wrong side of the first surface.
    """

    def __init__(self, reason: str):
        super().__init__(f"magnification -1 conjugate unavailable: {reason}")
        self.reason = reason


class InfeasibleDesign(OpticsError):
    """Raised by operations that require a traceable design."""

    def __init__(self, failure: FailureKind):
        super().__init__(f"design is infeasible ({failure.value})")
        self.failure = failure


class DomainViolation(ValueError):
    """A curvature vector lies outside the closed search box."""


@dataclass(frozen=True)
class Ray:
    """A ray as origin plus unit direction, both in mm / dimensionless."""

    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=float).reshape(3)
        d = np.asarray(self.direction, dtype=float).reshape(3)
        norm = float(np.linalg.norm(d))
        if abs(norm - 1.0) > 1e-12:
            if norm == 0.0:
                raise ValueError("ray direction must be non-zero")
            d = d / norm
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)

    def at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


@dataclass(frozen=True)
class Prescription:
    """Full optical system: six curvatures plus the fixed layout.

    ``curvatures``          decision vector, 1/mm, one entry per surface.
    ``thicknesses``         seven gaps in mm: the object-to-first-surface gap
                            (entry 0, re-solved at evaluation time so the
                            stored value is only a placeholder), the five
                            inter-surface gaps, and the last-surface-to-image
                            gap.
    ``refractive_indices``  seven values: the object-space medium followed by
                            the medium after each surface (air = 1).
    ``object_heights``      three field points on the object plane, mm.
    ``surface_semi_diameter``  mechanical clear semi-diameter applied to all
                            six surfaces; rays landing outside it are lost.
    """

    curvatures: np.ndarray
    thicknesses: np.ndarray
    refractive_indices: np.ndarray
    stop_surface_index: int = 3
    entrance_pupil_semi_diameter: float = 5.0
    object_heights: np.ndarray = field(
        default_factory=lambda: np.array([0.0, 10.0, 14.0])
    )
    rays_per_height: int = 42
    wavelength_nm: float = 587.6
    surface_semi_diameter: float = 10.0
    name: str = "unnamed"

    def __post_init__(self):
        c = np.asarray(self.curvatures, dtype=float).reshape(6).copy()
        t = np.asarray(self.thicknesses, dtype=float).reshape(7).copy()
        n = np.asarray(self.refractive_indices, dtype=float).reshape(7).copy()
        h = np.asarray(self.object_heights, dtype=float).reshape(-1).copy()
        if not np.all(np.isfinite(c)):
            raise ValueError("curvatures must be finite")
        if np.any(t[1:] <= 0.0):
            raise ValueError("fixed thicknesses must be strictly positive")
        if np.any(n < 1.0):
            raise ValueError("refractive indices must be >= 1")
        if not 1 <= int(self.stop_surface_index) <= 6:
            raise ValueError("stop surface index must lie in [1, 6]")
        if h.size != 3:
            raise ValueError("exactly three object heights are required")
        if int(self.rays_per_height) < 1:
            raise ValueError("rays_per_height must be positive")
        if self.entrance_pupil_semi_diameter <= 0:
            raise ValueError("entrance pupil semi-diameter must be positive")
        if self.surface_semi_diameter <= 0:
            raise ValueError("surface semi-diameter must be positive")
        for name, arr in (("curvatures", c), ("thicknesses", t),
                          ("refractive_indices", n), ("object_heights", h)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_rays(self) -> int:
        return 3 * int(self.rays_per_height)

    def with_curvatures(self, curvatures) -> "Prescription":
        return replace(self, curvatures=np.asarray(curvatures, dtype=float))

    def surface_z(self) -> np.ndarray:
        """Vertex z of the six surfaces; surface 1 sits at z = 0."""
        return np.concatenate(([0.0], np.cumsum(self.thicknesses[1:6])))

    def image_plane_z(self) -> float:
        return float(self.surface_z()[-1] + self.thicknesses[6])

    def scaled(self, k: float) -> "Prescription":
        """Scale every length by ``k`` (curvature is inverse length)."""
        return replace(
            self,
            curvatures=self.curvatures / k,
            thicknesses=self.thicknesses * k,
            entrance_pupil_semi_diameter=self.entrance_pupil_semi_diameter * k,
            object_heights=self.object_heights * k,
            surface_semi_diameter=self.surface_semi_diameter * k,
        )


@dataclass(frozen=True)
class MeritWeights:
    """Weights and targets of the scalar design merit."""

    w1: float = 1.0
    w2: float = 1.0
    w3: float = 1.0
    effl_target: float = 30.0
    pmag_target: float = -1.0
    infeasible_penalty: float = DEFAULT_INFEASIBLE_PENALTY

    def __post_init__(self):
        if min(self.w1, self.w2, self.w3) < 0:
            raise ValueError("merit weights must be non-negative")
        if self.infeasible_penalty <= 0:
            raise ValueError("infeasible penalty must be positive")


@dataclass(frozen=True)
class TraceOutcome:
    """Result of tracing one design.

    ``hits`` and ``displacements`` are (n_rays, 2) image-plane coordinates
    and offsets from the per-height spot centroid; they are only meaningful
    when ``feasible`` is true.
    """

    hits: np.ndarray
    displacements: np.ndarray
    spot_rms: float
    effl: float
    pmag: float
    feasible: bool
    failure_kind: FailureKind
    object_distance: float


# ----------------------------------------------------------------------
# Scalar geometry primitives
# ----------------------------------------------------------------------

def intersect_sphere(ray: Ray, curvature: float, vertex_z: float,
                     clear_semi_diameter: float | None = None):
    """First intersection of a ray with a spherical cap (plane if c == 0).

    The surface is the cap of curvature ``curvature`` around the vertex
    ``(0, 0, vertex_z)``, clipped at ``clear_semi_diameter``.  Returns the
    3-vector hit point, or ``None`` on a miss (negative discriminant, hit
    behind the origin, far hemisphere, or outside the clear aperture).
    """
    o = ray.origin - np.array([0.0, 0.0, vertex_z])
    d = ray.direction
    c = float(curvature)
    a = c
    b = c * float(o @ d) - d[2]
    cc = c * float(o @ o) - 2.0 * o[2]

    disc = b * b - a * cc
    if disc < 0.0:
        return None
    sq = math.sqrt(disc)
    sb = 1.0 if b >= 0.0 else -1.0
    q = -(b + sb * sq)
    candidates = []
    if a != 0.0:
        candidates.append(q / a)
    if q != 0.0:
        candidates.append(cc / q)
    elif a == 0.0 and b != 0.0:
        candidates.append(-cc / (2.0 * b))

    t_hit = None
    for t in candidates:
        if not math.isfinite(t) or t <= MIN_PROPAGATION:
            continue
        z_loc = o[2] + t * d[2]
        if 1.0 - c * z_loc <= 0.0:  # far hemisphere
            continue
        if t_hit is None or t < t_hit:
            t_hit = t
    if t_hit is None:
        return None
    hit = o + t_hit * d
    if clear_semi_diameter is not None:
        if hit[0] ** 2 + hit[1] ** 2 > clear_semi_diameter ** 2:
            return None
    return hit + np.array([0.0, 0.0, vertex_z])


def surface_normal(hit_local: np.ndarray, curvature: float) -> np.ndarray:
    """Unit normal of the cap at a point given in vertex-local coordinates.

    For points on the surface the gradient form is already unit length and
    points toward -z for the vertex cap.
    """
    n = np.array([curvature * hit_local[0], curvature * hit_local[1],
                  curvature * hit_local[2] - 1.0])
    return n / np.linalg.norm(n)


def refract(incident: np.ndarray, normal: np.ndarray, n1: float,
            n2: float) -> np.ndarray:
    """Vector Snell refraction of a unit direction at a unit normal.

    Raises :class:`TotalInternalReflectionError` when the transmitted-angle
    radicand is negative.  The normal orientation is irrelevant; it is
    flipped internally to face the incident ray.
    """
    d = np.asarray(incident, dtype=float)
    n = np.asarray(normal, dtype=float)
    cosi = -float(d @ n)
    if cosi < 0.0:
        n = -n
        cosi = -cosi
    eta = n1 / n2
    k = 1.0 - eta * eta * (1.0 - cosi * cosi)
    if k < 0.0:
        raise TotalInternalReflectionError(
            f"TIR at n1={n1}, n2={n2}, cos(i)={cosi:.6f}")
    out = eta * d + (eta * cosi - math.sqrt(k)) * n
    return out / np.linalg.norm(out)


# ----------------------------------------------------------------------
# Paraxial analysis
# ----------------------------------------------------------------------

def paraxial_trace(pres: Prescription) -> np.ndarray:
    """Vertex-to-vertex system matrix in the reduced (y, n*u) convention.

    Product of per-surface refraction matrices with power
    (n_after - n_before) * c and reduced transfers t/n over the five
    inter-surface gaps.  The effective focal length is -1 / M[1, 0].
    """
    a, b, c, d = _paraxial_elements(pres.curvatures[None, :], pres)
    return np.array([[a[0], b[0]], [c[0], d[0]]])


def _paraxial_elements(curv: np.ndarray, pres: Prescription):
    """System matrix elements for a batch of curvature rows."""
    m = curv.shape[0]
    a = np.ones(m)
    b = np.zeros(m)
    c = np.zeros(m)
    d = np.ones(m)
    n = pres.refractive_indices
    t = pres.thicknesses
    for k in range(6):
        power = (n[k + 1] - n[k]) * curv[:, k]
        c, d = c - power * a, d - power * b
        if k < 5:
            tau = t[k + 1] / n[k + 1]
            a, b = a + tau * c, b + tau * d
    return a, b, c, d


def effl_from_matrix(matrix: np.ndarray) -> float:
    """Effective focal length; infinite for a power-free system."""
    c = float(matrix[1, 0])
    if abs(c) < ZERO_POWER_TOL:
        return math.inf
    return -1.0 / c


def solve_object_distance(pres: Prescription) -> float:
    """Object-to-first-surface distance giving transverse magnification -1.

    Closed form from the conjugate equation: with the system matrix
    [[A, B], [C, D]] and unit-index object space the -1 magnification
    conjugate requires C*s + D = -1, hence s = -(1 + D) / C.
    """
    mat = paraxial_trace(pres)
    return _solve_distance_from_elements(float(mat[1, 0]), float(mat[1, 1]))


def _solve_distance_from_elements(c: float, d: float) -> float:
    if abs(c) < ZERO_POWER_TOL:
        raise NoParaxialConjugate("zero_power")
    s = -(1.0 + d) / c
    if not math.isfinite(s) or s <= 0.0:
        raise NoParaxialConjugate("nonpositive_distance")
    return s


def paraxial_magnification(pres: Prescription, object_distance: float) -> float:
    """Magnification of the conjugate of an object plane at the given gap.

    Locates the paraxial image of the object plane through the system and
    returns the transverse magnification at that conjugate; used as the
    round-trip check that the solved object distance reproduces -1.
    """
    mat = paraxial_trace(pres)
    a, b = float(mat[0, 0]), float(mat[0, 1])
    c, d = float(mat[1, 0]), float(mat[1, 1])
    denom = c * object_distance + d
    if abs(denom) < 1e-300:
        raise NoParaxialConjugate("zero_power")
    s_img = -(a * object_distance + b) / denom
    return a + s_img * c


# ----------------------------------------------------------------------
# Pupil sampling
# ----------------------------------------------------------------------

def pupil_grid(semi_diameter: float, count: int) -> np.ndarray:
    """Deterministic pupil sample points, (count, 2) in mm.

    The 42-ray default uses six concentric rings of seven rays with a
    per-ring phase advance so spokes do not align across rings.  Other
    counts fall back to a Vogel spiral; both patterns are randomness-free.
    """
    if count == 42:
        pts = np.empty((42, 2))
        idx = 0
        for ring in range(1, 7):
            r = semi_diameter * ring / 6.0
            phase = (ring - 1) * (2.0 * np.pi / 7.0) / 6.0
            ang = phase + 2.0 * np.pi * np.arange(7) / 7.0
            pts[idx:idx + 7, 0] = r * np.cos(ang)
            pts[idx:idx + 7, 1] = r * np.sin(ang)
            idx += 7
        return pts
    golden = np.pi * (3.0 - np.sqrt(5.0))
    i = np.arange(count)
    r = semi_diameter * np.sqrt((i + 0.5) / count)
    ang = golden * i
    return np.stack([r * np.cos(ang), r * np.sin(ang)], axis=1)


# ----------------------------------------------------------------------
# Batched sequential trace
# ----------------------------------------------------------------------

@dataclass
class BatchTrace:
    """Vectorized trace result over a batch of curvature rows."""

    feasible: np.ndarray          # (m,) bool
    failure_code: np.ndarray      # (m,) uint8, FailureKind codes
    spot_rms: np.ndarray          # (m,)
    effl: np.ndarray              # (m,)
    pmag: np.ndarray              # (m,)
    object_distance: np.ndarray   # (m,)
    hits: np.ndarray              # (m, n_rays, 2)
    displacements: np.ndarray     # (m, n_rays, 2)

    def failure_kind(self, i: int) -> FailureKind:
        return _FAILURE_BY_CODE[int(self.failure_code[i])]


def _pupil_fan(pres: Prescription):
    """Cached flat arrays (pupil x, pupil y, object height) per ray."""
    key = (pres.entrance_pupil_semi_diameter, int(pres.rays_per_height),
           tuple(pres.object_heights))
    cached = _FAN_CACHE.get(key)
    if cached is None:
        pupil = pupil_grid(pres.entrance_pupil_semi_diameter,
                           int(pres.rays_per_height))
        px = np.tile(pupil[:, 0], 3)
        py = np.tile(pupil[:, 1], 3)
        hy = np.repeat(pres.object_heights, int(pres.rays_per_height))
        for a in (px, py, hy):
            a.setflags(write=False)
        cached = (px, py, hy)
        if len(_FAN_CACHE) > 64:
            _FAN_CACHE.clear()
        _FAN_CACHE[key] = cached
    return cached


_FAN_CACHE: dict = {}


def trace_batch(curvatures: np.ndarray, pres: Prescription) -> BatchTrace:
    """Trace a batch of designs; rows of ``curvatures`` are 6-vectors.

    Infeasibility is latched per design at the earliest failing stage in
    propagation order (intersection failures rank before refraction
    failures at the same surface).  Dispatches to the compiled per-ray
    kernel; :func:`trace_batch_numpy` is the pure-numpy reference route.
    """
    curv = np.atleast_2d(np.asarray(curvatures, dtype=float))
    if curv.shape[1] != 6:
        raise ValueError("curvature rows must have six entries")
    if _trace_core is None:
        return trace_batch_numpy(curv, pres)
    m = curv.shape[0]
    nrays = 3 * int(pres.rays_per_height)
    px, py, hy = _pupil_fan(pres)

    failure = np.zeros(m, dtype=np.uint8)
    s_obj = np.full(m, np.nan)
    effl = np.full(m, np.nan)
    pmag = np.full(m, np.nan)
    spot = np.full(m, np.nan)
    hits = np.full((m, nrays, 2), np.nan)
    disp = np.full((m, nrays, 2), np.nan)

    _trace_core(np.ascontiguousarray(curv), pres.thicknesses,
                pres.refractive_indices, pres.surface_z(), px, py, hy,
                pres.surface_semi_diameter ** 2, pres.image_plane_z(),
                failure, s_obj, effl, pmag, spot, hits, disp)

    feasible = failure == 0
    if not feasible.all():
        hits[~feasible] = np.nan
        disp[~feasible] = np.nan
    return BatchTrace(feasible, failure, spot, effl, pmag, s_obj, hits, disp)


def trace_batch_numpy(curvatures: np.ndarray, pres: Prescription) -> BatchTrace:
    """Vectorized numpy tracer; the reference route for the compiled kernel.

    Designs that die early are dropped from the working set, so batches
    dominated by infeasible candidates trace cheaply.
    """
    curv = np.atleast_2d(np.asarray(curvatures, dtype=float))
    if curv.shape[1] != 6:
        raise ValueError("curvature rows must have six entries")
    m = curv.shape[0]
    nr = int(pres.rays_per_height)
    nrays = 3 * nr

    failure = np.zeros(m, dtype=np.uint8)
    effl = np.full(m, np.nan)
    pmag = np.full(m, np.nan)
    s_obj = np.full(m, np.nan)
    spot = np.full(m, np.nan)
    hits = np.full((m, nrays, 2), np.nan)
    disp = np.full((m, nrays, 2), np.nan)
    feasible = np.zeros(m, dtype=bool)

    # Paraxial solve: magnification -1 requires C*s + D = -1.
    pa, pb, pc, pd = _paraxial_elements(curv, pres)
    with np.errstate(divide="ignore", invalid="ignore"):
        effl[:] = np.where(np.abs(pc) < ZERO_POWER_TOL, np.inf, -1.0 / pc)
        s_all = -(1.0 + pd) / pc
        denom = pc * s_all + pd
        pmag_all = pa - (pa * s_all + pb) / denom * pc
    zero_power = np.abs(pc) < ZERO_POWER_TOL
    bad_conj = ~zero_power & (~np.isfinite(s_all) | (s_all <= 0.0))
    failure[zero_power] = _CODE_BY_FAILURE[FailureKind.ZERO_POWER]
    failure[bad_conj] = _CODE_BY_FAILURE[FailureKind.NO_PARAXIAL_CONJUGATE]
    ok = ~(zero_power | bad_conj)
    s_obj[ok] = s_all[ok]
    pmag[ok] = pmag_all[ok]

    idx = np.flatnonzero(ok)
    if idx.size == 0:
        return BatchTrace(feasible, failure, spot, effl, pmag, s_obj,
                          hits, disp)

    # Ray fan: per object height, rays aimed at the pupil disc at z = 0.
    px, py, hy = _pupil_fan(pres)
    s_act = s_all[idx]

    k_act = idx.size
    p = np.empty((k_act, nrays, 3))
    p[:, :, 0] = 0.0
    p[:, :, 1] = hy[None, :]
    p[:, :, 2] = -s_act[:, None]
    d = np.empty((k_act, nrays, 3))
    d[:, :, 0] = px[None, :]
    d[:, :, 1] = py[None, :] - hy[None, :]
    d[:, :, 2] = s_act[:, None]
    inv = 1.0 / np.sqrt(d[:, :, 0] ** 2 + d[:, :, 1] ** 2 + d[:, :, 2] ** 2)
    d[:, :, 0] *= inv
    d[:, :, 1] *= inv
    d[:, :, 2] *= inv

    z_vertex = pres.surface_z()
    n_media = pres.refractive_indices
    semi2 = pres.surface_semi_diameter ** 2
    c_act = curv[idx]

    for k in range(6):
        c_k = c_act[:, k][:, None]
        dx, dy, dz = d[:, :, 0], d[:, :, 1], d[:, :, 2]
        ox, oy = p[:, :, 0], p[:, :, 1]
        oz = p[:, :, 2] - z_vertex[k]
        odot = ox * dx + oy * dy + oz * dz
        omag2 = ox * ox + oy * oy + oz * oz

        qb = c_k * odot - dz
        qc = c_k * omag2 - 2.0 * oz
        disc = qb * qb - c_k * qc
        sq = np.sqrt(np.maximum(disc, 0.0))
        q = -(qb + np.where(qb >= 0.0, sq, -sq))
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = q / c_k
            t2 = np.where(q != 0.0, qc / q,
                          np.where(qb != 0.0, -qc / (2.0 * qb), np.nan))
        zl1 = oz + t1 * dz
        zl2 = oz + t2 * dz
        v1 = np.isfinite(t1) & (t1 > MIN_PROPAGATION) & (1.0 - c_k * zl1 > 0.0)
        v2 = np.isfinite(t2) & (t2 > MIN_PROPAGATION) & (1.0 - c_k * zl2 > 0.0)
        t_sel = np.where(v2, t2, t1)
        both = v1 & v2
        if both.any():
            t_sel = np.where(both, np.minimum(t1, t2), t_sel)
        invalid = ~(v1 | v2) | (disc < 0.0)
        t_safe = np.where(invalid, 0.0, t_sel)

        hx = ox + t_safe * dx
        hyy = oy + t_safe * dy
        hz = oz + t_safe * dz
        miss = invalid | (hx * hx + hyy * hyy > semi2)

        missed_rows = miss.any(axis=1)
        if missed_rows.any():
            failure[idx[missed_rows]] = _CODE_BY_FAILURE[
                FailureKind.RAY_MISSED_SURFACE]

        # Unit normal of the cap at the hit (exact on the surface).
        nx = c_k * hx
        ny = c_k * hyy
        nz = c_k * hz - 1.0
        cosi = -(dx * nx + dy * ny + dz * nz)
        neg = cosi < 0.0
        if neg.any():
            sgn = np.where(neg, -1.0, 1.0)
            nx = sgn * nx
            ny = sgn * ny
            nz = sgn * nz
            cosi = np.abs(cosi)

        eta = n_media[k] / n_media[k + 1]
        krad = 1.0 - eta * eta * (1.0 - cosi * cosi)
        tir = krad < 0.0
        tir_rows = ~missed_rows & tir.any(axis=1)
        if tir_rows.any():
            failure[idx[tir_rows]] = _CODE_BY_FAILURE[
                FailureKind.TOTAL_INTERNAL_REFLECTION]

        keep = ~(missed_rows | tir_rows)
        if not keep.any():
            return BatchTrace(feasible, failure, spot, effl, pmag, s_obj,
                              hits, disp)
        if not keep.all():
            idx = idx[keep]
            c_act = c_act[keep]
            hx, hyy, hz = hx[keep], hyy[keep], hz[keep]
            dx, dy, dz = dx[keep], dy[keep], dz[keep]
            nx, ny, nz = nx[keep], ny[keep], nz[keep]
            cosi, krad = cosi[keep], krad[keep]

        coeff = eta * cosi - np.sqrt(np.maximum(krad, 0.0))
        ndx = eta * dx + coeff * nx
        ndy = eta * dy + coeff * ny
        ndz = eta * dz + coeff * nz
        inv = 1.0 / np.sqrt(ndx * ndx + ndy * ndy + ndz * ndz)
        k_act = idx.size
        p = np.empty((k_act, nrays, 3))
        p[:, :, 0] = hx
        p[:, :, 1] = hyy
        p[:, :, 2] = hz + z_vertex[k]
        d = np.empty((k_act, nrays, 3))
        d[:, :, 0] = ndx * inv
        d[:, :, 1] = ndy * inv
        d[:, :, 2] = ndz * inv

    # Transfer to the fixed image plane.
    z_img = pres.image_plane_z()
    dz = d[:, :, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t_img = (z_img - p[:, :, 2]) / dz
    behind = (dz <= GRAZING_DZ) | ~np.isfinite(t_img) \
        | (t_img <= MIN_PROPAGATION)
    behind_rows = behind.any(axis=1)
    if behind_rows.any():
        failure[idx[behind_rows]] = _CODE_BY_FAILURE[
            FailureKind.RAY_MISSED_SURFACE]
        keep = ~behind_rows
        if not keep.any():
            return BatchTrace(feasible, failure, spot, effl, pmag, s_obj,
                              hits, disp)
        idx = idx[keep]
        p, d, t_img = p[keep], d[keep], t_img[keep]

    hx = p[:, :, 0] + t_img * d[:, :, 0]
    hy_img = p[:, :, 1] + t_img * d[:, :, 1]

    hits[idx, :, 0] = hx
    hits[idx, :, 1] = hy_img
    grouped = np.stack([hx, hy_img], axis=2).reshape(idx.size, 3, nr, 2)
    centroid = grouped.mean(axis=2, keepdims=True)
    dsp = (grouped - centroid).reshape(idx.size, nrays, 2)
    disp[idx] = dsp
    spot[idx] = np.sqrt(
        (dsp[:, :, 0] ** 2 + dsp[:, :, 1] ** 2).mean(axis=1))
    feasible[idx] = True
    return BatchTrace(feasible, failure, spot, effl, pmag, s_obj, hits, disp)


def trace_design(pres: Prescription) -> TraceOutcome:
    """Trace the prescription's own curvature vector."""
    bt = trace_batch(pres.curvatures[None, :], pres)
    feasible = bool(bt.feasible[0])
    return TraceOutcome(
        hits=bt.hits[0],
        displacements=bt.displacements[0],
        spot_rms=float(bt.spot_rms[0]),
        effl=float(bt.effl[0]),
        pmag=float(bt.pmag[0]),
        feasible=feasible,
        failure_kind=bt.failure_kind(0),
        object_distance=float(bt.object_distance[0]),
    )


# ----------------------------------------------------------------------
# Merit
# ----------------------------------------------------------------------

def spot_rms_from_displacements(displacements: np.ndarray) -> float:
    """Root mean square of the centroid-relative hit distances."""
    d = np.asarray(displacements, dtype=float)
    if d.ndim == 1:
        d2 = d ** 2
    else:
        d2 = d[:, 0] ** 2 + d[:, 1] ** 2
    return float(np.sqrt(d2.mean()))


def merit_from_outcome(spot_rms: float, effl: float, pmag: float,
                       weights: MeritWeights) -> float:
    """Weighted merit of a feasible trace: blur plus squared target misses."""
    return (weights.w1 * spot_rms
            + weights.w2 * (effl - weights.effl_target) ** 2
            + weights.w3 * (pmag - weights.pmag_target) ** 2)


def check_domain(curvatures: np.ndarray) -> None:
    c = np.asarray(curvatures, dtype=float)
    if np.any(c < DOMAIN_LO) or np.any(c > DOMAIN_HI):
        raise DomainViolation(
            f"curvatures outside [{DOMAIN_LO}, {DOMAIN_HI}]: {c!r}")


def merit_batch(curvatures: np.ndarray, pres: Prescription,
                weights: MeritWeights) -> tuple[np.ndarray, np.ndarray]:
    """(merit values, feasible mask) for a batch of in-domain designs."""
    curv = np.atleast_2d(np.asarray(curvatures, dtype=float))
    check_domain(curv)
    bt = trace_batch(curv, pres)
    values = np.full(curv.shape[0], weights.infeasible_penalty)
    f = bt.feasible
    if f.any():
        values[f] = (weights.w1 * bt.spot_rms[f]
                     + weights.w2 * (bt.effl[f] - weights.effl_target) ** 2
                     + weights.w3 * (bt.pmag[f] - weights.pmag_target) ** 2)
    return values, f


def merit(pres: Prescription, weights: MeritWeights) -> float:
    """Scalar merit of the prescription's curvature vector."""
    values, _ = merit_batch(pres.curvatures[None, :], pres, weights)
    return float(values[0])


class MeritEvaluator:
    """Callable objective over curvature vectors for one fixed layout.

    ``__call__`` takes an (m, 6) array and returns ``(values, feasible)``;
    it is the batched objective handed to the optimizer.  ``residuals``
    exposes the least-squares view whose squared norm reproduces the merit
    exactly (the per-ray entries carry a 1/sqrt(n * spot_rms) scale so the
    blur term enters as the RMS itself rather than its square).
    """

    def __init__(self, pres: Prescription, weights: MeritWeights | None = None):
        self.prescription = pres
        self.weights = weights if weights is not None else MeritWeights()

    def __call__(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return merit_batch(x, self.prescription, self.weights)

    def merit(self, c: np.ndarray) -> float:
        values, _ = merit_batch(np.asarray(c)[None, :], self.prescription,
                                self.weights)
        return float(values[0])

    def unchecked_merit(self, c: np.ndarray) -> float:
        """Merit without the search-box guard (for stencils near bounds)."""
        bt = trace_batch(np.asarray(c, dtype=float)[None, :],
                         self.prescription)
        if not bt.feasible[0]:
            return float(self.weights.infeasible_penalty)
        return merit_from_outcome(float(bt.spot_rms[0]), float(bt.effl[0]),
                                  float(bt.pmag[0]), self.weights)

    def outcome(self, c: np.ndarray) -> TraceOutcome:
        return trace_design(self.prescription.with_curvatures(c))

    def residuals_batch(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(m, n_rays + 2) residual matrix and feasibility mask.

        Rows of infeasible designs are NaN.
        """
        curv = np.atleast_2d(np.asarray(x, dtype=float))
        bt = trace_batch(curv, self.prescription)
        m = curv.shape[0]
        nrays = self.prescription.n_rays
        w = self.weights
        r = np.full((m, nrays + 2), np.nan)
        f = bt.feasible
        if f.any():
            delta = np.hypot(bt.displacements[f, :, 0],
                             bt.displacements[f, :, 1])
            s1 = bt.spot_rms[f]
            scale = np.where(s1 > 0.0,
                             np.sqrt(w.w1 / (nrays * np.maximum(s1, 1e-300))),
                             0.0)
            r[np.where(f)[0], :nrays] = scale[:, None] * delta
            r[f, nrays] = np.sqrt(w.w2) * (bt.effl[f] - w.effl_target)
            r[f, nrays + 1] = np.sqrt(w.w3) * (bt.pmag[f] - w.pmag_target)
        return r, f

    def residuals(self, c: np.ndarray) -> np.ndarray:
        r, f = self.residuals_batch(np.asarray(c)[None, :])
        if not f[0]:
            bt = trace_batch(np.asarray(c, dtype=float)[None, :],
                             self.prescription)
            raise InfeasibleDesign(bt.failure_kind(0))
        return r[0]


# ----------------------------------------------------------------------
# Prescription files
# ----------------------------------------------------------------------

_PRESCRIPTION_KEYS = (
    "thicknesses", "refractive_indices", "stop_surface_index",
    "entrance_pupil_semi_diameter", "object_heights", "rays_per_height",
    "wavelength_nm", "surface_semi_diameter",
)


def prescription_to_dict(pres: Prescription) -> dict:
    return {
        "name": pres.name,
        "curvatures": [float(v) for v in pres.curvatures],
        "thicknesses": [float(v) for v in pres.thicknesses],
        "refractive_indices": [float(v) for v in pres.refractive_indices],
        "stop_surface_index": int(pres.stop_surface_index),
        "entrance_pupil_semi_diameter": float(pres.entrance_pupil_semi_diameter),
        "object_heights": [float(v) for v in pres.object_heights],
        "rays_per_height": int(pres.rays_per_height),
        "wavelength_nm": float(pres.wavelength_nm),
        "surface_semi_diameter": float(pres.surface_semi_diameter),
    }


def prescription_from_dict(data: dict) -> Prescription:
    missing = [k for k in _PRESCRIPTION_KEYS if k not in data]
    if missing:
        raise ValueError(f"prescription file lacks keys: {missing}")
    return Prescription(
        curvatures=np.asarray(data.get("curvatures", np.zeros(6)), dtype=float),
        thicknesses=np.asarray(data["thicknesses"], dtype=float),
        refractive_indices=np.asarray(data["refractive_indices"], dtype=float),
        stop_surface_index=int(data["stop_surface_index"]),
        entrance_pupil_semi_diameter=float(data["entrance_pupil_semi_diameter"]),
        object_heights=np.asarray(data["object_heights"], dtype=float),
        rays_per_height=int(data["rays_per_height"]),
        wavelength_nm=float(data["wavelength_nm"]),
        surface_semi_diameter=float(data["surface_semi_diameter"]),
        name=str(data.get("name", "unnamed")),
    )


def load_prescription(source: str) -> Prescription:
    """Load a prescription from a path, or by packaged name (``cooke_default``)."""
    if source == "cooke_default":
        text = (resources.files("tripletopt") / "data" / "cooke_default.json"
                ).read_text()
    else:
        with open(source, "r", encoding="utf-8") as fh:
            text = fh.read()
    return prescription_from_dict(json.loads(text))


def save_prescription(pres: Prescription, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(prescription_to_dict(pres), fh, indent=2, sort_keys=True)
        fh.write("\n")
