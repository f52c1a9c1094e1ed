"""Equidistribution and rigidity diagnostics on blown-up configurations.

Discrepancy counts in square boxes, nearest-neighbor separation statistics,
per-box windowed-energy maps against the periodic minimum-energy reference,
and a good-boundary contour search minimizing the boundary L^p mass.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .renorm import CutoffWindow, WindowQuadratureSettings, windowed_W

_GL_NODES = {}


def _gl(n):
    if n not in _GL_NODES:
        _GL_NODES[n] = np.polynomial.legendre.leggauss(n)
    return _GL_NODES[n]


def box_count(points, center, half_width):
    """Exact point count in the half-open box [a-l, a+l) x [a-l, a+l).

    Low edges are included, high edges excluded, so translates of the box
    tiling the plane count each point exactly once.
    """
    pts = np.asarray(points, dtype=float)
    a = np.asarray(center, dtype=float)
    lo, hi = a - half_width, a + half_width
    inside = np.all((pts >= lo) & (pts < hi), axis=1)
    return int(np.count_nonzero(inside))


def box_mass(density, center, half_width, n=32):
    """Quadrature of a density over the square box (tensor Gauss-Legendre)."""
    t, w = _gl(n)
    a = np.asarray(center, dtype=float)
    xs = a[0] + half_width * t
    ys = a[1] + half_width * t
    ww = half_width * w
    XX, YY = np.meshgrid(xs, ys, indexing="ij")
    P = np.stack([XX, YY], axis=-1)
    return float(np.sum(np.outer(ww, ww) * density(P)))


@dataclass(frozen=True)
class DiscrepancyEntry:
    center: tuple
    half_width: float
    count: int
    expected: float
    flagged: bool = False

    @property
    def D(self):
        return self.count - self.expected

    @property
    def d_over_ell(self):
        return self.D / self.half_width

    @property
    def d_over_ell_sq(self):
        return self.D / self.half_width ** 2


@dataclass
class DiscrepancyReport:
    entries: list
    sup_d_over_ell: float
    max_d_over_ell_sq: float
    boundary_margin: float


def point_discrepancy(points, density, centers, ell_list,
                      support_radius=np.inf) -> DiscrepancyReport:
    """Count-vs-mass discrepancy for square boxes around the given centers.

    Boxes whose corners leave the disk of the given radius are flagged and
    excluded from the sup statistics.
    """
    entries = []
    margin = np.inf
    for a in centers:
        a = np.asarray(a, dtype=float)
        for ell in ell_list:
            corner = np.linalg.norm(np.abs(a) + ell)
            flagged = corner > support_radius
            expected = box_mass(density, a, ell)
            count = box_count(points, a, ell)
            entries.append(DiscrepancyEntry(center=tuple(a), half_width=ell,
                                            count=count, expected=expected,
                                            flagged=bool(flagged)))
            if not flagged:
                margin = min(margin, support_radius - corner)
    good = [e for e in entries if not e.flagged]
    sup1 = max((abs(e.d_over_ell) for e in good), default=0.0)
    sup2 = max((abs(e.d_over_ell_sq) for e in good), default=0.0)
    return DiscrepancyReport(entries=entries, sup_d_over_ell=sup1,
                             max_d_over_ell_sq=sup2,
                             boundary_margin=margin if good else np.nan)


def discrepancy(blown, centers, ell_list) -> DiscrepancyReport:
    """Discrepancy of a blown-up configuration against its background."""
    return point_discrepancy(blown.points_prime, blown.background_density,
                             centers, ell_list,
                             support_radius=blown.support_radius_prime)


@dataclass(frozen=True)
class SeparationReport:
    min_pairwise: float
    max_nearest_neighbor: float
    interior_margin: float
    n_interior: int


def nearest_neighbor_distances(points):
    """Distance from each point to its nearest neighbor (exact)."""
    pts = np.asarray(points, dtype=float)
    if len(pts) < 2:
        raise ValueError("need at least two points")
    if len(pts) <= 400:
        d = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)
        np.fill_diagonal(d, np.inf)
        return d.min(axis=1)
    tree = cKDTree(pts)
    dist, _ = tree.query(pts, k=2)
    return dist[:, 1]


def separation_stats(points, interior_mask=None) -> SeparationReport:
    nn = nearest_neighbor_distances(points)
    if interior_mask is None:
        interior_mask = np.ones(len(points), dtype=bool)
    max_nn = float(np.max(nn[interior_mask])) if np.any(interior_mask) else np.nan
    return SeparationReport(min_pairwise=float(np.min(nn)),
                            max_nearest_neighbor=max_nn,
                            interior_margin=0.0,
                            n_interior=int(np.count_nonzero(interior_mask)))


def separation(blown, interior_margin=1.0) -> SeparationReport:
    """Minimum pairwise distance and worst interior nearest-neighbor gap at
    the blown-up scale."""
    pts = np.asarray(blown.points_prime, dtype=float)
    r = np.linalg.norm(pts, axis=1)
    interior = r <= blown.support_radius_prime - interior_margin
    rep = separation_stats(pts, interior)
    return SeparationReport(min_pairwise=rep.min_pairwise,
                            max_nearest_neighbor=rep.max_nearest_neighbor,
                            interior_margin=interior_margin,
                            n_interior=rep.n_interior)


def sigma_star(m, sigma_star_1):
    """Minimum energy per volume at density m from the density-1 value, via
    the exact scaling of the renormalized energy under dilation."""
    m = np.asarray(m, dtype=float)
    return m * (sigma_star_1 - 0.5 * np.pi * np.log(m))


@dataclass(frozen=True)
class EnergyMapEntry:
    center: tuple
    half_width: float
    w_per_area: float = np.nan
    reference_per_area: float = np.nan
    error_estimate: float = np.nan
    flagged: str = ""


@dataclass
class EnergyMap:
    entries: list
    ell: float
    margin: float

    def values(self):
        return np.array([e.w_per_area for e in self.entries if not e.flagged])

    def references(self):
        return np.array([e.reference_per_area for e in self.entries
                         if not e.flagged])


def energy_map(blown, evaluator, ell, margin, centers,
               sigma_star_1=None,
               settings: WindowQuadratureSettings = WindowQuadratureSettings(),
               window_kind="indicator") -> EnergyMap:
    """Windowed energy per unit area over a grid of boxes, paired with the
    reference quadrature of the minimum-energy profile at the local
    background density (when sigma_star_1 is given)."""
    R = blown.support_radius_prime
    entries = []
    area = (2.0 * ell) ** 2
    for a in centers:
        a = np.asarray(a, dtype=float)
        corner = np.linalg.norm(np.abs(a) + ell)
        if corner > R - margin:
            entries.append(EnergyMapEntry(center=tuple(a), half_width=ell,
                                          flagged="outside margin"))
            continue
        window = CutoffWindow(center=tuple(a), half_width=ell,
                              kind=window_kind)
        try:
            we = windowed_W(evaluator, window, settings)
        except ValueError:
            entries.append(EnergyMapEntry(center=tuple(a), half_width=ell,
                                          flagged="boundary charge"))
            continue
        ref = np.nan
        if sigma_star_1 is not None:
            ref = box_mass(
                lambda P: sigma_star(blown.background_density(P),
                                     sigma_star_1), a, ell) / area
        entries.append(EnergyMapEntry(center=tuple(a), half_width=ell,
                                      w_per_area=we.value / area,
                                      reference_per_area=ref,
                                      error_estimate=we.error_estimate))
    return EnergyMap(entries=entries, ell=ell, margin=margin)


@dataclass(frozen=True)
class GoodBoundary:
    t: float
    mass: float
    valid: bool
    bound_ok: bool = True


def _contour_mass(evaluator, a, t, p, samples_per_side):
    n = samples_per_side
    s = t * (2.0 * (np.arange(n) + 0.5) / n - 1.0)
    h = 2.0 * t / n
    pts = np.concatenate([
        np.column_stack([a[0] + s, np.full(n, a[1] - t)]),
        np.column_stack([a[0] + s, np.full(n, a[1] + t)]),
        np.column_stack([np.full(n, a[0] - t), a[1] + s]),
        np.column_stack([np.full(n, a[0] + t), a[1] + s]),
    ])
    E = evaluator.field_at(pts)
    return float(np.sum(np.linalg.norm(E, axis=-1) ** p)) * h


def good_boundary_search(evaluator, center, ell, p=1.5, gamma=0.8,
                         bound_constant=None, n_candidates=24,
                         samples_per_side=128, clearance=0.05) -> GoodBoundary:
    """Scan contours dK_t(a) for t in [ell - 2 ell^gamma, ell - ell^gamma]
    and return the one minimizing the boundary L^p mass.

    Contours passing within `clearance` of a charge are skipped; if every
    candidate does, the least-bad contour is returned with a warning.  When
    bound_constant M is given, mass <= M ell^(2-gamma) is asserted as a
    warning-level check.
    """
    if not 1.0 < p < 2.0:
        raise ValueError("p must lie in (1, 2)")
    a = np.asarray(center, dtype=float)
    t_lo = ell - 2.0 * ell ** gamma
    t_hi = ell - ell ** gamma
    if t_lo <= 0:
        raise ValueError("window too small for the requested gamma")
    ts = np.linspace(t_lo, t_hi, n_candidates)
    bbox = ((a[0] - ell, a[0] + ell), (a[1] - ell, a[1] + ell))
    charges, _ = evaluator.charges_near(bbox, pad=1.0)
    if len(charges):
        sup_dist = np.max(np.abs(charges - a), axis=1)
    else:
        sup_dist = np.zeros(0)

    best = None
    fallback = None
    for t in ts:
        gap = float(np.min(np.abs(sup_dist - t))) if len(sup_dist) else np.inf
        mass = None
        if gap > clearance:
            mass = _contour_mass(evaluator, a, t, p, samples_per_side)
            if best is None or mass < best.mass:
                best = GoodBoundary(t=float(t), mass=mass, valid=True)
        if fallback is None or gap > fallback[0]:
            fallback = (gap, float(t))
    if best is None:
        warnings.warn("every candidate contour passes near a charge; "
                      "returning the least-bad contour")
        gap, t = fallback
        mass = _contour_mass(evaluator, a, t, p, samples_per_side)
        best = GoodBoundary(t=t, mass=mass, valid=False)
    if bound_constant is not None:
        limit = bound_constant * ell ** (2.0 - gamma)
        if best.mass > limit:
            warnings.warn(f"boundary mass {best.mass} exceeds the "
                          f"size hypothesis limit {limit}")
            best = GoodBoundary(t=best.t, mass=best.mass, valid=best.valid,
                                bound_ok=False)
    return best
