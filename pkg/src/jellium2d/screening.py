"""Constructive screening machinery on rectangles.

Integer-charge partitions of rectangles and square annuli, per-cell Neumann
fields with a single point charge against the background, flux-rectifying
fields, a glued zero-outward-flux screened patch, a curl-removing projection,
and the discrete sum-of-fields energy inequality.

Grid solves are cell-centered finite differences diagonalized by DCT-II
(Neumann) or DST-II (Dirichlet); the point-charge singularity is always kept
analytic (-log) and never lives on a grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy import fft, integrate, optimize


class IncompatibleDataError(ValueError):
    pass


class PartitionError(RuntimeError):
    pass


class AspectRatioError(ValueError):
    pass


@dataclass(frozen=True)
class Rect:
    x0: float
    y0: float
    x1: float
    y1: float

    @property
    def width(self):
        return self.x1 - self.x0

    @property
    def height(self):
        return self.y1 - self.y0

    @property
    def area(self):
        return self.width * self.height

    @property
    def center(self):
        return np.array([0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1)])

    @property
    def perimeter(self):
        return 2.0 * (self.width + self.height)


SIDES = ("left", "right", "bottom", "top")

_NORMALS = {"left": np.array([-1.0, 0.0]), "right": np.array([1.0, 0.0]),
            "bottom": np.array([0.0, -1.0]), "top": np.array([0.0, 1.0])}


def _as_density(rho):
    if callable(rho):
        return rho
    v = float(rho)
    return lambda X, Y: np.full_like(np.asarray(X, dtype=float), v)


def _side_endpoints(rect: Rect, side: str):
    return {"left": ((rect.x0, rect.y0), (rect.x0, rect.y1)),
            "right": ((rect.x1, rect.y0), (rect.x1, rect.y1)),
            "bottom": ((rect.x0, rect.y0), (rect.x1, rect.y0)),
            "top": ((rect.x0, rect.y1), (rect.x1, rect.y1))}[side]


def _face_centers(rect: Rect, side: str, n_par: int):
    if side in ("left", "right"):
        t = rect.y0 + rect.height * (np.arange(n_par) + 0.5) / n_par
        x = rect.x0 if side == "left" else rect.x1
        return np.column_stack([np.full(n_par, x), t])
    t = rect.x0 + rect.width * (np.arange(n_par) + 0.5) / n_par
    y = rect.y0 if side == "bottom" else rect.y1
    return np.column_stack([t, np.full(n_par, y)])


def solve_neumann(rect: Rect, f_grid: np.ndarray, flux: dict,
                  compat_tol=1e-4) -> np.ndarray:
    """Mean-zero u with -Lap u = f, du/dnu = flux[side] (face-center samples).

    Cell-centered 5-point stencil; the pure-Neumann operator is diagonal in
    the DCT-II basis.  Compatibility int f + oint g = 0 must hold at the
    grid-quadrature level; the residual mean is projected out.
    """
    nx, ny = f_grid.shape
    hx, hy = rect.width / nx, rect.height / ny
    rhs = np.array(f_grid, dtype=float)
    g = {s: np.asarray(flux.get(s, 0.0), dtype=float)
         * np.ones(ny if s in ("left", "right") else nx) for s in SIDES}
    rhs[0, :] += g["left"] / hx
    rhs[-1, :] += g["right"] / hx
    rhs[:, 0] += g["bottom"] / hy
    rhs[:, -1] += g["top"] / hy
    total = float(np.sum(rhs)) * hx * hy
    scale = float(np.sum(np.abs(rhs))) * hx * hy + 1.0
    if abs(total) > compat_tol * scale:
        raise IncompatibleDataError(
            f"incompatible data: net source {total} (relative {total / scale})")
    rhs = rhs - np.mean(rhs)
    lam_x = (2.0 - 2.0 * np.cos(np.pi * np.arange(nx) / nx)) / hx ** 2
    lam_y = (2.0 - 2.0 * np.cos(np.pi * np.arange(ny) / ny)) / hy ** 2
    uh = fft.dctn(rhs, type=2)
    denom = lam_x[:, None] + lam_y[None, :]
    denom[0, 0] = 1.0
    uh /= denom
    uh[0, 0] = 0.0
    u = fft.idctn(uh, type=2)
    return u - np.mean(u)


def solve_dirichlet(rect: Rect, f_grid: np.ndarray) -> np.ndarray:
    """u with -Lap u = f and u = 0 on the boundary faces (cell-centered)."""
    nx, ny = f_grid.shape
    hx, hy = rect.width / nx, rect.height / ny
    lam_x = (2.0 - 2.0 * np.cos(np.pi * np.arange(1, nx + 1) / nx)) / hx ** 2
    lam_y = (2.0 - 2.0 * np.cos(np.pi * np.arange(1, ny + 1) / ny)) / hy ** 2
    uh = fft.dstn(np.asarray(f_grid, dtype=float), type=2)
    uh /= (lam_x[:, None] + lam_y[None, :])
    return fft.idstn(uh, type=2)


def _grid_shape(rect: Rect, grid_n: int):
    m = max(rect.width, rect.height)
    nx = max(8, int(round(grid_n * rect.width / m)))
    ny = max(8, int(round(grid_n * rect.height / m)))
    return nx, ny


@dataclass
class GridField:
    """A vector field on a rectangle: smooth part sampled at cell centers,
    point charges kept analytic, imposed normal traces stored per side."""

    rect: Rect
    Ex: np.ndarray
    Ey: np.ndarray
    points: np.ndarray = dc_field(default_factory=lambda: np.zeros((0, 2)))
    rho: np.ndarray = None          # background density at cell centers
    traces: dict = dc_field(default_factory=dict)  # side -> E . nu samples
    energy: float = None
    norm_report: dict = None

    @property
    def shape(self):
        return self.Ex.shape

    @property
    def spacing(self):
        nx, ny = self.Ex.shape
        return self.rect.width / nx, self.rect.height / ny

    def cell_centers(self):
        nx, ny = self.Ex.shape
        hx, hy = self.spacing
        xs = self.rect.x0 + hx * (np.arange(nx) + 0.5)
        ys = self.rect.y0 + hy * (np.arange(ny) + 0.5)
        XX, YY = np.meshgrid(xs, ys, indexing="ij")
        return np.stack([XX, YY], axis=-1)

    def total_samples(self):
        """Smooth part plus the analytic point fields, at cell centers."""
        P = self.cell_centers()
        Ex, Ey = np.array(self.Ex), np.array(self.Ey)
        for p in self.points:
            d = P - p
            s2 = np.maximum(np.sum(d * d, axis=-1), 1e-280)
            Ex += d[..., 0] / s2
            Ey += d[..., 1] / s2
        return Ex, Ey

    def smooth_energy(self):
        hx, hy = self.spacing
        return 0.5 * float(np.sum(self.Ex ** 2 + self.Ey ** 2)) * hx * hy

    def side_flux(self, side):
        """Net outward flux of the stored trace through one side."""
        hx, hy = self.spacing
        tr = self.traces.get(side)
        if tr is None:
            return 0.0
        h_par = hy if side in ("left", "right") else hx
        return float(np.sum(tr)) * h_par

    def divergence_residual(self, expected_rhs, margin_cells=2):
        """max |div_h E_smooth - expected| away from points and edges."""
        hx, hy = self.spacing
        gx = np.gradient(self.Ex, hx, axis=0, edge_order=2)
        gy = np.gradient(self.Ey, hy, axis=1, edge_order=2)
        div = gx + gy
        res = np.abs(div - expected_rhs)
        mask = np.ones_like(res, dtype=bool)
        mask[:margin_cells, :] = mask[-margin_cells:, :] = False
        mask[:, :margin_cells] = mask[:, -margin_cells:] = False
        P = self.cell_centers()
        for p in self.points:
            d = np.linalg.norm(P - p, axis=-1)
            mask &= d > 6 * max(hx, hy)
        if not np.any(mask):
            return 0.0
        return float(np.max(res[mask]))


# ---------------------------------------------------------------------------
# quadrature helpers

_GL_NODES = {}


def _gl(n):
    if n not in _GL_NODES:
        _GL_NODES[n] = np.polynomial.legendre.leggauss(n)
    return _GL_NODES[n]


def _line_integral(fun, p0, p1, n=32):
    """int fun(points) ds along the segment p0 -> p1 (Gauss-Legendre)."""
    t, w = _gl(n)
    p0, p1 = np.asarray(p0, float), np.asarray(p1, float)
    length = float(np.linalg.norm(p1 - p0))
    pts = 0.5 * (p1 - p0) * (t[:, None] + 1.0) + p0
    return float(np.sum(0.5 * length * w * fun(pts)))


def _rect_mass(rho, rect: Rect, n=32):
    t, w = _gl(n)
    xs = 0.5 * rect.width * t + 0.5 * (rect.x0 + rect.x1)
    wx = 0.5 * rect.width * w
    ys = 0.5 * rect.height * t + 0.5 * (rect.y0 + rect.y1)
    wy = 0.5 * rect.height * w
    XX, YY = np.meshgrid(xs, ys, indexing="ij")
    return float(np.sum(np.outer(wx, wy) * rho(XX, YY)))


def _boundary_ray_length(rect: Rect, c, theta):
    dx = np.where(np.cos(theta) >= 0, rect.x1 - c[0], c[0] - rect.x0)
    dy = np.where(np.sin(theta) >= 0, rect.y1 - c[1], c[1] - rect.y0)
    with np.errstate(divide="ignore"):
        rx = dx / np.abs(np.cos(theta))
        ry = dy / np.abs(np.sin(theta))
    return np.minimum(rx, ry)


def _angular_integrals(rect: Rect, c):
    """(int log r(th) dth, int r^2 (2 log r - 1)/4 dth) where r(th) is the
    distance from c to the boundary; split at corner angles so each piece is
    smooth."""
    corners = [(rect.x1, rect.y1), (rect.x0, rect.y1),
               (rect.x0, rect.y0), (rect.x1, rect.y0)]
    angles = sorted(float(np.arctan2(cy - c[1], cx - c[0]) % (2 * np.pi))
                    for cx, cy in corners)
    angles = angles + [angles[0] + 2 * np.pi]
    i_log, i_area = 0.0, 0.0
    for a0, a1 in zip(angles[:-1], angles[1:]):
        if a1 - a0 < 1e-14:
            continue
        t, w = _gl(48)
        th = 0.5 * (a1 - a0) * t + 0.5 * (a0 + a1)
        ww = 0.5 * (a1 - a0) * w
        r = _boundary_ray_length(rect, c, th)
        i_log += float(np.sum(ww * np.log(r)))
        i_area += float(np.sum(ww * r * r * (2 * np.log(r) - 1) / 4.0))
    return i_log, i_area


def _point_flux_on_side(c, side, pts):
    """(x - c) . nu / |x - c|^2 at given boundary points."""
    d = pts - c
    s2 = np.sum(d * d, axis=-1)
    return (d @ _NORMALS[side]) / s2


def _edge_quad_log_flux(rect: Rect, c, n=64):
    """oint log|x - c| ((x - c) . nu / |x - c|^2) ds over the rectangle."""
    total = 0.0
    for side in SIDES:
        p0, p1 = _side_endpoints(rect, side)

        def fun(pts, side=side):
            d = pts - c
            s2 = np.sum(d * d, axis=-1)
            return 0.5 * np.log(s2) * (d @ _NORMALS[side]) / s2
        total += _line_integral(fun, p0, p1, n=n)
    return total


# ---------------------------------------------------------------------------
# per-cell solves


def _dirichlet_energy(u, flux, f_grid, hx, hy):
    """int |grad u|^2 = oint u du/dnu + int u f  (second-order midpoint)."""
    interior = float(np.sum(u * f_grid)) * hx * hy
    gl = np.asarray(flux.get("left", 0.0)) * np.ones(u.shape[1])
    gr = np.asarray(flux.get("right", 0.0)) * np.ones(u.shape[1])
    gb = np.asarray(flux.get("bottom", 0.0)) * np.ones(u.shape[0])
    gt = np.asarray(flux.get("top", 0.0)) * np.ones(u.shape[0])
    # wall value extrapolated from the first cell with the known slope
    bdry = (np.sum((u[0, :] + 0.5 * hx * gl) * gl) * hy
            + np.sum((u[-1, :] + 0.5 * hx * gr) * gr) * hy
            + np.sum((u[:, 0] + 0.5 * hy * gb) * gb) * hx
            + np.sum((u[:, -1] + 0.5 * hy * gt) * gt) * hx)
    return interior + float(bdry)


def cell_point_field(cell: Rect, m=None, rho=None, grid_n=64,
                     extra_flux=None, point=None,
                     check_aspect=True) -> GridField:
    """Zero-outward-flux field of one unit point charge against background
    rho (default: the constant m = 1/|cell|) in a rectangle.

    E = (x-c)/|x-c|^2 - grad h with -Lap h = -2 pi rho and Neumann data
    matching zero total normal trace (or the traces requested in extra_flux).
    The eta-renormalized cell energy is stored on the result.
    """
    c = cell.center if point is None else np.asarray(point, dtype=float)
    if rho is None:
        if m is None:
            m = 1.0 / cell.area
        rho_fun = None
        m = float(m)
    else:
        rho_fun = _as_density(rho)
        m = None
    if check_aspect and rho_fun is None:
        band = 1.0 / np.sqrt(m)
        for side_len in (cell.width, cell.height):
            if not 0.5 * band - 1e-12 <= side_len <= 1.5 * band + 1e-12:
                raise AspectRatioError(
                    f"sidelength {side_len} outside [{0.5 * band}, {1.5 * band}]")

    nx, ny = _grid_shape(cell, grid_n)
    hx, hy = cell.width / nx, cell.height / ny
    xs = cell.x0 + hx * (np.arange(nx) + 0.5)
    ys = cell.y0 + hy * (np.arange(ny) + 0.5)
    XX, YY = np.meshgrid(xs, ys, indexing="ij")
    rho_grid = np.full((nx, ny), m) if rho_fun is None else rho_fun(XX, YY)

    flux, traces = {}, {}
    for side in SIDES:
        n_par = ny if side in ("left", "right") else nx
        pts = _face_centers(cell, side, n_par)
        g = _point_flux_on_side(c, side, pts)
        want = np.zeros(n_par)
        if extra_flux and side in extra_flux:
            spec = extra_flux[side]
            for part in (spec if isinstance(spec, list) else [spec]):
                vals, _ = _side_trace_values(part, cell, side, n_par)
                want = want + vals
        flux[side] = g - want
        traces[side] = want
    u = solve_neumann(cell, -2 * np.pi * rho_grid, flux)
    gx = np.gradient(u, hx, axis=0, edge_order=2)
    gy = np.gradient(u, hy, axis=1, edge_order=2)

    # renormalized energy: W_cell = 1/2 int log r(th) dth
    #   - oint log|x-c| dh/dnu ds + 2 pi int log|x-c| rho dx + 1/2 int|grad h|^2
    i_log, i_area = _angular_integrals(cell, c)
    e_sing = 0.5 * i_log
    if rho_fun is None:
        cross_volume = 2 * np.pi * m * i_area
    else:
        s2 = np.maximum((XX - c[0]) ** 2 + (YY - c[1]) ** 2, 1e-280)
        cross_volume = (2 * np.pi
                        * float(np.sum(0.5 * np.log(s2) * rho_grid)) * hx * hy)
    e_cross = -_edge_quad_log_flux(cell, c) + cross_volume
    # the imposed traces change dh/dnu from S.nu by -want
    for side in SIDES:
        tr = traces[side]
        if np.any(tr):
            pts = _face_centers(cell, side, len(tr))
            s2 = np.sum((pts - c) ** 2, axis=-1)
            h_par = hy if side in ("left", "right") else hx
            e_cross += float(np.sum(0.5 * np.log(s2) * tr)) * h_par
    e_smooth = 0.5 * _dirichlet_energy(u, flux, -2 * np.pi * rho_grid, hx, hy)

    return GridField(rect=cell, Ex=-gx, Ey=-gy,
                     points=np.asarray([c]), rho=rho_grid,
                     traces=traces, energy=e_sing + e_cross + e_smooth)


def cell_rectify_field(cell: Rect, rho, phi_side: dict, m: float,
                       grid_n=64, compat_tol=1e-9) -> GridField:
    """Field with div E = 2 pi (rho - m) and E . nu = phi_side, no point.

    Compatibility (mean rho - m)|cell| = (1/2 pi) oint phi is checked by
    quadrature to compat_tol.  E = -grad u; the L^q norms of grad u for
    q in {1.5, 2} are stored in norm_report.
    """
    rho_fun = _as_density(rho)
    nx, ny = _grid_shape(cell, grid_n)
    hx, hy = cell.width / nx, cell.height / ny
    xs = cell.x0 + hx * (np.arange(nx) + 0.5)
    ys = cell.y0 + hy * (np.arange(ny) + 0.5)
    XX, YY = np.meshgrid(xs, ys, indexing="ij")
    rho_grid = rho_fun(XX, YY)

    flux, traces = {}, {}
    oint_phi = 0.0
    for side in SIDES:
        n_par = ny if side in ("left", "right") else nx
        spec = phi_side.get(side)
        vals = np.zeros(n_par)
        for part in (spec if isinstance(spec, list) else [spec]):
            v, tot = _side_trace_values(part, cell, side, n_par)
            vals = vals + v
            oint_phi += tot
        traces[side] = vals
        flux[side] = -vals
    mass = _rect_mass(rho_fun, cell, n=48)
    compat = 2 * np.pi * (mass - m * cell.area) - oint_phi
    scale = max(1.0, abs(oint_phi), 2 * np.pi * abs(mass))
    if abs(compat) > compat_tol * scale:
        raise IncompatibleDataError(
            f"incompatible data: residual {compat} exceeds tolerance")

    f_grid = 2 * np.pi * (rho_grid - m)
    u = solve_neumann(cell, f_grid, flux)
    gx = np.gradient(u, hx, axis=0, edge_order=2)
    gy = np.gradient(u, hy, axis=1, edge_order=2)
    gf = GridField(rect=cell, Ex=-gx, Ey=-gy, rho=rho_grid, traces=traces)
    gf.energy = 0.5 * _dirichlet_energy(u, flux, f_grid, hx, hy)
    mag = np.sqrt(gx ** 2 + gy ** 2)
    gf.norm_report = {q: float((np.sum(mag ** q) * hx * hy) ** (1.0 / q))
                      for q in (1.5, 2.0)}
    return gf


# ---------------------------------------------------------------------------
# integer-charge partitions


@dataclass
class ChargePartition:
    domain: object               # Rect or (inner half-width, outer half-width)
    cells: list                  # list of Rect
    charges: np.ndarray          # per-cell integer budget (mass + flux share)
    flux_shares: np.ndarray = None   # boundary-flux part of each budget
    pairs: list = dc_field(default_factory=list)  # (index_a, index_b, segment)

    def __post_init__(self):
        if self.flux_shares is None:
            self.flux_shares = np.zeros(len(self.cells))

    def total_charge(self):
        return float(np.sum(self.charges))

    def area(self):
        return float(sum(c.area for c in self.cells))

    def sidelength_band(self):
        """(min, max) cell sidelength, to compare with [s/2, 3s/2]."""
        sizes = [s for c in self.cells for s in (c.width, c.height)]
        return (min(sizes), max(sizes)) if sizes else (0.0, 0.0)


def verify_partition(part: ChargePartition, rho, integer_tol=1e-9):
    """Quadrature check: cells tile the domain and each budget is a positive
    integer (for coupled corner pairs, the pair's combined budget)."""
    rho_fun = _as_density(rho)
    area = part.area()
    if isinstance(part.domain, Rect):
        expected = part.domain.area
    else:
        inner, outer = part.domain
        expected = 4.0 * (outer ** 2 - inner ** 2)
    if abs(area - expected) > 1e-10 * max(1.0, expected):
        raise PartitionError("cells do not tile the domain")
    paired_b = {b for _, b, *_ in part.pairs}
    pair_of_a = {p[0]: p[1] for p in part.pairs}
    for i, (cell, q) in enumerate(zip(part.cells, part.charges)):
        if i in paired_b:
            continue
        budget = _rect_mass(rho_fun, cell, n=48) + part.flux_shares[i]
        if i in pair_of_a:
            j = pair_of_a[i]
            budget += _rect_mass(rho_fun, part.cells[j], n=48) + part.flux_shares[j]
            q = q + part.charges[j]
        if abs(budget - round(budget)) > integer_tol or round(budget) < 1:
            raise PartitionError(
                f"cell budget {budget} is not a positive integer")
        if abs(budget - q) > integer_tol:
            raise PartitionError(
                f"cell budget {budget} disagrees with recorded charge {q}")


def _integer_targets(total: int, k: int):
    """Split the integer total into k (or fewer) near-equal positive parts."""
    k = max(1, min(k, total))
    base = total // k
    rem = total - base * k
    return [base + (1 if i < rem else 0) for i in range(k)]


def _trace_fun(phi):
    if phi is None:
        return lambda pts: np.zeros(len(pts))
    if callable(phi):
        return phi
    v = float(phi)
    return lambda pts, v=v: np.full(len(pts), v)


def partition_strip(domain: Rect, rho, scale: float, boundary_flux=None,
                    axis=0, integer_tol=1e-9) -> ChargePartition:
    """Cut a rectangle into integer-budget cells of size about `scale`.

    The budget of a cell is its charge plus (1/2 pi) of the boundary flux
    through its portion of the domain boundary.  Strips perpendicular to
    `axis` are cut at integer thresholds of the cumulative budget (1D root
    finding on a continuous increasing function), then each strip is cut the
    other way.  A final cell narrower than scale/2 is merged into its
    neighbor.
    """
    rho_f = _as_density(rho)
    bf = dict(boundary_flux) if boundary_flux else {}
    side_funs = {s: _trace_fun(bf.get(s)) for s in SIDES}

    if axis == 1:
        flip_flux = None
        if boundary_flux:
            swap = {"left": "bottom", "right": "top",
                    "bottom": "left", "top": "right"}
            flip_flux = {swap[s]: (lambda pts, f=side_funs[s]: f(pts[:, ::-1]))
                         for s in SIDES if bf.get(s) is not None}
        flipped = partition_strip(
            Rect(domain.y0, domain.x0, domain.y1, domain.x1),
            lambda X, Y: rho_f(Y, X), scale, boundary_flux=flip_flux,
            axis=0, integer_tol=integer_tol)
        cells = [Rect(c.y0, c.x0, c.y1, c.x1) for c in flipped.cells]
        return ChargePartition(domain=domain, cells=cells,
                               charges=flipped.charges,
                               flux_shares=flipped.flux_shares)

    def x_budget(x_lo, x_hi, with_left, with_right):
        v = _rect_mass(rho_f, Rect(x_lo, domain.y0, x_hi, domain.y1), n=32)
        v += _line_integral(side_funs["bottom"], (x_lo, domain.y0),
                            (x_hi, domain.y0)) / (2 * np.pi)
        v += _line_integral(side_funs["top"], (x_lo, domain.y1),
                            (x_hi, domain.y1)) / (2 * np.pi)
        if with_left:
            v += _line_integral(side_funs["left"], (domain.x0, domain.y0),
                                (domain.x0, domain.y1)) / (2 * np.pi)
        if with_right:
            v += _line_integral(side_funs["right"], (domain.x1, domain.y0),
                                (domain.x1, domain.y1)) / (2 * np.pi)
        return v

    total = x_budget(domain.x0, domain.x1, True, True)
    N = int(round(total))
    if N < 1:
        raise PartitionError("insufficient charge")
    if abs(total - N) > 1e-7 * max(1.0, abs(total)):
        raise IncompatibleDataError(f"domain budget {total} is not an integer")

    k = max(1, int(round(domain.width / scale)))
    targets = _integer_targets(N, k)
    cuts = [domain.x0]
    acc = 0
    for tgt in targets[:-1]:
        acc += tgt
        try:
            t = optimize.brentq(
                lambda x: x_budget(domain.x0, x, True, False) - acc,
                cuts[-1], domain.x1, xtol=1e-12)
        except ValueError as e:
            raise PartitionError(f"partition failed: {e}")
        cuts.append(t)
    cuts.append(domain.x1)
    if len(cuts) >= 3 and cuts[-1] - cuts[-2] < 0.5 * scale:
        cuts.pop(-2)
        targets[-2] += targets[-1]
        targets.pop()

    cells, charges, shares = [], [], []
    for idx, (lo, hi) in enumerate(zip(cuts[:-1], cuts[1:])):
        n_strip = targets[idx]
        has_l = idx == 0
        has_r = idx == len(cuts) - 2

        def y_budget(y_lo, y_hi, with_bottom, with_top):
            v = _rect_mass(rho_f, Rect(lo, y_lo, hi, y_hi), n=32)
            if has_l:
                v += _line_integral(side_funs["left"], (domain.x0, y_lo),
                                    (domain.x0, y_hi)) / (2 * np.pi)
            if has_r:
                v += _line_integral(side_funs["right"], (domain.x1, y_lo),
                                    (domain.x1, y_hi)) / (2 * np.pi)
            if with_bottom:
                v += _line_integral(side_funs["bottom"], (lo, domain.y0),
                                    (hi, domain.y0)) / (2 * np.pi)
            if with_top:
                v += _line_integral(side_funs["top"], (lo, domain.y1),
                                    (hi, domain.y1)) / (2 * np.pi)
            return v

        ky = max(1, int(round(domain.height / scale)))
        y_targets = _integer_targets(n_strip, ky)
        ycuts = [domain.y0]
        acc = 0
        for tgt in y_targets[:-1]:
            acc += tgt
            try:
                u = optimize.brentq(
                    lambda y: y_budget(domain.y0, y, True, False) - acc,
                    ycuts[-1], domain.y1, xtol=1e-12)
            except ValueError as e:
                raise PartitionError(f"partition failed: {e}")
            ycuts.append(u)
        ycuts.append(domain.y1)
        if len(ycuts) >= 3 and ycuts[-1] - ycuts[-2] < 0.5 * scale:
            ycuts.pop(-2)
            y_targets[-2] += y_targets[-1]
            y_targets.pop()
        for j, (a, b) in enumerate(zip(ycuts[:-1], ycuts[1:])):
            cells.append(Rect(lo, a, hi, b))
            charges.append(y_targets[j])
            shares.append(y_budget(a, b, j == 0, j == len(ycuts) - 2)
                          - _rect_mass(rho_f, Rect(lo, a, hi, b), n=32))
    part = ChargePartition(domain=domain, cells=cells,
                           charges=np.asarray(charges, dtype=float),
                           flux_shares=np.asarray(shares))
    verify_partition(part, rho_f, integer_tol)
    return part


# ---------------------------------------------------------------------------
# screened annular patch


def _ring_rects(inner, outer):
    """Pinwheel partition of the square annulus K_outer minus K_inner, in
    cyclic order with (axis, traversal direction)."""
    l, t = inner, outer
    return [
        ("bottom", Rect(-t, -t, l, -l), 0, +1),
        ("right", Rect(l, -t, t, l), 1, +1),
        ("top", Rect(-l, l, t, t), 0, -1),
        ("left", Rect(-t, -l, -l, t), 1, -1),
    ]


def _inner_edge(name, inner):
    """(side-of-rect on the inner square, fixed coordinate, lo, hi)."""
    l = inner
    return {"bottom": ("top", -l, -l, l),
            "right": ("left", l, -l, l),
            "top": ("bottom", l, -l, l),
            "left": ("right", -l, -l, l)}[name]


def _ring_cells(inner, outer, rho_f, inner_flux=None, tol=1e-12):
    """Cut the pinwheel ring cyclically into unit-budget rectangles.

    A cell's budget is its charge minus (1/2 pi) of the inner-boundary flux
    through its portion of the inner square.  Cells straddling a ring corner
    become coupled rectangle pairs sharing one unit of budget.  Returns
    (cells, budgets, pairs, per-cell inner-edge segments).
    """
    pieces = _ring_rects(inner, outer)

    def sub_rect(piece, a, b):
        name, r, axis, dirn = piece
        lo, hi = min(a, b), max(a, b)
        return Rect(lo, r.y0, hi, r.y1) if axis == 0 else Rect(r.x0, lo, r.x1, hi)

    def inner_overlap(piece, a, b):
        if inner_flux is None:
            return None
        name, r, axis, dirn = piece
        side, fixed, elo, ehi = _inner_edge(name, inner)
        lo, hi = max(min(a, b), elo), min(max(a, b), ehi)
        if hi - lo <= 1e-14:
            return None
        return (side, fixed, lo, hi)

    def budget(piece, a, b):
        v = _rect_mass(rho_f, sub_rect(piece, a, b), n=32)
        seg = inner_overlap(piece, a, b)
        if seg is not None:
            side, fixed, lo, hi = seg
            horizontal = side in ("bottom", "top")
            p0 = (lo, fixed) if horizontal else (fixed, lo)
            p1 = (hi, fixed) if horizontal else (fixed, hi)
            v -= _line_integral(inner_flux, p0, p1, n=48) / (2 * np.pi)
        return v

    cells, budgets, pairs, inner_edges = [], [], [], []
    carry = 0.0
    carry_cell = None
    for piece in pieces:
        name, r, axis, dirn = piece
        lo_c, hi_c = (r.x0, r.x1) if axis == 0 else (r.y0, r.y1)
        start, end = (lo_c, hi_c) if dirn > 0 else (hi_c, lo_c)
        a = start
        remaining = budget(piece, start, end)
        while True:
            need = 1.0 - carry
            if remaining >= need - tol:
                if remaining <= need + tol:
                    b = end
                else:
                    lo_br, hi_br = (a, end) if dirn > 0 else (end, a)
                    try:
                        b = optimize.brentq(
                            lambda x: budget(piece, a, x) - need,
                            lo_br, hi_br, xtol=1e-13)
                    except ValueError as e:
                        raise PartitionError(
                            f"partition failed on ring piece {name}: {e}")
                cells.append(sub_rect(piece, a, b))
                inner_edges.append(inner_overlap(piece, a, b))
                if carry_cell is not None:
                    budgets.append(need)
                    pairs.append((carry_cell, len(cells) - 1))
                    carry_cell = None
                else:
                    budgets.append(1.0)
                carry = 0.0
                remaining -= need
                a = b
                if remaining <= tol:
                    break
            else:
                if remaining > tol:
                    cells.append(sub_rect(piece, a, end))
                    inner_edges.append(inner_overlap(piece, a, end))
                    budgets.append(remaining)
                    carry_cell = len(cells) - 1
                    carry = remaining
                break
    if carry > 1e-9:
        raise PartitionError("ring budget did not close to an integer")
    return cells, budgets, pairs, inner_edges


def _shared_segment(ra: Rect, rb: Rect, tol=1e-9):
    """(side_a, side_b, lo, hi) of the common edge of two rectangles."""
    if abs(ra.x1 - rb.x0) < tol:
        lo, hi = max(ra.y0, rb.y0), min(ra.y1, rb.y1)
        if hi > lo:
            return ("right", "left", lo, hi)
    if abs(ra.x0 - rb.x1) < tol:
        lo, hi = max(ra.y0, rb.y0), min(ra.y1, rb.y1)
        if hi > lo:
            return ("left", "right", lo, hi)
    if abs(ra.y1 - rb.y0) < tol:
        lo, hi = max(ra.x0, rb.x0), min(ra.x1, rb.x1)
        if hi > lo:
            return ("top", "bottom", lo, hi)
    if abs(ra.y0 - rb.y1) < tol:
        lo, hi = max(ra.x0, rb.x0), min(ra.x1, rb.x1)
        if hi > lo:
            return ("bottom", "top", lo, hi)
    raise PartitionError("paired cells share no edge")


class SegmentFlux:
    """Constant normal trace supported on a sub-segment [lo, hi] of one side.

    Face samples are overlap fractions, so the discrete trace integrates to
    exactly value * (hi - lo) on any face grid."""

    def __init__(self, side, lo, hi, value):
        self.side = side
        self.lo, self.hi, self.value = lo, hi, value

    def __call__(self, pts):
        t = pts[:, 1] if self.side in ("left", "right") else pts[:, 0]
        return np.where((t >= self.lo - 1e-12) & (t <= self.hi + 1e-12),
                        self.value, 0.0)

    def face_values(self, rect: Rect, n_par):
        if self.side in ("left", "right"):
            a, h = rect.y0, rect.height / n_par
        else:
            a, h = rect.x0, rect.width / n_par
        f0 = a + h * np.arange(n_par)
        overlap = np.clip(np.minimum(f0 + h, self.hi) - np.maximum(f0, self.lo),
                          0.0, None)
        return self.value * overlap / h

    def total(self):
        return self.value * (self.hi - self.lo)


class PartialTrace:
    """A smooth normal trace restricted to a sub-segment [lo, hi] of a side.

    Face samples average the trace over the covered part of each face, so the
    discrete trace integrates to the segment integral up to O(h^2)."""

    def __init__(self, side, lo, hi, fun):
        self.side = side
        self.lo, self.hi = lo, hi
        self.fun = fun

    def _point(self, rect: Rect, t):
        if self.side in ("left", "right"):
            x = rect.x0 if self.side == "left" else rect.x1
            return np.column_stack([np.full(len(t), x), t])
        y = rect.y0 if self.side == "bottom" else rect.y1
        return np.column_stack([t, np.full(len(t), y)])

    def face_values(self, rect: Rect, n_par):
        if self.side in ("left", "right"):
            a, h = rect.y0, rect.height / n_par
        else:
            a, h = rect.x0, rect.width / n_par
        f0 = a + h * np.arange(n_par)
        lo = np.maximum(f0, self.lo)
        hi = np.minimum(f0 + h, self.hi)
        overlap = np.clip(hi - lo, 0.0, None)
        mid = np.where(overlap > 0, 0.5 * (lo + hi), f0 + 0.5 * h)
        return np.asarray(self.fun(self._point(rect, mid)),
                          dtype=float) * overlap / h

    def total(self, rect: Rect):
        t, w = _gl(48)
        s = 0.5 * (self.hi - self.lo) * t + 0.5 * (self.lo + self.hi)
        ww = 0.5 * (self.hi - self.lo) * w
        return float(np.sum(ww * self.fun(self._point(rect, s))))


def _side_trace_values(phi, rect: Rect, side, n_par):
    """Face-center samples of a trace spec (None, scalar, callable, or
    SegmentFlux) and its exact line integral over the side."""
    if phi is None:
        return np.zeros(n_par), 0.0
    if isinstance(phi, SegmentFlux):
        return phi.face_values(rect, n_par), phi.total()
    if isinstance(phi, PartialTrace):
        return phi.face_values(rect, n_par), phi.total(rect)
    p0, p1 = _side_endpoints(rect, side)
    if callable(phi):
        pts = _face_centers(rect, side, n_par)
        vals = np.asarray(phi(pts), dtype=float) * np.ones(n_par)
        # adaptive quadrature: user traces may have kinks
        p0a, p1a = np.asarray(p0, float), np.asarray(p1, float)
        length = float(np.linalg.norm(p1a - p0a))
        total, _ = integrate.quad(
            lambda s: float(np.asarray(
                phi((p0a + s / length * (p1a - p0a))[None, :])).ravel()[0]),
            0.0, length, epsabs=1e-12, epsrel=1e-12, limit=200)
        return vals, total
    v = float(phi)
    length = np.linalg.norm(np.subtract(p1, p0))
    return np.full(n_par, v), v * float(length)


@dataclass
class ScreenedPatch:
    inner_halfwidth: float
    outer_halfwidth: float
    partition: ChargePartition
    points: np.ndarray
    fields: list
    energy_estimate: float

    def outer_flux(self):
        """Net flux through the outer boundary, from the stored traces."""
        t = self.outer_halfwidth
        total = 0.0
        for f in self.fields:
            r = f.rect
            for side, on_outer in (("left", abs(r.x0 + t) < 1e-12),
                                   ("right", abs(r.x1 - t) < 1e-12),
                                   ("bottom", abs(r.y0 + t) < 1e-12),
                                   ("top", abs(r.y1 - t) < 1e-12)):
                if on_outer:
                    total += f.side_flux(side)
        return total

    def max_interface_jump(self):
        """Largest mismatch of the imposed normal flux per unit length across
        the coupled internal interfaces (recomputed from the stored traces).
        All other internal interfaces carry identically zero traces on both
        sides."""
        worst = 0.0
        for ia, ib, seg in self.partition.pairs:
            side_a, side_b, lo, hi = seg
            va = self.fields[ia].side_flux(side_a)
            vb = self.fields[ib].side_flux(side_b)
            worst = max(worst, abs(va + vb) / (hi - lo))  # opposite normals
        return worst


def find_outer_halfwidth(inner, rho, min_gap, inner_flux_total=0.0):
    """Smallest t >= inner + min_gap making the annulus budget a positive
    integer; returns (t, budget)."""
    rho_f = _as_density(rho)
    hole = _rect_mass(rho_f, Rect(-inner, -inner, inner, inner), n=48)

    def mass(t):
        full = _rect_mass(rho_f, Rect(-t, -t, t, t), n=48)
        return full - hole - inner_flux_total / (2 * np.pi)

    target = max(1.0, float(np.ceil(mass(inner + min_gap) - 1e-12)))
    hi = inner + min_gap
    while mass(hi) < target:
        hi *= 1.5
    t = optimize.brentq(lambda t: mass(t) - target, inner + 1e-12, hi,
                        xtol=1e-12)
    return t, int(target)


def build_screened_patch(inner_halfwidth, rho, scale=None,
                         outer_halfwidth=None, inner_flux=None,
                         grid_n=48) -> ScreenedPatch:
    """Screened annular extension around the square K_inner.

    Places one point per unit of budget in a pinwheel ring partition of the
    annulus, with zero flux through the outer boundary, the given normal
    trace on the inner boundary (inner_flux sampled with the inner square's
    outward normal), and zero normal jumps across internal interfaces.  The
    energy estimate is the sum of per-cell eta-renormalized energies, i.e.
    the windowed energy of the patch over the annulus.
    """
    rho_f = _as_density(rho)
    l = inner_halfwidth
    flux_total = 0.0
    if inner_flux is not None:
        for p0, p1 in (((-l, -l), (l, -l)), ((l, -l), (l, l)),
                       ((l, l), (-l, l)), ((-l, l), (-l, -l))):
            flux_total += _line_integral(inner_flux, p0, p1, n=48)
    if outer_halfwidth is None:
        if scale is None:
            raise ValueError("need scale or outer_halfwidth")
        outer_halfwidth, _ = find_outer_halfwidth(
            inner_halfwidth, rho_f, scale, inner_flux_total=flux_total)
    if outer_halfwidth <= inner_halfwidth + 1e-12:
        part = ChargePartition(domain=(inner_halfwidth, outer_halfwidth),
                               cells=[], charges=np.zeros(0))
        return ScreenedPatch(inner_halfwidth, outer_halfwidth, part,
                             np.zeros((0, 2)), [], 0.0)

    def annulus_budget(t):
        return (_rect_mass(rho_f, Rect(-t, -t, t, t), n=48)
                - _rect_mass(rho_f, Rect(-l, -l, l, l), n=48)
                - flux_total / (2 * np.pi))

    N = int(round(annulus_budget(outer_halfwidth)))
    if N < 1:
        raise PartitionError("insufficient charge")
    n_rings = max(1, int(round((outer_halfwidth - inner_halfwidth) / scale))) \
        if scale else 1
    ring_targets = _integer_targets(N, n_rings)
    radii = [inner_halfwidth]
    acc = 0
    for tgt in ring_targets[:-1]:
        acc += tgt
        radii.append(optimize.brentq(
            lambda t: annulus_budget(t) - acc,
            radii[-1] + 1e-12, outer_halfwidth, xtol=1e-12))
    radii.append(outer_halfwidth)

    cells, budgets, pairs, inner_edges = [], [], [], []
    for k, (r_in, r_out) in enumerate(zip(radii[:-1], radii[1:])):
        c, b, p, ie = _ring_cells(r_in, r_out, rho_f,
                                  inner_flux=inner_flux if k == 0 else None)
        off = len(cells)
        cells += c
        budgets += b
        pairs += [(a + off, bb + off) for a, bb in p]
        inner_edges += ie

    # assemble per-cell imposed traces, then solve each cell
    extra = [dict() for _ in cells]     # side -> list of trace specs
    seg_info = []
    for ia, ib in pairs:
        side_a, side_b, lo, hi = _shared_segment(cells[ia], cells[ib])
        phi_int = 2 * np.pi * (1.0 - budgets[ia]) / (hi - lo)
        extra[ia].setdefault(side_a, []).append(
            SegmentFlux(side_a, lo, hi, phi_int))
        extra[ib].setdefault(side_b, []).append(
            SegmentFlux(side_b, lo, hi, -phi_int))
        seg_info.append((ia, ib, (side_a, side_b, lo, hi)))
    if inner_flux is not None:
        for i, ie in enumerate(inner_edges):
            if ie is None:
                continue
            side, fixed, lo, hi = ie
            extra[i].setdefault(side, []).append(
                PartialTrace(side, lo, hi, lambda pts: -inner_flux(pts)))

    b_index = {b for _, b in pairs}
    neg_rho = lambda X, Y: -rho_f(X, Y)
    fields = [None] * len(cells)
    points = []
    for i, cell in enumerate(cells):
        if i in b_index:
            # completes a corner pair: background sink only, no point
            fields[i] = cell_rectify_field(cell, neg_rho, dict(extra[i]),
                                           m=0.0, grid_n=grid_n,
                                           compat_tol=1e-6)
            fields[i].rho = -fields[i].rho
        else:
            fields[i] = cell_point_field(cell, rho=rho_f, grid_n=grid_n,
                                         extra_flux=extra[i] or None,
                                         check_aspect=False)
            points.append(fields[i].points[0])

    shares = np.zeros(len(cells))
    for i, ie in enumerate(inner_edges):
        if ie is None:
            continue
        side, fixed, lo, hi = ie
        horizontal = side in ("bottom", "top")
        p0 = (lo, fixed) if horizontal else (fixed, lo)
        p1 = (hi, fixed) if horizontal else (fixed, hi)
        shares[i] = -_line_integral(inner_flux, p0, p1, n=48) / (2 * np.pi)
    part = ChargePartition(domain=(inner_halfwidth, outer_halfwidth),
                           cells=cells,
                           charges=np.asarray(budgets, dtype=float),
                           flux_shares=shares,
                           pairs=seg_info)
    energy = float(sum(f.energy for f in fields))
    return ScreenedPatch(inner_halfwidth, outer_halfwidth, part,
                         np.asarray(points).reshape(-1, 2), fields, energy)


# ---------------------------------------------------------------------------
# curl removal and the sum inequality


def curl_project(f: GridField) -> GridField:
    """Remove the discrete curl of the smooth part: E' = E + perp-grad zeta
    with -Lap zeta = curl E, zeta = 0 on the boundary.  The normal trace is
    unchanged (zeta vanishes on the boundary) and the smooth energy does not
    increase beyond grid tolerance."""
    hx, hy = f.spacing
    curl = (np.gradient(f.Ey, hx, axis=0, edge_order=2)
            - np.gradient(f.Ex, hy, axis=1, edge_order=2))
    zeta = solve_dirichlet(f.rect, curl)
    gx = np.gradient(zeta, hx, axis=0, edge_order=2)
    gy = np.gradient(zeta, hy, axis=1, edge_order=2)
    out = GridField(rect=f.rect, Ex=f.Ex - gy, Ey=f.Ey + gx,
                    points=f.points, rho=f.rho, traces=dict(f.traces))
    out.energy = out.smooth_energy()
    return out


@dataclass(frozen=True)
class SumBoundReport:
    lhs: float
    rhs: float
    w_e1: float
    half_l2_e2: float
    holder_term: float

    @property
    def holds(self):
        return self.lhs <= self.rhs + 1e-9 * max(1.0, abs(self.rhs))


def sum_energy_bound_check(f1: GridField, f2: GridField, q=4.0) -> SumBoundReport:
    """Both sides of the sum inequality
    W(E1+E2) <= W(E1) + (1/2)||E2||_2^2 + ||E1||_{q'} ||E2||_q
    as discrete surrogates on a common punched grid: cells near the points of
    E1 are excluded identically on both sides, so the eta-renormalization
    constants cancel and the comparison is exact."""
    if q <= 2:
        raise ValueError("q must exceed 2")
    if len(f2.points):
        raise ValueError("E2 must be smooth (no points)")
    if f1.shape != f2.shape or f1.rect != f2.rect:
        raise ValueError("fields must share a grid")
    hx, hy = f1.spacing
    E1x, E1y = f1.total_samples()
    E2x, E2y = f2.Ex, f2.Ey
    P = f1.cell_centers()
    mask = np.ones(f1.shape, dtype=bool)
    for p in f1.points:
        d = np.linalg.norm(P - p, axis=-1)
        mask &= d > 1.5 * max(hx, hy)
    da = hx * hy
    qp = q / (q - 1.0)
    e1sq = E1x ** 2 + E1y ** 2
    e2sq = E2x ** 2 + E2y ** 2
    w1 = 0.5 * float(np.sum(e1sq[mask])) * da
    lhs = 0.5 * float(np.sum(((E1x + E2x) ** 2 + (E1y + E2y) ** 2)[mask])) * da
    half_l2 = 0.5 * float(np.sum(e2sq)) * da
    n1 = (float(np.sum(np.sqrt(e1sq[mask]) ** qp)) * da) ** (1.0 / qp)
    n2 = (float(np.sum(np.sqrt(e2sq) ** q)) * da) ** (1.0 / q)
    return SumBoundReport(lhs=lhs, rhs=w1 + half_l2 + n1 * n2,
                          w_e1=w1, half_l2_e2=half_l2, holder_term=n1 * n2)
