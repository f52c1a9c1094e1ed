"""The n-point Coulomb-gas energy, its gradient, the exact splitting of that
energy into mean-field / entropy / confinement / renormalized parts, and the
one-point-move identity used for minimality probes."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .potential import EquilibriumMeasure, RadialPotential

COINCIDENCE_THRESHOLD = 1e-14


class SingularConfigurationError(ValueError):
    """Two points of a configuration coincide (distance below threshold)."""


@dataclass(frozen=True)
class Configuration:
    """An ordered list of n planar points at the macroscopic scale."""

    points: np.ndarray  # (n, 2)

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ValueError("points must have shape (n, 2)")
        object.__setattr__(self, "points", pts)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    def min_pairwise_distance(self) -> float:
        if self.n < 2:
            return np.inf
        d = _pairwise_distances(self.points)
        return float(d[np.triu_indices(self.n, k=1)].min())

    def to_json(self) -> str:
        return json.dumps({"n": self.n, "points": self.points.tolist()})

    @staticmethod
    def from_json(text: str) -> "Configuration":
        data = json.loads(text)
        pts = np.asarray(data["points"], dtype=float)
        if "n" in data and data["n"] != len(pts):
            raise ValueError("configuration JSON: n does not match points")
        return Configuration(pts)


@dataclass(frozen=True)
class BlownConfiguration:
    """Points rescaled by sqrt(n) so neighbors sit at order-1 distances."""

    points_prime: np.ndarray
    n: int
    measure: EquilibriumMeasure

    @property
    def support_radius_prime(self) -> float:
        return np.sqrt(self.n) * self.measure.support_radius

    def background_density(self, x):
        """m0'(x') = m0(x'/sqrt(n))."""
        x = np.asarray(x, dtype=float)
        return self.measure.density(x / np.sqrt(self.n))

    def background_log_potential(self, x):
        """(log * m0')(x') evaluated through the macroscopic radial closed form."""
        x = np.asarray(x, dtype=float)
        rn = np.sqrt(self.n)
        r = np.sqrt(np.sum(x * x, axis=-1))
        u = self.measure.log_potential_radial(r / rn)
        return (self.n / 2.0) * np.log(self.n) - self.n * u

    def background_field(self, x):
        """-grad of (-log * m0') at blown scale, i.e. the background part of
        the electric field (with the minus sign so that the total field is
        sum of point fields plus this)."""
        x = np.asarray(x, dtype=float)
        rn = np.sqrt(self.n)
        r = np.sqrt(np.sum(x * x, axis=-1))
        r_safe = np.where(r > 0, r, 1.0)
        du = self.measure.log_potential_radial_derivative(r / rn)  # d/dr_mac
        scale = np.where(r > 0, rn * du / r_safe, 0.0)
        return x * scale[..., None]


@dataclass(frozen=True)
class SplitEnergy:
    """The four terms of the exact energy decomposition."""

    w_n_value: float
    mean_field_term: float   # n^2 I(mu0)
    entropy_term: float      # -(n/2) log n
    zeta_term: float         # 2n sum zeta(x_i)
    renorm_term: float       # (1/pi) W(E_n, 1_{R^2}), defined by the identity

    @property
    def renormalized_energy(self) -> float:
        """W(E_n, 1_{R^2}) = pi * renorm_term."""
        return np.pi * self.renorm_term

    def residual(self) -> float:
        total = self.mean_field_term + self.entropy_term + self.zeta_term + self.renorm_term
        scale = max(1.0, abs(self.w_n_value))
        return abs(self.w_n_value - total) / scale

    def to_dict(self) -> dict:
        return {
            "w_n": self.w_n_value,
            "mean_field_term": self.mean_field_term,
            "entropy_term": self.entropy_term,
            "zeta_term": self.zeta_term,
            "renorm_term": self.renorm_term,
            "renormalized_energy": self.renormalized_energy,
        }


def _pairwise_distances(pts: np.ndarray) -> np.ndarray:
    diff = pts[:, None, :] - pts[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def _check_distinct(pts: np.ndarray):
    n = len(pts)
    if n < 2:
        return
    d = _pairwise_distances(pts)
    iu = np.triu_indices(n, k=1)
    if d[iu].min() < COINCIDENCE_THRESHOLD:
        raise SingularConfigurationError("singular configuration: coincident points")


def eval_wn(config: Configuration, potential: RadialPotential) -> float:
    """w_n = -sum_{i != j} log|x_i - x_j| + n sum_i V(x_i), ordered pairs."""
    pts = config.points
    n = config.n
    _check_distinct(pts)
    conf = n * float(np.sum(potential(pts)))
    if n < 2:
        return conf
    d = _pairwise_distances(pts)
    iu = np.triu_indices(n, k=1)
    # ordered pairs: each unordered pair counts twice
    inter = -2.0 * float(np.sum(np.log(d[iu])))
    return inter + conf


def grad_wn(config: Configuration, potential: RadialPotential) -> np.ndarray:
    """d w_n / d x_i = -2 sum_{j != i} (x_i - x_j)/|x_i - x_j|^2 + n grad V(x_i)."""
    pts = config.points
    n = config.n
    _check_distinct(pts)
    g = n * potential.grad(pts)
    if n >= 2:
        diff = pts[:, None, :] - pts[None, :, :]
        d2 = np.sum(diff * diff, axis=-1)
        np.fill_diagonal(d2, 1.0)
        g = g - 2.0 * np.sum(diff / d2[:, :, None], axis=1)
    return g


def blow_up(config: Configuration, measure: EquilibriumMeasure) -> BlownConfiguration:
    rn = np.sqrt(config.n)
    return BlownConfiguration(points_prime=rn * config.points, n=config.n, measure=measure)


def split_energy(config: Configuration, measure: EquilibriumMeasure) -> SplitEnergy:
    """Decompose w_n into n^2 I(mu0) - (n/2) log n + 2n sum zeta + (1/pi) W."""
    n = config.n
    w = eval_wn(config, measure.potential)
    mean_field = n * n * measure.mean_field_energy
    entropy = -(n / 2.0) * np.log(n)
    zeta_sum = float(np.sum(measure.zeta(config.points)))
    zeta_term = 2.0 * n * zeta_sum
    renorm = w - mean_field - entropy - zeta_term
    return SplitEnergy(
        w_n_value=w,
        mean_field_term=mean_field,
        entropy_term=entropy,
        zeta_term=zeta_term,
        renorm_term=renorm,
    )


def interaction_potential_u(config: Configuration, i: int,
                            measure: EquilibriumMeasure, z_prime) -> float:
    """U(z') = -sum_{j != i} log|z' - x_j'| + (log * m0')(z'): the blown-scale
    potential felt at z' from everything except point i."""
    blown = blow_up(config, measure)
    pts = blown.points_prime
    z = np.asarray(z_prime, dtype=float)
    others = np.delete(pts, i, axis=0)
    if len(others):
        d = np.sqrt(np.sum((others - z) ** 2, axis=-1))
        if d.min() < COINCIDENCE_THRESHOLD:
            return np.inf
        s = -float(np.sum(np.log(d)))
    else:
        s = 0.0
    return s + float(blown.background_log_potential(z))


def one_point_move_delta(config: Configuration, i: int, y,
                         measure: EquilibriumMeasure) -> tuple[float, float]:
    """W(E_n, 1) - W(E-tilde_n, 1) for the move x_i -> y, computed two ways.

    Path (a) goes through split_energy on both configurations; path (b)
    evaluates 2 pi (U(x_i') - U(y')) directly.  Both are returned so callers
    can assert agreement.  A move onto another point returns (+inf, +inf).
    """
    y = np.asarray(y, dtype=float)
    pts = config.points
    others = np.delete(pts, i, axis=0)
    if len(others):
        d = np.sqrt(np.sum((others - y) ** 2, axis=-1))
        if d.min() < COINCIDENCE_THRESHOLD:
            return np.inf, np.inf

    moved_pts = pts.copy()
    moved_pts[i] = y
    moved = Configuration(moved_pts)

    sa = split_energy(config, measure)
    sb = split_energy(moved, measure)
    delta_split = sa.renormalized_energy - sb.renormalized_energy

    rn = np.sqrt(config.n)
    u_x = interaction_potential_u(config, i, measure, rn * pts[i])
    u_y = interaction_potential_u(config, i, measure, rn * y)
    delta_direct = 2.0 * np.pi * (u_x - u_y)
    return delta_split, delta_direct
