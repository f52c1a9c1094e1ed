"""Radial confining potentials and their equilibrium measures.

For a radial potential V(x) = v(|x|) that is convex and grows fast enough,
the charge of the continuum limit spreads over a disk of radius R0 with
density Delta V / (4 pi).  Everything downstream (effective potential,
mean-field energy, blown-up background) derives from that disk profile, so
the solver here is a 1D root-find plus radial quadrature.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import integrate, optimize


class UnconfinedPotentialError(ValueError):
    """The mass condition r v'(r)/2 = 1 has no root: unconfined potential."""


class NonAdmissiblePotentialError(ValueError):
    """Delta V is not strictly positive on the support."""


@dataclass(frozen=True)
class RadialPotential:
    """V(x) = profile(|x|) with analytic radial derivatives."""

    profile: Callable[[np.ndarray], np.ndarray]
    dprofile: Callable[[np.ndarray], np.ndarray]
    d2profile: Callable[[np.ndarray], np.ndarray]
    name: str = "custom"

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        r = np.sqrt(np.sum(x * x, axis=-1))
        return self.profile(r)

    def grad(self, x):
        x = np.asarray(x, dtype=float)
        r = np.sqrt(np.sum(x * x, axis=-1))
        r_safe = np.where(r > 0, r, 1.0)
        scale = np.where(r > 0, self.dprofile(r_safe) / r_safe, self.d2profile(np.zeros_like(r)))
        return x * scale[..., None]

    def laplacian(self, x):
        x = np.asarray(x, dtype=float)
        r = np.sqrt(np.sum(x * x, axis=-1))
        return self.laplacian_radial(r)

    def laplacian_radial(self, r):
        r = np.asarray(r, dtype=float)
        r_safe = np.where(r > 0, r, 1.0)
        # v'' + v'/r, with the r -> 0 limit 2 v''(0) for smooth radial profiles
        return np.where(
            r > 0,
            self.d2profile(r) + self.dprofile(r_safe) / r_safe,
            2.0 * self.d2profile(r),
        )


def power_potential(exponent: float = 2.0, coefficient: float = 1.0) -> RadialPotential:
    """V(x) = coefficient * |x|**exponent.  Admissible for exponent == 2
    (strictly positive Laplacian); other exponents are accepted here and
    vetted by solve_equilibrium."""
    k, c = float(exponent), float(coefficient)
    return RadialPotential(
        profile=lambda r: c * np.asarray(r, dtype=float) ** k,
        dprofile=lambda r: c * k * np.asarray(r, dtype=float) ** (k - 1),
        d2profile=lambda r: c * k * (k - 1) * np.asarray(r, dtype=float) ** (k - 2)
        if k != 2
        else 2 * c * np.ones_like(np.asarray(r, dtype=float)),
        name=f"power:{k}" if c == 1.0 else f"power:{k}:{c}",
    )


def potential_from_config(cfg: dict) -> RadialPotential:
    """Build a potential from the JSON run-config fragment
    {"kind": "power", "exponent": 2, "coefficient": 1.0}."""
    kind = cfg.get("kind", "power")
    if kind == "power":
        return power_potential(cfg.get("exponent", 2.0), cfg.get("coefficient", 1.0))
    raise ValueError(f"unknown potential kind: {kind!r}")


@dataclass(frozen=True)
class EquilibriumMeasure:
    """Equilibrium measure of a radial potential: uniform-in-angle density
    laplacian(V)/(4 pi) on the disk of radius support_radius."""

    potential: RadialPotential
    support_radius: float
    euler_constant: float       # c in  zeta = -log*mu0 + V/2 - c
    mean_field_energy: float    # I(mu0)
    m_under: float
    m_over: float

    def density_radial(self, r):
        r = np.asarray(r, dtype=float)
        inside = r <= self.support_radius
        vals = self.potential.laplacian_radial(np.where(inside, r, 0.0)) / (4 * np.pi)
        return np.where(inside, vals, 0.0)

    def density(self, x):
        x = np.asarray(x, dtype=float)
        return self.density_radial(np.sqrt(np.sum(x * x, axis=-1)))

    def enclosed_mass(self, r):
        """mu0(B(0, r)); equals r v'(r)/2 inside the support, 1 outside."""
        r = np.asarray(r, dtype=float)
        rc = np.minimum(r, self.support_radius)
        return rc * self.potential.dprofile(np.where(rc > 0, rc, 1.0)) / 2.0 * (rc > 0)

    def log_potential_radial(self, r):
        """-log * mu0 at radius r.

        Inside the support this reduces to (v(R0) - v(r))/2 - log R0; outside,
        Newton's theorem for radial unit-mass measures gives -log r.
        """
        r = np.asarray(r, dtype=float)
        R0 = self.support_radius
        v = self.potential.profile
        inside = (v(np.full_like(r, R0)) - v(r)) / 2.0 - np.log(R0)
        outside = -np.log(np.where(r > 0, r, 1.0))
        return np.where(r <= R0, inside, outside)

    def log_potential_radial_derivative(self, r):
        """d/dr of -log * mu0: -v'(r)/2 inside the support, -1/r outside."""
        r = np.asarray(r, dtype=float)
        R0 = self.support_radius
        r_safe = np.where(r > 0, r, 1.0)
        return np.where(r <= R0, -self.potential.dprofile(r) / 2.0, -1.0 / r_safe)

    def zeta_radial(self, r):
        r = np.asarray(r, dtype=float)
        out = self.log_potential_radial(r) + self.potential.profile(r) / 2.0 - self.euler_constant
        return np.where(r <= self.support_radius, 0.0, np.maximum(out, 0.0))

    def zeta(self, x):
        x = np.asarray(x, dtype=float)
        return self.zeta_radial(np.sqrt(np.sum(x * x, axis=-1)))

    def zeta_grad(self, x):
        x = np.asarray(x, dtype=float)
        r = np.sqrt(np.sum(x * x, axis=-1))
        r_safe = np.where(r > 0, r, 1.0)
        dz = np.where(
            r > self.support_radius,
            -1.0 / r_safe + self.potential.dprofile(r_safe) / 2.0,
            0.0,
        )
        return x * (dz / r_safe)[..., None]


def solve_equilibrium(potential: RadialPotential, tol: float = 1e-10,
                      r_max: float = 1e6) -> EquilibriumMeasure:
    """Solve for the equilibrium measure of a radial potential.

    The support radius solves the mass condition R0 v'(R0)/2 = 1; the
    mean-field energy and the Euler constant follow by radial quadrature
    and closed forms.
    """
    def mass(r):
        return r * potential.dprofile(np.asarray(r, dtype=float)) / 2.0 - 1.0

    lo, hi = 1e-9, 1.0
    while mass(hi) < 0:
        hi *= 2.0
        if hi > r_max:
            raise UnconfinedPotentialError(
                "mass condition r v'(r)/2 = 1 has no root below r_max: unconfined potential")
    R0 = optimize.brentq(mass, lo, hi, xtol=tol, rtol=4 * np.finfo(float).eps)

    r_samples = np.linspace(0.0, R0, 512)
    lap = potential.laplacian_radial(r_samples)
    if np.any(lap <= 0):
        raise NonAdmissiblePotentialError("Delta V <= 0 on the support: non-admissible potential")
    m_under = float(lap.min() / (4 * np.pi))
    m_over = float(lap.max() / (4 * np.pi))

    # confinement at infinity: V/2 - log r must be increasing on a far ray
    ray = R0 * np.geomspace(10.0, 1e4, 8)
    growth = potential.profile(ray) / 2.0 - np.log(ray)
    if np.any(np.diff(growth) <= 0):
        raise UnconfinedPotentialError("V/2 - log|x| is not growing at infinity")

    vR0 = float(potential.profile(np.asarray(R0)))
    c = vR0 / 2.0 - np.log(R0)

    def integrand(r):
        u = (vR0 - potential.profile(np.asarray(r))) / 2.0 - np.log(R0)
        m0 = potential.laplacian_radial(np.asarray(r)) / (4 * np.pi)
        return (u + potential.profile(np.asarray(r))) * m0 * 2 * np.pi * r

    I0, _ = integrate.quad(integrand, 0.0, R0, epsabs=1e-12, epsrel=1e-12, limit=200)

    return EquilibriumMeasure(
        potential=potential,
        support_radius=float(R0),
        euler_constant=float(c),
        mean_field_energy=float(I0),
        m_under=m_under,
        m_over=m_over,
    )


def zeta(measure: EquilibriumMeasure, x) -> float:
    """Effective potential at x: 0 on the support, positive outside."""
    return float(measure.zeta(np.asarray(x, dtype=float)))


def mean_field_energy(measure: EquilibriumMeasure) -> float:
    return measure.mean_field_energy
