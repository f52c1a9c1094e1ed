"""Local minimization of the n-point energy with multi-start.

The core is a small limited-memory quasi-Newton loop with backtracking line
search.  It works on flat coordinate vectors and accepts any (value, gradient)
callable, so the torus-energy minimization reuses it with periodic distances.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .hamiltonian import Configuration, eval_wn, grad_wn
from .potential import EquilibriumMeasure, RadialPotential, solve_equilibrium

COLLISION_GUARD = 1e-10


@dataclass(frozen=True)
class OptimizerSettings:
    max_iterations: int = 2000
    gradient_tolerance: float = 1e-9   # sup-norm of grad/n
    restarts: int = 4
    seed: int = 0
    shrink_factor: float = 0.5
    sufficient_decrease: float = 1e-4
    memory: int = 10

    def __post_init__(self):
        if self.gradient_tolerance <= 0:
            raise ValueError("gradient_tolerance must be positive")
        if not 0 < self.shrink_factor < 1:
            raise ValueError("shrink_factor must lie in (0, 1)")


@dataclass
class OptimizationReport:
    best_config: Configuration
    best_energy: float
    grad_norm: float
    iterations_used: int
    restart_energies: list = field(default_factory=list)
    converged: bool = False

    def to_dict(self) -> dict:
        return {
            "best_energy": self.best_energy,
            "grad_norm": self.grad_norm,
            "iterations_used": self.iterations_used,
            "restart_energies": list(self.restart_energies),
            "converged": bool(self.converged),
            "n": self.best_config.n,
            "points": self.best_config.points.tolist(),
        }


def lbfgs(x0, fun_grad, max_iterations, grad_tol, grad_norm=None,
          memory=10, shrink=0.5, c1=1e-4):
    """Two-loop-recursion L-BFGS with Armijo backtracking.

    fun_grad maps a flat vector to (value, gradient); +inf values are treated
    as barriers and rejected by the line search.  Returns
    (x, value, grad_norm, iterations, converged).  The accepted energy is
    non-increasing by construction.
    """
    if grad_norm is None:
        grad_norm = lambda g: np.max(np.abs(g))
    x = np.asarray(x0, dtype=float).copy()
    f, g = fun_grad(x)
    if not np.isfinite(f):
        raise ValueError("infeasible starting point (infinite energy)")
    s_hist, y_hist, rho_hist = [], [], []
    it = 0
    converged = grad_norm(g) <= grad_tol
    while it < max_iterations and not converged:
        q = g.copy()
        alphas = []
        for s, y, rho in zip(reversed(s_hist), reversed(y_hist), reversed(rho_hist)):
            a = rho * np.dot(s, q)
            alphas.append(a)
            q -= a * y
        if y_hist:
            gamma = np.dot(s_hist[-1], y_hist[-1]) / np.dot(y_hist[-1], y_hist[-1])
            q *= gamma
        for (s, y, rho), a in zip(zip(s_hist, y_hist, rho_hist), reversed(alphas)):
            b = rho * np.dot(y, q)
            q += (a - b) * s
        d = -q
        gd = np.dot(g, d)
        if gd >= 0:  # bad curvature, fall back to steepest descent
            d = -g
            gd = -np.dot(g, g)
        step = 1.0
        accepted = False
        while step > 1e-16:
            x_new = x + step * d
            f_new, g_new = fun_grad(x_new)
            if np.isfinite(f_new) and f_new <= f + c1 * step * gd:
                accepted = True
                break
            step *= shrink
        if not accepted:
            break
        s = x_new - x
        yv = g_new - g
        sy = np.dot(s, yv)
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(yv):
            s_hist.append(s)
            y_hist.append(yv)
            rho_hist.append(1.0 / sy)
            if len(s_hist) > memory:
                s_hist.pop(0)
                y_hist.pop(0)
                rho_hist.pop(0)
        assert f_new <= f + 1e-12 * max(1.0, abs(f)), "energy increased along accepted step"
        x, f, g = x_new, f_new, g_new
        it += 1
        converged = grad_norm(g) <= grad_tol
    return x, f, grad_norm(g), it, converged


def _energy_and_grad(potential: RadialPotential, n: int):
    def fun_grad(flat):
        pts = flat.reshape(n, 2)
        if n >= 2:
            diff = pts[:, None, :] - pts[None, :, :]
            d2 = np.sum(diff * diff, axis=-1)
            iu = np.triu_indices(n, k=1)
            if d2[iu].min() < COLLISION_GUARD ** 2:
                return np.inf, np.zeros(2 * n)
        c = Configuration(pts)
        return eval_wn(c, potential), grad_wn(c, potential).ravel()
    return fun_grad


def uniform_disk_start(n, radius, rng):
    r = radius * np.sqrt(rng.uniform(0, 1, n))
    th = rng.uniform(0, 2 * np.pi, n)
    return np.column_stack([r * np.cos(th), r * np.sin(th)])


def triangular_patch_start(n, measure: EquilibriumMeasure, rng):
    """A triangular-lattice patch at the central density n*m0(0), clipped to
    the support, then trimmed/padded to exactly n points."""
    dens = n * float(measure.density_radial(np.asarray(0.0)))
    a = np.sqrt(2.0 / (np.sqrt(3.0) * dens))  # spacing for that density
    R = measure.support_radius
    k = int(np.ceil(R / (a * 0.5))) + 2
    i = np.arange(-k, k + 1)
    jj, ii = np.meshgrid(i, i)
    xs = a * (ii + 0.5 * (jj % 2)) + 0.01 * a * rng.uniform(-1, 1)
    ys = a * (np.sqrt(3) / 2) * jj + 0.01 * a * rng.uniform(-1, 1)
    pts = np.column_stack([xs.ravel(), ys.ravel()])
    r = np.hypot(pts[:, 0], pts[:, 1])
    order = np.argsort(r, kind="stable")
    pts = pts[order]
    if len(pts) >= n:
        return pts[:n]
    extra = uniform_disk_start(n - len(pts), R, rng)
    return np.vstack([pts, extra])


def _run_single(x0, potential, n, settings):
    fun_grad = _energy_and_grad(potential, n)
    grad_norm = lambda g: np.max(np.abs(g)) / n
    x, f, gn, it, conv = lbfgs(
        x0.ravel(), fun_grad, settings.max_iterations, settings.gradient_tolerance,
        grad_norm=grad_norm, memory=settings.memory,
        shrink=settings.shrink_factor, c1=settings.sufficient_decrease)
    return Configuration(x.reshape(n, 2)), f, gn, it, conv


def minimize(n: int, potential: RadialPotential,
             settings: OptimizerSettings = OptimizerSettings(),
             measure: EquilibriumMeasure = None) -> OptimizationReport:
    """Multi-start local minimization of w_n; returns the best local minimum."""
    if n < 1:
        raise ValueError("n must be at least 1")
    if measure is None:
        measure = solve_equilibrium(potential)
    best = None
    energies = []
    for restart in range(max(1, settings.restarts)):
        rng = np.random.default_rng(settings.seed + restart)
        if restart % 2 == 1:
            x0 = triangular_patch_start(n, measure, rng)
        else:
            x0 = uniform_disk_start(n, measure.support_radius, rng)
        config, f, gn, it, conv = _run_single(x0, potential, n, settings)
        energies.append(f)
        if best is None or f < best[1]:
            best = (config, f, gn, it, conv)
    config, f, gn, it, conv = best
    return OptimizationReport(
        best_config=config, best_energy=f, grad_norm=gn,
        iterations_used=it, restart_energies=energies, converged=conv)


def polish(config: Configuration, potential: RadialPotential,
           settings: OptimizerSettings = OptimizerSettings()) -> OptimizationReport:
    """Local descent from the given configuration only."""
    c, f, gn, it, conv = _run_single(config.points, potential, config.n, settings)
    return OptimizationReport(
        best_config=c, best_energy=f, grad_norm=gn,
        iterations_used=it, restart_energies=[f], converged=conv)
