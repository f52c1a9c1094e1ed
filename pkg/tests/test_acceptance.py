"""Acceptance suite: ten property-based criteria with pinned tolerances.

Each test prints one [PASS]/[FAIL] line (run with -s to see them all).
Minimizers are shared across criteria and computed once per session.
"""

import numpy as np
import pytest

from jellium2d.analysis import discrepancy, point_discrepancy, separation
from jellium2d.hamiltonian import (
    Configuration,
    blow_up,
    interaction_potential_u,
    one_point_move_delta,
    split_energy,
)
from jellium2d.optimizer import OptimizerSettings, minimize
from jellium2d.potential import power_potential, solve_equilibrium, zeta
from jellium2d.renorm import (
    FieldEvaluator,
    sigma_per_estimate,
    square_lattice_torus,
    torus_W,
    triangular_lattice_torus,
    whole_plane_W,
)
from jellium2d.screening import (
    GridField,
    Rect,
    build_screened_patch,
    cell_point_field,
    curl_project,
    sum_energy_bound_check,
)

POTENTIAL = power_potential(2.0)
MEASURE = solve_equilibrium(POTENTIAL)

_MINIMIZERS = {}


def get_minimizer(n):
    if n not in _MINIMIZERS:
        restarts = 3 if n <= 50 else 2
        _MINIMIZERS[n] = minimize(
            n, POTENTIAL, OptimizerSettings(restarts=restarts, seed=42))
    return _MINIMIZERS[n]


def criterion(name, ok, detail):
    print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, f"{name}: {detail}"


def interior_box_centers(radius, ell, spacing, margin=1.0):
    """Grid of box centers whose closed boxes stay inside the support disk."""
    reach = radius - margin - ell * np.sqrt(2.0)
    centers = []
    if reach <= 0:
        return centers
    k = int(np.floor(reach / spacing))
    for i in range(-k, k + 1):
        for j in range(-k, k + 1):
            a = np.array([spacing * i, spacing * j])
            if np.linalg.norm(a) + ell * np.sqrt(2.0) <= radius - margin:
                centers.append(tuple(a))
    return centers


def test_criterion_01_equilibrium_exactness():
    ok = (abs(MEASURE.support_radius - 1.0) <= 1e-10
          and abs(MEASURE.density_radial(0.0) - 1.0 / np.pi) <= 1e-10
          and abs(MEASURE.mean_field_energy - 0.75) <= 1e-8
          and abs(MEASURE.euler_constant - 0.5) <= 1e-8)
    criterion("criterion 1 (equilibrium exactness)", ok,
              f"R0={MEASURE.support_radius}, m0={MEASURE.density_radial(0.0)}, "
              f"I={MEASURE.mean_field_energy}, c={MEASURE.euler_constant}")


def test_criterion_02_two_point_minimizer():
    rep = get_minimizer(2)
    d = rep.best_config.min_pairwise_distance()
    ok = (abs(d - 1.0) <= 1e-6 and abs(rep.best_energy - 1.0) <= 1e-8
          and rep.grad_norm <= 1e-8)
    criterion("criterion 2 (two-point minimizer)", ok,
              f"distance={d:.9f}, energy={rep.best_energy:.10f}, "
              f"grad={rep.grad_norm:.2e}")


def test_criterion_03_confinement():
    worst = {}
    for n in (20, 50, 100, 200):
        pts = get_minimizer(n).best_config.points
        worst[n] = max(zeta(MEASURE, x) for x in pts)
    ok = all(v <= 1e-9 for v in worst.values())
    criterion("criterion 3 (confinement: all points in the support)", ok,
              "max zeta " + ", ".join(f"n={n}: {v:.2e}"
                                      for n, v in worst.items()))


def test_criterion_04_separation():
    mins, nn_min, nn_max = {}, {}, {}
    for n in (50, 100, 200):
        blown = blow_up(get_minimizer(n).best_config, MEASURE)
        rep = separation(blown, interior_margin=1.0)
        mins[n] = rep.min_pairwise
        pts = np.asarray(blown.points_prime)
        from jellium2d.analysis import nearest_neighbor_distances
        nn = nearest_neighbor_distances(pts)
        interior = np.linalg.norm(pts, axis=1) <= blown.support_radius_prime - 1.0
        nn_min[n] = float(np.min(nn[interior]))
        nn_max[n] = float(np.max(nn[interior]))
    med = float(np.median(list(mins.values())))
    ok_floor = all(v >= 0.5 * med for v in mins.values())
    ok_stable = all(abs(v - med) <= 0.2 * med for v in mins.values())
    r0_hat = float(np.median(list(nn_min.values())))
    R0_hat = float(np.median(list(nn_max.values())))
    ok_fit = (all(abs(v - r0_hat) <= 0.2 * r0_hat for v in nn_min.values())
              and all(abs(v - R0_hat) <= 0.2 * R0_hat for v in nn_max.values()))
    ok = ok_floor and ok_stable and ok_fit
    criterion("criterion 4 (separation at the blown-up scale)", ok,
              f"min dists {mins}, interior nn in "
              f"[{r0_hat:.3f}, {R0_hat:.3f}] fitted, per-n min {nn_min}, "
              f"max {nn_max}")


def test_criterion_05_charge_balance():
    C = 2.5
    sup_over_ell = {}
    max_over_ell_sq_at_8 = 0.0
    total_boxes = 0
    for n in (50, 100, 200):
        blown = blow_up(get_minimizer(n).best_config, MEASURE)
        R = blown.support_radius_prime
        worst = 0.0
        for ell in (3.0, 5.0, 8.0):
            centers = interior_box_centers(R, ell, spacing=ell, margin=1.0)
            if not centers:
                continue
            rep = discrepancy(blown, centers, [ell])
            good = [e for e in rep.entries if not e.flagged]
            total_boxes += len(good)
            worst = max(worst, max(abs(e.d_over_ell) for e in good))
            if ell == 8.0:
                max_over_ell_sq_at_8 = max(
                    max_over_ell_sq_at_8,
                    max(abs(e.d_over_ell_sq) for e in good))
        sup_over_ell[n] = worst
    ok = (total_boxes >= 20
          and all(v <= C for v in sup_over_ell.values())
          and max_over_ell_sq_at_8 <= 0.2)
    criterion("criterion 5 (charge balance in boxes)", ok,
              f"{total_boxes} interior boxes, sup|D|/ell per n "
              f"{sup_over_ell} (C={C}), max|D|/ell^2 at ell=8: "
              f"{max_over_ell_sq_at_8:.3f}")


def test_criterion_06_lattice_comparison():
    tri = torus_W(triangular_lattice_torus(1.0), truncation_tol=1e-10)
    sq = torus_W(square_lattice_torus(1.0), truncation_tol=1e-10)
    scaling_err = 0.0
    for m in (0.25, 1.0, 4.0):
        wm = torus_W(triangular_lattice_torus(m), truncation_tol=1e-10)
        pred = m * (tri - 0.5 * np.pi * np.log(m))
        scaling_err = max(scaling_err, abs(wm - pred))
    ok = tri < sq and scaling_err <= 1e-8
    criterion("criterion 6 (triangular beats square; dilation scaling)", ok,
              f"tri={tri:.10f} < sq={sq:.10f}, scaling residual "
              f"{scaling_err:.2e}")


def test_criterion_07_splitting_consistency():
    rels = {}
    for n in (1, 4):
        config = get_minimizer(n).best_config
        blown = blow_up(config, MEASURE)
        w_split = split_energy(config, MEASURE).renormalized_energy
        w_quad = whole_plane_W(FieldEvaluator(blown)).value
        rels[n] = abs(w_quad - w_split) / abs(w_split)
    ok = all(v <= 0.02 for v in rels.values())
    criterion("criterion 7 (splitting vs windowed quadrature)", ok,
              "relative " + ", ".join(f"n={n}: {v:.4f}"
                                      for n, v in rels.items()))


def test_criterion_08_one_point_move():
    config = get_minimizer(20).best_config
    n = config.n
    rng = np.random.default_rng(5)
    worst_rel = 0.0
    for _ in range(20):
        i = int(rng.integers(n))
        r = 0.9 * np.sqrt(rng.uniform())
        th = rng.uniform(0, 2 * np.pi)
        y = np.array([r * np.cos(th), r * np.sin(th)])
        da, db = one_point_move_delta(config, i, y, MEASURE)
        worst_rel = max(worst_rel, abs(da - db) / max(1.0, abs(da), abs(db)))
    # minimality: U(x_i') + n zeta(x_i) <= U(y') + n zeta(y) for probes y
    rn = np.sqrt(n)
    violations = 0
    for _ in range(100):
        i = int(rng.integers(n))
        y = rng.uniform(-1.5, 1.5, 2)
        lhs = (interaction_potential_u(config, i, MEASURE, rn * config.points[i])
               + n * zeta(MEASURE, config.points[i]))
        rhs = interaction_potential_u(config, i, MEASURE, rn * y) \
            + n * zeta(MEASURE, y)
        if lhs > rhs + 1e-8:
            violations += 1
    ok = worst_rel <= 1e-8 and violations == 0
    criterion("criterion 8 (one-point-move identity and minimality)", ok,
              f"dual-path max relative {worst_rel:.2e}, "
              f"{violations}/100 minimality violations")


def test_criterion_09_screening():
    patch = build_screened_patch(2.0, 1.0 / np.pi, scale=1.5)
    charges = list(patch.partition.charges)
    for ia, ib, _ in patch.partition.pairs:
        charges[ia] += charges[ib]
        charges[ib] = 0.0
    int_err = max(abs(q - round(q)) for q in charges)
    jump = patch.max_interface_jump()
    perim = 8.0 * patch.outer_halfwidth
    flux = abs(patch.outer_flux())

    # curl projection: energy never increases, second application is a no-op
    n = 96
    rng = np.random.default_rng(9)
    xs = (np.arange(n) + 0.5) / n
    X, Y = np.meshgrid(xs, xs, indexing="ij")
    non_increase = True
    idempotent = True
    for _ in range(3):
        Ex = np.zeros((n, n))
        Ey = np.zeros((n, n))
        for _ in range(5):
            kx, ky = rng.integers(1, 4, 2)
            a, b = rng.standard_normal(2)
            Ex += a * np.cos(2 * np.pi * kx * X) * np.sin(2 * np.pi * ky * Y)
            Ey += b * np.sin(2 * np.pi * kx * X) * np.cos(2 * np.pi * ky * Y)
        f = GridField(rect=Rect(0, 0, 1, 1), Ex=Ex, Ey=Ey)
        g = curl_project(f)
        g2 = curl_project(g)
        non_increase &= g.smooth_energy() <= f.smooth_energy() + 1e-10
        first = max(np.max(np.abs(g.Ex - f.Ex)), np.max(np.abs(g.Ey - f.Ey)))
        second = max(np.max(np.abs(g2.Ex - g.Ex)),
                     np.max(np.abs(g2.Ey - g.Ey)))
        idempotent &= second <= 0.02 * max(first, 1e-12)

    # sum inequality on randomized trials
    f1 = cell_point_field(Rect(-0.5, -0.5, 0.5, 0.5), m=1.0, grid_n=48)
    k = f1.shape[0]
    xs = (np.arange(k) + 0.5) / k
    X, Y = np.meshgrid(xs, xs, indexing="ij")
    bound_ok = True
    for _ in range(10):
        kx, ky = rng.integers(1, 5, 2)
        amp = rng.uniform(0.1, 3.0)
        f2 = GridField(rect=f1.rect,
                       Ex=amp * np.cos(2 * np.pi * kx * X + rng.uniform(0, 7)),
                       Ey=amp * np.sin(2 * np.pi * ky * Y + rng.uniform(0, 7)))
        bound_ok &= sum_energy_bound_check(f1, f2, q=rng.uniform(2.5, 6.0)).holds

    ok = (int_err <= 1e-9 and jump <= 1e-8 and flux <= 1e-8 * perim
          and non_increase and idempotent and bound_ok)
    criterion("criterion 9 (screening machinery)", ok,
              f"charge integrality {int_err:.1e}, interface jump {jump:.1e}, "
              f"outer flux {flux:.1e} (limit {1e-8 * perim:.1e}), "
              f"curl non-increase {non_increase}, idempotent {idempotent}, "
              f"sum bound 10/10 {bound_ok}")


def test_criterion_10_sigma_per_convergence():
    res1 = sigma_per_estimate(1.0, [1.0, 1.5, 2.0], restarts=3, seed=0)
    v_mid, v_big = res1[-2][1], res1[-1][1]
    rel_last_two = abs(v_big - v_mid) / abs(v_big)
    res4 = sigma_per_estimate(4.0, [1.0], restarts=2, seed=0)
    s1, s4 = v_big, res4[0][1]
    pred = 4.0 * (s1 - 0.5 * np.pi * np.log(4.0))
    rel_scaling = abs(s4 - pred) / abs(s4)
    ok = rel_last_two < 0.01 and rel_scaling < 0.01
    criterion("criterion 10 (periodic minimum convergence and scaling)", ok,
              f"sigma_per(m=1) at L=1,1.5,2: "
              f"{[f'{v:.6f}' for _, v, _, _ in res1]}, last-two rel "
              f"{rel_last_two:.4f}; m=4 scaling rel {rel_scaling:.2e}")
