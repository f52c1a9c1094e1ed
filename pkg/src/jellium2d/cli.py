"""Command-line entry point.

Subcommands: minimize, polish, analyze, torus-energy, windowed-w, screen,
reproduce.  Structured records go to JSON files (or stdout), tabular reports
to CSV; progress is printed on stderr.  Every output embeds the resolved run
configuration and the package version, and identical configs with the same
seed produce byte-identical files.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import subprocess
import sys

import numpy as np

from . import __version__
from .analysis import discrepancy, energy_map, separation
from .hamiltonian import Configuration, blow_up
from .optimizer import OptimizerSettings, minimize, polish
from .potential import power_potential, solve_equilibrium
from .renorm import (
    CutoffWindow,
    FieldEvaluator,
    WindowQuadratureSettings,
    square_lattice_torus,
    torus_W,
    triangular_lattice_torus,
    windowed_W,
)
from .screening import build_screened_patch


def _progress(msg):
    print(msg, file=sys.stderr)


def _parse_potential(spec):
    """'power:2' or 'power:2:0.5' -> RadialPotential."""
    parts = spec.split(":")
    if parts[0] != "power":
        raise SystemExit(f"unknown potential spec: {spec!r}")
    exponent = float(parts[1]) if len(parts) > 1 else 2.0
    coefficient = float(parts[2]) if len(parts) > 2 else 1.0
    return power_potential(exponent, coefficient)


def _parse_density(spec):
    """'uniform:0.3183' -> (constant density callable, resolved value)."""
    parts = spec.split(":")
    if parts[0] != "uniform":
        raise SystemExit(f"unknown density spec: {spec!r}")
    value = float(parts[1])

    def rho(x, y):
        return np.full(np.broadcast(np.asarray(x), np.asarray(y)).shape,
                       value)

    return rho, value


def _emit(record, out_path):
    text = json.dumps(record, indent=2, sort_keys=True) + "\n"
    if out_path:
        with open(out_path, "w") as fh:
            fh.write(text)
        _progress(f"wrote {out_path}")
    else:
        sys.stdout.write(text)


def _base_record(args, command):
    cfg = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    cfg["command"] = command
    cfg["threads"] = os.environ.get("JELLIUM2D_THREADS", "1")
    return {"version": __version__, "config": cfg}


def _load_config(path):
    with open(path) as fh:
        data = json.load(fh)
    return Configuration(np.asarray(data["points"], dtype=float)), data


def _optimizer_settings(args):
    return OptimizerSettings(max_iterations=args.max_iterations,
                             gradient_tolerance=args.tol,
                             restarts=args.restarts, seed=args.seed)


def cmd_minimize(args):
    potential = _parse_potential(args.potential)
    _progress(f"minimizing n={args.n}, potential {potential.name}, "
              f"{args.restarts} restarts")
    report = minimize(args.n, potential, _optimizer_settings(args))
    record = _base_record(args, "minimize")
    record.update(report.to_dict())
    _emit(record, args.out)
    return 0


def cmd_polish(args):
    potential = _parse_potential(args.potential)
    config, _ = _load_config(args.config)
    _progress(f"polishing n={config.n} configuration from {args.config}")
    report = polish(config, potential, _optimizer_settings(args))
    record = _base_record(args, "polish")
    record.update(report.to_dict())
    _emit(record, args.out)
    return 0


def _interior_centers(radius, ell, margin):
    """Grid of box centers spaced 2*ell whose boxes stay inside the support
    disk by the given margin."""
    reach = radius - margin - ell * np.sqrt(2.0)
    if reach <= 0:
        return []
    k = int(np.floor(reach / (2.0 * ell)))
    centers = []
    for i in range(-k, k + 1):
        for j in range(-k, k + 1):
            a = np.array([2.0 * ell * i, 2.0 * ell * j])
            if np.linalg.norm(a) + ell * np.sqrt(2.0) <= radius - margin:
                centers.append(tuple(a))
    return centers


def cmd_analyze(args):
    config, data = _load_config(args.config)
    potential = _parse_potential(args.potential)
    measure = solve_equilibrium(potential)
    blown = blow_up(config, measure)
    reports = [r.strip() for r in args.report.split(",") if r.strip()]
    ells = [float(e) for e in args.ell.split(",")]
    record = _base_record(args, "analyze")
    rows = []

    if "discrepancy" in reports:
        _progress("discrepancy report")
        centers = []
        for ell in ells:
            centers.extend(_interior_centers(blown.support_radius_prime,
                                             ell, args.margin))
        centers = sorted(set(centers))
        rep = discrepancy(blown, centers, ells)
        record["discrepancy"] = {
            "sup_d_over_ell": rep.sup_d_over_ell,
            "max_d_over_ell_sq": rep.max_d_over_ell_sq,
            "boundary_margin": rep.boundary_margin,
            "n_boxes": len(rep.entries),
        }
        for e in rep.entries:
            rows.append(["discrepancy", e.center[0], e.center[1],
                         e.half_width, e.count, e.expected, e.D,
                         int(e.flagged)])

    if "separation" in reports:
        _progress("separation report")
        rep = separation(blown, interior_margin=args.interior_margin)
        record["separation"] = {
            "min_pairwise": rep.min_pairwise,
            "max_nearest_neighbor": rep.max_nearest_neighbor,
            "interior_margin": rep.interior_margin,
            "n_interior": rep.n_interior,
        }
        rows.append(["separation", "", "", "", rep.n_interior,
                     rep.min_pairwise, rep.max_nearest_neighbor, 0])

    if "energy" in reports:
        _progress("energy map")
        evaluator = FieldEvaluator(blown)
        ell = max(ells)
        centers = _interior_centers(blown.support_radius_prime, ell,
                                    args.margin)[: args.max_boxes]
        emap = energy_map(blown, evaluator, ell, args.margin, centers,
                          sigma_star_1=args.sigma1)
        vals = emap.values()
        record["energy"] = {
            "ell": ell,
            "n_boxes": len(emap.entries),
            "mean_w_per_area": float(np.mean(vals)) if len(vals) else None,
        }
        for e in emap.entries:
            rows.append(["energy", e.center[0], e.center[1], e.half_width,
                         "", e.reference_per_area, e.w_per_area,
                         int(bool(e.flagged))])

    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["report", "center_x", "center_y", "ell",
                        "count_or_n", "expected_or_min", "value", "flagged"])
            w.writerows(rows)
        _progress(f"wrote {args.csv}")
    _emit(record, args.out)
    return 0


def cmd_torus_energy(args):
    if args.lattice == "triangular":
        config = triangular_lattice_torus(density=args.density,
                                          cells_x=args.cells)
    elif args.lattice == "square":
        config = square_lattice_torus(density=args.density, cells=args.cells)
    else:
        raise SystemExit(f"unknown lattice: {args.lattice!r}")
    _progress(f"torus energy, {args.lattice} lattice at density {args.density}")
    value = torus_W(config, truncation_tol=args.tol)
    record = _base_record(args, "torus-energy")
    record.update({"value": value, "error_estimate": args.tol,
                   "n_points": int(config.points.shape[0])})
    _emit(record, args.out)
    return 0


def cmd_windowed_w(args):
    config, data = _load_config(args.config)
    potential = _parse_potential(args.potential)
    measure = solve_equilibrium(potential)
    blown = blow_up(config, measure)
    evaluator = FieldEvaluator(blown)
    cx, cy = (float(v) for v in args.center.split(","))
    window = CutoffWindow(center=(cx, cy), half_width=args.half_width,
                          kind=args.kind)
    _progress(f"windowed energy, center ({cx}, {cy}), "
              f"half-width {args.half_width}")
    we = windowed_W(evaluator, window, WindowQuadratureSettings())
    record = _base_record(args, "windowed-w")
    record.update({"value": we.value, "error_estimate": we.error_estimate,
                   "n_charges": we.n_charges})
    _emit(record, args.out)
    return 0


def cmd_screen(args):
    rho, value = _parse_density(args.density)
    _progress(f"screened patch, inner {args.inner}, outer {args.outer}, "
              f"density {value}")
    patch = build_screened_patch(args.inner, rho, scale=args.scale,
                                 outer_halfwidth=args.outer,
                                 grid_n=args.grid_n)
    record = _base_record(args, "screen")
    record.update({
        "inner_halfwidth": patch.inner_halfwidth,
        "outer_halfwidth": patch.outer_halfwidth,
        "n_points": int(len(patch.points)),
        "points": np.asarray(patch.points).tolist(),
        "charges": [float(c) for c in patch.partition.charges],
        "pairs": [[int(ia), int(ib)] for ia, ib, _ in patch.partition.pairs],
        "energy_estimate": patch.energy_estimate,
        "outer_flux": patch.outer_flux(),
        "max_interface_jump": patch.max_interface_jump(),
        "fields": [
            {
                "rect": [f.rect.x0, f.rect.x1, f.rect.y0, f.rect.y1],
                "shape": list(f.shape),
                "Ex": np.asarray(f.Ex).ravel().tolist(),
                "Ey": np.asarray(f.Ey).ravel().tolist(),
            }
            for f in patch.fields
        ],
    })
    _emit(record, args.out)
    return 0


def cmd_reproduce(args):
    if args.suite != "acceptance":
        raise SystemExit(f"unknown suite: {args.suite!r}")
    test_file = os.path.join(args.tests_path, "test_acceptance.py")
    if not os.path.exists(test_file):
        raise SystemExit(f"cannot find {test_file}; run from the repository "
                         f"root or pass --tests-path")
    _progress("running the acceptance suite")
    proc = subprocess.run([sys.executable, "-m", "pytest", test_file,
                           "-q", "-s"])
    return proc.returncode


def _add_optimizer_args(p):
    p.add_argument("--potential", default="power:2")
    p.add_argument("--restarts", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-iterations", type=int, default=2000)
    p.add_argument("--tol", type=float, default=1e-9)
    p.add_argument("--out", default=None)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="jellium2d",
        description="Ground states of the 2D Coulomb gas: minimization, "
                    "renormalized energies, screening, diagnostics.")
    parser.add_argument("--deterministic", action="store_true",
                        help="force sequential reductions (the default; "
                             "recorded in the output config)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("minimize", help="multi-start minimization of w_n")
    p.add_argument("--n", type=int, required=True)
    _add_optimizer_args(p)
    p.set_defaults(func=cmd_minimize)

    p = sub.add_parser("polish", help="local descent from a saved config")
    p.add_argument("--config", required=True)
    _add_optimizer_args(p)
    p.set_defaults(func=cmd_polish)

    p = sub.add_parser("analyze", help="equidistribution reports")
    p.add_argument("--config", required=True)
    p.add_argument("--potential", default="power:2")
    p.add_argument("--report", default="discrepancy,separation")
    p.add_argument("--ell", default="3,5,8")
    p.add_argument("--margin", type=float, default=1.5)
    p.add_argument("--interior-margin", type=float, default=1.0)
    p.add_argument("--max-boxes", type=int, default=20)
    p.add_argument("--sigma1", type=float, default=None,
                   help="density-1 energy per volume for the energy "
                        "reference column")
    p.add_argument("--csv", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("torus-energy", help="periodic lattice energy")
    p.add_argument("--lattice", default="triangular")
    p.add_argument("--density", type=float, default=1.0)
    p.add_argument("--cells", type=int, default=4)
    p.add_argument("--tol", type=float, default=1e-10)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_torus_energy)

    p = sub.add_parser("windowed-w", help="windowed renormalized energy")
    p.add_argument("--config", required=True)
    p.add_argument("--potential", default="power:2")
    p.add_argument("--center", default="0,0")
    p.add_argument("--half-width", type=float, required=True)
    p.add_argument("--kind", default="smooth",
                   choices=["smooth", "indicator"])
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_windowed_w)

    p = sub.add_parser("screen", help="build a screened annular patch")
    p.add_argument("--inner", type=float, required=True)
    p.add_argument("--outer", type=float, default=None)
    p.add_argument("--density", default="uniform:0.3183")
    p.add_argument("--scale", type=float, default=None)
    p.add_argument("--grid-n", type=int, default=48)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_screen)

    p = sub.add_parser("reproduce", help="run a verification suite")
    p.add_argument("--suite", default="acceptance")
    p.add_argument("--tests-path", default="tests")
    p.set_defaults(func=cmd_reproduce)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        record = {"error": {"type": type(exc).__name__, "message": str(exc),
                            "module": type(exc).__module__},
                  "version": __version__}
        print(json.dumps(record, sort_keys=True), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
