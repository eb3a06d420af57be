"""Batch command-line front end.

Three subcommands drive the pipeline from TOML problem files:

``validate``
    Parse and validate a problem file without running anything.
``reference``
    Build the accurately-resolved boundary (repeated boundary refinement),
    parameterize, solve, and report the reference functional value.
``defeature``
    Run the adaptive defeaturing loop and write the run record as CSV
    together with mesh and geometry dumps.

The problem argument is either a path to a TOML file or the name of a
shipped preset (currently ``flag``).  Log verbosity is controlled by the
``THBDEFEAT_LOG`` environment variable (standard logging level names).
"""
from __future__ import annotations

import argparse
import dataclasses
import importlib.resources
import logging
import math
import os
import sys

import numpy as np

from .boundary_fit import FitConfig, fit_boundary
from .defeature_loop import run_defeaturing
from .hierarchy import HierarchicalMesh, ThbBasis, boundary_dofs
from .parameterization import parameterize
from .pde import PoissonSolver
from .problem_io import (ProblemFileError, ProblemSpec, _fmt,
                         atomic_write_text, load_problem, write_geometry_dump,
                         write_mesh_dump, write_run_record)

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_BUDGET = 2


def preset_path(name: str) -> str:
    """Filesystem path of a shipped problem preset."""
    res = importlib.resources.files("thbdefeat") / "presets" / f"{name}.toml"
    if not res.is_file():
        raise ProblemFileError(f"unknown preset '{name}'")
    return str(res)


def _resolve_problem(arg: str) -> ProblemSpec:
    path = arg if os.path.exists(arg) else preset_path(arg)
    return load_problem(path)


def _apply_overrides(spec: ProblemSpec, args) -> ProblemSpec:
    """Fold command-line flag overrides into the run configuration."""
    run = spec.run
    fit = run.fit
    if getattr(args, "kappa0", None) is not None or \
            getattr(args, "kappa1", None) is not None:
        fit = FitConfig(
            kappa0=args.kappa0 if args.kappa0 is not None else fit.kappa0,
            kappa1=args.kappa1 if args.kappa1 is not None else fit.kappa1,
            constraints=fit.constraints)
    updates = {"fit": fit}
    if getattr(args, "alpha", None) is not None:
        updates["alpha"] = args.alpha
    if getattr(args, "epsilon", None) is not None:
        updates["epsilon"] = args.epsilon
    if getattr(args, "max_iters", None) is not None:
        updates["max_iters"] = args.max_iters
    run = dataclasses.replace(run, **updates)
    return dataclasses.replace(spec, run=run)


def _epsilon(text: str) -> float:
    if text == "none":
        return math.inf
    return float(text)


def _reference_geometry(spec: ProblemSpec, rounds: int):
    """Boundary-refined mesh, fitted curve, and solution space."""
    cfg = spec.run
    mesh = HierarchicalMesh.uniform(cfg.degree, cfg.initial_cells)
    for _ in range(rounds):
        cells = [c for side in spec.reference_sides
                 for c in mesh.boundary_cells(side)]
        mesh = mesh.refine_cells(sorted(set(cells)))
    basis = ThbBasis(mesh)
    dofs = boundary_dofs(basis)
    curve = fit_boundary(spec.exact, dofs, cfg.fit)
    if cfg.state_level is not None:
        space_mesh = HierarchicalMesh.uniform(
            cfg.degree, cfg.initial_cells).uniform_refine(cfg.state_level)
    else:
        space_mesh = mesh.uniform_refine(cfg.state_depth)
    return curve, ThbBasis(space_mesh)


def cmd_validate(args) -> int:
    spec = _resolve_problem(args.problem)
    run = spec.run
    eps = "none" if math.isinf(run.epsilon) else _fmt(run.epsilon)
    print(f"ok: {args.problem}: epsilon={eps} alpha={run.alpha} "
          f"initial_cells={run.initial_cells} degree={run.degree} "
          f"neumann={sorted(spec.prob.neumann_sides)}")
    return EXIT_OK


def cmd_reference(args) -> int:
    spec = _apply_overrides(_resolve_problem(args.problem), args)
    rounds = args.rounds if args.rounds is not None else \
        spec.reference_rounds
    curve, space = _reference_geometry(spec, rounds)
    log.info("reference boundary: %d boundary dofs, solution space dim %d",
             curve.dofs.size, space.dim)
    geo, info = parameterize(curve, spec.run.egg, extra_mesh=space.mesh)
    solver = PoissonSolver(geo, space, spec.prob)
    u_h = solver.solve_state()
    j_e = solver.functional(u_h, spec.qoi)
    print(f"J_E = {_fmt(j_e)}")
    print(f"boundary_dim = {curve.dofs.size}")
    if args.out is not None:
        os.makedirs(args.out, exist_ok=True)
        write_geometry_dump(geo, curve, args.out, prefix="reference")
        lines = ["J_E,boundary_dim,dim,newton_steps,apos_rounds",
                 f"{_fmt(j_e)},{curve.dofs.size},{space.dim},"
                 f"{len(info['newton'])},{info['apos_rounds']}"]
        atomic_write_text(os.path.join(args.out, "reference_summary.csv"),
                          "\n".join(lines) + "\n")
        n = args.field_samples
        s = np.linspace(0.0, 1.0, n)
        uu, vv = np.meshgrid(s, s, indexing="ij")
        pts = np.column_stack([uu.ravel(), vv.ravel()])
        xy = geo.eval(pts)
        vals = u_h.eval(pts)
        rows = ["u,v,x,y,value"]
        rows.extend(f"{_fmt(p[0])},{_fmt(p[1])},{_fmt(q[0])},{_fmt(q[1])},"
                    f"{_fmt(w)}" for p, q, w in zip(pts, xy, vals))
        atomic_write_text(os.path.join(args.out, "reference_field.csv"),
                          "\n".join(rows) + "\n")
    return EXIT_OK


def cmd_defeature(args) -> int:
    spec = _apply_overrides(_resolve_problem(args.problem), args)
    geo, records, converged = run_defeaturing(spec.exact, spec.prob,
                                              spec.qoi, spec.run)
    final = records[-1]
    print(f"iterations = {len(records)}")
    print(f"J = {_fmt(final.J)}")
    print(f"estimator = {_fmt(final.estimator)}")
    print(f"boundary_dim = {final.boundary_dim}")
    print(f"converged = {converged}")
    if args.out is not None:
        os.makedirs(args.out, exist_ok=True)
        write_run_record(records, os.path.join(args.out, "run_record.csv"),
                         j_ref=spec.j_ref,
                         boundary_dim_ref=spec.boundary_dim_ref)
        for rec in records:
            if rec.mesh is not None:
                write_mesh_dump(rec.mesh, os.path.join(
                    args.out, f"mesh_{rec.n:03d}.csv"))
        curve = fit_boundary(spec.exact,
                             boundary_dofs(ThbBasis(geo.basis.mesh)),
                             spec.run.fit)
        write_geometry_dump(geo, curve, args.out, prefix="final")
    return EXIT_OK if converged else EXIT_BUDGET


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="thbdefeat",
        description="Goal-oriented geometric defeaturing on THB splines.")
    sub = parser.add_subparsers(dest="command", required=True)

    val = sub.add_parser("validate", help="parse a problem file only")
    val.add_argument("problem", help="problem file path or preset name")
    val.set_defaults(func=cmd_validate)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("problem", help="problem file path or preset name")
    common.add_argument("--alpha", type=float, default=None,
                        help="marking fraction in (0, 1)")
    common.add_argument("--epsilon", type=_epsilon, default=None,
                        help="stopping tolerance (or 'none')")
    common.add_argument("--kappa0", type=float, default=None,
                        help="boundary-fit position weight")
    common.add_argument("--kappa1", type=float, default=None,
                        help="boundary-fit tangent weight")
    common.add_argument("--max-iters", type=int, default=None,
                        help="iteration budget")
    common.add_argument("--out", default=None,
                        help="output directory for artifacts")

    ref = sub.add_parser("reference", parents=[common],
                         help="solve on the accurately-resolved boundary")
    ref.add_argument("--rounds", type=int, default=None,
                     help="boundary refinement rounds")
    ref.add_argument("--field-samples", type=int, default=65,
                     help="per-axis samples of the field dump")
    ref.set_defaults(func=cmd_reference)

    dfe = sub.add_parser("defeature", parents=[common],
                         help="run the adaptive defeaturing loop")
    dfe.set_defaults(func=cmd_defeature)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("THBDEFEAT_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ProblemFileError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
