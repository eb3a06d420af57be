"""Goal-oriented defeaturing loop: FIT, SOLVE, ESTIMATE, MARK, REFINE.

Each iteration fits the exact boundary on the current trace space,
parameterizes the interior, solves state and adjoint on a refined solution
space, assembles per-function shape gradients on the boundary-refined
companion fit, and refines the minimal cell set supporting the marked
directions.  The loop stops when the estimator drops below the tolerance or
the iteration budget runs out.

Fold-repair refinements performed during parameterization are carried into
the next iteration's volume solve (which spares most repair rounds) but
stay out of the fitting mesh: the trace space, the boundary dimension and
the marking are driven purely by the shape-gradient refinement.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .boundary_fit import ExactBoundary, FitConfig, fit_boundary
from .hierarchy import (HierarchicalMesh, ThbBasis, boundary_dofs,
                        minimal_refinement_set)
from .parameterization import EggConfig, GeometryMap, parameterize
from .pde import PdeProblem, PoissonSolver, QoiSpec
from .shape_gradient import (GradientReport, assemble_report, companion_fit,
                             unit_boundary_gradients)


class LoopError(ValueError):
    """Raised for invalid loop configurations."""


@dataclass(frozen=True)
class RunConfig:
    """Inputs of the defeaturing loop.

    ``state_level`` selects the solution space: when set, state and adjoint
    live on the fixed uniform refinement of the initial mesh at that level
    at every iteration; when ``None``, the space is rebuilt each iteration
    as a uniform ``state_depth``-fold refinement of the current mesh.
    """

    epsilon: float
    alpha: float
    initial_cells: int = 10
    degree: int = 3
    fit: FitConfig = field(default_factory=FitConfig)
    egg: EggConfig = field(default_factory=EggConfig)
    state_depth: int = 2
    state_level: int | None = None
    max_iters: int = 30

    def __post_init__(self):
        if not self.epsilon > 0.0:
            raise LoopError("tolerance epsilon must be positive")
        if not 0.0 < self.alpha < 1.0:
            raise LoopError("marking parameter alpha must lie in (0, 1)")
        if self.initial_cells < 1 or self.degree < 1:
            raise LoopError("invalid initial mesh specification")
        if self.max_iters < 0:
            raise LoopError("max_iters must be non-negative")


@dataclass
class IterationRecord:
    """Per-iteration run record."""

    n: int
    num_cells: int
    cells_per_level: tuple[int, ...]
    dim: int                    # N_n
    boundary_dim: int           # dN_n
    boundary_dim_plus: int      # dN+_n
    J: float
    estimator: float
    marked: int
    marked_sides: tuple[str, ...]
    marked_supports: tuple[tuple[float, float, float, float], ...]
    refined_cells: int
    apos_rounds: int
    newton_steps: int
    fit_objective: float
    timings: dict
    report: GradientReport | None = None
    mesh: HierarchicalMesh | None = None


def _cells_per_level(mesh: HierarchicalMesh) -> tuple[int, ...]:
    counts = [0] * mesh.depth
    for ell, _a, _b in mesh.active_cells():
        counts[ell] += 1
    return tuple(counts)


def _support_sides(basis: ThbBasis, fn: int) -> tuple[str, ...]:
    u0, u1, v0, v1 = basis.function_support(fn)
    sides = []
    if v0 == 0.0:
        sides.append("south")
    if u1 == 1.0:
        sides.append("east")
    if v1 == 1.0:
        sides.append("north")
    if u0 == 0.0:
        sides.append("west")
    return tuple(sides)


def run_defeaturing(exact: ExactBoundary, prob: PdeProblem, qoi: QoiSpec,
                    cfg: RunConfig):
    """Drive the adaptive loop and return the final map with the record.

    Returns ``(geo, records, converged)`` where ``converged`` reports
    whether the estimator fell below the tolerance within the iteration
    budget.
    """
    mesh = HierarchicalMesh.uniform(cfg.degree, cfg.initial_cells)
    fixed_space = None
    if cfg.state_level is not None:
        fixed_space = ThbBasis(mesh.uniform_refine(cfg.state_level))
    records: list[IterationRecord] = []
    geo = None
    egg_mesh = None                    # parameterization mesh with repairs
    for n in range(cfg.max_iters + 1):
        timings = {}
        t0 = time.perf_counter()
        basis = ThbBasis(mesh)
        dofs = boundary_dofs(basis)
        curve = fit_boundary(exact, dofs, cfg.fit)
        timings["fit"] = time.perf_counter() - t0

        if fixed_space is not None:
            space = fixed_space
        else:
            space = ThbBasis(mesh.uniform_refine(cfg.state_depth))
        t0 = time.perf_counter()
        geo, info = parameterize(curve, cfg.egg, extra_mesh=space.mesh,
                                 initial_mesh=egg_mesh)
        timings["parameterize"] = time.perf_counter() - t0
        egg_mesh = geo.basis.mesh      # carry fold-repair refinements

        t0 = time.perf_counter()
        solver = PoissonSolver(geo, space, prob)
        u_h = solver.solve_state()
        p_h = solver.solve_adjoint(qoi, u_h)
        J_n = solver.functional(u_h, qoi)
        timings["solve"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        fitp = companion_fit(curve, exact, cfg.fit)
        unit = unit_boundary_gradients(u_h, p_h, geo, prob, qoi,
                                       fitp.basis_plus, fitp.boundary_ids)
        report = assemble_report(fitp, unit, cfg.alpha)
        timings["estimate"] = time.perf_counter() - t0

        marked_sides = sorted({s for fn in report.marked
                               for s in _support_sides(fitp.basis_plus, fn)})
        done = report.estimator < cfg.epsilon or n == cfg.max_iters
        refined = set()
        if not done:
            refined = minimal_refinement_set(mesh, fitp.basis_plus,
                                             report.marked)
        records.append(IterationRecord(
            n=n, num_cells=len(mesh.active_cells()),
            cells_per_level=_cells_per_level(mesh),
            dim=basis.dim, boundary_dim=dofs.size,
            boundary_dim_plus=len(fitp.boundary_ids),
            J=float(J_n), estimator=float(report.estimator),
            marked=len(report.marked), marked_sides=tuple(marked_sides),
            marked_supports=tuple(fitp.basis_plus.function_support(fn)
                                  for fn in report.marked),
            refined_cells=len(refined), apos_rounds=info["apos_rounds"],
            newton_steps=len(info["newton"]),
            fit_objective=float(curve.objective),
            timings=timings, report=report, mesh=mesh))
        if report.estimator < cfg.epsilon:
            return geo, records, True
        if n == cfg.max_iters:
            break
        mesh = mesh.refine_cells(sorted(refined))
    return geo, records, False
