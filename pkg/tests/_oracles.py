"""Independent brute-force reference implementations used by the tests.

Everything here is written in the most literal way possible — explicit
loops over cells and functions — so the fast implementations in the
package can be checked against it.
"""
import numpy as np

from thbdefeat.hierarchy import HierarchicalMesh
from thbdefeat.splines import KnotVector


def eval_dense(kv: KnotVector, xs, nderiv: int = 0) -> np.ndarray:
    """Dense table N[d, i, k] of every function of ``kv`` at every point."""
    first, ders = kv.eval_all(np.asarray(xs, dtype=float), nderiv)
    out = np.zeros((nderiv + 1, kv.num_funcs, len(first)))
    for k, f in enumerate(first):
        out[:, f:f + kv.degree + 1, k] = ders[k]
    return out


def hb_function_set(mesh: HierarchicalMesh) -> set:
    """Hierarchical (Kraft) selection by the literal recursion.

    ``H_0`` holds every level-0 tensor function; from level ``l`` to
    ``l+1``, functions whose support is entirely refined are replaced by
    the level-``l+1`` functions supported inside the refined region.
    Returns the set of selected ``(level, iu, iv)`` triples.
    """
    sp0 = mesh.spaces[0]
    selected = {(0, iu, iv) for iu in range(sp0.shape[0])
                for iv in range(sp0.shape[1])}
    for ell in range(mesh.depth - 1):
        refined = mesh.refined[ell]
        keep = set()
        for (lev, iu, iv) in selected:
            if lev != ell:
                keep.add((lev, iu, iv))
                continue
            sp = mesh.spaces[ell]
            (e0, e1), (f0, f1) = sp.func_cell_ranges(iu, iv)
            fully_refined = all(refined[e, f]
                                for e in range(e0, e1)
                                for f in range(f0, f1))
            if not fully_refined:
                keep.add((lev, iu, iv))
        spn = mesh.spaces[ell + 1]
        for iu in range(spn.shape[0]):
            for iv in range(spn.shape[1]):
                (e0, e1), (f0, f1) = spn.func_cell_ranges(iu, iv)
                inside = all(refined[e // 2, f // 2]
                             for e in range(e0, e1)
                             for f in range(f0, f1))
                if inside:
                    keep.add((ell + 1, iu, iv))
        selected = keep
    return selected


def tensor_function_values(mesh: HierarchicalMesh, fn, pts) -> np.ndarray:
    """Values of one (un-truncated) tensor function at (n, 2) points."""
    ell, iu, iv = fn
    sp = mesh.spaces[ell]
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    nu = eval_dense(sp.kv_u, pts[:, 0])[0, iu]
    nv = eval_dense(sp.kv_v, pts[:, 1])[0, iv]
    return nu * nv


def random_hierarchical_mesh(rng, degree=3, initial=4,
                             levels=2) -> HierarchicalMesh:
    """Random mesh: repeatedly refine a random subset of active cells."""
    mesh = HierarchicalMesh.uniform(degree, initial)
    for _ in range(levels - 1):
        active = mesh.active_cells()
        take = rng.random(len(active)) < 0.35
        cells = [c for c, t in zip(active, take) if t]
        if not cells:
            cells = [active[rng.integers(len(active))]]
        mesh = mesh.refine_cells(cells)
    return mesh


def fd_setup(exact, prob, qoi, elements=6, degree=3, state_depth=1):
    """Fit/parameterize/solve one configuration and prepare the gradient
    machinery: returns (geo, u_h, p_h, fit, solver)."""
    from thbdefeat.boundary_fit import FitConfig, fit_boundary
    from thbdefeat.hierarchy import ThbBasis, boundary_dofs
    from thbdefeat.parameterization import EggConfig, parameterize
    from thbdefeat.pde import PoissonSolver
    from thbdefeat.shape_gradient import companion_fit

    mesh = HierarchicalMesh.uniform(degree, elements)
    basis = ThbBasis(mesh)
    cfg = FitConfig()
    curve = fit_boundary(exact, boundary_dofs(basis), cfg)
    geo, _ = parameterize(curve, EggConfig())
    space = ThbBasis(geo.basis.mesh.uniform_refine(state_depth))
    solver = PoissonSolver(geo, space, prob)
    u_h = solver.solve_state()
    p_h = solver.solve_adjoint(qoi, u_h)
    fit = companion_fit(curve, exact, cfg)
    return geo, u_h, p_h, fit, solver


def fd_derivative_order(geo, fit, solver, prob, qoi, fn, axis, grad,
                        t0=1e-3):
    """Observed convergence order of the finite-difference consistency gap.

    Applies the perturbation of identity directly to the geometry map: both
    the map and the direction (the truncated basis function times a unit
    axis vector) are projected — exactly, by nestedness — onto the union
    basis, the direction is added with weight t, and the state problem is
    re-solved.  Returns ``(order, errors)``; ``errors`` are |FD(t) - grad|
    for t in (t0, t0/2, t0/4).
    """
    from thbdefeat.hierarchy import ThbBasis
    from thbdefeat.parameterization import GeometryMap, project_map
    from thbdefeat.pde import PoissonSolver

    union = ThbBasis(geo.basis.mesh.union(fit.mesh_plus))
    base = project_map(geo, union)
    dir_control = np.zeros((fit.basis_plus.dim, 2))
    dir_control[fn, axis] = 1.0
    direction = project_map(GeometryMap(fit.basis_plus, dir_control),
                            union).control
    J0 = solver.functional(solver.solve_state(), qoi)
    errors = []
    for t in (t0, t0 / 2, t0 / 4):
        pert = GeometryMap(union, base.control + t * direction)
        pert_solver = PoissonSolver(pert, solver.space, prob)
        Jt = pert_solver.functional(pert_solver.solve_state(), qoi)
        errors.append(abs((Jt - J0) / t - grad))
    errors = np.asarray(errors)
    if np.all(errors < 1e-9):           # FD differences at roundoff level
        return np.inf, errors
    orders = np.log2(errors[:-1] / np.maximum(errors[1:], 1e-300))
    return float(orders.min()), errors
