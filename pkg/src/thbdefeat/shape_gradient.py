"""Boundary-refined companion fit, shape gradients, estimator and marking.

The companion fit re-solves the boundary fit on the mesh obtained by dyadic
refinement of every boundary cell; the control discrepancies against the
two-scale image of the current fit span the candidate shape directions.  For
each boundary function of the refined trace space and each coordinate axis,
the shape gradient is the Lagrangian (volume) shape derivative of the
quantity of interest in the direction of the spline bump, assembled in
parametric coordinates over the union quadrature mesh.  Marking follows a
maximum strategy with threshold alpha.

The derivative of a direction theta = beta (e_axis), with beta a parametric
basis function, evaluates

    int_Omega [div theta (grad u . grad p - f p)
               - (Dtheta + Dtheta^T) grad u . grad p - (grad f . theta) p] dx
    - int_{Gamma_N} [(grad g . theta) p + g p div_Gamma theta] ds

plus the moving-measure derivatives of the functional's own regions (the
volume density picks up div theta, the boundary density the tangential
stretch rate).  The latter vanish whenever the direction's support stays
clear of the functional's regions; keeping them makes the derivative exact
for directions that touch a region boundary, e.g. at corners.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .boundary_fit import BoundaryCurve, ExactBoundary, FitConfig, fit_boundary
from .hierarchy import HierarchicalMesh, ThbBasis, boundary_dofs
from .parameterization import GeometryMap
from .pde import DiscreteField, PdeProblem, QoiSpec, _jac_inverse
from .quadrature import BoundarySideQuadrature, QuadratureRegistry


class GradientError(ValueError):
    """Raised for inconsistent gradient-assembly inputs."""


@dataclass(frozen=True)
class CompanionFit:
    """Boundary-refined fit with control discrepancies.

    ``delta[k]`` is the difference between the control point of boundary
    function k of the refined trace space in the new fit and in the exact
    two-scale re-expression of the current fit; the fitted curves differ by
    exactly ``sum_k delta[k] beta_k``.
    """

    mesh_plus: HierarchicalMesh
    basis_plus: ThbBasis
    curve_plus: BoundaryCurve
    curve_bar: BoundaryCurve
    delta: np.ndarray                 # (n_boundary_plus, 2)

    @property
    def boundary_ids(self) -> tuple[int, ...]:
        return self.curve_plus.dofs.indices


@dataclass(frozen=True)
class ShapeDirection:
    """One candidate perturbation: a spline bump along a coordinate axis."""

    fn: int                           # function id in the refined basis
    axis: int                         # 0 -> x, 1 -> y
    amplitude: float
    carrier: GeometryMap

    def __post_init__(self):
        if self.axis not in (0, 1):
            raise GradientError("axis must be 0 (x) or 1 (y)")


@dataclass(frozen=True)
class GradientReport:
    """Per-function shape gradients with estimator and marked set."""

    ids: tuple[int, ...]              # boundary function ids, refined basis
    unit_gradients: np.ndarray        # (n, 2), unit-amplitude derivatives
    gradients: np.ndarray             # (n, 2), scaled by control discrepancy
    estimator: float                  # max_k ||gradients[k]||_2
    marked: tuple[int, ...]           # ids with ||grad||_2 >= alpha * estimator
    alpha: float
    prediction: float                 # sum_k unit_gradients[k] . delta[k]


def companion_fit(curve: BoundaryCurve, exact: ExactBoundary,
                  cfg: FitConfig) -> CompanionFit:
    """Fit the exact boundary on the boundary-refined mesh and compare with
    the two-scale image of the current fit.

    The re-expression of the current curve is computed by fitting it on the
    refined trace space; nestedness makes that fit exact, so the control
    discrepancies carry no projection error.
    """
    mesh = curve.basis.mesh
    mesh_plus = mesh.refine_cells(mesh.all_boundary_cells())
    basis_plus = ThbBasis(mesh_plus)
    dofs_plus = boundary_dofs(basis_plus)
    curve_plus = fit_boundary(exact, dofs_plus, cfg)
    curve_bar = fit_boundary(curve.as_exact(exact.neumann_sides), dofs_plus,
                             cfg)
    delta = curve_plus.control_points - curve_bar.control_points
    return CompanionFit(mesh_plus, basis_plus, curve_plus, curve_bar, delta)


def _union_registry(geo: GeometryMap, space: ThbBasis,
                    basis_plus: ThbBasis) -> QuadratureRegistry:
    mesh = geo.basis.mesh.union(space.mesh).union(basis_plus.mesh)
    sp = mesh.spaces[0]
    order = max(sp.kv_u.degree, sp.kv_v.degree) + 1
    return QuadratureRegistry(mesh, order)


def unit_boundary_gradients(u_h: DiscreteField, p_h: DiscreteField,
                            geo: GeometryMap, prob: PdeProblem, qoi: QoiSpec,
                            basis_plus: ThbBasis, want_ids,
                            registry: QuadratureRegistry | None = None
                            ) -> np.ndarray:
    """Unit-amplitude shape derivatives for a batch of basis functions.

    Returns an array of shape ``(len(want_ids), 2)`` with the derivative of
    the quantity of interest in direction ``beta_k e_axis`` for each function
    id in ``want_ids`` and each axis, assembled in a single pass over the
    quadrature cells of the union mesh.
    """
    if u_h.geometry is not geo or p_h.geometry is not geo:
        raise GradientError("state and adjoint must be solved on the carrier")
    space = u_h.basis
    if p_h.basis is not space:
        raise GradientError("state and adjoint must share one space")
    want_ids = [int(k) for k in want_ids]
    row = {fn: k for k, fn in enumerate(want_ids)}
    out = np.zeros((len(want_ids), 2))
    reg = registry if registry is not None else _union_registry(
        geo, space, basis_plus)
    f = prob.f
    ju0, ju1, jv0, jv1 = qoi.j_region

    for i in range(len(reg.cells)):
        pid, ptabs = reg.tabulate(basis_plus, i, 1)
        keep = np.array([fn in row for fn in pid], dtype=bool)
        if not keep.any():
            continue
        rows = np.array([row[fn] for fn in np.asarray(pid)[keep]])
        gid, gtab = reg.tabulate(geo.basis, i, 1)
        xd = np.einsum("fi,fds->ids", geo.control[gid], gtab[1])
        jinv, det = _jac_inverse(xd)
        x = np.einsum("fi,fs->si", geo.control[gid], gtab[0])
        fn_ids, tabs = reg.tabulate(space, i, 1)
        gphys = np.einsum("das,fds->fas", jinv, tabs[1])
        uval = u_h.coefficients[fn_ids] @ tabs[0]
        pval = p_h.coefficients[fn_ids] @ tabs[0]
        gu = np.einsum("f,fas->as", u_h.coefficients[fn_ids], gphys)
        gp = np.einsum("f,fas->as", p_h.coefficients[fn_ids], gphys)
        beta = ptabs[0][keep]
        gplus = np.einsum("das,kds->kas", jinv, ptabs[1][keep])
        w = reg.weights[i] * det
        core = (gu * gp).sum(axis=0)
        fval = f.value(x)
        fgrad = f.gradient(x)
        cross_u = np.einsum("kas,as->ks", gplus, gu)
        cross_p = np.einsum("kas,as->ks", gplus, gp)
        for a in (0, 1):
            term = (gplus[:, a] * (core - fval * pval)
                    - gu[a] * cross_p - gp[a] * cross_u
                    - fgrad[:, a] * beta * pval)
            if qoi.j is not None:
                pts = reg.points[i]
                inside = ((pts[:, 0] >= ju0) & (pts[:, 0] <= ju1)
                          & (pts[:, 1] >= jv0) & (pts[:, 1] <= jv1))
                term = term + inside * qoi.j.value(uval) * gplus[:, a]
            np.add.at(out[:, a], rows, term @ w)

    mesh = reg.mesh
    sides = set(prob.neumann_sides)
    if qoi.q is not None:
        sides.add(qoi.q_side)
    for side in sides:
        bq = BoundarySideQuadrature(mesh, side, reg.order)
        for i in range(len(bq.cells)):
            pid, ptabs = bq.tabulate(basis_plus, i, 1)
            keep = np.array([fn in row for fn in pid], dtype=bool)
            if not keep.any():
                continue
            rows = np.array([row[fn] for fn in np.asarray(pid)[keep]])
            gid, gtab = bq.tabulate(geo.basis, i, 1)
            x = np.einsum("fi,fs->si", geo.control[gid], gtab[0])
            tang = np.einsum("fi,fs->si", geo.control[gid],
                             bq.tangential(gtab[1]))
            nrm = np.linalg.norm(tang, axis=1)
            beta = ptabs[0][keep]
            dbeta = bq.tangential(ptabs[1])[keep]
            w = bq.weights[i]
            u_here = None
            if qoi.q is not None and side == qoi.q_side:
                s0, s1 = qoi.q_interval
                inside = (bq.params[i] >= s0) & (bq.params[i] <= s1)
                if inside.any():
                    fn_ids, tabs = bq.tabulate(u_h.basis, i, 0)
                    u_here = u_h.coefficients[fn_ids] @ tabs[0]
            for a in (0, 1):
                term = np.zeros_like(beta)
                if side in prob.neumann_sides:
                    fn_ids, tabs = bq.tabulate(p_h.basis, i, 0)
                    p_here = p_h.coefficients[fn_ids] @ tabs[0]
                    ggrad = prob.g.gradient(x)
                    gval = prob.g.value(x)
                    term -= (ggrad[:, a] * beta * p_here * nrm
                             + gval * p_here * tang[:, a] * dbeta / nrm)
                if u_here is not None:
                    term += (inside * qoi.q.value(u_here)
                             * tang[:, a] * dbeta / nrm)
                np.add.at(out[:, a], rows, term @ w)
    return out


def directional_derivative(u_h: DiscreteField, p_h: DiscreteField,
                           geo: GeometryMap, theta: ShapeDirection,
                           prob: PdeProblem, qoi: QoiSpec,
                           basis_plus: ThbBasis) -> float:
    """Shape derivative of the quantity of interest along one direction."""
    if theta.carrier is not geo:
        raise GradientError("direction carrier differs from the geometry map")
    if theta.amplitude == 0.0:
        return 0.0
    unit = unit_boundary_gradients(u_h, p_h, geo, prob, qoi, basis_plus,
                                   [theta.fn])
    return float(theta.amplitude * unit[0, theta.axis])


def assemble_report(fit: CompanionFit, unit_gradients: np.ndarray,
                    alpha: float) -> GradientReport:
    """Estimator, maximum-strategy marking and linearized prediction."""
    if not 0.0 < alpha < 1.0:
        raise GradientError("alpha must lie in (0, 1)")
    ids = fit.boundary_ids
    unit_gradients = np.asarray(unit_gradients, dtype=float)
    if unit_gradients.shape != (len(ids), 2):
        raise GradientError("one unit gradient pair per boundary function")
    gradients = unit_gradients * fit.delta
    norms = np.linalg.norm(gradients, axis=1)
    estimator = float(norms.max()) if len(norms) else 0.0
    if estimator > 0.0:
        marked = tuple(fn for fn, nn in zip(ids, norms)
                       if nn >= alpha * estimator)
    else:
        marked = ()
    prediction = float((unit_gradients * fit.delta).sum())
    return GradientReport(tuple(ids), unit_gradients, gradients, estimator,
                          marked, float(alpha), prediction)
