"""Isogeometric Galerkin solver for the Poisson model problem.

The state problem -div(grad u) = f with u = 0 on the Dirichlet part of the
boundary and du/dn = g on the Neumann part is pulled back to the parametric
square through a geometry map and discretized on a THB basis.  The adjoint
problem reuses the (symmetric) stiffness factorization with the linearized
functional as right-hand side.  All integrals run on a quadrature registry
over the union of the geometry mesh and the solution mesh, shared with the
fold checks and the shape-gradient integrals.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from .hierarchy import SIDES, ThbBasis, boundary_dofs
from .parameterization import GeometryMap
from .quadrature import BoundarySideQuadrature, QuadratureRegistry


class PdeError(ValueError):
    """Raised for ill-posed problems and invalid data."""


@dataclass(frozen=True)
class ScalarField:
    """Closed-form scalar field on the physical plane with its gradient."""

    value: callable
    gradient: callable

    @staticmethod
    def constant(c: float) -> "ScalarField":
        return ScalarField(lambda x: np.full(len(x), float(c)),
                           lambda x: np.zeros((len(x), 2)))

    @staticmethod
    def zero() -> "ScalarField":
        return ScalarField.constant(0.0)


@dataclass(frozen=True)
class Integrand:
    """Pointwise integrand w -> value with its derivative w -> d/dw."""

    value: callable
    derivative: callable

    @staticmethod
    def square() -> "Integrand":
        return Integrand(lambda w: w * w, lambda w: 2.0 * w)

    @staticmethod
    def identity() -> "Integrand":
        return Integrand(lambda w: w, lambda w: np.ones_like(w))

    @staticmethod
    def one() -> "Integrand":
        return Integrand(lambda w: np.ones_like(w), lambda w: np.zeros_like(w))


@dataclass(frozen=True)
class PdeProblem:
    """Poisson data: source, Neumann flux and boundary tags."""

    f: ScalarField
    g: ScalarField
    neumann_sides: frozenset = frozenset()

    def __post_init__(self):
        unknown = set(self.neumann_sides) - set(SIDES)
        if unknown:
            raise PdeError(f"unknown side tags {sorted(unknown)}")
        if set(self.neumann_sides) == set(SIDES):
            raise PdeError("pure-Neumann problem is not well-posed")

    @property
    def dirichlet_sides(self) -> tuple:
        return tuple(s for s in SIDES if s not in self.neumann_sides)


@dataclass(frozen=True)
class QoiSpec:
    """Functional J(w) = int_{B'} j(w) dx + int_{dB'} q(w) dx.

    The volume region is a parametric rectangle (u0, u1, v0, v1); the
    boundary region is a side of the parametric square with an s-interval.
    Regions are fixed in parametric coordinates across iterations.
    """

    j: Integrand | None = None
    j_region: tuple = (0.0, 1.0, 0.0, 1.0)
    q: Integrand | None = None
    q_side: str | None = None
    q_interval: tuple = (0.0, 1.0)

    def __post_init__(self):
        if self.q is not None and self.q_side not in SIDES:
            raise PdeError("boundary integrand requires a valid side")


@dataclass
class DiscreteField:
    """Scalar spline field over a THB basis on a mapped domain."""

    basis: ThbBasis
    coefficients: np.ndarray
    geometry: GeometryMap

    def __post_init__(self):
        self.coefficients = np.asarray(self.coefficients, dtype=float)
        if self.coefficients.shape != (self.basis.dim,):
            raise PdeError("one coefficient per basis function")

    def eval(self, points) -> np.ndarray:
        res = self.basis.eval_field(self.coefficients, points, 0)
        return np.array([r[0] for r in res])


def side_dofs(basis: ThbBasis, side: str, tol: float = 1e-12) -> set:
    """Basis functions with non-vanishing trace on one side."""
    from .splines import gauss_legendre

    mesh = basis.mesh
    sp = mesh.spaces[0]
    pmax = max(sp.kv_u.degree, sp.kv_v.degree)
    bq = BoundarySideQuadrature(mesh, side, pmax + 2)
    out = set()
    for i in range(len(bq.cells)):
        fn_ids, tabs = bq.tabulate(basis, i, 0)
        big = np.abs(tabs[0]).max(axis=1) > tol
        out.update(int(f) for f in np.asarray(fn_ids)[big])
    return out


def _jac_inverse(xd):
    """Inverse and determinant of per-point 2x2 Jacobians xd[i, d, s]."""
    det = xd[0, 0] * xd[1, 1] - xd[0, 1] * xd[1, 0]
    inv = np.empty_like(xd)
    inv[0, 0] = xd[1, 1] / det
    inv[0, 1] = -xd[0, 1] / det
    inv[1, 0] = -xd[1, 0] / det
    inv[1, 1] = xd[0, 0] / det
    return inv, det


class PoissonSolver:
    """Pullback Galerkin discretization bound to one geometry and space.

    Assembles the stiffness matrix once, factorizes it and serves state
    solves, adjoint solves and functional evaluations on the shared
    quadrature registry.
    """

    def __init__(self, geo: GeometryMap, space: ThbBasis, prob: PdeProblem,
                 registry: QuadratureRegistry | None = None):
        self.geo = geo
        self.space = space
        self.prob = prob
        if registry is None:
            mesh = geo.basis.mesh.union(space.mesh)
            sp = mesh.spaces[0]
            order = max(sp.kv_u.degree, sp.kv_v.degree) + 1
            registry = QuadratureRegistry(mesh, order)
        self.registry = registry
        self.boundary = {side: BoundarySideQuadrature(registry.mesh, side,
                                                      registry.order)
                         for side in SIDES}
        dirichlet = set()
        for side in prob.dirichlet_sides:
            dirichlet |= side_dofs(space, side)
        self.free = np.array([i for i in range(space.dim)
                              if i not in dirichlet], dtype=int)
        self.free_pos = np.full(space.dim, -1, dtype=int)
        self.free_pos[self.free] = np.arange(len(self.free))
        # geometry caches filled during stiffness assembly
        self.jinv: list[np.ndarray] = []
        self.det: list[np.ndarray] = []
        self._bnd_geo = {}
        self._assemble()

    # -- assembly ---------------------------------------------------------

    def _assemble(self):
        reg, space, geo = self.registry, self.space, self.geo
        rows, cols, vals = [], [], []
        b = np.zeros(space.dim)
        f = self.prob.f
        for i in range(len(reg.cells)):
            gid, gtab = reg.tabulate(geo.basis, i, 1)
            xd = np.einsum("fi,fds->ids", geo.control[gid], gtab[1])
            jinv, det = _jac_inverse(xd)
            if np.any(det <= 0.0):
                raise PdeError(f"non-positive Jacobian on cell {reg.cells[i]}")
            self.jinv.append(jinv)
            self.det.append(det)
            fn_ids, tabs = reg.tabulate(space, i, 1)
            # physical gradients: gphys[f, a, s] = sum_d jinv[d, a] * dN[f, d]
            gphys = np.einsum("das,fds->fas", jinv, tabs[1])
            w = reg.weights[i] * det
            loc = np.einsum("fas,gas,s->fg", gphys, gphys, w, optimize=True)
            rows.append(np.repeat(fn_ids, len(fn_ids)))
            cols.append(np.tile(fn_ids, len(fn_ids)))
            vals.append(loc.ravel())
            x = np.einsum("fi,fs->si", geo.control[gid], gtab[0])
            b[fn_ids] += tabs[0] @ (w * f.value(x))
        n = space.dim
        K = sparse.coo_matrix((np.concatenate(vals),
                               (np.concatenate(rows), np.concatenate(cols))),
                              shape=(n, n)).tocsr()
        self.K = K
        b += self._neumann_rhs()
        self.b = b
        Kff = K[self.free][:, self.free].tocsc()
        self.lu = splu(Kff)

    def boundary_geometry(self, side: str):
        """Per-edge boundary data: physical points, tangents dx/ds, norms."""
        if side in self._bnd_geo:
            return self._bnd_geo[side]
        bq = self.boundary[side]
        geo = self.geo
        data = []
        for i in range(len(bq.cells)):
            gid, gtab = bq.tabulate(geo.basis, i, 1)
            x = np.einsum("fi,fs->si", geo.control[gid], gtab[0])
            tang = np.einsum("fi,fs->si", geo.control[gid],
                             bq.tangential(gtab[1]))
            data.append((x, tang, np.linalg.norm(tang, axis=1)))
        self._bnd_geo[side] = data
        return data

    def _neumann_rhs(self) -> np.ndarray:
        b = np.zeros(self.space.dim)
        g = self.prob.g
        for side in self.prob.neumann_sides:
            bq = self.boundary[side]
            for i, (x, _t, nrm) in enumerate(self.boundary_geometry(side)):
                fn_ids, tabs = bq.tabulate(self.space, i, 0)
                b[fn_ids] += tabs[0] @ (bq.weights[i] * nrm * g.value(x))
        return b

    def _solve(self, rhs: np.ndarray) -> np.ndarray:
        sol = np.zeros(self.space.dim)
        sol[self.free] = self.lu.solve(rhs[self.free])
        resid = np.linalg.norm(self.K[self.free][:, self.free] @ sol[self.free]
                               - rhs[self.free])
        scale = max(np.linalg.norm(rhs[self.free]), 1e-30)
        if resid > 1e-8 * scale:
            raise PdeError(f"linear solver residual {resid:.3e} too large")
        return sol

    # -- solves -----------------------------------------------------------

    def solve_state(self) -> DiscreteField:
        return DiscreteField(self.space, self._solve(self.b), self.geo)

    def solve_adjoint(self, qoi: QoiSpec, u_h: DiscreteField) -> DiscreteField:
        rhs = np.zeros(self.space.dim)
        if qoi.j is not None:
            reg = self.registry
            u0, u1, v0, v1 = qoi.j_region
            for i in range(len(reg.cells)):
                pts = reg.points[i]
                inside = ((pts[:, 0] >= u0) & (pts[:, 0] <= u1)
                          & (pts[:, 1] >= v0) & (pts[:, 1] <= v1))
                if not inside.any():
                    continue
                fn_ids, tabs = reg.tabulate(self.space, i, 0)
                u = u_h.coefficients[fn_ids] @ tabs[0]
                w = reg.weights[i] * self.det[i] * inside
                rhs[fn_ids] += tabs[0] @ (w * qoi.j.derivative(u))
        if qoi.q is not None:
            bq = self.boundary[qoi.q_side]
            s0, s1 = qoi.q_interval
            for i, (_x, _t, nrm) in enumerate(
                    self.boundary_geometry(qoi.q_side)):
                inside = (bq.params[i] >= s0) & (bq.params[i] <= s1)
                if not inside.any():
                    continue
                fn_ids, tabs = bq.tabulate(self.space, i, 0)
                u = u_h.coefficients[fn_ids] @ tabs[0]
                rhs[fn_ids] += tabs[0] @ (bq.weights[i] * nrm * inside
                                          * qoi.q.derivative(u))
        return DiscreteField(self.space, self._solve(-rhs), self.geo)

    def functional(self, u_h: DiscreteField, qoi: QoiSpec) -> float:
        total = 0.0
        if qoi.j is not None:
            reg = self.registry
            u0, u1, v0, v1 = qoi.j_region
            for i in range(len(reg.cells)):
                pts = reg.points[i]
                inside = ((pts[:, 0] >= u0) & (pts[:, 0] <= u1)
                          & (pts[:, 1] >= v0) & (pts[:, 1] <= v1))
                if not inside.any():
                    continue
                fn_ids, tabs = reg.tabulate(self.space, i, 0)
                u = u_h.coefficients[fn_ids] @ tabs[0]
                w = reg.weights[i] * self.det[i] * inside
                total += float(w @ qoi.j.value(u))
        if qoi.q is not None:
            bq = self.boundary[qoi.q_side]
            s0, s1 = qoi.q_interval
            for i, (_x, _t, nrm) in enumerate(
                    self.boundary_geometry(qoi.q_side)):
                inside = (bq.params[i] >= s0) & (bq.params[i] <= s1)
                if not inside.any():
                    continue
                fn_ids, tabs = bq.tabulate(self.space, i, 0)
                u = u_h.coefficients[fn_ids] @ tabs[0]
                total += float((bq.weights[i] * nrm * inside)
                               @ qoi.q.value(u))
        return total


def solve_state(geo: GeometryMap, space: ThbBasis,
                prob: PdeProblem) -> DiscreteField:
    return PoissonSolver(geo, space, prob).solve_state()


def evaluate_functional(geo: GeometryMap, u_h: DiscreteField,
                        qoi: QoiSpec) -> float:
    solver = PoissonSolver(geo, u_h.basis,
                           PdeProblem(ScalarField.zero(), ScalarField.zero(),
                                      frozenset()))
    return solver.functional(u_h, qoi)
