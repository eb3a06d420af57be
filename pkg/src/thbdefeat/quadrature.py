"""Gauss quadrature registries over hierarchical meshes.

One registry per defeaturing iteration is shared by the parameterization
solve, the state/adjoint solves, the functional and the shape-gradient
integrals, so fold checks and sensitivities see identical abscissae.
"""
from __future__ import annotations

import numpy as np

from .hierarchy import SIDES, HierarchicalMesh, HierarchyError, ThbBasis
from .splines import _basis_ders, gauss_legendre

_KV_CACHE: dict = {}
_CELL_EVAL_CACHE: dict = {}


def _kv_data(kv):
    data = _KV_CACHE.get(kv)
    if data is None:
        data = (kv.breakpoints, kv.element_spans(), np.asarray(kv.knots))
        _KV_CACHE[kv] = data
    return data


def kv_cell_tables(kv, elem: int, xs, nderiv: int) -> np.ndarray:
    """Values/derivatives of the p+1 functions alive on one element.

    ``xs`` are absolute coordinates inside the element (endpoints allowed;
    they evaluate as one-sided limits from within the element).  Results are
    cached on the translated local knot stencil, so uniform interiors hit a
    single cache entry.  Shape: (len(xs), nderiv + 1, p + 1).
    """
    p = kv.degree
    bpts, spans, t = _kv_data(kv)
    span = int(spans[elem])
    x0, h = bpts[elem], bpts[elem + 1] - bpts[elem]
    local = tuple(np.round((t[span - p:span + p + 2] - x0) / h, 12))
    rel = tuple(np.round((np.asarray(xs, dtype=float) - x0) / h, 15))
    key = (p, local, rel, nderiv)
    ders = _CELL_EVAL_CACHE.get(key)
    if ders is None:
        ders = np.stack([_basis_ders(local, p, p, rx, nderiv) for rx in rel])
        ders.setflags(write=False)
        _CELL_EVAL_CACHE[key] = ders
    if nderiv == 0:
        return ders
    out = ders.copy()
    scale = h ** -np.arange(1.0, nderiv + 1)
    out[:, 1:] *= scale[None, :, None]
    return out


def containing_active_cell(mesh: HierarchicalMesh, cell) -> tuple[int, int, int]:
    """Active cell of ``mesh`` containing the (possibly finer) cell."""
    ell, cu, cv = cell
    while ell >= mesh.depth:
        ell, cu, cv = ell - 1, cu // 2, cv // 2
    while ell >= 0:
        if mesh.is_active(ell, cu, cv):
            return (ell, cu, cv)
        ell, cu, cv = ell - 1, cu // 2, cv // 2
    raise HierarchyError(f"cell {cell} not contained in the mesh")


def tensor_cell_tables(space, cell_uv, us, vs, deriv_order):
    """Local tensor-basis tables on one cell for a tensor grid of points.

    Returns tables in the same layout as ``ThbBasis.eval_on_cell``: entry d
    has shape (nloc, ncomp_d, npts) with npts = len(us) * len(vs) (u-major)
    and nloc = (pu+1)(pv+1) local functions in u-major order.
    """
    cu, cv = cell_uv
    du = kv_cell_tables(space.kv_u, cu, us, deriv_order)
    dv = kv_cell_tables(space.kv_v, cv, vs, deriv_order)
    pu, pv = space.kv_u.degree, space.kv_v.degree
    nu, nv = len(us), len(vs)
    nloc = (pu + 1) * (pv + 1)

    def outer(a, b):
        # (nu, pu+1) x (nv, pv+1) -> (nloc, nu*nv)
        t = a.T[:, None, :, None] * b.T[None, :, None, :]
        return t.reshape(nloc, nu * nv)

    tables = [outer(du[:, 0], dv[:, 0])]
    if deriv_order >= 1:
        d1 = np.empty((nloc, 2, nu * nv))
        d1[:, 0] = outer(du[:, 1], dv[:, 0])
        d1[:, 1] = outer(du[:, 0], dv[:, 1])
        tables.append(d1)
    if deriv_order >= 2:
        d2 = np.empty((nloc, 3, nu * nv))
        d2[:, 0] = outer(du[:, 2], dv[:, 0])
        d2[:, 1] = outer(du[:, 1], dv[:, 1])
        d2[:, 2] = outer(du[:, 0], dv[:, 2])
        tables.append(d2)
    return tables


def thb_tables_on_cell(basis: ThbBasis, host_cell, us, vs, deriv_order):
    """THB tables for a tensor point grid inside ``host_cell`` of a finer
    integration mesh.  Returns ``(fn_ids, tables)`` with the layout of
    ``ThbBasis.eval_on_cell``."""
    own = containing_active_cell(basis.mesh, host_cell)
    fn_ids, C = basis.cell_extraction(own)
    sp = basis.mesh.spaces[own[0]]
    loc = tensor_cell_tables(sp, (own[1], own[2]), us, vs, deriv_order)
    out = [C @ loc[0]]
    for d in range(1, deriv_order + 1):
        nloc, ncomp, npts = loc[d].shape
        out.append((C @ loc[d].reshape(nloc, ncomp * npts))
                   .reshape(C.shape[0], ncomp, npts))
    return fn_ids, out


class QuadratureRegistry:
    """Tensor Gauss points on every active cell of an integration mesh."""

    def __init__(self, mesh: HierarchicalMesh, order: int):
        self.mesh = mesh
        self.order = order
        self.cells = mesh.active_cells()
        qx, qw = gauss_legendre(order)
        self.qx, self.qw = qx, qw
        self.cell_us, self.cell_vs = [], []
        self.weights = []
        self.points = []
        for cell in self.cells:
            u0, u1, v0, v1 = mesh.cell_bounds(cell)
            us = u0 + (u1 - u0) * qx
            vs = v0 + (v1 - v0) * qx
            w = np.outer(qw * (u1 - u0), qw * (v1 - v0)).ravel()
            self.cell_us.append(us)
            self.cell_vs.append(vs)
            self.weights.append(w)
            pts = np.empty((order * order, 2))
            pts[:, 0] = np.repeat(us, order)
            pts[:, 1] = np.tile(vs, order)
            self.points.append(pts)
        self.npts_per_cell = order * order
        self._tab_cache: dict[tuple[int, int, int], tuple] = {}
        self._tab_pin: dict[int, ThbBasis] = {}  # keep id() keys alive

    def tabulate(self, basis: ThbBasis, i_cell: int, deriv_order: int):
        key = (id(basis), i_cell, deriv_order)
        hit = self._tab_cache.get(key)
        if hit is None:
            self._tab_pin[id(basis)] = basis
            hit = thb_tables_on_cell(basis, self.cells[i_cell],
                                     self.cell_us[i_cell], self.cell_vs[i_cell],
                                     deriv_order)
            self._tab_cache[key] = hit
        return hit


class BoundarySideQuadrature:
    """Gauss points along the boundary edges of one side of the unit square."""

    def __init__(self, mesh: HierarchicalMesh, side: str, order: int):
        if side not in SIDES:
            raise HierarchyError(f"unknown side {side!r}")
        self.mesh = mesh
        self.side = side
        self.order = order
        # running parametric coordinate: u on south/north, v on east/west
        self.axis = 0 if side in ("south", "north") else 1
        qx, qw = gauss_legendre(order)
        self.cells = mesh.boundary_cells(side)
        self.params = []     # running coordinate values per edge
        self.weights = []    # quadrature weights incl. edge length
        self.grid = []       # (us, vs) tensor grid arguments for tabulation
        for cell in self.cells:
            u0, u1, v0, v1 = mesh.cell_bounds(cell)
            if self.axis == 0:
                a, b = u0, u1
                fixed = v0 if side == "south" else v1
            else:
                a, b = v0, v1
                fixed = u0 if side == "west" else u1
            s = a + (b - a) * qx
            self.params.append(s)
            self.weights.append(qw * (b - a))
            if self.axis == 0:
                self.grid.append((s, np.array([fixed])))
            else:
                self.grid.append((np.array([fixed]), s))

    def tabulate(self, basis: ThbBasis, i_edge: int, deriv_order: int):
        us, vs = self.grid[i_edge]
        return thb_tables_on_cell(basis, self.cells[i_edge], us, vs, deriv_order)

    def tangential(self, tables_d1: np.ndarray) -> np.ndarray:
        """Derivative along the running coordinate from a gradient table."""
        return tables_d1[:, self.axis, :]


def boundary_quadratures(mesh: HierarchicalMesh, order: int):
    return {side: BoundarySideQuadrature(mesh, side, order) for side in SIDES}
