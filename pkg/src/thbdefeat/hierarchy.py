"""Hierarchical meshes and truncated hierarchical (THB) spline bases.

A hierarchical mesh is a nested sequence of dyadically refined tensor-product
spaces together with per-level refinement masks.  Cell identity is
``(level, cu, cv)``; a cell is active when it lies inside the level's
subdomain but none of its children do.  The THB basis attached to a mesh is
built by the classical recursive construction: active functions of each
level, truncated against all finer active/deactivated functions.

Meshes and bases are immutable after construction; refinement returns new
objects.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .splines import (KnotVector, SplineError, TensorSplineSpace,
                      two_scale_matrix_1d)

MAX_DEPTH = 12

SIDES = ("south", "east", "north", "west")


class HierarchyError(ValueError):
    """Raised for invalid refinement requests or depth overruns."""


def _expand2(mask: np.ndarray) -> np.ndarray:
    """Refinement mask of level l as a cell mask of level l+1."""
    return np.repeat(np.repeat(mask, 2, axis=0), 2, axis=1)


class _RectAll:
    """Constant-time 'all cells in rectangle set' queries via summed areas."""

    def __init__(self, mask: np.ndarray):
        self.csum = np.zeros((mask.shape[0] + 1, mask.shape[1] + 1), dtype=np.int64)
        np.cumsum(np.cumsum(mask, axis=0), axis=1, out=self.csum[1:, 1:])

    def all(self, u0, u1, v0, v1) -> bool:
        c = self.csum
        total = c[u1, v1] - c[u0, v1] - c[u1, v0] + c[u0, v0]
        return total == (u1 - u0) * (v1 - v0)

    def any(self, u0, u1, v0, v1) -> bool:
        c = self.csum
        return c[u1, v1] - c[u0, v1] - c[u1, v0] + c[u0, v0] > 0

    def all_grid(self, u0, u1, v0, v1) -> np.ndarray:
        """Vectorized `all` over the tensor grid of u-ranges x v-ranges."""
        c = self.csum
        total = (c[np.ix_(u1, v1)] - c[np.ix_(u0, v1)]
                 - c[np.ix_(u1, v0)] + c[np.ix_(u0, v0)])
        return total == np.outer(u1 - u0, v1 - v0)


class HierarchicalMesh:
    """Nested subdomain hierarchy over dyadic tensor-product spaces."""

    def __init__(self, spaces, refined):
        self.spaces: list[TensorSplineSpace] = list(spaces)
        self.refined: list[np.ndarray] = [np.asarray(r, dtype=bool) for r in refined]
        if len(self.spaces) != len(self.refined):
            raise HierarchyError("one refinement mask required per level")
        if len(self.spaces) > MAX_DEPTH:
            raise HierarchyError(f"hierarchy depth exceeds {MAX_DEPTH}")
        if np.any(self.refined[-1]):
            raise HierarchyError("deepest level must be unrefined")
        self.omega: list[np.ndarray] = [np.ones(self.spaces[0].num_cells, dtype=bool)]
        for ell in range(1, len(self.spaces)):
            self.omega.append(_expand2(self.refined[ell - 1]))
            if np.any(self.refined[ell] & ~self.omega[ell]):
                raise HierarchyError("refined cells must lie inside the subdomain")
        self.active: list[np.ndarray] = [om & ~re for om, re in
                                         zip(self.omega, self.refined)]
        area = 0.0
        for ell, sp in enumerate(self.spaces):
            bu, bv = sp.kv_u.breakpoints, sp.kv_v.breakpoints
            wu, wv = np.diff(bu), np.diff(bv)
            area += (np.outer(wu, wv) * self.active[ell]).sum()
        self._area = area
        self._spans = [(sp.kv_u.element_spans(), sp.kv_v.element_spans())
                       for sp in self.spaces]

    @staticmethod
    def from_tensor(space: TensorSplineSpace) -> "HierarchicalMesh":
        return HierarchicalMesh([space], [np.zeros(space.num_cells, dtype=bool)])

    @staticmethod
    def uniform(degree: int, num_elements_u: int,
                num_elements_v: int | None = None) -> "HierarchicalMesh":
        nv = num_elements_u if num_elements_v is None else num_elements_v
        return HierarchicalMesh.from_tensor(TensorSplineSpace(
            KnotVector.uniform(degree, num_elements_u),
            KnotVector.uniform(degree, nv)))

    @property
    def depth(self) -> int:
        return len(self.spaces)

    def active_cells(self) -> list[tuple[int, int, int]]:
        out = []
        for ell in range(self.depth):
            cu, cv = np.nonzero(self.active[ell])
            out.extend((ell, int(a), int(b)) for a, b in zip(cu, cv))
        return out

    def is_active(self, ell: int, cu: int, cv: int) -> bool:
        return bool(self.active[ell][cu, cv])

    def cell_bounds(self, cell) -> tuple[float, float, float, float]:
        ell, cu, cv = cell
        return self.spaces[ell].cell_bounds(cu, cv)

    def find_active_cell(self, point) -> tuple[int, int, int]:
        """Deepest-descent lookup of the active cell containing a point."""
        u, v = point
        cu = cv = 0
        for ell in range(self.depth):
            sp = self.spaces[ell]
            bu, bv = sp.kv_u.breakpoints, sp.kv_v.breakpoints
            lo_u, hi_u = (2 * cu, 2 * cu + 2) if ell else (0, len(bu) - 1)
            lo_v, hi_v = (2 * cv, 2 * cv + 2) if ell else (0, len(bv) - 1)
            cu = int(np.clip(np.searchsorted(bu, u, side="right") - 1, lo_u, hi_u - 1))
            cv = int(np.clip(np.searchsorted(bv, v, side="right") - 1, lo_v, hi_v - 1))
            if not self.refined[ell][cu, cv]:
                return (ell, cu, cv)
            cu, cv = cu, cv
        raise HierarchyError("descent fell through the hierarchy")  # pragma: no cover

    def refine_cells(self, cells) -> "HierarchicalMesh":
        """Replace each given active cell by its four dyadic children."""
        cells = list(cells)
        if not cells:
            return self
        max_level = max(c[0] for c in cells)
        spaces = list(self.spaces)
        refined = [r.copy() for r in self.refined]
        if max_level + 1 >= len(spaces):
            if len(spaces) >= MAX_DEPTH:
                raise HierarchyError(f"hierarchy depth exceeds {MAX_DEPTH}")
            spaces.append(spaces[-1].refine_dyadic())
            refined.append(np.zeros(spaces[-1].num_cells, dtype=bool))
        for ell, cu, cv in cells:
            if not self.is_active(ell, cu, cv):
                raise HierarchyError(f"cell {(ell, cu, cv)} is not active")
            refined[ell][cu, cv] = True
        return HierarchicalMesh(spaces, refined)

    def uniform_refine(self, times: int = 1) -> "HierarchicalMesh":
        mesh = self
        for _ in range(times):
            mesh = mesh.refine_cells(mesh.active_cells())
        return mesh

    def union(self, other: "HierarchicalMesh") -> "HierarchicalMesh":
        """Coarsest common refinement of two meshes sharing level-0 space."""
        if self.spaces[0].kv_u.knots != other.spaces[0].kv_u.knots or \
           self.spaces[0].kv_v.knots != other.spaces[0].kv_v.knots:
            raise HierarchyError("meshes must share the level-0 space")
        depth = max(self.depth, other.depth)
        spaces = list(self.spaces if self.depth >= other.depth else other.spaces)
        refined = []
        for ell in range(depth):
            a = self.refined[ell] if ell < self.depth else None
            b = other.refined[ell] if ell < other.depth else None
            if a is None:
                refined.append(b.copy())
            elif b is None:
                refined.append(a.copy())
            else:
                refined.append(a | b)
        return HierarchicalMesh(spaces, refined)

    def boundary_cells(self, side: str) -> list[tuple[int, int, int]]:
        """Active cells with an edge on the given side of the unit square."""
        out = []
        for ell in range(self.depth):
            ncu, ncv = self.spaces[ell].num_cells
            mask = self.active[ell]
            if side == "south":
                idx = np.nonzero(mask[:, 0])[0]
                out.extend((ell, int(i), 0) for i in idx)
            elif side == "north":
                idx = np.nonzero(mask[:, ncv - 1])[0]
                out.extend((ell, int(i), ncv - 1) for i in idx)
            elif side == "west":
                idx = np.nonzero(mask[0, :])[0]
                out.extend((ell, 0, int(j)) for j in idx)
            elif side == "east":
                idx = np.nonzero(mask[ncu - 1, :])[0]
                out.extend((ell, ncu - 1, int(j)) for j in idx)
            else:
                raise HierarchyError(f"unknown side {side!r}")
        return out

    def all_boundary_cells(self) -> list[tuple[int, int, int]]:
        seen = {}
        for side in SIDES:
            for cell in self.boundary_cells(side):
                seen[cell] = True
        return sorted(seen)

    def total_area(self) -> float:
        return self._area

    def dump(self) -> str:
        """Structured text dump: one line per level with its active cells."""
        lines = []
        for ell in range(self.depth):
            cells = [(int(a), int(b)) for a, b in zip(*np.nonzero(self.active[ell]))]
            lines.append(f"level {ell}: " + " ".join(f"({a},{b})" for a, b in cells))
        return "\n".join(lines) + "\n"


class ThbBasis:
    """Canonical truncated hierarchical basis of a hierarchical mesh."""

    def __init__(self, mesh: HierarchicalMesh):
        self.mesh = mesh
        self._two_scale_1d = []
        for ell in range(mesh.depth - 1):
            cu = two_scale_matrix_1d(mesh.spaces[ell].kv_u, mesh.spaces[ell + 1].kv_u)
            cv = two_scale_matrix_1d(mesh.spaces[ell].kv_v, mesh.spaces[ell + 1].kv_v)
            self._two_scale_1d.append((cu, cv))
        self._classify_functions()
        self.functions: list[tuple[int, int, int]] = []
        for ell in range(mesh.depth):
            iu, iv = np.nonzero(self.active_fn[ell])
            self.functions.extend((ell, int(a), int(b)) for a, b in zip(iu, iv))
        self.index = {f: i for i, f in enumerate(self.functions)}
        self.dim = len(self.functions)
        self._cell_cache: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}
        self._ranges = {}

    def _classify_functions(self):
        mesh = self.mesh
        self.active_fn = []      # in the THB basis
        self.supp_in_omega = []  # supp contained in the level's subdomain
        for ell in range(mesh.depth):
            sp = mesh.spaces[ell]
            nu, nv = sp.shape
            omega = _RectAll(mesh.omega[ell])
            refined = _RectAll(mesh.refined[ell])
            ru = np.array([sp.kv_u.func_element_range(i) for i in range(nu)])
            rv = np.array([sp.kv_v.func_element_range(j) for j in range(nv)])
            in_om = omega.all_grid(ru[:, 0], ru[:, 1], rv[:, 0], rv[:, 1])
            act = in_om & ~refined.all_grid(ru[:, 0], ru[:, 1],
                                            rv[:, 0], rv[:, 1])
            self.supp_in_omega.append(in_om)
            self.active_fn.append(act)
        self._func_ranges = []
        for ell in range(mesh.depth):
            sp = mesh.spaces[ell]
            self._func_ranges.append((
                [sp.kv_u.func_element_range(i) for i in range(sp.shape[0])],
                [sp.kv_v.func_element_range(j) for j in range(sp.shape[1])]))

    # -- cell extraction ---------------------------------------------------

    def _local_funcs(self, ell: int, cu: int, cv: int):
        su, sv = self.mesh._spans[ell]
        sp = self.mesh.spaces[ell]
        pu, pv = sp.kv_u.degree, sp.kv_v.degree
        iu = np.arange(su[cu] - pu, su[cu] + 1)
        iv = np.arange(sv[cv] - pv, sv[cv] + 1)
        return iu, iv

    def cell_extraction(self, cell) -> tuple[np.ndarray, np.ndarray]:
        """THB functions non-vanishing on an active cell.

        Returns ``(fn_ids, C)`` where row k of ``C`` expresses THB function
        ``fn_ids[k]`` over the local tensor functions of the cell's level
        (u-major ordering of the (pu+1)(pv+1) local functions).
        """
        cell = tuple(cell)
        if cell in self._cell_cache:
            return self._cell_cache[cell]
        ellq, cu, cv = cell
        if not self.mesh.is_active(ellq, cu, cv):
            raise HierarchyError(f"cell {cell} is not active")
        chain = [(ellq, cu, cv)]
        for _ in range(ellq):
            ell, a, b = chain[-1]
            chain.append((ell - 1, a // 2, b // 2))
        chain.reverse()
        fn_ids: list[int] = []
        C = None
        for ell, a, b in chain:
            iu, iv = self._local_funcs(ell, a, b)
            if C is not None:
                # push coefficients one level down, then truncate
                pu_prev, pv_prev = prev_iu, prev_iv
                cu1d, cv1d = self._two_scale_1d[ell - 1]
                Lu = cu1d[np.ix_(pu_prev, iu)]
                Lv = cv1d[np.ix_(pv_prev, iv)]
                L = np.einsum("ac,bd->abcd", Lu, Lv).reshape(
                    len(pu_prev) * len(pv_prev), len(iu) * len(iv))
                C = C @ L
                trunc = self.supp_in_omega[ell][np.ix_(iu, iv)].ravel()
                C[:, trunc] = 0.0
            act = self.active_fn[ell][np.ix_(iu, iv)].ravel()
            n_new = int(act.sum())
            if C is None and n_new == 0:
                prev_iu, prev_iv = iu, iv
                continue
            nloc = len(iu) * len(iv)
            if C is None:
                C = np.zeros((0, nloc))
            rows = np.zeros((n_new, nloc))
            rows[np.arange(n_new), np.nonzero(act)[0]] = 1.0
            C = np.vstack([C, rows])
            flat = [(ell, int(u), int(v)) for u in iu for v in iv]
            fn_ids.extend(self.index[flat[k]] for k in np.nonzero(act)[0])
            prev_iu, prev_iv = iu, iv
        if C is None:
            C = np.zeros((0, 0))
        keep = np.any(C != 0.0, axis=1)
        fn_arr = np.asarray(fn_ids, dtype=int)[keep]
        C = np.ascontiguousarray(C[keep])
        self._cell_cache[cell] = (fn_arr, C)
        return fn_arr, C

    # -- evaluation --------------------------------------------------------

    def eval_on_cell(self, cell, points, deriv_order: int = 0):
        """Evaluate all non-vanishing THB functions at points inside a cell.

        Returns ``(fn_ids, tables)``; ``tables[0]`` has shape (nfun, npts),
        ``tables[1]`` (nfun, 2, npts) with rows (d/du, d/dv) and ``tables[2]``
        (nfun, 3, npts) with rows (duu, duv, dvv).
        """
        ell = cell[0]
        fn_ids, C = self.cell_extraction(cell)
        sp = self.mesh.spaces[ell]
        raw = sp.eval_basis(points, deriv_order)
        npts = len(raw)
        nloc = C.shape[1]
        tables = [np.zeros((nloc, npts))]
        if deriv_order >= 1:
            tables.append(np.zeros((nloc, 2, npts)))
        if deriv_order >= 2:
            tables.append(np.zeros((nloc, 3, npts)))
        for k, (_, tab) in enumerate(raw):
            tables[0][:, k] = tab[0]
            if deriv_order >= 1:
                tables[1][:, :, k] = tab[1].T
            if deriv_order >= 2:
                tables[2][:, :, k] = tab[2].T
        out = [C @ tables[0]]
        if deriv_order >= 1:
            out.append(np.einsum("fl,lds->fds", C, tables[1]))
        if deriv_order >= 2:
            out.append(np.einsum("fl,lds->fds", C, tables[2]))
        return fn_ids, out

    def eval_points(self, points, deriv_order: int = 0):
        """Per-point evaluation (convenience path for tests and diagnostics)."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if np.any(points < 0.0) or np.any(points > 1.0):
            raise SplineError("point outside the parametric domain [0,1]^2")
        out = []
        for pt in points:
            cell = self.mesh.find_active_cell(pt)
            fn_ids, tabs = self.eval_on_cell(cell, pt[None, :], deriv_order)
            out.append((fn_ids, [t[..., 0] for t in tabs]))
        return out

    def eval_field(self, coefs: np.ndarray, points, deriv_order: int = 0):
        """Evaluate a spline with given coefficients; coefs is (dim,) or (dim, m)."""
        coefs = np.asarray(coefs, dtype=float)
        res = self.eval_points(points, deriv_order)
        vals = []
        for fn_ids, tabs in res:
            vals.append([np.tensordot(coefs[fn_ids].T, tabs[d],
                                      axes=([-1], [0])) for d in
                         range(deriv_order + 1)])
        return vals

    def function_support(self, fn: int) -> tuple[float, float, float, float]:
        ell, iu, iv = self.functions[fn]
        sp = self.mesh.spaces[ell]
        (u0, u1), (v0, v1) = self._func_ranges[ell][0][iu], self._func_ranges[ell][1][iv]
        bu, bv = sp.kv_u.breakpoints, sp.kv_v.breakpoints
        return bu[u0], bu[u1], bv[v0], bv[v1]


def build_thb_basis(mesh: HierarchicalMesh) -> ThbBasis:
    return ThbBasis(mesh)


@dataclass(frozen=True)
class BoundaryDofSet:
    """Basis functions with non-vanishing trace on the boundary of [0,1]^2."""

    basis: ThbBasis
    indices: tuple[int, ...]

    @property
    def size(self) -> int:
        return len(self.indices)

    def position(self, fn: int) -> int:
        return self.indices.index(fn)


def boundary_dofs(basis: ThbBasis, tol: float = 1e-12) -> BoundaryDofSet:
    """Functions whose trace on the boundary is not identically zero.

    Truncation can annihilate the boundary trace of a coarse function whose
    boundary cells are all refined, so candidates are screened by sampling
    Gauss-type points on every boundary edge.
    """
    from .splines import gauss_legendre

    mesh = basis.mesh
    max_trace = np.zeros(basis.dim)
    pmax = max(mesh.spaces[0].kv_u.degree, mesh.spaces[0].kv_v.degree)
    qx, _ = gauss_legendre(pmax + 2)
    for side in SIDES:
        for cell in mesh.boundary_cells(side):
            u0, u1, v0, v1 = mesh.cell_bounds(cell)
            if side in ("south", "north"):
                s = u0 + (u1 - u0) * qx
                fixed = v0 if side == "south" else v1
                pts = np.column_stack([s, np.full_like(s, fixed)])
            else:
                s = v0 + (v1 - v0) * qx
                fixed = u1 if side == "east" else u0
                pts = np.column_stack([np.full_like(s, fixed), s])
            fn_ids, tabs = basis.eval_on_cell(cell, pts, 0)
            if len(fn_ids):
                np.maximum.at(max_trace, fn_ids, np.abs(tabs[0]).max(axis=1))
    idx = [i for i in range(basis.dim) if max_trace[i] > tol]
    return BoundaryDofSet(basis, tuple(idx))


def minimal_refinement_set(mesh: HierarchicalMesh, basis_plus: ThbBasis,
                           marked) -> set[tuple[int, int, int]]:
    """Lowest-level active cells whose refinement captures each marked
    function of the boundary-refined companion basis.

    Cells qualify through open (area) overlap with the function support, so
    edge-adjacent cells are not dragged into the refinement.
    """
    result: set[tuple[int, int, int]] = set()
    active = mesh.active_cells()
    bounds = np.array([mesh.cell_bounds(c) for c in active])
    levels = np.array([c[0] for c in active])
    for fn in marked:
        u0, u1, v0, v1 = basis_plus.function_support(fn)
        hit = ((np.minimum(bounds[:, 1], u1) - np.maximum(bounds[:, 0], u0)
                > 1e-14)
               & (np.minimum(bounds[:, 3], v1) - np.maximum(bounds[:, 2], v0)
                  > 1e-14))
        if not hit.any():
            continue
        ell0 = levels[hit].min()
        result.update(active[i] for i in np.nonzero(hit & (levels == ell0))[0])
    return result
