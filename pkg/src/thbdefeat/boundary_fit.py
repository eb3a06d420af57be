"""Boundary fitting: project an exact boundary description onto the trace
of a THB basis.

The fit minimizes the weighted H1 boundary functional

    kappa0 * int |F_n - F|^2 ds_hat + kappa1 * int |d/dt (F_n - F)|^2 ds_hat

over the boundary degrees of freedom, subject to pointwise value (and
optionally tangent) constraints enforced with Lagrange multipliers.  All
integrals run over the parametric boundary with per-element Gauss rules;
the exact boundary is evaluated directly at the abscissae.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import shapely
from shapely.geometry import LineString

from .hierarchy import (SIDES, BoundaryDofSet, HierarchicalMesh, ThbBasis,
                        boundary_dofs, minimal_refinement_set)
from .quadrature import BoundarySideQuadrature

class FitError(ValueError):
    """Raised for inconsistent boundary data or singular fit systems."""


def side_param_point(side: str, s) -> np.ndarray:
    """Map a running coordinate on a side to a point of [0,1]^2."""
    s = np.atleast_1d(np.asarray(s, dtype=float))
    zero, one = np.zeros_like(s), np.ones_like(s)
    if side == "south":
        return np.column_stack([s, zero])
    if side == "north":
        return np.column_stack([s, one])
    if side == "west":
        return np.column_stack([zero, s])
    if side == "east":
        return np.column_stack([one, s])
    raise FitError(f"unknown side {side!r}")


@dataclass(frozen=True)
class ExactBoundary:
    """Exact boundary correspondence, one parametric curve per side.

    Each entry of ``sides`` maps ``(s, deriv)`` with s an array of running
    coordinates in [0,1] to an (n, 2) array of physical points (deriv=0) or
    tangent vectors d/ds (deriv=1).  ``neumann_sides`` lists the sides that
    carry the flux boundary condition; all others are Dirichlet.
    """

    sides: dict
    neumann_sides: frozenset = frozenset()

    def __post_init__(self):
        if set(self.sides) != set(SIDES):
            raise FitError("exactly the four sides south/east/north/west required")
        unknown = set(self.neumann_sides) - set(SIDES)
        if unknown:
            raise FitError(f"unknown Neumann side tags {sorted(unknown)}")
        for (side_a, s_a), (side_b, s_b) in [
                (("south", 0.0), ("west", 0.0)), (("south", 1.0), ("east", 0.0)),
                (("north", 0.0), ("west", 1.0)), (("north", 1.0), ("east", 1.0))]:
            a = self.eval(side_a, [s_a])[0]
            b = self.eval(side_b, [s_b])[0]
            if not np.allclose(a, b, atol=1e-10):
                raise FitError(f"corner mismatch between {side_a} and {side_b}: "
                               f"{a} vs {b}")

    def eval(self, side: str, s, deriv: int = 0) -> np.ndarray:
        return np.atleast_2d(np.asarray(self.sides[side](np.asarray(s, dtype=float),
                                                         deriv), dtype=float))

    def corner(self, u: float, v: float) -> np.ndarray:
        side = "south" if v == 0.0 else "north"
        return self.eval(side, [u])[0]


@dataclass(frozen=True)
class PointConstraint:
    """Equality constraint at one parametric boundary point."""

    side: str
    s: float
    value: bool = True
    tangent: bool = False


def corner_constraints() -> tuple[PointConstraint, ...]:
    return (PointConstraint("south", 0.0), PointConstraint("south", 1.0),
            PointConstraint("north", 0.0), PointConstraint("north", 1.0))


@dataclass(frozen=True)
class FitConfig:
    """Weights and constraints of the boundary fit."""

    kappa0: float = 1.0
    kappa1: float = 1.0
    constraints: tuple[PointConstraint, ...] = field(
        default_factory=corner_constraints)

    def __post_init__(self):
        if not self.kappa0 > 0.0:
            raise FitError("kappa0 must be positive")
        if self.kappa1 < 0.0:
            raise FitError("kappa1 must be non-negative")


@dataclass(frozen=True)
class BoundaryCurve:
    """Fitted boundary spline F_n(xi) = sum_i c_i beta_i(xi) on the boundary
    of the parametric square."""

    dofs: BoundaryDofSet
    control_points: np.ndarray          # (n_boundary_dofs, 2)
    objective: float = float("nan")

    def __post_init__(self):
        if self.control_points.shape != (self.dofs.size, 2):
            raise FitError("one 2-vector control point per boundary function")

    @property
    def basis(self) -> ThbBasis:
        return self.dofs.basis

    def eval(self, side: str, s, deriv: int = 0) -> np.ndarray:
        """Points (deriv=0) or tangents d/ds (deriv=1) along one side."""
        pts = side_param_point(side, s)
        axis = 0 if side in ("south", "north") else 1
        pos = {fn: k for k, fn in enumerate(self.dofs.indices)}
        out = np.zeros((len(pts), 2))
        for k, (fn_ids, tabs) in enumerate(self.basis.eval_points(pts, deriv)):
            tab = tabs[0] if deriv == 0 else tabs[1][:, axis]
            for fn, t in zip(fn_ids, tab):
                if fn in pos:
                    out[k] += self.control_points[pos[fn]] * t
        return out

    def as_exact(self, neumann_sides=frozenset()) -> ExactBoundary:
        """Wrap the fitted curve as exact data for a fit on another basis."""
        def make(side):
            return lambda s, deriv=0: self.eval(side, s, deriv)
        return ExactBoundary({side: make(side) for side in SIDES},
                             frozenset(neumann_sides))


def _boundary_order(basis: ThbBasis) -> int:
    sp = basis.mesh.spaces[0]
    return max(sp.kv_u.degree, sp.kv_v.degree) + 1


def _side_quads(basis: ThbBasis) -> dict:
    order = _boundary_order(basis)
    return {side: BoundarySideQuadrature(basis.mesh, side, order)
            for side in SIDES}


def _constraint_rows(dofs: BoundaryDofSet, exact: ExactBoundary,
                     constraints) -> tuple[np.ndarray, np.ndarray]:
    basis = dofs.basis
    pos = {fn: k for k, fn in enumerate(dofs.indices)}
    rows, rhs, seen = [], [], set()
    for con in constraints:
        if con.side not in SIDES:
            raise FitError(f"unknown side {con.side!r} in constraint")
        pt = side_param_point(con.side, [con.s])[0]
        axis = 0 if con.side in ("south", "north") else 1
        for kind in ("value",) * con.value + ("tangent",) * con.tangent:
            key = (kind, round(pt[0], 12), round(pt[1], 12),
                   axis if kind == "tangent" else -1)
            if key in seen:
                continue
            seen.add(key)
            deriv = 0 if kind == "value" else 1
            (fn_ids, tabs), = basis.eval_points(pt[None, :], deriv)
            row = np.zeros(dofs.size)
            tab = tabs[0] if deriv == 0 else tabs[1][:, axis]
            for fn, t in zip(fn_ids, tab):
                if fn in pos:
                    row[pos[fn]] = t
            rows.append(row)
            rhs.append(exact.eval(con.side, [con.s], deriv)[0])
    if not rows:
        return np.zeros((0, dofs.size)), np.zeros((0, 2))
    return np.asarray(rows), np.asarray(rhs)


def fit_boundary(exact: ExactBoundary, dofs: BoundaryDofSet,
                 cfg: FitConfig) -> BoundaryCurve:
    """Constrained least-squares fit of the exact boundary on the trace
    space spanned by the boundary degrees of freedom."""
    if dofs.size == 0:
        raise FitError("empty boundary DOF set")
    basis = dofs.basis
    pos = {fn: k for k, fn in enumerate(dofs.indices)}
    n = dofs.size
    K = np.zeros((n, n))
    b = np.zeros((n, 2))
    quads = _side_quads(basis)
    for side, bq in quads.items():
        for i in range(len(bq.cells)):
            fn_ids, tabs = bq.tabulate(basis, i, 1)
            keep = np.array([fn in pos for fn in fn_ids], dtype=bool)
            if not keep.any():
                continue
            idx = np.array([pos[fn] for fn in np.asarray(fn_ids)[keep]])
            N = tabs[0][keep]
            Nt = bq.tangential(tabs[1])[keep]
            w = bq.weights[i]
            F = exact.eval(side, bq.params[i], 0)
            Ft = exact.eval(side, bq.params[i], 1)
            K[np.ix_(idx, idx)] += (cfg.kappa0 * (N * w) @ N.T
                                    + cfg.kappa1 * (Nt * w) @ Nt.T)
            b[idx] += cfg.kappa0 * (N * w) @ F + cfg.kappa1 * (Nt * w) @ Ft
    B, g = _constraint_rows(dofs, exact, cfg.constraints)
    m = B.shape[0]
    sys = np.zeros((n + m, n + m))
    sys[:n, :n] = K
    sys[:n, n:] = B.T
    sys[n:, :n] = B
    rhs = np.vstack([b, g])
    try:
        sol = np.linalg.solve(sys, rhs)
    except np.linalg.LinAlgError as exc:
        raise FitError(f"singular constrained fit system: {exc}") from exc
    resid = np.linalg.norm(sys @ sol - rhs)
    scale = max(np.linalg.norm(rhs), 1.0)
    if not np.isfinite(resid) or resid > 1e-10 * scale:
        raise FitError(f"constrained fit residual {resid:.3e} exceeds tolerance")
    control = sol[:n]
    curve = BoundaryCurve(dofs, control)
    return replace(curve, objective=fit_objective(curve, exact, cfg, quads))


def fit_objective(curve: BoundaryCurve, exact: ExactBoundary, cfg: FitConfig,
                  quads: dict | None = None) -> float:
    """Value of the weighted H1 misfit functional for a fitted curve."""
    basis = curve.basis
    pos = {fn: k for k, fn in enumerate(curve.dofs.indices)}
    if quads is None:
        quads = _side_quads(basis)
    total = 0.0
    for side, bq in quads.items():
        for i in range(len(bq.cells)):
            fn_ids, tabs = bq.tabulate(basis, i, 1)
            keep = np.array([fn in pos for fn in fn_ids], dtype=bool)
            c = np.zeros((len(fn_ids), 2))
            for k, fn in enumerate(fn_ids):
                if keep[k]:
                    c[k] = curve.control_points[pos[fn]]
            Fn = c.T @ tabs[0]
            Fnt = c.T @ bq.tangential(tabs[1])
            d0 = Fn.T - exact.eval(side, bq.params[i], 0)
            d1 = Fnt.T - exact.eval(side, bq.params[i], 1)
            w = bq.weights[i]
            total += cfg.kappa0 * (w * (d0 ** 2).sum(axis=1)).sum()
            total += cfg.kappa1 * (w * (d1 ** 2).sum(axis=1)).sum()
    return float(total)


def _sample_loop(curve: BoundaryCurve, samples_per_span: int):
    """Closed polyline samples around the boundary, with (side, s) tags."""
    mesh = curve.basis.mesh
    tags, pts = [], []
    for side, reverse in (("south", False), ("east", False),
                          ("north", True), ("west", True)):
        cells = mesh.boundary_cells(side)
        spans = []
        for cell in cells:
            u0, u1, v0, v1 = mesh.cell_bounds(cell)
            spans.append((u0, u1) if side in ("south", "north") else (v0, v1))
        spans.sort(reverse=reverse)
        for a, bnd in spans:
            s = np.linspace(a, bnd, samples_per_span + 1)[:-1]
            if reverse:
                s = np.linspace(bnd, a, samples_per_span + 1)[:-1]
            tags.extend((side, float(x)) for x in s)
            pts.append(curve.eval(side, s))
    return tags, np.vstack(pts)


def detect_self_intersections(curve: BoundaryCurve,
                              samples_per_span: int = 8) -> list:
    """Crossings of the sampled closed boundary polyline.

    Returns a list of ``((side_a, s_a), (side_b, s_b), (x, y))`` triples, one
    per detected crossing; an empty list means the sampled curve is simple.
    Shared endpoints of adjacent segments are not crossings.
    """
    tags, pts = _sample_loop(curve, samples_per_span)
    npts = len(pts)
    ring = LineString(np.vstack([pts, pts[:1]]))
    if ring.is_simple:
        return []
    segs = [LineString([pts[i], pts[(i + 1) % npts]]) for i in range(npts)]
    tree = shapely.STRtree(segs)
    found = []
    for i, seg in enumerate(segs):
        for j in tree.query(seg):
            j = int(j)
            if j <= i or j == i + 1 or (i == 0 and j == npts - 1):
                continue
            inter = seg.intersection(segs[j])
            if inter.is_empty:
                continue
            for geom in getattr(inter, "geoms", [inter]):
                x, y = (geom.coords[0] if geom.geom_type != "Point"
                        else (geom.x, geom.y))
                found.append((tags[i], tags[j], (float(x), float(y))))
    return found


def repair_self_intersections(exact: ExactBoundary, mesh: HierarchicalMesh,
                              cfg: FitConfig, samples_per_span: int = 8,
                              max_rounds: int = 5):
    """Fit, then refine the supports of boundary functions non-vanishing at
    detected crossings and refit, up to ``max_rounds`` times.

    Returns ``(curve, mesh)`` with a crossing-free curve, or raises
    ``FitError`` with the surviving crossings.
    """
    for _ in range(max_rounds + 1):
        basis = ThbBasis(mesh)
        dofs = boundary_dofs(basis)
        curve = fit_boundary(exact, dofs, cfg)
        crossings = detect_self_intersections(curve, samples_per_span)
        if not crossings:
            return curve, mesh
        marked = set()
        for (side_a, s_a), (side_b, s_b), _loc in crossings:
            for side, s in ((side_a, s_a), (side_b, s_b)):
                pt = side_param_point(side, [s])[0]
                (fn_ids, tabs), = basis.eval_points(pt[None, :], 0)
                marked.update(int(fn) for fn, v in zip(fn_ids, tabs[0])
                              if abs(v) > 1e-12)
        cells = minimal_refinement_set(mesh, basis, sorted(marked))
        if not cells:
            break
        mesh = mesh.refine_cells(sorted(cells))
    raise FitError(f"self-intersections persist after {max_rounds} repair "
                   f"rounds: {crossings[:3]}")
