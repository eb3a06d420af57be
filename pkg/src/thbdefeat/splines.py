"""Univariate and tensor-product B-spline spaces.

Evaluation uses the Cox-de Boor recursion with binary-search span lookup.
Knots are stored as binary floats; dyadic refinement inserts exact midpoints
so that nesting of refined spaces is bitwise exact.
"""
from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from functools import cached_property, lru_cache

import numpy as np
from scipy import sparse


class SplineError(ValueError):
    """Raised for invalid knot vectors, non-nested spaces and domain errors."""


@dataclass(frozen=True)
class KnotVector:
    """Open knot vector on [0, 1] with a fixed polynomial degree."""

    degree: int
    knots: tuple[float, ...]

    def __post_init__(self):
        p, t = self.degree, self.knots
        if p < 0:
            raise SplineError("degree must be non-negative")
        if len(t) < 2 * (p + 1):
            raise SplineError("knot vector too short for open degree-%d space" % p)
        if any(t[i] > t[i + 1] for i in range(len(t) - 1)):
            raise SplineError("knots must be non-decreasing")
        if t[0] != t[p] or t[-1] != t[-p - 1]:
            raise SplineError("first and last knots must have multiplicity p+1")
        if t[p + 1] == t[0] or t[-p - 2] == t[-1]:
            raise SplineError("end knot multiplicity exceeds p+1")
        for u in set(t[p + 1:-p - 1]):
            if sum(1 for x in t if x == u) > p + 1:
                raise SplineError("interior knot multiplicity exceeds p+1")

    @property
    def num_funcs(self) -> int:
        return len(self.knots) - self.degree - 1

    @cached_property
    def breakpoints(self) -> np.ndarray:
        """Distinct knot values, i.e. the element boundaries."""
        return np.unique(np.asarray(self.knots))

    @property
    def num_elements(self) -> int:
        return len(self.breakpoints) - 1

    @staticmethod
    def uniform(degree: int, num_elements: int) -> "KnotVector":
        """Open uniform knot vector with ``num_elements`` equal spans on [0, 1]."""
        if num_elements < 1:
            raise SplineError("need at least one element")
        interior = [i / num_elements for i in range(1, num_elements)]
        t = [0.0] * (degree + 1) + interior + [1.0] * (degree + 1)
        return KnotVector(degree, tuple(t))

    def refine_dyadic(self) -> "KnotVector":
        """Insert the midpoint of every non-empty knot span (multiplicity 1)."""
        b = self.breakpoints
        mids = (b[:-1] + b[1:]) / 2.0
        t = sorted(list(self.knots) + list(mids))
        return KnotVector(self.degree, tuple(t))

    # -- evaluation -------------------------------------------------------

    def find_span(self, x: float) -> int:
        """Knot span index i with knots[i] <= x < knots[i+1] (clamped at 1)."""
        p, t = self.degree, self.knots
        n = self.num_funcs
        if x < t[0] or x > t[-1]:
            raise SplineError(f"point {x} outside [{t[0]}, {t[-1]}]")
        if x >= t[n]:
            return n - 1
        lo, hi = p, n
        while lo + 1 < hi:
            mid = (lo + hi) // 2
            if x < t[mid]:
                hi = mid
            else:
                lo = mid
        return lo

    def eval_all(self, xs, nderiv: int = 0) -> tuple[np.ndarray, np.ndarray]:
        """Evaluate the p+1 non-vanishing functions at each point.

        Returns ``(first, ders)`` where ``first[k]`` is the index of the first
        non-vanishing function at ``xs[k]`` and ``ders`` has shape
        ``(len(xs), nderiv + 1, p + 1)`` holding derivative orders 0..nderiv of
        functions ``first[k] .. first[k] + p``.
        """
        xs = np.atleast_1d(np.asarray(xs, dtype=float))
        p = self.degree
        out = np.zeros((len(xs), nderiv + 1, p + 1))
        first = np.empty(len(xs), dtype=int)
        for k, x in enumerate(xs):
            span = self.find_span(x)
            first[k] = span - p
            out[k] = _basis_ders(self.knots, p, span, x, nderiv)
        return first, out

    def greville(self) -> np.ndarray:
        """Knot averages, one abscissa per basis function."""
        t = np.asarray(self.knots)
        p = self.degree
        if p == 0:
            return (t[:-1] + t[1:]) / 2.0
        return np.array([t[i + 1:i + p + 1].mean() for i in range(self.num_funcs)])

    def element_spans(self) -> np.ndarray:
        """Knot span index of each element."""
        b = self.breakpoints
        return np.array([self.find_span((b[i] + b[i + 1]) / 2.0)
                         for i in range(len(b) - 1)])

    def func_element_range(self, i: int) -> tuple[int, int]:
        """Half-open element index range on which function i is non-vanishing."""
        t = self.knots
        b = list(self.breakpoints)
        lo = b.index(max(x for x in b if x <= t[i]))
        hi = b.index(min(x for x in b if x >= t[i + self.degree + 1]))
        return lo, hi


def _basis_ders(t, p, span, x, nderiv):
    """Cox-de Boor values and derivatives at one point (NURBS book A2.3)."""
    ndu = np.zeros((p + 1, p + 1))
    left = np.zeros(p + 1)
    right = np.zeros(p + 1)
    ndu[0, 0] = 1.0
    for j in range(1, p + 1):
        left[j] = x - t[span + 1 - j]
        right[j] = t[span + j] - x
        saved = 0.0
        for r in range(j):
            ndu[j, r] = right[r + 1] + left[j - r]
            temp = ndu[r, j - 1] / ndu[j, r]
            ndu[r, j] = saved + right[r + 1] * temp
            saved = left[j - r] * temp
        ndu[j, j] = saved
    ders = np.zeros((nderiv + 1, p + 1))
    ders[0] = ndu[:, p]
    n_eff = min(nderiv, p)
    a = np.zeros((2, p + 1))
    for r in range(p + 1):
        s1, s2 = 0, 1
        a[0, 0] = 1.0
        for k in range(1, n_eff + 1):
            d = 0.0
            rk, pk = r - k, p - k
            if r >= k:
                a[s2, 0] = a[s1, 0] / ndu[pk + 1, rk]
                d = a[s2, 0] * ndu[rk, pk]
            j1 = 1 if rk >= -1 else -rk
            j2 = k - 1 if r - 1 <= pk else p - r
            for j in range(j1, j2 + 1):
                a[s2, j] = (a[s1, j] - a[s1, j - 1]) / ndu[pk + 1, rk + j]
                d += a[s2, j] * ndu[rk + j, pk]
            if r <= pk:
                a[s2, k] = -a[s1, k - 1] / ndu[pk + 1, r]
                d += a[s2, k] * ndu[r, pk]
            ders[k, r] = d
            s1, s2 = s2, s1
    fac = p
    for k in range(1, n_eff + 1):
        ders[k] *= fac
        fac *= p - k
    return ders


def knot_insertion_matrix(kv: KnotVector, new_knots) -> np.ndarray:
    """Subdivision matrix A with row i giving function i of ``kv`` in the
    basis obtained by inserting ``new_knots`` (Boehm's algorithm, chained)."""
    p = kv.degree
    t = list(kv.knots)
    n = kv.num_funcs
    A = sparse.identity(n, format="csr")
    for u in sorted(new_knots):
        # span in the current (growing) knot vector
        k = min(bisect.bisect_right(t, u) - 1, len(t) - 2)
        m = A.shape[1]
        # insertion step: identity away from rows k-p+1..k, convex blend there
        rows, cols, vals = [], [], []
        lo = np.arange(0, max(k - p + 1, 0))
        rows.append(lo), cols.append(lo), vals.append(np.ones(lo.size))
        hi = np.arange(k + 1, m + 1)
        rows.append(hi), cols.append(hi - 1), vals.append(np.ones(hi.size))
        mid = np.arange(max(k - p + 1, 0), k + 1)
        denom = np.array([t[i + p] - t[i] for i in mid])
        alpha = np.where(denom > 0, (u - np.array([t[i] for i in mid]))
                         / np.where(denom > 0, denom, 1.0), 0.0)
        rows.append(mid), cols.append(mid), vals.append(alpha)
        pos = mid > 0
        rows.append(mid[pos]), cols.append(mid[pos] - 1)
        vals.append(1.0 - alpha[pos])
        B = sparse.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(m + 1, m))
        A = A @ B.T
        t.insert(k + 1, u)
    return A.toarray()


def two_scale_matrix_1d(coarse: KnotVector, fine: KnotVector) -> np.ndarray:
    """Row i expresses coarse function i in the dyadically refined basis."""
    if fine.degree != coarse.degree:
        raise SplineError("degree mismatch between coarse and fine space")
    expected = coarse.refine_dyadic()
    if fine.knots != expected.knots:
        if fine.knots == coarse.knots:
            return np.eye(coarse.num_funcs)
        raise SplineError("fine space is not the dyadic refinement of coarse")
    b = coarse.breakpoints
    mids = (b[:-1] + b[1:]) / 2.0
    return knot_insertion_matrix(coarse, mids)


@dataclass(frozen=True)
class TensorSplineSpace:
    """Bivariate tensor-product B-spline space at one hierarchy level."""

    kv_u: KnotVector
    kv_v: KnotVector
    level: int = 0

    @property
    def shape(self) -> tuple[int, int]:
        return (self.kv_u.num_funcs, self.kv_v.num_funcs)

    @property
    def dim(self) -> int:
        nu, nv = self.shape
        return nu * nv

    @property
    def num_cells(self) -> tuple[int, int]:
        return (self.kv_u.num_elements, self.kv_v.num_elements)

    def refine_dyadic(self) -> "TensorSplineSpace":
        return TensorSplineSpace(self.kv_u.refine_dyadic(),
                                 self.kv_v.refine_dyadic(),
                                 self.level + 1)

    def flat_index(self, iu: int, iv: int) -> int:
        return iu * self.kv_v.num_funcs + iv

    def unflatten(self, i: int) -> tuple[int, int]:
        nv = self.kv_v.num_funcs
        return divmod(i, nv)[0], i % nv

    def cell_bounds(self, cu: int, cv: int) -> tuple[float, float, float, float]:
        bu, bv = self.kv_u.breakpoints, self.kv_v.breakpoints
        return bu[cu], bu[cu + 1], bv[cv], bv[cv + 1]

    def func_cell_ranges(self, iu: int, iv: int):
        return self.kv_u.func_element_range(iu), self.kv_v.func_element_range(iv)

    def greville_points(self) -> np.ndarray:
        """(dim, 2) array of Greville abscissae, u-major ordering."""
        gu, gv = self.kv_u.greville(), self.kv_v.greville()
        pts = np.empty((len(gu) * len(gv), 2))
        pts[:, 0] = np.repeat(gu, len(gv))
        pts[:, 1] = np.tile(gv, len(gu))
        return pts

    def eval_basis(self, points, deriv_order: int = 0):
        """Evaluate non-vanishing tensor functions at parametric points.

        Returns a list with one entry per point: ``(flat_indices, table)``
        where ``table[d]`` for d in 0..deriv_order collects the partial
        derivatives in graded-lexicographic order, e.g. d=1 gives rows
        (d/du, d/dv) and d=2 gives (d2/duu, d2/duv, d2/dvv).
        """
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if np.any(points < 0.0) or np.any(points > 1.0):
            raise SplineError("point outside the parametric domain [0,1]^2")
        fu, du = self.kv_u.eval_all(points[:, 0], deriv_order)
        fv, dv = self.kv_v.eval_all(points[:, 1], deriv_order)
        pu, pv = self.kv_u.degree, self.kv_v.degree
        nv = self.kv_v.num_funcs
        out = []
        for k in range(len(points)):
            iu = np.arange(fu[k], fu[k] + pu + 1)
            iv = np.arange(fv[k], fv[k] + pv + 1)
            flat = (iu[:, None] * nv + iv[None, :]).ravel()
            table = [np.outer(du[k, 0], dv[k, 0]).ravel()]
            if deriv_order >= 1:
                table.append(np.stack([
                    np.outer(du[k, 1], dv[k, 0]).ravel(),
                    np.outer(du[k, 0], dv[k, 1]).ravel()]))
            if deriv_order >= 2:
                table.append(np.stack([
                    np.outer(du[k, 2], dv[k, 0]).ravel(),
                    np.outer(du[k, 1], dv[k, 1]).ravel(),
                    np.outer(du[k, 0], dv[k, 2]).ravel()]))
            out.append((flat, table))
        return out


def two_scale_matrix(coarse: TensorSplineSpace,
                     fine: TensorSplineSpace) -> sparse.csr_matrix:
    """Sparse matrix C with C[i, j] the coefficient of fine function j in the
    two-scale expansion of coarse function i (u-major flat indices)."""
    Cu = two_scale_matrix_1d(coarse.kv_u, fine.kv_u)
    Cv = two_scale_matrix_1d(coarse.kv_v, fine.kv_v)
    return sparse.kron(sparse.csr_matrix(Cu), sparse.csr_matrix(Cv)).tocsr()


def gauss_legendre(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes and weights on [0, 1]."""
    x, w = np.polynomial.legendre.leggauss(n)
    return (x + 1.0) / 2.0, w / 2.0
