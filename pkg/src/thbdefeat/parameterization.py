"""Surface-to-volume parameterization by elliptic grid generation.

Given a fitted boundary curve, the interior map x: [0,1]^2 -> Omega is the
inverse of a componentwise-harmonic map.  It satisfies the quasi-linear
nondivergence-form system

    A(x) : H(x_i) = 0,   A(x) = [[g22, -g12], [-g12, g11]],

with the metric g_ij = dx/dxi_i . dx/dxi_j, discretized with a
Petrov-Galerkin scheme whose test functions are tau_i(x, sigma) =
gamma(x) * Lap(sigma_i), gamma = tr(A)/||A||_F^2.  A damped Newton
iteration with an analytic Gateaux derivative drives the residual below a
scale-robust threshold; folds (negative Jacobian determinant at registered
quadrature points) trigger local refinement, exact prolongation and a
Newton restart.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu, spsolve

from .boundary_fit import BoundaryCurve
from .hierarchy import HierarchicalMesh, ThbBasis, boundary_dofs
from .quadrature import QuadratureRegistry


log = logging.getLogger(__name__)


class EggError(ValueError):
    """Base class for parameterization failures."""


class ConvergenceError(EggError):
    """Newton iteration failed to reach the residual tolerance."""

    def __init__(self, msg, history):
        super().__init__(msg)
        self.history = history


class FoldError(EggError):
    """Map could not be certified fold-free within the refinement budget."""

    def __init__(self, msg, fold_cells):
        super().__init__(msg)
        self.fold_cells = fold_cells


@dataclass(frozen=True)
class EggConfig:
    """Tolerances and budgets of the elliptic grid generation solve."""

    mu: float = 1e-6
    max_newton: int = 50
    max_halvings: int = 8
    max_apos_rounds: int = 10

    def __post_init__(self):
        if not self.mu > 0.0:
            raise EggError("residual tolerance mu must be positive")


@dataclass
class GeometryMap:
    """Spline map x(xi) = sum_i c_i beta_i(xi) from the parametric square."""

    basis: ThbBasis
    control: np.ndarray        # (dim, 2)

    def __post_init__(self):
        self.control = np.asarray(self.control, dtype=float)
        if self.control.shape != (self.basis.dim, 2):
            raise EggError("one 2-vector control point per basis function")

    def eval(self, points, deriv_order: int = 0):
        """Map values (n, 2) and optionally derivative tensors at points."""
        res = self.basis.eval_field(self.control, points, deriv_order)
        vals = np.array([r[0] for r in res])
        if deriv_order == 0:
            return vals
        return vals, [np.array([r[d] for r in res])
                      for d in range(1, deriv_order + 1)]

    def boundary_trace(self, curve_dofs) -> np.ndarray:
        idx = [self.basis.index[self.basis.functions[f]] for f in
               curve_dofs.indices]
        return self.control[idx]


def _interior_index(basis: ThbBasis) -> np.ndarray:
    """Position of each basis function among the trace-free (interior)
    functions; -1 for boundary functions."""
    bdofs = set(boundary_dofs(basis).indices)
    pos = np.full(basis.dim, -1, dtype=int)
    k = 0
    for i in range(basis.dim):
        if i not in bdofs:
            pos[i] = k
            k += 1
    return pos


def _registry(basis: ThbBasis) -> QuadratureRegistry:
    sp = basis.mesh.spaces[0]
    order = max(sp.kv_u.degree, sp.kv_v.degree) + 1
    return QuadratureRegistry(basis.mesh, order)


def parametric_stiffness(basis: ThbBasis,
                         reg: QuadratureRegistry) -> sparse.csr_matrix:
    """Stiffness matrix of the parametric Laplacian over the full basis."""
    rows, cols, vals = [], [], []
    for i in range(len(reg.cells)):
        fn_ids, tabs = reg.tabulate(basis, i, 1)
        G = tabs[1]
        w = reg.weights[i]
        loc = np.einsum("fds,gds,s->fg", G, G, w, optimize=True)
        rows.append(np.repeat(fn_ids, len(fn_ids)))
        cols.append(np.tile(fn_ids, len(fn_ids)))
        vals.append(loc.ravel())
    n = basis.dim
    return sparse.coo_matrix((np.concatenate(vals),
                              (np.concatenate(rows), np.concatenate(cols))),
                             shape=(n, n)).tocsr()


def initial_map(curve: BoundaryCurve, basis: ThbBasis | None = None) -> GeometryMap:
    """Componentwise harmonic extension of the boundary curve into the
    parametric square (Laplace solve with Dirichlet data from the curve)."""
    if basis is None:
        basis = curve.basis
    if basis is not curve.basis:
        raise EggError("initial map must live on the basis the curve was "
                       "fitted on")
    reg = _registry(basis)
    K = parametric_stiffness(basis, reg)
    pos = _interior_index(basis)
    interior = np.nonzero(pos >= 0)[0]
    bnd = np.asarray(curve.dofs.indices, dtype=int)
    control = np.zeros((basis.dim, 2))
    control[bnd] = curve.control_points
    K_ii = K[interior][:, interior].tocsc()
    K_ib = K[interior][:, bnd]
    rhs = -K_ib @ control[bnd]
    control[interior] = spsolve(K_ii, rhs,
                                permc_spec="MMD_AT_PLUS_A"
                                ).reshape(len(interior), 2)
    return GeometryMap(basis, control)


def _cell_metric(control, fn_ids, tabs):
    grads, hess = tabs[1], tabs[2]
    c = control[fn_ids]
    xd = np.einsum("fi,fds->ids", c, grads)
    hh = np.einsum("fi,fks->iks", c, hess)
    g11 = xd[0, 0] * xd[0, 0] + xd[1, 0] * xd[1, 0]
    g12 = xd[0, 0] * xd[0, 1] + xd[1, 0] * xd[1, 1]
    g22 = xd[0, 1] * xd[0, 1] + xd[1, 1] * xd[1, 1]
    return xd, hh, g11, g12, g22


def egg_residual(geo: GeometryMap, reg: QuadratureRegistry,
                 pos: np.ndarray) -> np.ndarray:
    """Residual G(x, sigma) for every interior test function (n_int, 2)."""
    basis = geo.basis
    nint = int((pos >= 0).sum())
    R = np.zeros((nint, 2))
    for i in range(len(reg.cells)):
        fn_ids, tabs = reg.tabulate(basis, i, 2)
        xd, hh, g11, g12, g22 = _cell_metric(geo.control, fn_ids, tabs)
        AH = np.stack([g22 * hh[i_, 0] - 2.0 * g12 * hh[i_, 1]
                       + g11 * hh[i_, 2] for i_ in range(2)])
        F = g11 * g11 + g22 * g22 + 2.0 * g12 * g12
        gam = (g11 + g22) / F
        lap = tabs[2][:, 0] + tabs[2][:, 2]
        loc = (lap * (reg.weights[i] * gam)) @ AH.T
        rows = pos[fn_ids]
        keep = rows >= 0
        np.add.at(R, rows[keep], loc[keep])
    return R


def _egg_system(geo: GeometryMap, reg: QuadratureRegistry, pos: np.ndarray):
    """Residual and analytic Newton matrix over interior unknowns."""
    basis = geo.basis
    nint = int((pos >= 0).sum())
    R = np.zeros((nint, 2))
    rows_a, cols_a, vals_a = [], [], []
    for i in range(len(reg.cells)):
        fn_ids, tabs = reg.tabulate(basis, i, 2)
        grads, hess = tabs[1], tabs[2]
        xd, hh, g11, g12, g22 = _cell_metric(geo.control, fn_ids, tabs)
        AH = np.stack([g22 * hh[i_, 0] - 2.0 * g12 * hh[i_, 1]
                       + g11 * hh[i_, 2] for i_ in range(2)])
        F = g11 * g11 + g22 * g22 + 2.0 * g12 * g12
        tr = g11 + g22
        gam = tr / F
        lap = hess[:, 0] + hess[:, 2]
        w = reg.weights[i]
        loc = (lap * (w * gam)) @ AH.T
        rowpos = pos[fn_ids]
        keep = rowpos >= 0
        np.add.at(R, rowpos[keep], loc[keep])
        # metric variations: index order (trial f, component j, point s)
        dg11 = 2.0 * np.einsum("js,fs->fjs", xd[:, 0], grads[:, 0])
        dg22 = 2.0 * np.einsum("js,fs->fjs", xd[:, 1], grads[:, 1])
        dg12 = (np.einsum("js,fs->fjs", xd[:, 0], grads[:, 1])
                + np.einsum("js,fs->fjs", xd[:, 1], grads[:, 0]))
        dAH = np.empty((2, len(fn_ids), 2, len(w)))
        for i_ in range(2):
            dAH[i_] = (dg22 * hh[i_, 0] - 2.0 * dg12 * hh[i_, 1]
                       + dg11 * hh[i_, 2])
        AHf = g22 * hess[:, 0] - 2.0 * g12 * hess[:, 1] + g11 * hess[:, 2]
        for i_ in range(2):
            dAH[i_, :, i_, :] += AHf
        dF = 2.0 * g11 * dg11 + 2.0 * g22 * dg22 + 4.0 * g12 * dg12
        dgam = (dg11 + dg22) / F - tr * dF / (F * F)
        # T[i, f, j, s] = dgam * AH[i] + gam * dAH[i]
        T = dgam[None] * AH[:, None, None, :] + gam * dAH
        Jloc = np.einsum("ms,ifjs->mifj", lap * w, T, optimize=True)
        nf = len(fn_ids)
        rr = np.repeat(2 * rowpos, 2) + np.tile([0, 1], nf)   # (m, i) pairs
        cc = np.repeat(2 * rowpos, 2) + np.tile([0, 1], nf)   # (f, j) pairs
        mrow = np.repeat(rr, 2 * nf)
        mcol = np.tile(cc, 2 * nf)
        mask = (mrow >= 0) & (mcol >= 0)
        rows_a.append(mrow[mask])
        cols_a.append(mcol[mask])
        vals_a.append(Jloc.reshape(2 * nf, 2 * nf).ravel()[mask])
    J = sparse.coo_matrix(
        (np.concatenate(vals_a), (np.concatenate(rows_a),
                                  np.concatenate(cols_a))),
        shape=(2 * nint, 2 * nint)).tocsc()
    return R, J


class _EggAssembler:
    """Static data of the Newton system: tabulations, weighted test
    Laplacians, the sparsity pattern and a scatter map into CSR data.

    Only geometry-dependent quantities are recomputed per residual or
    system evaluation; the pattern is fixed by the basis and registry.
    """

    def __init__(self, basis: ThbBasis, reg: QuadratureRegistry,
                 pos: np.ndarray):
        self.basis, self.reg, self.pos = basis, reg, pos
        self.nint = int((pos >= 0).sum())
        self.cells = []
        rows_a, cols_a = [], []
        counts = []
        for i in range(len(reg.cells)):
            fn_ids, tabs = reg.tabulate(basis, i, 2)
            grads, hess = tabs[1], tabs[2]
            lap = hess[:, 0] + hess[:, 2]
            w = reg.weights[i]
            rowpos = pos[fn_ids]
            keep = rowpos >= 0
            nf = len(fn_ids)
            rr = np.repeat(2 * rowpos, 2) + np.tile([0, 1], nf)
            mrow = np.repeat(rr, 2 * nf)
            mcol = np.tile(rr, 2 * nf)
            mask = (mrow >= 0) & (mcol >= 0)
            rows_a.append(mrow[mask])
            cols_a.append(mcol[mask])
            counts.append(int(mask.sum()))
            self.cells.append((fn_ids, grads, hess, lap * w, rowpos, keep,
                               mask))
        self.counts = counts
        self.total = int(sum(counts))
        n2 = 2 * self.nint
        if self.total:
            lin = (np.concatenate(rows_a).astype(np.int64) * n2
                   + np.concatenate(cols_a))
            ulin, inv = np.unique(lin, return_inverse=True)
        else:
            ulin, inv = np.zeros(0, dtype=np.int64), np.zeros(0, dtype=int)
        self.scatter = inv
        self.indices = (ulin % n2).astype(np.int32)
        self.indptr = np.searchsorted(ulin // n2, np.arange(n2 + 1))
        self.n2 = n2

    @staticmethod
    def _metric(control, fn_ids, grads, hess):
        c = control[fn_ids]
        xd = np.tensordot(c, grads, axes=(0, 0))   # (i, d, s)
        hh = np.tensordot(c, hess, axes=(0, 0))    # (i, k, s)
        g11 = xd[0, 0] * xd[0, 0] + xd[1, 0] * xd[1, 0]
        g12 = xd[0, 0] * xd[0, 1] + xd[1, 0] * xd[1, 1]
        g22 = xd[0, 1] * xd[0, 1] + xd[1, 1] * xd[1, 1]
        return xd, hh, g11, g12, g22

    def residual(self, control: np.ndarray) -> np.ndarray:
        R = np.zeros((self.nint, 2))
        for fn_ids, grads, hess, lapw, rowpos, keep, _mask in self.cells:
            _xd, hh, g11, g12, g22 = self._metric(control, fn_ids, grads,
                                                  hess)
            AH = np.stack([g22 * hh[i_, 0] - 2.0 * g12 * hh[i_, 1]
                           + g11 * hh[i_, 2] for i_ in range(2)])
            gam = (g11 + g22) / (g11 * g11 + g22 * g22 + 2.0 * g12 * g12)
            loc = (lapw * gam) @ AH.T
            np.add.at(R, rowpos[keep], loc[keep])
        return R

    def system(self, control: np.ndarray):
        R = np.zeros((self.nint, 2))
        vals = np.empty(self.total)
        off = 0
        for (fn_ids, grads, hess, lapw, rowpos, keep, mask), cnt in zip(
                self.cells, self.counts):
            xd, hh, g11, g12, g22 = self._metric(control, fn_ids, grads,
                                                 hess)
            AH = np.stack([g22 * hh[i_, 0] - 2.0 * g12 * hh[i_, 1]
                           + g11 * hh[i_, 2] for i_ in range(2)])
            F = g11 * g11 + g22 * g22 + 2.0 * g12 * g12
            tr = g11 + g22
            gam = tr / F
            loc = (lapw * gam) @ AH.T
            np.add.at(R, rowpos[keep], loc[keep])
            gu = grads[:, 0][:, None, :]           # (f, 1, s)
            gv = grads[:, 1][:, None, :]
            xu = xd[:, 0][None]                    # (1, 2, s)
            xv = xd[:, 1][None]
            dg11 = 2.0 * gu * xu                   # (f, j, s)
            dg22 = 2.0 * gv * xv
            dg12 = gu * xv + gv * xu
            dF = 2.0 * g11 * dg11 + 2.0 * g22 * dg22 + 4.0 * g12 * dg12
            dgam = (dg11 + dg22) / F - tr * dF / (F * F)
            AHf = (g22 * hess[:, 0] - 2.0 * g12 * hess[:, 1]
                   + g11 * hess[:, 2])
            nf = len(fn_ids)
            J4 = np.empty((nf, 2, nf, 2))
            for i_ in range(2):
                Ti = (dgam * AH[i_] + gam * (dg22 * hh[i_, 0]
                                             - 2.0 * dg12 * hh[i_, 1]
                                             + dg11 * hh[i_, 2]))
                Ti[:, i_, :] += gam * AHf
                J4[:, i_] = np.tensordot(lapw, Ti, axes=(1, 2))
            vals[off:off + cnt] = J4.reshape(2 * nf, 2 * nf).ravel()[mask]
            off += cnt
        data = np.bincount(self.scatter, weights=vals,
                           minlength=len(self.indices))
        J = sparse.csr_matrix((data, self.indices, self.indptr),
                              shape=(self.n2, self.n2))
        return R, J


def solve_egg(init: GeometryMap, cfg: EggConfig,
              reg: QuadratureRegistry | None = None):
    """Newton iteration on the nondivergence system with backtracking.

    Returns ``(map, log)``; the log holds one entry per Newton step with the
    pre-step residual and the accepted step length.  Raises
    ``ConvergenceError`` if the residual criterion is not met within the
    iteration budget.
    """
    basis = init.basis
    if reg is None:
        reg = _registry(basis)
    pos = _interior_index(basis)
    asm = _EggAssembler(basis, reg, pos)
    geo = GeometryMap(basis, init.control.copy())
    history = []
    res = np.abs(asm.residual(geo.control)).max() if pos.max() >= 0 else 0.0
    for _ in range(cfg.max_newton):
        if res < cfg.mu:
            return geo, history
        t0 = time.perf_counter()
        R, J = asm.system(geo.control)
        t1 = time.perf_counter()
        # the Jacobian's sparsity pattern is structurally symmetric, so the
        # A^T + A minimum-degree ordering gives far less fill than COLAMD
        delta = splu(J.tocsc(), permc_spec="MMD_AT_PLUS_A"
                     ).solve(-R.ravel()).reshape(-1, 2)
        t2 = time.perf_counter()
        kappa = 1.0
        accepted = None
        for _h in range(cfg.max_halvings + 1):
            trial = geo.control.copy()
            trial[pos >= 0] += kappa * delta[pos[pos >= 0]]
            trial_res = np.abs(asm.residual(trial)).max()
            if trial_res < res or _h == cfg.max_halvings:
                accepted = (GeometryMap(basis, trial), trial_res)
                break
            kappa *= 0.5
        log.debug("newton step: residual %.3e kappa %.3g "
                  "(system %.1fs, solve %.1fs, search %.1fs)", res, kappa,
                  t1 - t0, t2 - t1, time.perf_counter() - t2)
        history.append({"residual": float(res), "kappa": float(kappa)})
        geo, res = accepted
    if res < cfg.mu:
        return geo, history
    raise ConvergenceError(
        f"Newton residual {res:.3e} above tolerance {cfg.mu:.1e} after "
        f"{cfg.max_newton} iterations",
        history + [{"residual": float(res), "kappa": 0.0}])


def fold_cells(geo: GeometryMap, reg: QuadratureRegistry):
    """Registry cells with a non-positive Jacobian determinant at any of
    their registered quadrature points."""
    basis = geo.basis
    bad = []
    for i in range(len(reg.cells)):
        fn_ids, tabs = reg.tabulate(basis, i, 1)
        xd = np.einsum("fi,fds->ids", geo.control[fn_ids], tabs[1])
        det = xd[0, 0] * xd[1, 1] - xd[0, 1] * xd[1, 0]
        if np.any(det <= 0.0):
            bad.append(reg.cells[i])
    return bad


def project_map(geo: GeometryMap, new_basis: ThbBasis) -> GeometryMap:
    """L2 projection of a map onto a refined basis (exact for nested
    spaces up to solver roundoff)."""
    reg = _registry(new_basis)
    rows, cols, vals = [], [], []
    rhs = np.zeros((new_basis.dim, 2))
    for i in range(len(reg.cells)):
        fn_ids, tabs = reg.tabulate(new_basis, i, 0)
        w = reg.weights[i]
        loc = (tabs[0] * w) @ tabs[0].T
        rows.append(np.repeat(fn_ids, len(fn_ids)))
        cols.append(np.tile(fn_ids, len(fn_ids)))
        vals.append(loc.ravel())
        old_ids, old_tabs = reg.tabulate(geo.basis, i, 0)
        x = old_tabs[0].T @ geo.control[old_ids]
        rhs[fn_ids] += (tabs[0] * w) @ x
    n = new_basis.dim
    M = sparse.coo_matrix((np.concatenate(vals),
                           (np.concatenate(rows), np.concatenate(cols))),
                          shape=(n, n)).tocsc()
    return GeometryMap(new_basis, spsolve(M, rhs,
                                          permc_spec="MMD_AT_PLUS_A"))


def certify_or_refine(geo: GeometryMap, cfg: EggConfig,
                      extra_mesh: HierarchicalMesh | None = None):
    """Certify det Dx > 0 at all registered quadrature points, refining the
    supports of functions alive on folded cells when necessary.

    The fold check runs on the union of the map's mesh with ``extra_mesh``
    (the state-solve mesh), i.e. on exactly the quadrature registry later
    used for integration.  Returns ``(map, apos_rounds, newton_log)``.
    """
    basis = geo.basis
    hist = []
    for round_ in range(cfg.max_apos_rounds + 1):
        mesh = basis.mesh
        check_mesh = mesh if extra_mesh is None else mesh.union(extra_mesh)
        sp = mesh.spaces[0]
        order = max(sp.kv_u.degree, sp.kv_v.degree) + 1
        t0 = time.perf_counter()
        reg = QuadratureRegistry(check_mesh, order)
        bad = fold_cells(geo, reg)
        log.info("fold check round %d: %d cells scanned in %.1fs",
                 round_, len(reg.cells), time.perf_counter() - t0)
        if not bad:
            return geo, round_, hist
        if round_ == cfg.max_apos_rounds:
            raise FoldError(
                f"map not fold-free after {cfg.max_apos_rounds} refinement "
                f"rounds ({len(bad)} folded cells)", bad)
        marked_fns = set()
        for cell in bad:
            from .quadrature import containing_active_cell
            own = containing_active_cell(mesh, cell)
            fn_ids, _ = basis.cell_extraction(own)
            marked_fns.update(int(f) for f in fn_ids)
        active = mesh.active_cells()
        bounds = np.array([mesh.cell_bounds(c) for c in active])
        hit = np.zeros(len(active), dtype=bool)
        for fn in marked_fns:
            u0, u1, v0, v1 = basis.function_support(fn)
            hit |= ((np.minimum(bounds[:, 1], u1)
                     - np.maximum(bounds[:, 0], u0) > 1e-14)
                    & (np.minimum(bounds[:, 3], v1)
                       - np.maximum(bounds[:, 2], v0) > 1e-14))
        refine = [c for c, h in zip(active, hit) if h]
        log.info("fold repair round %d: %d folded cells, refining %d cells",
                 round_ + 1, len(bad), len(refine))
        t0 = time.perf_counter()
        new_mesh = mesh.refine_cells(refine)
        basis = ThbBasis(new_mesh)
        geo = project_map(geo, basis)
        t1 = time.perf_counter()
        geo, nlog = solve_egg(geo, cfg)
        log.info("fold repair round %d: project %.1fs, newton %d steps "
                 "%.1fs (dim %d)", round_ + 1, t1 - t0, len(nlog),
                 time.perf_counter() - t1, basis.dim)
        hist.extend(nlog)
    raise AssertionError("unreachable")  # pragma: no cover


def parameterize(curve: BoundaryCurve, cfg: EggConfig,
                 extra_mesh: HierarchicalMesh | None = None,
                 initial_mesh: HierarchicalMesh | None = None):
    """Full pipeline: harmonic initial map, Newton solve, certification.

    ``initial_mesh``, when given, seeds the volume solve on the union of
    the curve's mesh with it — typically the previous iteration's
    fold-repair refinements, which spares most repair rounds.  Returns
    ``(map, info)`` where info records the Newton history and the number
    of a-posteriori refinement rounds.
    """
    t0 = time.perf_counter()
    geo = initial_map(curve)
    if initial_mesh is not None:
        start = curve.basis.mesh.union(initial_mesh)
        geo = project_map(geo, ThbBasis(start))
    t1 = time.perf_counter()
    geo, nlog = solve_egg(geo, cfg)
    t2 = time.perf_counter()
    log.info("parameterize: initial map %.1fs, newton %d steps %.1fs",
             t1 - t0, len(nlog), t2 - t1)
    geo, rounds, log2 = certify_or_refine(geo, cfg, extra_mesh)
    log.info("parameterize: certification %.1fs (%d repair rounds)",
             time.perf_counter() - t2, rounds)
    return geo, {"newton": nlog + log2, "apos_rounds": rounds}
