"""Hierarchical mesh and truncated-basis property tests."""
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from _oracles import (hb_function_set, random_hierarchical_mesh,
                      tensor_function_values)
from thbdefeat.hierarchy import (HierarchicalMesh, HierarchyError, ThbBasis,
                                 boundary_dofs, minimal_refinement_set)

seeds = st.integers(min_value=0, max_value=10_000)


def thb_collocation(basis: ThbBasis, pts: np.ndarray) -> np.ndarray:
    """(npts, dim) dense collocation matrix of a THB basis."""
    M = np.zeros((len(pts), basis.dim))
    for k, (fn_ids, tabs) in enumerate(basis.eval_points(pts)):
        M[k, fn_ids] = tabs[0]
    return M


class TestMesh:
    def test_uniform_counts(self):
        mesh = HierarchicalMesh.uniform(3, 10)
        assert mesh.depth == 1
        assert len(mesh.active_cells()) == 100
        assert mesh.total_area() == pytest.approx(1.0)

    def test_refine_replaces_cell_by_children(self):
        mesh = HierarchicalMesh.uniform(2, 4).refine_cells([(0, 1, 2)])
        active = mesh.active_cells()
        assert len(active) == 15 + 4
        assert not mesh.is_active(0, 1, 2)
        assert all(mesh.is_active(1, cu, cv)
                   for cu in (2, 3) for cv in (4, 5))

    def test_refine_inactive_cell_rejected(self):
        mesh = HierarchicalMesh.uniform(2, 4).refine_cells([(0, 1, 2)])
        with pytest.raises(HierarchyError):
            mesh.refine_cells([(0, 1, 2)])

    @given(seed=seeds)
    @settings(max_examples=25, deadline=None)
    def test_active_cells_tile_the_square(self, seed):
        rng = np.random.default_rng(seed)
        mesh = random_hierarchical_mesh(rng, degree=2, initial=4, levels=3)
        area = 0.0
        for cell in mesh.active_cells():
            u0, u1, v0, v1 = mesh.cell_bounds(cell)
            area += (u1 - u0) * (v1 - v0)
        assert area == pytest.approx(1.0, abs=1e-12)

    @given(seed=seeds)
    @settings(max_examples=20, deadline=None)
    def test_union_refines_both_arguments(self, seed):
        rng = np.random.default_rng(seed)
        a = random_hierarchical_mesh(rng, degree=2, initial=4, levels=2)
        b = random_hierarchical_mesh(rng, degree=2, initial=4, levels=3)
        u = a.union(b)
        for mesh in (a, b):
            for cell in u.active_cells():
                x0, x1, y0, y1 = u.cell_bounds(cell)
                owner = mesh.find_active_cell(((x0 + x1) / 2,
                                               (y0 + y1) / 2))
                u0, u1, v0, v1 = mesh.cell_bounds(owner)
                assert u0 <= x0 and x1 <= u1 and v0 <= y0 and y1 <= v1


class TestBasisSelection:
    def test_single_level_is_tensor_basis(self):
        basis = ThbBasis(HierarchicalMesh.uniform(3, 10))
        assert basis.dim == 13 * 13

    def test_corner_block_refinement_dim(self):
        mesh = HierarchicalMesh.uniform(3, 10).refine_cells(
            [(0, 0, 0), (0, 0, 1), (0, 1, 0), (0, 1, 1)])
        assert ThbBasis(mesh).dim == 181

    @given(seed=seeds, degree=st.integers(min_value=2, max_value=3),
           levels=st.integers(min_value=2, max_value=3))
    @settings(max_examples=30, deadline=None)
    def test_matches_literal_hierarchical_selection(self, seed, degree,
                                                    levels):
        rng = np.random.default_rng(seed)
        mesh = random_hierarchical_mesh(rng, degree=degree, initial=4,
                                        levels=levels)
        basis = ThbBasis(mesh)
        assert set(basis.functions) == hb_function_set(mesh)

    @given(seed=seeds)
    @settings(max_examples=20, deadline=None)
    def test_partition_of_unity(self, seed):
        rng = np.random.default_rng(seed)
        mesh = random_hierarchical_mesh(rng, degree=3, initial=4, levels=3)
        basis = ThbBasis(mesh)
        pts = rng.random((40, 2))
        ones = thb_collocation(basis, pts) @ np.ones(basis.dim)
        np.testing.assert_allclose(ones, 1.0, rtol=0.0, atol=1e-12)

    @given(seed=seeds)
    @settings(max_examples=10, deadline=None)
    def test_truncated_spans_hierarchical_space(self, seed):
        """A random field in the plain hierarchical (Kraft) span is
        reproduced exactly by the truncated basis."""
        rng = np.random.default_rng(seed)
        mesh = random_hierarchical_mesh(rng, degree=2, initial=4, levels=3)
        basis = ThbBasis(mesh)
        hb = sorted(hb_function_set(mesh))
        coefs = rng.standard_normal(len(hb))
        pts = rng.random((3 * basis.dim, 2))
        target = np.zeros(len(pts))
        for c, fn in zip(coefs, hb):
            target += c * tensor_function_values(mesh, fn, pts)
        M = thb_collocation(basis, pts)
        fitted, *_ = np.linalg.lstsq(M, target, rcond=None)
        resid = np.linalg.norm(M @ fitted - target)
        assert resid <= 1e-11 * max(1.0, np.linalg.norm(target))


class TestBoundaryDofs:
    def test_single_level_count(self):
        basis = ThbBasis(HierarchicalMesh.uniform(3, 10))
        assert boundary_dofs(basis).size == 13 * 13 - 11 * 11

    @given(seed=seeds)
    @settings(max_examples=15, deadline=None)
    def test_interior_functions_vanish_on_boundary(self, seed):
        rng = np.random.default_rng(seed)
        mesh = random_hierarchical_mesh(rng, degree=3, initial=4, levels=2)
        basis = ThbBasis(mesh)
        on_boundary = set(boundary_dofs(basis).indices)
        s = np.linspace(0.0, 1.0, 57)
        edge = np.vstack([np.column_stack([s, np.zeros_like(s)]),
                          np.column_stack([s, np.ones_like(s)]),
                          np.column_stack([np.zeros_like(s), s]),
                          np.column_stack([np.ones_like(s), s])])
        M = thb_collocation(basis, edge)
        traces = np.abs(M).max(axis=0)
        for fn in range(basis.dim):
            if fn not in on_boundary:
                assert traces[fn] <= 1e-12


class TestMinimalRefinement:
    @given(seed=seeds)
    @settings(max_examples=15, deadline=None)
    def test_marked_functions_active_after_refinement(self, seed):
        """Refining the returned cell set makes every marked function of
        the boundary-refined companion basis an active basis function."""
        rng = np.random.default_rng(seed)
        mesh = random_hierarchical_mesh(rng, degree=3, initial=5, levels=2)
        plus = ThbBasis(mesh.refine_cells(mesh.all_boundary_cells()))
        finer = [fn for fn in range(plus.dim)
                 if plus.functions[fn][0] == mesh.depth - 1 + 1
                 or plus.functions[fn][0] == mesh.depth - 1]
        if not finer:
            return
        marked = list(rng.choice(finer, size=min(4, len(finer)),
                                 replace=False))
        current = mesh
        for _ in range(mesh.depth + 2):
            missing = [fn for fn in marked
                       if plus.functions[fn] not in
                       ThbBasis(current).index]
            if not missing:
                break
            cells = minimal_refinement_set(current, plus, missing)
            assert cells, "no progress towards representing marked functions"
            current = current.refine_cells(sorted(cells))
        basis = ThbBasis(current)
        for fn in marked:
            assert plus.functions[fn] in basis.index
