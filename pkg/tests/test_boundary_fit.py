"""Boundary-correspondence fitting tests."""
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from thbdefeat.boundary_fit import (BoundaryCurve, ExactBoundary, FitConfig,
                                    FitError, corner_constraints,
                                    detect_self_intersections, fit_boundary,
                                    repair_self_intersections)
from thbdefeat.hierarchy import HierarchicalMesh, ThbBasis, boundary_dofs


def segment(p0, p1):
    p0, p1 = np.asarray(p0, dtype=float), np.asarray(p1, dtype=float)

    def f(s, deriv=0):
        s = np.atleast_1d(np.asarray(s, dtype=float))
        if deriv == 0:
            return p0 + np.outer(s, p1 - p0)
        return np.tile(p1 - p0, (len(s), 1))

    return f


def quad_boundary(c_sw, c_se, c_ne, c_nw) -> ExactBoundary:
    return ExactBoundary({"south": segment(c_sw, c_se),
                          "east": segment(c_se, c_ne),
                          "north": segment(c_nw, c_ne),
                          "west": segment(c_sw, c_nw)})


def wiggly_boundary(amplitude: float, frequency: float) -> ExactBoundary:
    om = frequency * np.pi

    def north(s, deriv=0):
        s = np.atleast_1d(np.asarray(s, dtype=float))
        if deriv == 0:
            return np.column_stack([s, 1.0 - amplitude * np.sin(om * s)])
        return np.column_stack([np.ones_like(s),
                                -amplitude * om * np.cos(om * s)])

    return ExactBoundary({"south": segment((0, 0), (1, 0)),
                          "east": segment((1, 0), (1, 1)),
                          "north": north,
                          "west": segment((0, 0), (0, 1))})


class TestExactBoundary:
    def test_requires_all_four_sides(self):
        with pytest.raises(FitError):
            ExactBoundary({"south": segment((0, 0), (1, 0))})

    def test_corner_consistency_enforced(self):
        bad = {"south": segment((0, 0), (1, 0)),
               "east": segment((1, 0.5), (1, 1)),   # gap at SE corner
               "north": segment((0, 1), (1, 1)),
               "west": segment((0, 0), (0, 1))}
        with pytest.raises(FitError):
            ExactBoundary(bad)


class TestFit:
    @given(seed=st.integers(min_value=0, max_value=500))
    @settings(max_examples=20, deadline=None)
    def test_polygonal_boundary_fit_is_exact(self, seed):
        """Straight sides lie in every trace space: zero misfit."""
        rng = np.random.default_rng(seed)
        jitter = 0.2 * rng.random(8)
        exact = quad_boundary((0 - jitter[0], 0 - jitter[1]),
                              (1 + jitter[2], 0 - jitter[3]),
                              (1 + jitter[4], 1 + jitter[5]),
                              (0 - jitter[6], 1 + jitter[7]))
        basis = ThbBasis(HierarchicalMesh.uniform(3, 4))
        curve = fit_boundary(exact, boundary_dofs(basis), FitConfig())
        assert curve.objective <= 1e-18
        s = np.linspace(0.0, 1.0, 33)
        for side in ("south", "east", "north", "west"):
            np.testing.assert_allclose(curve.eval(side, s),
                                       exact.eval(side, s), atol=1e-10)

    def test_corner_constraints_hold_exactly(self):
        exact = wiggly_boundary(0.3, 5.0)
        basis = ThbBasis(HierarchicalMesh.uniform(3, 6))
        curve = fit_boundary(exact, boundary_dofs(basis), FitConfig())
        for con in corner_constraints():
            np.testing.assert_allclose(
                curve.eval(con.side, [con.s])[0],
                exact.eval(con.side, [con.s])[0], atol=1e-10)

    def test_objective_decreases_under_refinement(self):
        exact = wiggly_boundary(0.1, 7.0)
        values = []
        mesh = HierarchicalMesh.uniform(3, 6)
        for _ in range(3):
            basis = ThbBasis(mesh)
            curve = fit_boundary(exact, boundary_dofs(basis), FitConfig())
            values.append(curve.objective)
            mesh = mesh.refine_cells(mesh.boundary_cells("north"))
        assert values[0] > values[1] > values[2]

    def test_refit_of_fitted_curve_is_identity(self):
        """A curve re-fitted on its own trace space reproduces itself."""
        exact = wiggly_boundary(0.1, 5.0)
        basis = ThbBasis(HierarchicalMesh.uniform(3, 6))
        dofs = boundary_dofs(basis)
        curve = fit_boundary(exact, dofs, FitConfig())
        again = fit_boundary(curve.as_exact(), dofs, FitConfig())
        np.testing.assert_allclose(again.control_points,
                                   curve.control_points, atol=1e-10)

    def test_kappa_validation(self):
        with pytest.raises(FitError):
            FitConfig(kappa0=0.0)
        with pytest.raises(FitError):
            FitConfig(kappa1=-1.0)


class TestSelfIntersections:
    def _pinched_curve(self) -> BoundaryCurve:
        exact = quad_boundary((0, 0), (1, 0), (1, 1), (0, 1))
        basis = ThbBasis(HierarchicalMesh.uniform(3, 4))
        dofs = boundary_dofs(basis)
        curve = fit_boundary(exact, dofs, FitConfig())
        control = curve.control_points.copy()
        for row, fn in enumerate(dofs.indices):
            u0, u1, v0, v1 = basis.function_support(fn)
            if v1 == 1.0 and 0.2 < 0.5 * (u0 + u1) < 0.8:
                control[row, 1] = -0.5     # drag mid-north below the south
        return BoundaryCurve(dofs, control, objective=0.0)

    def test_square_is_simple(self):
        exact = quad_boundary((0, 0), (1, 0), (1, 1), (0, 1))
        basis = ThbBasis(HierarchicalMesh.uniform(3, 4))
        curve = fit_boundary(exact, boundary_dofs(basis), FitConfig())
        assert detect_self_intersections(curve) == []

    def test_pinched_boundary_is_detected(self):
        crossings = detect_self_intersections(self._pinched_curve())
        assert crossings
        sides = {tag[0] for pair in crossings for tag in pair[:2]}
        assert "north" in sides

    def test_repair_returns_simple_curve(self):
        exact = wiggly_boundary(0.2, 9.0)
        curve, mesh = repair_self_intersections(
            exact, HierarchicalMesh.uniform(3, 6), FitConfig())
        assert detect_self_intersections(curve) == []
