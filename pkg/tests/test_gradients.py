"""Shape-gradient tests: finite-difference consistency against the adjoint
formula, linearity, and the estimator/marking report."""
import numpy as np
import pytest

from thbdefeat.boundary_fit import ExactBoundary
from thbdefeat.parameterization import GeometryMap
from thbdefeat.pde import Integrand, PdeProblem, QoiSpec, ScalarField
from thbdefeat.shape_gradient import (GradientError, ShapeDirection,
                                      assemble_report,
                                      directional_derivative,
                                      unit_boundary_gradients)
from test_boundary_fit import wiggly_boundary
from _oracles import fd_derivative_order, fd_setup


def wiggly_neumann(amplitude: float, frequency: float) -> ExactBoundary:
    base = wiggly_boundary(amplitude, frequency)
    return ExactBoundary(base.sides, frozenset({"west"}))


@pytest.fixture(scope="module")
def setup():
    """Small analogue of the flux-driven benchmark: unit square with a
    sinusoidal north side, west-side Neumann data, boundary quantity of
    interest, and a non-constant source to exercise every gradient term."""
    exact = wiggly_neumann(0.05, 3.0)
    f = ScalarField(lambda x: 1.0 + 0.5 * x[:, 0] + 0.25 * x[:, 1],
                    lambda x: np.tile([0.5, 0.25], (len(x), 1)))
    g = ScalarField(lambda x: np.ones(len(x)),
                    lambda x: np.zeros((len(x), 2)))
    prob = PdeProblem(f, g, frozenset({"west"}))
    qoi = QoiSpec(q=Integrand.square(), q_side="west")
    geo, u_h, p_h, fit, solver = fd_setup(exact, prob, qoi, elements=6)
    unit = unit_boundary_gradients(u_h, p_h, geo, prob, qoi,
                                   fit.basis_plus, fit.boundary_ids)
    return dict(exact=exact, prob=prob, qoi=qoi, geo=geo, u_h=u_h,
                p_h=p_h, fit=fit, solver=solver, unit=unit)


class TestFiniteDifference:
    def test_fd_consistency_has_first_order(self, setup):
        """Forward differences of the discrete functional under direct
        control-point perturbation converge to the assembled gradient at
        first order (the gradient is the exact discrete derivative)."""
        fit, unit = setup["fit"], setup["unit"]
        rng = np.random.default_rng(7)
        picks = rng.choice(len(fit.boundary_ids), size=5, replace=False)
        for k in picks:
            fn = fit.boundary_ids[k]
            for axis in (0, 1):
                order, errors = fd_derivative_order(
                    setup["geo"], fit, setup["solver"], setup["prob"],
                    setup["qoi"], fn, axis, unit[k, axis])
                assert order >= 0.9, (fn, axis, errors)

    def test_gradients_are_nontrivial(self, setup):
        norms = np.linalg.norm(setup["unit"], axis=1)
        assert norms.max() > 1e-4


class TestDirectionalDerivative:
    def test_scales_linearly_in_amplitude(self, setup):
        fn = setup["fit"].boundary_ids[3]
        args = (setup["u_h"], setup["p_h"], setup["geo"])
        tail = (setup["prob"], setup["qoi"], setup["fit"].basis_plus)
        one = directional_derivative(
            *args, ShapeDirection(fn, 1, 1.0, setup["geo"]), *tail)
        scaled = directional_derivative(
            *args, ShapeDirection(fn, 1, 2.5, setup["geo"]), *tail)
        assert scaled == pytest.approx(2.5 * one, rel=1e-12)

    def test_zero_amplitude_is_exact_zero(self, setup):
        theta = ShapeDirection(setup["fit"].boundary_ids[0], 0, 0.0,
                               setup["geo"])
        out = directional_derivative(setup["u_h"], setup["p_h"],
                                     setup["geo"], theta, setup["prob"],
                                     setup["qoi"], setup["fit"].basis_plus)
        assert out == 0.0

    def test_foreign_carrier_rejected(self, setup):
        geo = setup["geo"]
        other = GeometryMap(geo.basis, geo.control.copy())
        theta = ShapeDirection(setup["fit"].boundary_ids[0], 0, 1.0, other)
        with pytest.raises(GradientError):
            directional_derivative(setup["u_h"], setup["p_h"], geo, theta,
                                   setup["prob"], setup["qoi"],
                                   setup["fit"].basis_plus)

    def test_bad_axis_rejected(self, setup):
        with pytest.raises(GradientError):
            ShapeDirection(0, 2, 1.0, setup["geo"])


class TestReport:
    def test_estimator_and_maximum_marking(self, setup):
        fit, unit = setup["fit"], setup["unit"]
        report = assemble_report(fit, unit, alpha=0.3)
        norms = np.linalg.norm(unit * fit.delta, axis=1)
        assert report.estimator == pytest.approx(norms.max())
        marked = set(report.marked)
        assert marked
        for fn, nn in zip(fit.boundary_ids, norms):
            if fn in marked:
                assert nn >= 0.3 * report.estimator
            else:
                assert nn < 0.3 * report.estimator

    def test_larger_alpha_marks_subset(self, setup):
        fit, unit = setup["fit"], setup["unit"]
        loose = set(assemble_report(fit, unit, 0.2).marked)
        tight = set(assemble_report(fit, unit, 0.9).marked)
        assert tight <= loose

    def test_prediction_is_gradient_dot_discrepancy(self, setup):
        fit, unit = setup["fit"], setup["unit"]
        report = assemble_report(fit, unit, 0.5)
        assert report.prediction == pytest.approx(
            float((unit * fit.delta).sum()))

    def test_alpha_and_shape_validated(self, setup):
        fit, unit = setup["fit"], setup["unit"]
        for alpha in (0.0, 1.0, -0.2):
            with pytest.raises(GradientError):
                assemble_report(fit, unit, alpha)
        with pytest.raises(GradientError):
            assemble_report(fit, unit[:-1], 0.5)


class TestCompanionFit:
    def test_reexpression_is_exact(self, setup):
        """The current curve re-fitted on the refined trace space must
        reproduce it: nested spaces make the re-expression lossless."""
        fit, geo = setup["fit"], setup["geo"]
        s = np.linspace(0.0, 1.0, 41)
        z, o = np.zeros_like(s), np.ones_like(s)
        params = {"south": np.column_stack([s, z]),
                  "east": np.column_stack([o, s]),
                  "north": np.column_stack([s, o]),
                  "west": np.column_stack([z, s])}
        for side, pts in params.items():
            np.testing.assert_allclose(fit.curve_bar.eval(side, s),
                                       geo.eval(pts), atol=1e-9)

    def test_discrepancy_shrinks_with_resolution(self):
        """Doubling the initial trace resolution shrinks the largest
        control discrepancy of the companion fit."""
        exact = wiggly_neumann(0.05, 3.0)
        f = ScalarField.zero()
        prob = PdeProblem(f, f, frozenset())
        qoi = QoiSpec(j=Integrand.square())
        deltas = []
        for elements in (6, 12):
            _, _, _, fit, _ = fd_setup(exact, prob, qoi, elements=elements)
            deltas.append(np.abs(fit.delta).max())
        assert deltas[1] < deltas[0]
