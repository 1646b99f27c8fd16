"""Tests for oscillatory integrals, critical points, stationary phase and charts."""

import cmath
import math

import numpy as np
import pytest
import sympy as sp

from microlocal_kit.catalog import coherent_state, fold_phase, quadratic_phase, wkb_phase
from microlocal_kit.errors import (
    FoldError,
    ResolutionError,
    SingularCriticalPointError,
    WindowError,
)
from microlocal_kit.hgrid import HFamily, geometric_sweep, make_grid
from microlocal_kit.oscint import (
    PhasePresentation,
    choose_twist,
    find_critical_points,
    generating_chart,
    lambda_phi,
    oscint_eval,
    oscint_sample,
    quadratic_twist,
    stationary_phase,
    stationary_phase_operators,
    validate_phase,
)
from microlocal_kit.symcalc import SymbolExpr, bump, sym
from microlocal_kit.wavefront import PhasePoint, probe_grid, wf_scan

X = sym("x")
THETA = sym("theta")


def _fresnel(h):
    """int exp(i theta^2 / (2h)) exp(-theta^2 / 2) dtheta."""
    return cmath.sqrt(2 * math.pi * h / (h - 1j))


class TestPhasePresentation:
    """Tests for phase validation and the text format."""

    def test_box_length(self):
        """Test that the box needs one interval per variable."""
        with pytest.raises(ValueError, match="2 intervals"):
            PhasePresentation(X * THETA, (X,), (THETA,), ((-1.0, 1.0),))

    def test_undeclared_symbol(self):
        """Test that phases only use declared variables."""
        with pytest.raises(ValueError, match="undeclared"):
            PhasePresentation(X * sym("y"), (X,), (), ((-1.0, 1.0),))

    def test_complex_phase_rejected(self):
        """Test that a complex-valued phase is rejected."""
        with pytest.raises(ValueError, match="real"):
            PhasePresentation(sp.I * X, (X,), (), ((-1.0, 1.0),))

    def test_from_text(self):
        """Test parsing of a phase file with a variables header."""
        pp = PhasePresentation.from_text(
            "variables: x 1 theta 1\n(sub (mul x theta) (div (pow theta 3) 3))",
            ((-3.0, 5.0), (-2.5, 2.5)),
        )
        assert (pp.n, pp.m) == (1, 1)
        assert sp.simplify(pp.phi - (X * THETA - THETA**3 / 3)) == 0
        assert not pp.is_linear_in_theta()

    def test_linear_in_theta(self):
        """Test that a conic phase is recognized."""
        pp = PhasePresentation.from_text("variables: x 1 theta 1\n(mul x theta)", ((-1, 1), (-1, 1)))
        assert pp.is_linear_in_theta()

    def test_unknown_stem(self):
        """Test that only x, z and theta stems are allowed."""
        with pytest.raises(ValueError, match="stems"):
            PhasePresentation.from_text("variables: y 1\n(mul y y)", ((-1, 1),))


class TestOscillatoryIntegral:
    """Tests for oscint_eval and oscint_sample."""

    def test_fresnel_integral(self):
        """Test the quadrature against the closed-form Gaussian Fresnel integral."""
        pp = quadratic_phase()
        a = SymbolExpr(sp.exp(-(THETA**2) / 2), pp.variables)
        for h in (0.5, 0.1, 0.02):
            assert oscint_eval(a, pp, (), h) == pytest.approx(_fresnel(h), rel=1e-9)

    def test_amplitude_must_vanish_at_box_edge(self):
        """Test that an amplitude alive at the theta-box edge raises WindowError."""
        pp = quadratic_phase()
        with pytest.raises(WindowError, match="Amplitude"):
            oscint_eval(SymbolExpr(sp.S.One, pp.variables), pp, (), 0.1)

    def test_explicit_theta_count_under_resolved(self):
        """Test that a fixed theta count below the resolution rule is rejected."""
        pp = quadratic_phase()
        a = SymbolExpr(sp.exp(-(THETA**2) / 2), pp.variables)
        with pytest.raises(ResolutionError):
            oscint_eval(a, pp, (), 0.01, n_theta=64)

    def test_sample_matches_pointwise(self):
        """Test that sampling on a grid agrees with pointwise evaluation."""
        pp = PhasePresentation(X * THETA, (X,), (THETA,), ((-1.0, 1.0), (-3.0, 3.0)))
        a = SymbolExpr(bump([THETA], [0.0], 2.0), pp.variables)
        grid = make_grid(1, (-1.0,), (1.0,), (64,))
        sampled = oscint_sample(a, pp, grid, 0.25, n_theta=512)
        (x,) = grid.axes()
        for index in (5, 32, 50):
            assert sampled.values[index] == pytest.approx(oscint_eval(a, pp, (x[index],), 0.25, n_theta=512))

    def test_sample_without_theta(self):
        """Test that m = 0 gives a exp(i phi / h) on the grid."""
        pp = wkb_phase()
        a = SymbolExpr(bump([X], [0.0], 1.0), pp.variables)
        grid = make_grid(1, (-2.0,), (2.0,), (256,))
        u = oscint_sample(a, pp, grid, 1.0 / 16.0)
        (x,) = grid.axes()
        expected = a.evaluate(x) * np.exp(1j * x**2 / 2 * 16.0)
        assert np.allclose(u.values, expected)

    def test_sample_under_resolved(self):
        """Test that a coarse base grid raises ResolutionError."""
        pp = wkb_phase()
        a = SymbolExpr(bump([X], [0.0], 1.0), pp.variables)
        with pytest.raises(ResolutionError, match="base grid"):
            oscint_sample(a, pp, make_grid(1, (-2.0,), (2.0,), (16,)), 1.0 / 16.0)


class TestCriticalPoints:
    """Tests for find_critical_points."""

    def test_single_nondegenerate(self):
        """Test the critical point of theta^2 / 2."""
        records = find_critical_points(SymbolExpr(THETA**2 / 2, (THETA,)), [(-10.0, 10.0)])
        assert len(records) == 1
        cp = records[0]
        assert cp.location[0] == pytest.approx(0.0, abs=1e-9)
        assert cp.accepted
        assert (cp.det, cp.signature) == (pytest.approx(1.0), 1)

    def test_fixed_parameter(self):
        """Test the two critical points of x theta - theta^3/3 at x = 1."""
        Phi = SymbolExpr(X * THETA - THETA**3 / 3, (X, THETA))
        records = find_critical_points(Phi, [(-2.0, 2.0)], variables=[THETA], fixed={X: 1.0})
        assert [r.location[0] for r in records] == [pytest.approx(-1.0), pytest.approx(1.0)]
        assert [r.signature for r in records] == [1, -1]
        assert records[1].value == pytest.approx(2.0 / 3.0)

    def test_degenerate_point_not_accepted(self):
        """Test that a cubic critical point is kept but not accepted."""
        records = find_critical_points(SymbolExpr(THETA**3, (THETA,)), [(-1.0, 1.0)])
        assert len(records) == 1
        assert not records[0].accepted

    def test_box_length_checked(self):
        """Test that the box must match the unknowns."""
        with pytest.raises(ValueError, match="box intervals"):
            find_critical_points(SymbolExpr(THETA**2, (THETA,)), [(-1, 1), (-1, 1)])


class TestStationaryPhase:
    """Tests for the stationary-phase expansion."""

    @pytest.fixture
    def setup(self):
        """Gaussian amplitude, quadratic phase and its critical point."""
        Phi = SymbolExpr(THETA**2 / 2, (THETA,))
        a = SymbolExpr(sp.exp(-(THETA**2) / 2), (THETA,))
        (cp,) = find_critical_points(Phi, [(-10.0, 10.0)])
        return a, Phi, cp

    def test_leading_term(self, setup):
        """Test that the leading term is sqrt(2 pi h) exp(i pi / 4)."""
        a, Phi, cp = setup
        result = stationary_phase(a, Phi, cp, 0.01, K=0)
        assert result.value == pytest.approx(math.sqrt(2 * math.pi * 0.01) * cmath.exp(1j * math.pi / 4))

    def test_first_correction(self, setup):
        """Test that L_1 a = -i/2 for this amplitude."""
        a, Phi, cp = setup
        result = stationary_phase(a, Phi, cp, 0.01, K=1)
        assert result.terms[1] / result.prefactor == pytest.approx(-0.5j * 0.01)

    def test_remainder_shrinks_with_order(self, setup):
        """Test that each extra order gains a power of h against the exact value."""
        a, Phi, cp = setup
        h = 0.01
        exact = _fresnel(h)
        errors = [abs(stationary_phase(a, Phi, cp, h, K=K).value - exact) / abs(exact) for K in range(3)]
        assert errors[0] == pytest.approx(h / 2, rel=0.05)
        assert errors[1] == pytest.approx(3 * h**2 / 8, rel=0.05)
        assert errors[2] < 1e-6

    def test_degenerate_point_rejected(self):
        """Test that expanding at a degenerate point raises SingularCriticalPointError."""
        Phi = SymbolExpr(THETA**3, (THETA,))
        (cp,) = find_critical_points(Phi, [(-1.0, 1.0)])
        with pytest.raises(SingularCriticalPointError):
            stationary_phase(SymbolExpr(sp.S.One, (THETA,)), Phi, cp, 0.1)

    def test_order_limit(self):
        """Test that orders above two are rejected."""
        with pytest.raises(ValueError, match="order K"):
            stationary_phase_operators(sp.S.One, THETA**2 / 2, (THETA,), [np.asarray(0.0)], 1, 3)

    def test_result_frame(self, setup):
        """Test the per-order table."""
        a, Phi, cp = setup
        frame = stationary_phase(a, Phi, cp, 0.1, K=2).to_frame()
        assert list(frame["k"]) == [0, 1, 2]
        assert frame["cumulative_re"].iloc[-1] == pytest.approx(
            stationary_phase(a, Phi, cp, 0.1, K=2).value.real
        )


class TestLagrangian:
    """Tests for phase validation, Lagrangian clouds and charts."""

    def test_fold_phase_is_nondegenerate(self):
        """Test that the fold phase passes the rank check."""
        assert validate_phase(fold_phase()).all_passed

    def test_degenerate_phase_fails(self):
        """Test that theta^3 / 3 fails the rank check on its critical set."""
        pp = PhasePresentation(THETA**3 / 3, (X,), (THETA,), ((-1.0, 1.0), (-1.0, 1.0)))
        report = validate_phase(pp)
        assert not report.all_passed
        assert len(report.failures) > 0

    def test_validate_requires_theta(self):
        """Test that validation needs fiber variables."""
        with pytest.raises(ValueError, match="theta"):
            validate_phase(wkb_phase())

    def test_fold_cloud(self):
        """Test that the fold Lagrangian is x = xi^2 and injective."""
        cloud = lambda_phi(fold_phase(), resolution=21)
        assert len(cloud) > 10
        assert np.allclose(cloud.x[:, 0], cloud.xi[:, 0] ** 2, atol=1e-7)
        assert cloud.injective

    def test_graph_cloud(self):
        """Test that a phase without theta gives the graph of its gradient."""
        cloud = lambda_phi(wkb_phase(), resolution=11)
        assert np.allclose(cloud.x, cloud.xi)
        assert list(cloud.to_frame().columns) == ["x0", "xi0"]

    def test_generating_chart_of_fold(self):
        """Test that the chart recovers x = xi^2 with H(1) = 0."""
        chart = generating_chart(lambda_phi(fold_phase(), resolution=41), [(0.7, 1.3)])
        xi = np.linspace(0.75, 1.25, 7)
        assert np.allclose(chart.x_of(xi[:, None])[:, 0], xi**2, atol=1e-4)
        assert chart.H.evaluate(1.0)[()].real == pytest.approx(0.0, abs=1e-12)
        assert chart.contains((1.0,))
        assert not chart.contains((1.5,))

    def test_chart_across_fold_rejected(self):
        """Test that a non-injective projection to xi raises FoldError."""
        pp = PhasePresentation(X**3 / 3, (X,), (), ((-2.0, 2.0),))
        with pytest.raises(FoldError):
            generating_chart(lambda_phi(pp, resolution=81), [(0.5, 2.0)])

    def test_chart_needs_points(self):
        """Test that a window with too few cloud points is rejected."""
        with pytest.raises(ValueError, match="need 4"):
            generating_chart(lambda_phi(wkb_phase(), resolution=11), [(10.0, 11.0)])


class TestTwist:
    """Tests for the quadratic twist."""

    def test_choose_twist(self):
        """Test that the twist exceeds the spectral radius by one."""
        assert np.allclose(choose_twist(np.diag([1.0, -3.0])), 4.0 * np.eye(2))

    def test_twist_multiplies_by_chirp(self):
        """Test that the twist multiplies by exp(i a x^2 / (2h))."""
        grid = make_grid(1, (-4.0,), (4.0,), (512,))
        family = HFamily.from_builder(grid, (0.25, 0.125), lambda g, h: coherent_state(g, h))
        twisted = quadratic_twist(family, [[2.0]])
        (x,) = grid.axes()
        assert np.allclose(twisted[0].values, np.exp(1j * x**2 / 0.25) * family[0].values)

    def test_twist_shifts_wavefront(self):
        """Test that the twist moves the inside cell from (x0, xi0) to (x0, xi0 + A x0)."""
        grid = make_grid(1, (-4.0,), (4.0,), (16384,))
        family = HFamily.from_builder(grid, geometric_sweep(4, 10), lambda g, h: coherent_state(g, h, 1.0, 1.0))
        points = probe_grid([0.0, 1.0, 2.0], [0.0, 1.0, 2.0, 3.0])

        before = wf_scan(family, points)
        after = wf_scan(quadratic_twist(family, [[1.0]]), points)

        assert before.inside_points() == [PhasePoint((1.0,), (1.0,))]
        assert after.inside_points() == [PhasePoint((1.0,), (2.0,))]

    def test_twist_must_be_symmetric(self):
        """Test that a non-symmetric matrix is rejected."""
        grid = make_grid(2, (-1.0, -1.0), (1.0, 1.0), (8, 8))
        family = HFamily.from_builder(grid, (0.5,), lambda g, h: coherent_state(g, h))
        with pytest.raises(ValueError, match="symmetric"):
            quadratic_twist(family, [[1.0, 1.0], [0.0, 1.0]])
