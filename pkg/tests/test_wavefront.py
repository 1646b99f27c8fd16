"""Tests for wavefront set estimation, temperedness and the kernel calculus."""

import math

import numpy as np
import pytest

from microlocal_kit.catalog import chirp_escape_state, coherent_state
from microlocal_kit.errors import WindowError
from microlocal_kit.hgrid import HFamily, SweepRegression, geometric_sweep, make_grid, pair
from microlocal_kit.symcalc import OperatorSpec, bump, bump_values, phase_space_vars
from microlocal_kit.wavefront import (
    PhasePoint,
    Verdict,
    WavefrontParams,
    classify,
    disjoint_pairing_test,
    kernel_apply,
    kernel_compose,
    op_wavefront,
    probe_grid,
    temperedness_check,
    tensor,
    verdict_stability,
    wf_finite_test,
    wf_infinite_test,
    wf_psdo_test,
    wf_scan,
    xi_stencil,
)

X, XI = phase_space_vars(1)


@pytest.fixture(scope="module")
def coherent_family():
    """Coherent states at (0, 1) on [-4, 4] over h = 2^-4 .. 2^-8."""
    grid = make_grid(1, (-4.0,), (4.0,), (1024,))
    return HFamily.from_builder(grid, geometric_sweep(4, 8), lambda g, h: coherent_state(g, h, 0.0, 1.0))


def _regression(slope, r_squared, floor_hit=False):
    h = geometric_sweep(4, 7)
    return SweepRegression(h, tuple(1.0 for _ in h), slope, 0.0, r_squared, floor_hit)


class TestPhasePoint:
    """Tests for PhasePoint validation."""

    def test_scalars_become_tuples(self):
        """Test that scalar coordinates are stored as 1-tuples."""
        point = PhasePoint(0.5, 1.0)
        assert point.x == (0.5,)
        assert point.dim == 1

    def test_dimension_mismatch(self):
        """Test that x and xi must have the same length."""
        with pytest.raises(ValueError, match="same dimension"):
            PhasePoint((0.0, 1.0), (1.0,))

    def test_infinite_needs_unit_direction(self):
        """Test that infinite points carry a unit direction."""
        with pytest.raises(ValueError, match="unit direction"):
            PhasePoint((0.0,), (2.0,), kind="infinite")

    def test_unknown_kind(self):
        """Test that the kind is validated."""
        with pytest.raises(ValueError, match="kind"):
            PhasePoint((0.0,), (1.0,), kind="boundary")


class TestClassify:
    """Tests for the verdict rules."""

    def test_floor_hit_is_outside(self):
        """Test that reaching the numerical floor counts as rapid decay."""
        assert classify(_regression(math.nan, math.nan, True), WavefrontParams()) == Verdict.OUTSIDE

    def test_steep_clean_fit_is_outside(self):
        """Test that a slope above the threshold with a clean fit is outside."""
        assert classify(_regression(7.0, 0.99), WavefrontParams()) == Verdict.OUTSIDE

    def test_shallow_slope_is_inside(self):
        """Test that a shallow slope with a good fit is inside."""
        assert classify(_regression(0.25, 0.95), WavefrontParams()) == Verdict.INSIDE

    def test_middle_slope_is_inconclusive(self):
        """Test that slopes between the thresholds are inconclusive."""
        assert classify(_regression(4.0, 0.99), WavefrontParams()) == Verdict.INCONCLUSIVE

    def test_steep_noisy_fit_is_inconclusive(self):
        """Test that a steep slope with a poor fit is inconclusive."""
        assert classify(_regression(8.0, 0.5), WavefrontParams()) == Verdict.INCONCLUSIVE

    def test_params_validation(self):
        """Test that neighbourhood sizes must be positive."""
        with pytest.raises(ValueError, match="positive"):
            WavefrontParams(delta=0.0)


class TestStencil:
    """Tests for the xi-disc stencil."""

    def test_one_dimensional_line(self):
        """Test that the 1D stencil spans the disc diameter."""
        stencil = xi_stencil((1.0,), 0.25, 17)
        assert stencil.shape == (17, 1)
        assert stencil[0, 0] == pytest.approx(0.75)
        assert stencil[-1, 0] == pytest.approx(1.25)

    def test_two_dimensional_rings(self):
        """Test that the 2D stencil is the center plus two rings."""
        stencil = xi_stencil((0.0, 1.0), 0.5, 17)
        assert stencil.shape == (17, 2)
        radii = np.linalg.norm(stencil - np.array([0.0, 1.0]), axis=1)
        assert sorted(set(np.round(radii, 12))) == [0.0, 0.25, 0.5]


class TestFiniteTests:
    """Tests for the Fourier and pseudodifferential point tests."""

    def test_fourier_inside(self, coherent_family):
        """Test that the centre of a coherent state is inside."""
        result = wf_finite_test(coherent_family, PhasePoint((0.0,), (1.0,)))
        assert result.verdict == Verdict.INSIDE
        assert result.regression.slope == pytest.approx(0.25, abs=0.1)

    def test_fourier_outside_in_frequency(self, coherent_family):
        """Test that the opposite frequency is outside."""
        result = wf_finite_test(coherent_family, PhasePoint((0.0,), (-1.0,)))
        assert result.verdict == Verdict.OUTSIDE

    def test_fourier_outside_in_position(self, coherent_family):
        """Test that a point away from the centre is outside."""
        result = wf_finite_test(coherent_family, PhasePoint((2.0,), (1.0,)))
        assert result.verdict == Verdict.OUTSIDE

    def test_psdo_agrees(self, coherent_family):
        """Test that the pseudodifferential test gives the same verdicts."""
        params = WavefrontParams(delta=1.0, xi_radius=0.5)
        assert wf_psdo_test(coherent_family, PhasePoint((0.0,), (1.0,)), params).verdict == Verdict.INSIDE
        assert wf_psdo_test(coherent_family, PhasePoint((0.0,), (-1.0,)), params).verdict == Verdict.OUTSIDE

    def test_cutoff_touching_boundary(self, coherent_family):
        """Test that a cutoff reaching the box edge raises WindowError."""
        with pytest.raises(WindowError, match="boundary"):
            wf_finite_test(coherent_family, PhasePoint((3.8,), (1.0,)))

    def test_disc_beyond_nyquist(self, coherent_family):
        """Test that a disc beyond the Nyquist limit at the smallest h raises WindowError."""
        with pytest.raises(WindowError, match="Nyquist"):
            wf_finite_test(coherent_family, PhasePoint((0.0,), (1.5,)))

    def test_verdict_stable_under_halving(self, coherent_family):
        """Test that the verdict at the centre survives halving delta."""
        assert verdict_stability(coherent_family, PhasePoint((0.0,), (1.0,)), WavefrontParams(delta=1.0))


class TestScan:
    """Tests for wf_scan and its report."""

    def test_scan_keeps_probe_order(self, coherent_family):
        """Test that results follow the probe order and only the centre is inside."""
        probes = probe_grid([-1.0, 0.0, 1.0], [-1.0, 1.0])
        report = wf_scan(coherent_family, probes)
        assert [r.point for r in report.results] == probes
        assert report.inside_points() == [PhasePoint((0.0,), (1.0,))]
        assert report.verdict_at(PhasePoint((1.0,), (1.0,))) == Verdict.OUTSIDE

    def test_unprobed_point(self, coherent_family):
        """Test that asking about an unprobed point raises KeyError."""
        report = wf_scan(coherent_family, [PhasePoint((0.0,), (1.0,))])
        with pytest.raises(KeyError):
            report.verdict_at(PhasePoint((0.5,), (1.0,)))

    def test_report_frame(self, coherent_family):
        """Test the report table layout."""
        params = WavefrontParams(delta=1.0, xi_radius=0.5)
        frame = wf_scan(coherent_family, [PhasePoint((0.0,), (1.0,))], params, method="psdo").to_frame()
        assert list(frame.columns) == ["x", "xi", "kind", "slope", "r2", "floor_hit", "verdict", "delta", "window"]
        assert frame.loc[0, "verdict"] == "inside"
        assert frame.loc[0, "window"].startswith("|xi| <= ")

    def test_full_coherent_scan(self):
        """Test that an 11 x 11 scan around a coherent state finds exactly its centre cell."""
        grid = make_grid(1, (-8.0,), (8.0,), (65536,))
        family = HFamily.from_builder(grid, geometric_sweep(4, 10), lambda g, h: coherent_state(g, h, 0.0, 1.0))
        points = probe_grid(np.linspace(-5.0, 5.0, 11), np.linspace(-4.0, 6.0, 11))

        report = wf_scan(family, points)

        assert len(report.results) == 121
        assert report.inside_points() == [PhasePoint((0.0,), (1.0,))]


class TestInfinitePoints:
    """Tests for infinite points on a chirp escaping every compact frequency set."""

    @pytest.fixture(scope="class")
    def chirp_family(self):
        """bump(x) exp(i x / h^2) on [-2, 2] over h = 2^-3 .. 2^-6."""
        grid = make_grid(1, (-2.0,), (2.0,), (32768,))
        return HFamily.from_builder(grid, geometric_sweep(3, 6), chirp_escape_state)

    def test_escape_direction_inside(self, chirp_family):
        """Test that the positive direction over the bump is inside."""
        result = wf_infinite_test(chirp_family, PhasePoint((0.0,), (1.0,), kind="infinite"))
        assert result.verdict == Verdict.INSIDE

    def test_opposite_direction_outside(self, chirp_family):
        """Test that the negative direction is outside."""
        result = wf_infinite_test(chirp_family, PhasePoint((0.0,), (-1.0,), kind="infinite"))
        assert result.verdict == Verdict.OUTSIDE

    def test_finite_points_outside(self, chirp_family):
        """Test that the escaping chirp has no finite wavefront points over the bump."""
        params = WavefrontParams(xi_radius=0.25)
        assert wf_finite_test(chirp_family, PhasePoint((0.0,), (1.0,)), params).verdict == Verdict.OUTSIDE


class TestTemperedness:
    """Tests for temperedness_check."""

    def test_coherent_state_is_tempered(self, coherent_family):
        """Test that coherent states have bounded Sobolev norms."""
        report = temperedness_check(coherent_family, [0.0, 1.0, 2.0])
        assert report.tempered
        assert all(abs(k) < 0.3 for k in report.growth_orders)
        assert list(report.to_frame().columns) == ["m", "k_m", "r2", "tempered"]

    @pytest.fixture(scope="class")
    def bump_grid(self):
        """A 1D grid on [-4, 4] for bump families."""
        return make_grid(1, (-4.0,), (4.0,), (1024,))

    def test_zero_family_is_tempered(self, bump_grid):
        """Test that a family below the floor is tempered with k_m = -inf."""
        zero = HFamily.from_builder(
            bump_grid, geometric_sweep(4, 8), lambda g, h: np.zeros(g.shape, dtype=complex)
        )
        report = temperedness_check(zero, [0.0, 1.0])
        assert report.tempered
        assert report.growth_orders == (-math.inf, -math.inf)
        assert report.to_frame()["tempered"].tolist() == [True, True]

    def test_polynomial_growth_order(self, bump_grid):
        """Test that h^-3 times a bump grows with order 3."""
        family = HFamily.from_builder(
            bump_grid,
            geometric_sweep(4, 8),
            lambda g, h: h**-3 * bump_values(g.mesh(), (0.0,), 1.0).astype(complex),
        )
        report = temperedness_check(family, [0.0, 1.0])
        assert report.tempered
        assert report.growth_orders[0] == pytest.approx(3.0, abs=0.05)
        assert report.growth_orders[1] == pytest.approx(3.0, abs=0.05)

    def test_exponential_growth_is_not_tempered(self, bump_grid):
        """Test that exp(1/h) times a bump fails the log-linear fit."""
        family = HFamily.from_builder(
            bump_grid,
            geometric_sweep(3, 8),
            lambda g, h: math.exp(1.0 / h) * bump_values(g.mesh(), (0.0,), 1.0).astype(complex),
        )
        report = temperedness_check(family, [0.0])
        assert not report.tempered
        assert report.regressions[0].r_squared < 0.9


class TestKernelCalculus:
    """Tests for tensor products, kernel application and composition."""

    @pytest.fixture
    def families(self):
        """Three small coherent families on a shared sweep."""
        grid = make_grid(1, (-4.0,), (4.0,), (64,))
        hs = (0.5, 0.25, 0.125)
        return [
            HFamily.from_builder(grid, hs, lambda g, h, c=c: coherent_state(g, h, c, 0.5))
            for c in (-0.5, 0.0, 0.5)
        ]

    def test_tensor(self, families):
        """Test that the tensor product is the outer product per h."""
        u, v, _ = families
        uv = tensor(u, v)
        assert uv.grid.shape == (64, 64)
        assert np.allclose(uv[1].values, np.outer(u[1].values, v[1].values))

    def test_kernel_apply_of_tensor(self, families):
        """Test that (u x v) applied to w is u times the pairing of v and w."""
        u, v, w = families
        applied = kernel_apply(tensor(u, v), w)
        for out, a, b, c in zip(applied, u, v, w):
            assert np.allclose(out.values, a.values * pair(b, c))

    def test_kernel_compose_of_tensors(self, families):
        """Test that (u x v) o (v x w) is pair(v, v) u x w."""
        u, v, w = families
        composed = kernel_compose(tensor(u, v), tensor(v, w))
        for out, a, b, c in zip(composed, u, v, w):
            assert np.allclose(out.values, pair(b, b) * np.outer(a.values, c.values))

    def test_tensor_rejects_2d(self, families):
        """Test that tensor only combines 1D families."""
        u, v, _ = families
        with pytest.raises(ValueError, match="1D"):
            tensor(tensor(u, v), u)


class TestPairing:
    """Tests for disjoint_pairing_test."""

    @pytest.fixture
    def grid(self):
        """A grid on [-4, 4] for h down to 2^-7."""
        return make_grid(1, (-4.0,), (4.0,), (1024,))

    def test_disjoint_wavefronts_decay(self, grid):
        """Test that two states at (0, 1) pair to O(h^infinity)."""
        hs = geometric_sweep(4, 7)
        u = HFamily.from_builder(grid, hs, lambda g, h: coherent_state(g, h, 0.0, 1.0))
        regression = disjoint_pairing_test(u, u)
        assert regression.floor_hit or regression.slope >= 6

    def test_opposite_frequencies_do_not_decay(self, grid):
        """Test that states at (0, 1) and (0, -1) pair to a constant."""
        hs = geometric_sweep(4, 7)
        u = HFamily.from_builder(grid, hs, lambda g, h: coherent_state(g, h, 0.0, 1.0))
        v = HFamily.from_builder(grid, hs, lambda g, h: coherent_state(g, h, 0.0, -1.0))
        regression = disjoint_pairing_test(u, v)
        assert regression.slope == pytest.approx(0.0, abs=0.05)
        assert not regression.floor_hit


class TestOperatorWavefront:
    """Tests for op_wavefront."""

    A = OperatorSpec.from_expr(bump([X], [0.0], 1.0) * bump([XI], [1.0], 0.5))
    GRID = make_grid(1, (-4.0,), (4.0,), (1024,))

    def test_inside_and_outside(self):
        """Test that the symbol support is inside and points away from it are outside."""
        probes = [PhasePoint((0.0,), (1.0,)), PhasePoint((2.0,), (1.0,)), PhasePoint((0.0,), (-1.0,))]
        report = op_wavefront(self.A, probes, geometric_sweep(4, 8), self.GRID)
        assert [r.verdict for r in report.results] == [Verdict.INSIDE, Verdict.OUTSIDE, Verdict.OUTSIDE]

    def test_probe_outside_grid(self):
        """Test that probes outside the box are rejected."""
        with pytest.raises(WindowError, match="outside the grid box"):
            op_wavefront(self.A, [PhasePoint((10.0,), (1.0,))], geometric_sweep(4, 8), self.GRID)
