"""Tests for the invariant suite."""

import numpy as np
import pytest

from microlocal_kit.properties import CHECKS, PropertyCheck, PropertySuite, run_suite

FAST_CHECKS = [name for name in CHECKS if name != "sharp_order"]


class TestRunSuite:
    """Tests for run_suite."""

    @pytest.mark.parametrize("name", FAST_CHECKS)
    def test_check_passes(self, name):
        """Test that each check holds within its tolerance."""
        suite = run_suite([name])
        (check,) = suite.checks
        assert check.passed, f"{name}: {check.value:.3g} > {check.tolerance:.3g}"

    def test_sharp_order(self):
        """Test that the composition remainder decays like h^2."""
        suite = run_suite(["sharp_order"])
        assert suite.all_passed

    def test_unknown_check(self):
        """Test that an unknown name raises ValueError."""
        with pytest.raises(ValueError, match="Unknown property checks"):
            run_suite(["round_trip", "associativity"])

    def test_seeded_runs_agree(self):
        """Test that the same seed gives the same measured values."""
        first = run_suite(["linearity", "commutator"], seed=3)
        second = run_suite(["linearity", "commutator"], seed=3)
        assert [c.value for c in first.checks] == [c.value for c in second.checks]

    def test_order_follows_request(self):
        """Test that checks run in the requested order."""
        suite = run_suite(["plancherel", "round_trip"])
        assert [c.name for c in suite.checks] == ["plancherel", "round_trip"]


class TestPropertySuite:
    """Tests for PropertySuite."""

    @pytest.fixture
    def suite(self):
        """A suite with one passing and one failing check."""
        return PropertySuite(
            (
                PropertyCheck("round_trip", 1e-14, 1e-12, True),
                PropertyCheck("identity", 1e-3, 1e-10, False, "too large"),
            )
        )

    def test_failures(self, suite):
        """Test that failures lists the failing names."""
        assert not suite.all_passed
        assert suite.failures == ["identity"]

    def test_frame(self, suite):
        """Test the table layout."""
        frame = suite.to_frame()
        assert list(frame.columns) == ["check", "value", "tolerance", "passed", "detail"]
        assert frame["passed"].tolist() == [True, False]
        assert np.isclose(frame["value"][1], 1e-3)
