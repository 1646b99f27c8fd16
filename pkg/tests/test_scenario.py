"""Tests for scenario validation and object resolution."""

from pathlib import Path

import numpy as np
import pytest

from microlocal_kit.catalog import coherent_state
from microlocal_kit.data import save_family
from microlocal_kit.errors import ScenarioError
from microlocal_kit.fio import LagrangianChart
from microlocal_kit.hgrid import HFamily, SweepSpec, make_grid
from microlocal_kit.scenario import Scenario, load_scenario, validate
from microlocal_kit.symcalc import phase_space_vars

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"
X, XI = phase_space_vars(1)


def scenario(command="wf-scan", **sections):
    return Scenario.from_dict({"scenario": {"command": command}, **sections})


class TestValidation:
    """Tests for section and key checks."""

    def test_unknown_section(self):
        """Test that an unknown section is named."""
        with pytest.raises(ScenarioError, match=r"Unknown section \[plot\]"):
            validate({"plot": {"title": "x"}})

    def test_unknown_key(self):
        """Test that an unknown key is named with its section."""
        with pytest.raises(ScenarioError, match=r"Unknown key 'points' in section \[grid\]"):
            scenario(grid={"lo": -1.0, "points": 64})

    def test_unknown_key_in_egorov_state(self):
        """Test that inline egorov states are checked too."""
        with pytest.raises(ScenarioError, match=r"egorov.states\[0\]"):
            scenario("egorov", egorov={"states": [{"name": "coherent", "x0": 1.0}]})

    def test_section_must_be_table(self):
        """Test that a scalar where a table belongs is rejected."""
        with pytest.raises(ScenarioError, match="must be a table"):
            validate({"grid": 5})

    def test_missing_command(self):
        """Test that a scenario without a command is rejected."""
        with pytest.raises(ScenarioError, match="does not name a command"):
            Scenario.from_dict({"grid": {"lo": -1.0}})

    def test_command_mismatch(self):
        """Test that the file and the subcommand must agree."""
        with pytest.raises(ScenarioError, match="Scenario is a 'wf-scan' scenario, not 'oscint'"):
            Scenario.from_dict({"scenario": {"command": "wf-scan"}}, command="oscint")

    def test_unknown_command(self):
        """Test that an unknown command is rejected."""
        with pytest.raises(ScenarioError, match="Unknown command"):
            Scenario("plot")


class TestSettings:
    """Tests for grid, sweep, thresholds and overrides."""

    def test_defaults(self):
        """Test the default grid, sweep and output settings."""
        sc = scenario()
        grid = sc.grid()
        assert (grid.lo, grid.hi, grid.n_points) == ((-4.0,), (4.0,), (2048,))
        assert sc.sweep() == SweepSpec(4, 10)
        assert sc.name == "wf-scan"
        assert sc.prefix == "wf-scan"
        assert sc.output_dir == Path("out")

    def test_two_dimensional_sweep_default(self):
        """Test that 2D scenarios default to the shorter sweep."""
        sc = scenario(grid={"dim": 2, "n_points": [64, 128]})
        assert sc.sweep() == SweepSpec(4, 8)
        assert sc.grid().n_points == (64, 128)

    def test_grid_entry_count(self):
        """Test that a per-axis list must match the dimension."""
        with pytest.raises(ScenarioError, match="grid.lo needs 2 entries"):
            scenario(grid={"dim": 2, "lo": [-1.0, -1.0, -1.0]}).grid()

    def test_overrides(self):
        """Test that command-line flags replace file values."""
        sc = scenario(grid={"n_points": 512}, thresholds={"delta": 0.5})
        sc = sc.with_overrides(sweep=SweepSpec(5, 6), n_points=1024, out="reports", threshold=4.0, delta=0.25)
        params = sc.wavefront_params()
        assert sc.grid().n_points == (1024,)
        assert sc.sweep().h_values == (2.0**-5, 2.0**-6)
        assert sc.output_dir == Path("reports")
        assert (params.threshold, params.delta) == (4.0, 0.25)

    def test_overrides_keep_original(self):
        """Test that overriding returns a new scenario."""
        sc = scenario(grid={"n_points": 512})
        sc.with_overrides(n_points=1024)
        assert sc.grid().n_points == (512,)

    def test_header_records_thresholds(self):
        """Test that the header carries every threshold in effect."""
        header = scenario(thresholds={"threshold": 5.0}).header()
        assert header["command"] == "wf-scan"
        assert header["sweep"] == "4:10"
        assert header["threshold_threshold"] == 5.0
        assert header["order_tolerance"] == pytest.approx(0.15)
        assert "threshold_delta" in header


class TestResolution:
    """Tests for building states, operators, phases and charts."""

    def test_catalog_state(self):
        """Test that a catalog state is built for every h in the sweep."""
        sc = scenario(
            grid={"lo": -4.0, "hi": 4.0, "n_points": 512},
            sweep={"k_min": 4, "k_max": 5},
            state={"name": "coherent", "params": {"x0": 0.5, "xi0": 1.0}},
        )
        family = sc.state()
        assert family.h_values == (2.0**-4, 2.0**-5)
        expected = coherent_state(family.grid, 2.0**-5, 0.5, 1.0)
        assert np.allclose(family[1].values, expected.values)

    def test_inline_wkb_state(self):
        """Test that b and S build a WKB state."""
        sc = scenario(
            grid={"lo": -2.0, "hi": 2.0, "n_points": 256},
            sweep={"k_min": 3, "k_max": 3},
            state={"b": "(bump x 0 1)", "S": "(mul 0.5 (pow x 2))"},
        )
        u = sc.state()[0]
        (x,) = u.grid.axes()
        assert np.allclose(np.angle(u.values[128]), 0.0)
        assert np.abs(u.values[np.abs(x) >= 1]).max() == 0.0

    def test_saved_family_relative_path(self, tmp_path):
        """Test that a path is read relative to the scenario file."""
        grid = make_grid(1, (-3.0,), (3.0,), (64,))
        family = HFamily.from_builder(grid, (0.5, 0.25), coherent_state)
        save_family(family, tmp_path / "u.mlk")
        path = tmp_path / "scan.toml"
        path.write_text('[scenario]\ncommand = "wf-scan"\n\n[state]\npath = "u.mlk"\n')

        loaded = load_scenario(path).state()
        assert loaded.h_values == (0.5, 0.25)

    def test_symbol_kernel_state(self):
        """Test that the kernel of the [symbol] operator can serve as a state."""
        sc = scenario(
            "order-test",
            grid={"lo": -2.0, "hi": 2.0, "n_points": 64},
            sweep={"k_min": 3, "k_max": 3},
            symbol={"expr": "(mul (bump x 0 1) (bump xi 0.5 1))"},
            state={"source": "symbol_kernel"},
        )
        assert sc.state().grid.shape == (64, 64)

    def test_unknown_state_source(self):
        """Test that an unknown source is rejected."""
        sc = scenario(state={"source": "random"})
        with pytest.raises(ScenarioError, match="Unknown state source"):
            sc.state()

    def test_state_without_origin(self):
        """Test that a state table needs a name, b, path or source."""
        sc = scenario(state={"params": {}})
        with pytest.raises(ScenarioError, match="needs one of"):
            sc.state()

    def test_state_of_wrong_kind(self):
        """Test that a phase name cannot be used as a state."""
        sc = scenario(state={"name": "fold"})
        with pytest.raises(ScenarioError, match="is a phase, expected a state"):
            sc.state()

    def test_missing_section(self):
        """Test that a required section is named."""
        with pytest.raises(ScenarioError, match=r"needs a \[state\] section"):
            scenario().state()

    def test_operator_with_subprincipal(self):
        """Test that expr and expr1 become the h^0 and h^1 terms."""
        sc = scenario("op-apply", symbol={"expr": "(mul x xi)", "expr1": "x"})
        A = sc.operator()
        assert A.symbol.term(0).expr == X * XI
        assert A.symbol.term(1).expr == X

    def test_catalog_phase_with_params(self):
        """Test that catalog phase parameters reach the builder."""
        sc = scenario("oscint", phase={"name": "quadratic", "params": {"box": [[-5.0, 5.0]]}})
        assert sc.phase().box == ((-5.0, 5.0),)

    def test_inline_phase_needs_box(self):
        """Test that inline phase text needs a box."""
        sc = scenario("oscint", phase={"text": "variables: x 1 theta 1\n(mul x theta)"})
        with pytest.raises(ScenarioError, match="text and box"):
            sc.phase()

    def test_default_amplitude(self):
        """Test that a missing [amplitude] means a = 1."""
        sc = scenario("oscint", phase={"name": "quadratic"})
        assert sc.amplitude(sc.phase()).expr == 1

    def test_chart_kinds(self):
        """Test the phase and explicit-H chart kinds."""
        phase = scenario("order-test", phase={"name": "wkb_phase"}, chart={"kind": "phase"})
        assert isinstance(phase.chart(), LagrangianChart)
        explicit = scenario("order-test", chart={"kind": "H", "H": "(mul 0.5 (pow xi 2))", "window": [[-1.0, 1.0]]})
        assert isinstance(explicit.chart(), LagrangianChart)

    def test_unknown_chart_kind(self):
        """Test that an unknown chart kind is rejected."""
        with pytest.raises(ScenarioError, match="Unknown chart kind"):
            scenario("order-test", chart={"kind": "atlas"}).chart()

    def test_chart_settings_defaults(self):
        """Test the order-test defaults."""
        settings = scenario("order-test").chart_settings()
        assert settings == {"r": 0.0, "N_max": 2, "variants": 8, "seed": 0, "trailing_box": None}

    def test_identity_fio_by_default(self):
        """Test that a scenario without [kernel] uses the identity."""
        assert scenario("egorov").fio().kind == "identity"


class TestProbes:
    """Tests for probe point resolution."""

    def test_ranges(self):
        """Test that ranges expand to a product of probe points."""
        sc = scenario(probes={"x_range": [-1.0, 1.0, 3], "xi": [0.0, 1.0]})
        points, method = sc.probes()
        assert method == "fourier"
        assert len(points) == 6
        assert points[-1].x == (1.0,)
        assert points[-1].xi == (1.0,)

    def test_explicit_points(self):
        """Test that explicit [x, xi] pairs are used in order."""
        sc = scenario(probes={"points": [[0.0, 1.0], [[0.0, 0.5], [1.0, 0.0]]], "method": "both"})
        points, method = sc.probes()
        assert method == "both"
        assert points[1].dim == 2

    def test_unknown_method(self):
        """Test that an unknown probe method is rejected."""
        with pytest.raises(ScenarioError, match="Unknown probe method"):
            scenario(probes={"x": [0.0], "xi": [1.0], "method": "wavelet"}).probes()

    def test_missing_axis(self):
        """Test that both axes are required."""
        with pytest.raises(ScenarioError, match="needs xi or xi_range"):
            scenario(probes={"x": [0.0]}).probes()


class TestLoadScenario:
    """Tests for load_scenario."""

    def test_file_not_found(self, tmp_path):
        """Test that FileNotFoundError is raised for a missing file."""
        with pytest.raises(FileNotFoundError):
            load_scenario(tmp_path / "missing.toml")

    def test_syntax_error(self, tmp_path):
        """Test that TOML syntax errors become ScenarioError."""
        path = tmp_path / "bad.toml"
        path.write_text("[scenario\ncommand = 1\n")
        with pytest.raises(ScenarioError, match="bad.toml"):
            load_scenario(path)

    def test_name_from_file(self, tmp_path):
        """Test that the file stem names an unnamed scenario."""
        path = tmp_path / "my_scan.toml"
        path.write_text('[scenario]\ncommand = "pairing"\n')
        assert load_scenario(path).name == "my_scan"

    @pytest.mark.parametrize("path", sorted(SCENARIOS.glob("*.toml")), ids=lambda p: p.stem)
    def test_shipped_scenarios_validate(self, path):
        """Test that every shipped scenario file validates."""
        sc = load_scenario(path)
        assert sc.name == path.stem
