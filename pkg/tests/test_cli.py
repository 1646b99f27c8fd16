"""Tests for the mlk command line."""

import json
from pathlib import Path

import pytest

from microlocal_kit.cli import EXIT_ERROR, EXIT_OK, EXIT_VERDICT, main
from microlocal_kit.report import read_csv

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"

WF_SCAN = """
[scenario]
command = "wf-scan"
name = "scan"

[grid]
lo = -4.0
hi = 4.0
n_points = 1024

[sweep]
k_min = 4
k_max = 8

[state]
name = "coherent"
params = { x0 = 0.0, xi0 = 1.0 }

[probes]
x = [-1.0, 0.0, 1.0]
xi = [-1.0, 1.0]

[expect]
inside = [[0.0, 1.0]]
"""

PAIRING = """
[scenario]
command = "pairing"
name = "pairing"

[grid]
lo = -4.0
hi = 4.0
n_points = 1024

[sweep]
k_min = 4
k_max = 7

[state]
name = "coherent"
params = { xi0 = 1.0 }

[state2]
name = "coherent"
params = { xi0 = -1.0 }

[expect]
min_slope = 6.0
"""

OP_APPLY = """
[scenario]
command = "op-apply"

[grid]
n_points = 512

[sweep]
k_min = 4
k_max = 5

[state]
name = "coherent"
params = { xi0 = 1.0 }

[symbol]
expr = "(mul x zeta)"
"""


def write(tmp_path, text, name="scenario.toml"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


class TestMain:
    """Tests for main and its exit codes."""

    def test_wf_scan_passes(self, tmp_path, capsys):
        """Test that a met expectation exits 0 and writes the scan table."""
        code = main(["wf-scan", write(tmp_path, WF_SCAN), "--out", str(tmp_path / "out")])

        assert code == EXIT_OK
        assert "wf-scan scan: ok" in capsys.readouterr().out
        table, header = read_csv(tmp_path / "out" / "scan_scan_fourier.csv")
        assert (table["verdict"] == "inside").sum() == 1
        assert header["command"] == "wf-scan"
        assert header["sweep"] == "4:8"

    def test_verdict_failure(self, tmp_path, capsys):
        """Test that a failed expectation exits 2 and still writes reports."""
        code = main(["pairing", write(tmp_path, PAIRING), "--out", str(tmp_path)])

        assert code == EXIT_VERDICT
        assert "FAIL: pairing slope" in capsys.readouterr().err
        table, _ = read_csv(tmp_path / "pairing_pairing.csv")
        assert len(table) == 4
        summary = json.loads((tmp_path / "pairing_summary.json").read_text())
        assert summary["passed"] is False

    def test_malformed_expression(self, tmp_path, capsys):
        """Test that a parse error exits 1 and names the token."""
        code = main(["op-apply", write(tmp_path, OP_APPLY), "--out", str(tmp_path)])

        assert code == EXIT_ERROR
        assert "'zeta'" in capsys.readouterr().err

    def test_missing_scenario(self, tmp_path, capsys):
        """Test that a missing scenario file exits 1."""
        code = main(["oscint", str(tmp_path / "missing.toml")])

        assert code == EXIT_ERROR
        assert "not found" in capsys.readouterr().err

    def test_command_mismatch(self, tmp_path, capsys):
        """Test that running a scenario under another command exits 1."""
        code = main(["oscint", write(tmp_path, PAIRING)])

        assert code == EXIT_ERROR
        assert "not 'oscint'" in capsys.readouterr().err

    def test_sweep_override(self, tmp_path):
        """Test that --sweep replaces the file sweep."""
        code = main(["pairing", write(tmp_path, PAIRING), "--sweep", "4:5", "--out", str(tmp_path)])

        assert code == EXIT_VERDICT
        _, header = read_csv(tmp_path / "pairing_pairing.csv")
        assert header["sweep"] == "4:5"

    def test_bad_sweep_flag(self, tmp_path, capsys):
        """Test that a malformed --sweep exits 1."""
        code = main(["pairing", write(tmp_path, PAIRING), "--sweep", "four"])

        assert code == EXIT_ERROR
        assert "k_min:k_max" in capsys.readouterr().err

    def test_fresnel_quadrature(self, tmp_path):
        """Test the shipped Fresnel quadrature scenario."""
        code = main(["oscint", str(SCENARIOS / "fresnel_quadrature.toml"), "--out", str(tmp_path)])

        assert code == EXIT_OK
        table, _ = read_csv(tmp_path / "fresnel_quadrature_values.csv")
        assert table["rel_error"].max() < 1e-8

    def test_egorov_fourier(self, tmp_path):
        """Test that b0 gains one order and b0 + h b1 gains two on the shipped Fourier scenario."""
        code = main(["egorov", str(SCENARIOS / "egorov_fourier.toml"), "--out", str(tmp_path)])

        assert code == EXIT_OK
        summary = json.loads((tmp_path / "egorov_fourier_summary.json").read_text())
        assert 0.8 <= summary["gains"]["b0"] <= 1.5
        assert summary["gains"]["b1"] >= 1.7

    def test_egorov_negative_control(self, tmp_path, capsys):
        """Test that the flipped transport exits 2 and still writes the residual table."""
        code = main(["egorov", str(SCENARIOS / "egorov_negative.toml"), "--out", str(tmp_path)])

        assert code == EXIT_VERDICT
        assert "negative: gain" in capsys.readouterr().err
        table, header = read_csv(tmp_path / "egorov_negative_residuals.csv")
        assert list(table.columns) == ["h", "baseline", "residual_negative"]
        assert len(table) == 4
        assert header["command"] == "egorov"
        summary = json.loads((tmp_path / "egorov_negative_summary.json").read_text())
        assert summary["gains"]["negative"] < 0.3

    def test_catalog(self, tmp_path, capsys):
        """Test that the catalog is printed and written on request."""
        code = main(["catalog", "--out", str(tmp_path)])

        assert code == EXIT_OK
        assert "fourier_kernel" in capsys.readouterr().out
        table, header = read_csv(tmp_path / "catalog.csv")
        assert "coherent" in set(table["name"])
        assert header["command"] == "catalog"

    def test_version(self, capsys):
        """Test that --version prints the package version and exits."""
        with pytest.raises(SystemExit) as info:
            main(["--version"])
        assert info.value.code == 0
        assert "mlk 0.1.0" in capsys.readouterr().out
