"""Tests for CSV and JSON report emission."""

import json

import numpy as np
import pandas as pd
import pytest

from microlocal_kit import __version__
from microlocal_kit.report import RunReport, _plain, read_csv, write_csv


@pytest.fixture
def frame():
    """A small table with a float column that needs the fixed format."""
    return pd.DataFrame({"h": [0.5, 0.25], "slope": [1.0 / 3.0, np.nan], "verdict": ["inside", "outside"]})


class TestPlain:
    """Tests for JSON conversion of report values."""

    def test_non_finite_floats(self):
        """Test that nan and infinities become strings."""
        assert _plain([np.nan, np.inf, -np.inf, 1.5]) == ["nan", "inf", "-inf", 1.5]

    def test_numpy_scalars_and_tuples(self):
        """Test that numpy scalars and nested tuples become plain types."""
        value = _plain({"n": np.int64(3), "ok": np.bool_(True), "x": (np.float64(0.5), 2)})
        assert value == {"n": 3, "ok": True, "x": [0.5, 2]}
        assert type(value["n"]) is int

    def test_complex(self):
        """Test that complex numbers become re/im pairs."""
        assert _plain(1 - 2j) == {"re": 1.0, "im": -2.0}


class TestCsv:
    """Tests for write_csv and read_csv."""

    def test_header_lines(self, frame, tmp_path):
        """Test that provenance lines precede the table."""
        path = write_csv(frame, tmp_path / "scan.csv", {"command": "wf-scan", "grid_n_points": (512,)})
        lines = path.read_text().splitlines()

        assert lines[0] == f"# microlocal_kit={__version__}"
        assert lines[1] == "# command=wf-scan"
        assert lines[2] == "# grid_n_points=[512]"
        assert lines[3] == "h,slope,verdict"
        assert lines[4] == "0.5,0.333333333333,inside"

    def test_read_back(self, frame, tmp_path):
        """Test that read_csv returns the table and the header."""
        path = write_csv(frame, tmp_path / "scan.csv", {"command": "wf-scan"})
        table, header = read_csv(path)

        assert header == {"microlocal_kit": __version__, "command": "wf-scan"}
        assert list(table.columns) == ["h", "slope", "verdict"]
        assert table["slope"][0] == pytest.approx(1.0 / 3.0)
        assert np.isnan(table["slope"][1])

    def test_creates_directories(self, frame, tmp_path):
        """Test that missing parent directories are created."""
        path = write_csv(frame, tmp_path / "a" / "b" / "scan.csv")
        assert path.exists()

    def test_read_missing(self, tmp_path):
        """Test that FileNotFoundError is raised for a missing report."""
        with pytest.raises(FileNotFoundError):
            read_csv(tmp_path / "missing.csv")


class TestRunReport:
    """Tests for RunReport."""

    def test_expect_records_failures(self):
        """Test that a false expectation fails the report with its reason."""
        report = RunReport("pairing")
        report.expect(True, "never recorded")
        report.expect(False, "slope too small")

        assert not report.passed
        assert report.failures == ["slope too small"]

    def test_write_files(self, frame, tmp_path):
        """Test that every table and the summary are written with the prefix."""
        report = RunReport("wf-scan", header={"command": "wf-scan"}, tables={"scan": frame, "extra": frame})
        report.summary["slope"] = np.inf
        paths = report.write(tmp_path, "demo")

        assert sorted(p.name for p in paths) == ["demo_extra.csv", "demo_scan.csv", "demo_summary.json"]
        summary = json.loads((tmp_path / "demo_summary.json").read_text())
        assert summary["command"] == "wf-scan"
        assert summary["passed"] is True
        assert summary["slope"] == "inf"

    def test_write_is_deterministic(self, frame, tmp_path):
        """Test that the same report gives byte-identical files."""
        report = RunReport("wf-scan", header={"command": "wf-scan"}, tables={"scan": frame})
        first = [p.read_bytes() for p in report.write(tmp_path / "one", "demo")]
        second = [p.read_bytes() for p in report.write(tmp_path / "two", "demo")]
        assert first == second
