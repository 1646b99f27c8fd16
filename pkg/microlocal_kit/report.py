"""Report emission: CSV tables with a provenance header and a JSON run summary.

Every CSV starts with ``# key=value`` lines recording the command, grid, sweep
and every threshold in effect, so a table is self-describing. Numbers are
written with a fixed format so the same scenario gives byte-identical files.
"""

from __future__ import annotations

import json
import logging
import math
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from . import __version__

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.12g"


def _plain(value: Any) -> Any:
    """Convert numpy scalars, tuples and non-finite floats into JSON-safe values."""
    if isinstance(value, Mapping):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple, np.ndarray)):
        return [_plain(v) for v in value]
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, (np.integer, int)):
        return int(value)
    if isinstance(value, (np.floating, float)):
        value = float(value)
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return value
    if isinstance(value, complex):
        return {"re": _plain(value.real), "im": _plain(value.imag)}
    return str(value) if value is not None else None


def _header_value(value: Any) -> str:
    value = _plain(value)
    if isinstance(value, (dict, list)):
        return json.dumps(value, sort_keys=True, separators=(",", ":"))
    return str(value)


def write_csv(frame: pd.DataFrame, path: str | Path, header: Mapping[str, Any] | None = None) -> Path:
    """Write ``frame`` preceded by ``# key=value`` provenance lines."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        fh.write(f"# microlocal_kit={__version__}\n")
        for key, value in (header or {}).items():
            fh.write(f"# {key}={_header_value(value)}\n")
        frame.to_csv(fh, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    logger.debug("Wrote %d rows to %s", len(frame), path)
    return path


def read_csv(path: str | Path) -> tuple[pd.DataFrame, dict[str, str]]:
    """Read a table written by ``write_csv``.

    Returns:
        (table, provenance header as strings).

    Raises:
        FileNotFoundError: If the file doesn't exist.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Report not found: {path}")
    header: dict[str, str] = {}
    with path.open(encoding="utf-8") as fh:
        for line in fh:
            if not line.startswith("# "):
                break
            key, _, value = line[2:].rstrip("\n").partition("=")
            header[key] = value
    return pd.read_csv(path, comment="#"), header


def write_summary(summary: Mapping[str, Any], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(_plain(summary), indent=2, sort_keys=True)
    path.write_text(text + "\n", encoding="utf-8")
    return path


@dataclass
class RunReport:
    """Outcome of one scenario run.

    Attributes:
        command: Subcommand that produced the report.
        passed: Verdict used for the exit code.
        header: Provenance written at the top of every table.
        tables: Named tables, one CSV each.
        summary: Scalars for the JSON summary (verdicts, slopes, windows).
        failures: Human-readable reasons when ``passed`` is False.
    """

    command: str
    passed: bool = True
    header: dict[str, Any] = field(default_factory=dict)
    tables: dict[str, pd.DataFrame] = field(default_factory=dict)
    summary: dict[str, Any] = field(default_factory=dict)
    failures: list[str] = field(default_factory=list)

    def fail(self, reason: str) -> None:
        self.passed = False
        self.failures.append(reason)
        logger.warning("Verdict failure: %s", reason)

    def expect(self, condition: bool, reason: str) -> None:
        if not condition:
            self.fail(reason)

    def write(self, out_dir: str | Path, prefix: str = "") -> list[Path]:
        """Write every table as ``<prefix>_<name>.csv`` and the summary as ``<prefix>_summary.json``."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        stem = f"{prefix}_" if prefix else ""
        written = [
            write_csv(frame, out_dir / f"{stem}{name}.csv", self.header)
            for name, frame in sorted(self.tables.items())
        ]
        summary = {
            "command": self.command,
            "passed": self.passed,
            "failures": self.failures,
            "header": self.header,
            **self.summary,
        }
        written.append(write_summary(summary, out_dir / f"{stem}summary.json"))
        return written
