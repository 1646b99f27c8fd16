"""TOML scenario files: validation, command-line overrides and object resolution.

A scenario names one command and the objects it runs on. States, symbols,
phases, kernels and relations are either catalog names with parameters or
inline prefix expressions. Every section is checked against ``ALLOWED_KEYS``
before anything is built, so a typo fails fast with the offending key.

Example::

    [scenario]
    command = "wf-scan"

    [grid]
    lo = -6.0
    hi = 6.0
    n_points = 8192

    [state]
    name = "coherent"
    params = { x0 = 0.0, xi0 = 1.0 }
"""

from __future__ import annotations

import copy
import logging
import tomllib
from collections.abc import Mapping
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np
import sympy as sp

from .catalog import lookup
from .data import load_family, load_family_csv
from .errors import ScenarioError
from .fio import CanonicalRelation, FIOSpec, LagrangianChart
from .hgrid import Grid, HFamily, SweepSpec, make_grid, parallel_map
from .operators import kernel
from .oscint import GeneratingForm, PhasePresentation, generating_chart, lambda_phi
from .symcalc import (
    HSymbol,
    OperatorSpec,
    SymbolExpr,
    frequency_vars,
    parse_expr,
    parse_symbol,
    phase_space_vars,
)
from .wavefront import PhasePoint, WavefrontParams

logger = logging.getLogger(__name__)

COMMANDS = ("wf-scan", "op-apply", "oscint", "stat-phase", "order-test", "egorov", "pairing", "props")

_STATE_KEYS = frozenset({"name", "params", "b", "S", "path", "source"})

ALLOWED_KEYS: Mapping[str, frozenset[str]] = {
    "scenario": frozenset({"command", "name", "description"}),
    "grid": frozenset({"dim", "lo", "hi", "n_points"}),
    "sweep": frozenset({"k_min", "k_max"}),
    "output": frozenset({"dir", "prefix", "family"}),
    "thresholds": frozenset(
        {f.name for f in fields(WavefrontParams)} | {"slope_tolerance", "order_tolerance"}
    ),
    "state": _STATE_KEYS,
    "state2": _STATE_KEYS,
    "probes": frozenset({"x", "xi", "x_range", "xi_range", "kind", "method", "points"}),
    "symbol": frozenset({"name", "params", "expr", "expr1", "dim"}),
    "phase": frozenset({"name", "params", "text", "box"}),
    "amplitude": frozenset({"expr"}),
    "stationary": frozenset({"orders", "seeds"}),
    "chart": frozenset(
        {"kind", "window", "H", "resolution", "r", "N_max", "variants", "seed", "trailing_box"}
    ),
    "relation": frozenset({"name", "params"}),
    "kernel": frozenset({"name", "params", "n_theta"}),
    "egorov": frozenset({"transports", "states", "correction_box", "resolution", "sample"}),
    "props": frozenset({"checks", "seed"}),
    "expect": frozenset(
        {
            "inside",
            "near_lagrangian",
            "consistent_methods",
            "min_slope",
            "max_slope",
            "min_gain",
            "min_gain_b1",
            "max_gain",
            "max_gain_b0",
            "value",
            "rtol",
            "kernel_norm_rtol",
        }
    ),
}


def _check_keys(section: str, table: Mapping[str, Any], allowed: frozenset[str]) -> None:
    unknown = sorted(set(table) - allowed)
    if unknown:
        raise ScenarioError(f"Unknown key {unknown[0]!r} in section [{section}]")


def validate(data: Mapping[str, Any]) -> None:
    """Reject unknown sections and keys.

    Raises:
        ScenarioError: Naming the first unknown section or key.
    """
    for section, table in data.items():
        if section not in ALLOWED_KEYS:
            raise ScenarioError(f"Unknown section [{section}]")
        if not isinstance(table, Mapping):
            raise ScenarioError(f"[{section}] must be a table")
        _check_keys(section, table, ALLOWED_KEYS[section])
    for index, state in enumerate(data.get("egorov", {}).get("states", [])):
        if not isinstance(state, Mapping):
            raise ScenarioError(f"egorov.states[{index}] must be a table")
        _check_keys(f"egorov.states[{index}]", state, _STATE_KEYS)


def _as_tuple(value: Any, dim: int, key: str, kind=float) -> tuple:
    values = tuple(kind(v) for v in np.atleast_1d(value))
    if len(values) == 1:
        return values * dim
    if len(values) != dim:
        raise ScenarioError(f"{key} needs {dim} entries, got {len(values)}")
    return values


def _box(value: Any, key: str) -> tuple[tuple[float, float], ...]:
    try:
        return tuple((float(lo), float(hi)) for lo, hi in value)
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"{key} must be a list of [lo, hi] pairs") from exc


def _catalog_params(table: Mapping[str, Any]) -> dict[str, Any]:
    params = table.get("params", {})
    if not isinstance(params, Mapping):
        raise ScenarioError("params must be a table")
    return dict(params)


@dataclass(frozen=True)
class Scenario:
    """A validated scenario: one command plus its sections."""

    command: str
    sections: Mapping[str, Mapping[str, Any]] = field(default_factory=dict)
    source: Path | None = None

    def __post_init__(self) -> None:
        if self.command not in COMMANDS:
            raise ScenarioError(f"Unknown command {self.command!r}; expected one of {', '.join(COMMANDS)}")
        validate(self.sections)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], command: str | None = None, source: Path | None = None) -> Scenario:
        data = copy.deepcopy(dict(data))
        declared = data.get("scenario", {}).get("command")
        if command is not None and declared is not None and declared != command:
            raise ScenarioError(f"Scenario is a {declared!r} scenario, not {command!r}")
        resolved = command or declared
        if resolved is None:
            raise ScenarioError("Scenario does not name a command ([scenario] command = ...)")
        return cls(resolved, data, source)

    @property
    def name(self) -> str:
        fallback = self.source.stem if self.source else self.command
        return str(self.section("scenario").get("name", fallback))

    def section(self, name: str) -> dict[str, Any]:
        return dict(self.sections.get(name, {}))

    def require(self, name: str) -> dict[str, Any]:
        if name not in self.sections:
            raise ScenarioError(f"The {self.command} command needs a [{name}] section")
        return self.section(name)

    def has(self, name: str) -> bool:
        return name in self.sections

    def with_overrides(
        self,
        sweep: SweepSpec | None = None,
        n_points: int | None = None,
        out: str | Path | None = None,
        threshold: float | None = None,
        delta: float | None = None,
    ) -> Scenario:
        """Apply command-line flags on top of the file."""
        data = copy.deepcopy({k: dict(v) for k, v in self.sections.items()})
        if sweep is not None:
            data["sweep"] = {"k_min": sweep.k_min, "k_max": sweep.k_max}
        if n_points is not None:
            data.setdefault("grid", {})["n_points"] = int(n_points)
        if out is not None:
            data.setdefault("output", {})["dir"] = str(out)
        if threshold is not None:
            data.setdefault("thresholds", {})["threshold"] = float(threshold)
        if delta is not None:
            data.setdefault("thresholds", {})["delta"] = float(delta)
        return Scenario(self.command, data, self.source)

    # -- numerical settings --------------------------------------------------

    def grid(self) -> Grid:
        table = self.section("grid")
        dim = int(table.get("dim", 1))
        return make_grid(
            dim,
            _as_tuple(table.get("lo", -4.0), dim, "grid.lo"),
            _as_tuple(table.get("hi", 4.0), dim, "grid.hi"),
            _as_tuple(table.get("n_points", 2048), dim, "grid.n_points", int),
        )

    def sweep(self) -> SweepSpec:
        table = self.section("sweep")
        default = SweepSpec.default_for(int(self.section("grid").get("dim", 1)))
        return SweepSpec(int(table.get("k_min", default.k_min)), int(table.get("k_max", default.k_max)))

    def wavefront_params(self) -> WavefrontParams:
        table = self.section("thresholds")
        names = {f.name for f in fields(WavefrontParams)}
        return WavefrontParams(**{k: v for k, v in table.items() if k in names})

    def threshold(self, key: str, default: float) -> float:
        return float(self.section("thresholds").get(key, default))

    @property
    def output_dir(self) -> Path:
        return Path(self.section("output").get("dir", "out"))

    @property
    def prefix(self) -> str:
        return str(self.section("output").get("prefix", self.name))

    @property
    def expectations(self) -> dict[str, Any]:
        return self.section("expect")

    def header(self) -> dict[str, Any]:
        """Provenance for report headers: command, grid, sweep and all thresholds in effect."""
        grid, sweep = self.grid(), self.sweep()
        params = self.wavefront_params()
        return {
            "command": self.command,
            "scenario": self.name,
            "grid_lo": grid.lo,
            "grid_hi": grid.hi,
            "grid_n_points": grid.n_points,
            "sweep": f"{sweep.k_min}:{sweep.k_max}",
            **{f"threshold_{f.name}": getattr(params, f.name) for f in fields(WavefrontParams)},
            "slope_tolerance": self.threshold("slope_tolerance", 0.2),
            "order_tolerance": self.threshold("order_tolerance", 0.15),
        }

    # -- object resolution ---------------------------------------------------

    def state(self, table: Mapping[str, Any] | str = "state", grid: Grid | None = None) -> HFamily:
        """Build a state family from a section name or an inline state table.

        ``name`` selects a catalog state, ``b`` (and optionally ``S``) an inline
        WKB state, ``path`` a saved family (MLK1 or CSV) and
        ``source = "symbol_kernel"`` the kernel of the [symbol] operator.
        """
        label = table if isinstance(table, str) else "state"
        if isinstance(table, str):
            table = self.require(table)
        grid = grid or self.grid()
        h_values = self.sweep().h_values
        if "path" in table:
            path = Path(table["path"])
            if self.source is not None and not path.is_absolute():
                path = self.source.parent / path
            return load_family_csv(path) if path.suffix == ".csv" else load_family(path)
        if table.get("source") == "symbol_kernel":
            A = self.operator()
            if grid.dim != 1:
                raise ScenarioError("symbol_kernel states need a 1D [grid]; the kernel lives on its square")
            members = parallel_map(lambda h: kernel(A, grid, h), h_values)
            return HFamily(members[0].grid, h_values, tuple(members))
        if "source" in table:
            raise ScenarioError(f"Unknown state source {table['source']!r} in [{label}]")
        if "b" in table:
            entry = lookup("wkb", "state")
            params = {"b": table["b"], "S": table.get("S", "0")}
            return HFamily.from_builder(grid, h_values, lambda g, h: entry.build(g, h, **params))
        if "name" not in table:
            raise ScenarioError(f"[{label}] needs one of name, b, path or source")
        entry = lookup(table["name"], "state")
        params = entry.params(_catalog_params(table))
        return HFamily.from_builder(grid, h_values, lambda g, h: entry.builder(g, h, **params))

    def operator(self) -> OperatorSpec:
        """The [symbol] section as Op_h(a0 + h a1)."""
        table = self.require("symbol")
        dim = int(table.get("dim", self.section("grid").get("dim", 1)))
        if "name" in table:
            a0 = lookup(table["name"], "symbol").build(**_catalog_params(table))
        elif "expr" in table:
            a0 = parse_symbol(table["expr"], dim)
        else:
            raise ScenarioError("[symbol] needs name or expr")
        terms = [(0, SymbolExpr(a0.expr, phase_space_vars(dim)))]
        if "expr1" in table:
            terms.append((1, parse_symbol(table["expr1"], dim)))
        return OperatorSpec(HSymbol(tuple(terms)), dim, label=table.get("name", "symbol"))

    def phase(self) -> PhasePresentation:
        table = self.require("phase")
        if "name" in table:
            return lookup(table["name"], "phase").build(**_catalog_params(table))
        if "text" not in table or "box" not in table:
            raise ScenarioError("[phase] needs name, or text and box")
        return PhasePresentation.from_text(table["text"], _box(table["box"], "phase.box"), label="inline")

    def amplitude(self, pp: PhasePresentation) -> SymbolExpr:
        table = self.section("amplitude")
        if "expr" not in table:
            return SymbolExpr(sp.S.One, pp.variables)
        return SymbolExpr(parse_expr(table["expr"], pp.variables), pp.variables)

    def chart(self) -> LagrangianChart:
        """The [chart] section: the phase itself, a fitted generating form or an explicit H."""
        table = self.require("chart")
        kind = table.get("kind", "phase")
        if kind == "phase":
            return self.phase()
        if kind == "H":
            if "H" not in table or "window" not in table:
                raise ScenarioError("chart kind 'H' needs H and window")
            window = _box(table["window"], "chart.window")
            H_expr = parse_expr(table["H"], frequency_vars(len(window)))
            return GeneratingForm.from_expr(H_expr, window, len(window))
        if kind == "generating":
            if "window" not in table:
                raise ScenarioError("chart kind 'generating' needs a window")
            cloud = lambda_phi(self.phase(), int(table.get("resolution", 41)))
            return generating_chart(cloud, _box(table["window"], "chart.window"))
        raise ScenarioError(f"Unknown chart kind {kind!r}")

    def chart_settings(self) -> dict[str, Any]:
        table = self.section("chart")
        trailing = table.get("trailing_box")
        return {
            "r": float(table.get("r", 0.0)),
            "N_max": int(table.get("N_max", 2)),
            "variants": int(table.get("variants", 8)),
            "seed": int(table.get("seed", 0)),
            "trailing_box": _box(trailing, "chart.trailing_box") if trailing is not None else None,
        }

    def relation(self) -> CanonicalRelation:
        table = self.require("relation")
        if "name" not in table:
            raise ScenarioError("[relation] needs a catalog name")
        return lookup(table["name"], "relation").build(**_catalog_params(table))

    def fio(self) -> FIOSpec:
        table = self.section("kernel")
        if "name" not in table:
            return FIOSpec.identity()
        return lookup(table["name"], "kernel").build(**_catalog_params(table))

    def probes(self) -> tuple[list[PhasePoint], str]:
        """Probe points and the wavefront method ('fourier', 'psdo' or 'both')."""
        table = self.require("probes")
        kind = table.get("kind", "finite")
        method = table.get("method", "fourier")
        if method not in ("fourier", "psdo", "both"):
            raise ScenarioError(f"Unknown probe method {method!r}")
        if "points" in table:
            points = [
                PhasePoint(tuple(np.atleast_1d(x).tolist()), tuple(np.atleast_1d(xi).tolist()), kind)
                for x, xi in table["points"]
            ]
            return points, method
        xs = self._axis(table, "x")
        xis = self._axis(table, "xi")
        points = [PhasePoint((float(x),), (float(xi),), kind) for x in xs for xi in xis]
        return points, method

    @staticmethod
    def _axis(table: Mapping[str, Any], key: str) -> np.ndarray:
        if key in table:
            return np.asarray(table[key], dtype=float)
        if f"{key}_range" in table:
            lo, hi, count = table[f"{key}_range"]
            return np.linspace(float(lo), float(hi), int(count))
        raise ScenarioError(f"[probes] needs {key} or {key}_range")

    def egorov_states(self, grid: Grid) -> list[HFamily]:
        tables = self.section("egorov").get("states")
        if not tables:
            return [self.state("state", grid)]
        return [self.state(table, grid) for table in tables]


def load_scenario(path: str | Path, command: str | None = None) -> Scenario:
    """Read and validate a scenario file.

    Raises:
        FileNotFoundError: If the file doesn't exist.
        ScenarioError: On TOML syntax errors, unknown keys or a command mismatch.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Scenario file not found: {path}")
    try:
        with path.open("rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ScenarioError(f"{path}: {exc}") from exc
    scenario = Scenario.from_dict(data, command, path)
    logger.debug("Loaded %s scenario %s", scenario.command, path)
    return scenario
