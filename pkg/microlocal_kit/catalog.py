"""Built-in states, symbols, phases, kernels and canonical relations.

Every entry is addressed by name from scenario files. States are built on
any valid grid at any h; the other kinds ignore the grid.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable, Mapping
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Any

import numpy as np
import pandas as pd
import sympy as sp

from .errors import ScenarioError
from .fio import CanonicalRelation, FIOSpec
from .hgrid import Grid, SampledFunction, check_resolution
from .operators import cutoff_symbol
from .oscint import PhasePresentation, oscint_sample
from .symcalc import (
    HSymbol,
    SymbolExpr,
    bump,
    bump_values,
    parse_function,
    position_vars,
    sym,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CatalogEntry:
    """A named builder with its default parameters."""

    name: str
    kind: str
    description: str
    builder: Callable[..., Any] = field(repr=False)
    defaults: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "defaults", MappingProxyType(dict(self.defaults)))

    def params(self, overrides: Mapping[str, Any] | None = None) -> dict[str, Any]:
        overrides = dict(overrides or {})
        unknown = set(overrides) - set(self.defaults)
        if unknown:
            raise ScenarioError(f"Unknown parameters for {self.name!r}: {sorted(unknown)}")
        return {**self.defaults, **overrides}

    def build(self, *args, **overrides):
        return self.builder(*args, **self.params(overrides))


def _coords(grid: Grid) -> tuple[np.ndarray, ...]:
    return grid.mesh()


def _vector(value, dim: int) -> tuple[float, ...]:
    values = tuple(float(v) for v in np.atleast_1d(value))
    if len(values) == 1:
        return values * dim
    if len(values) != dim:
        raise ScenarioError(f"Expected {dim} components, got {len(values)}")
    return values


# -- states ------------------------------------------------------------------


def coherent_state(grid: Grid, h: float, x0=0.0, xi0=0.0) -> SampledFunction:
    """(pi h)^(-n/4) exp(i <x, xi0> / h - |x - x0|^2 / (2 h))."""
    x0, xi0 = _vector(x0, grid.dim), _vector(xi0, grid.dim)
    coords = _coords(grid)
    exponent = sum(1j * c * k / h - (c - c0) ** 2 / (2.0 * h) for c, c0, k in zip(coords, x0, xi0))
    return SampledFunction(grid, (math.pi * h) ** (-grid.dim / 4.0) * np.exp(exponent), h)


def wkb_state(grid: Grid, h: float, S: str = "(mul 0.5 (pow x 2))", b: str = "(bump x 0 1)") -> SampledFunction:
    """b(x) exp(i S(x) / h) with S and b in the prefix expression format."""
    phase = parse_function(S, grid.dim)
    amplitude = parse_function(b, grid.dim)
    coords = _coords(grid)
    b_values = amplitude.evaluate(*coords, h=h)
    support = np.abs(b_values) > 0
    xi_eff = [
        float(np.max(np.abs(phase.diff(v).evaluate(*coords, h=h))[support], initial=0.0))
        for v in phase.variables
    ]
    check_resolution(grid, h, xi_eff, what="WKB phase")
    return SampledFunction(grid, b_values * np.exp(1j * phase.evaluate(*coords, h=h).real / h), h)


def gaussian_state(grid: Grid, h: float, width=0.25, center=0.0) -> SampledFunction:
    """L2-normalized h-independent Gaussian exp(-|x - c|^2 / (2 width^2))."""
    center = _vector(center, grid.dim)
    r2 = sum((c - c0) ** 2 for c, c0 in zip(_coords(grid), center))
    norm = (math.pi * width**2) ** (-grid.dim / 4.0)
    return SampledFunction(grid, norm * np.exp(-r2 / (2.0 * width**2)), h)


def planewave_bump_state(grid: Grid, h: float, xi0=1.0, center=0.0, delta=1.0) -> SampledFunction:
    """bump(x; center, delta) exp(i <x, xi0> / h)."""
    center, xi0 = _vector(center, grid.dim), _vector(xi0, grid.dim)
    coords = _coords(grid)
    check_resolution(grid, h, [abs(k) for k in xi0], what="plane wave")
    phase = sum(c * k for c, k in zip(coords, xi0))
    return SampledFunction(grid, bump_values(coords, center, delta) * np.exp(1j * phase / h), h)


def bump_state(grid: Grid, h: float, center=0.0, delta=1.0) -> SampledFunction:
    """h-independent bump(x; center, delta)."""
    return SampledFunction(grid, bump_values(_coords(grid), _vector(center, grid.dim), delta), h)


def zero_state(grid: Grid, h: float) -> SampledFunction:
    return SampledFunction(grid, np.zeros(grid.shape), h)


def chirp_escape_state(grid: Grid, h: float, center=0.0, delta=1.0) -> SampledFunction:
    """bump(x) exp(i x_1 / h^2): its frequency 1/h leaves every compact set."""
    center = _vector(center, grid.dim)
    coords = _coords(grid)
    check_resolution(grid, h, [1.0 / h] + [0.0] * (grid.dim - 1), what="escaping chirp")
    return SampledFunction(grid, bump_values(coords, center, delta) * np.exp(1j * coords[0] / h**2), h)


def fold_state(grid: Grid, h: float, x_center=1.2, x_delta=1.3, theta_center=1.0, theta_delta=0.7) -> SampledFunction:
    """I(a, phi) for the fold phase x theta - theta^3 / 3 with a product bump amplitude."""
    pp = fold_phase()
    x, theta = pp.variables
    amplitude = SymbolExpr(
        bump([x], [x_center], x_delta) * bump([theta], [theta_center], theta_delta), pp.variables
    )
    return oscint_sample(amplitude, pp, grid, h)


# -- symbols, phases, kernels, relations -------------------------------------


def cutoff(box=((-1.0, 1.0), (-1.0, 1.0)), margin=1.2, n=1) -> SymbolExpr:
    """Phase-space bump product covering box."""
    return cutoff_symbol(tuple(tuple(b) for b in box), int(n), float(margin))


def fold_phase(box=((-3.0, 5.0), (-2.5, 2.5))) -> PhasePresentation:
    """x theta - theta^3 / 3: Lambda = {(theta^2, theta)} folds over x = 0."""
    (x,), theta = position_vars(1), sym("theta")
    return PhasePresentation(x * theta - theta**3 / 3, (x,), (theta,), tuple(box), label="fold")


def quadratic_phase(box=((-10.0, 10.0),)) -> PhasePresentation:
    """theta^2 / 2 without base variables (the Fresnel integral)."""
    theta = sym("theta")
    return PhasePresentation(theta**2 / 2, (), (theta,), tuple(box), label="quadratic")


def wkb_phase(box=((-2.0, 2.0),)) -> PhasePresentation:
    """x^2 / 2 with no fiber variables; Lambda = {xi = x}."""
    (x,) = position_vars(1)
    return PhasePresentation(x**2 / 2, (x,), (), tuple(box), label="wkb")


def diagonal_phase(box=((-2.0, 2.0), (-2.0, 2.0), (-1.5, 1.5))) -> PhasePresentation:
    """(x1 - x2) theta, parametrizing the conormal bundle of the diagonal."""
    x1, x2 = position_vars(2)
    theta = sym("theta")
    return PhasePresentation((x1 - x2) * theta, (x1, x2), (theta,), tuple(box), label="diagonal")


def _kernel_vars() -> tuple[sp.Symbol, sp.Symbol]:
    return position_vars(1)[0], sym("z")


def fourier_kernel(cutoff_radius=None, box=((-3.0, 3.0), (-3.0, 3.0))) -> FIOSpec:
    """phi = -x z with r = -1/2, so the kernel is exp(-i x z / h) (times an optional bump cutoff)."""
    x, z = _kernel_vars()
    pp = PhasePresentation(-x * z, (x,), (), tuple(box), (z,), label="fourier")
    amplitude = sp.S.One
    if cutoff_radius is not None:
        amplitude = bump([x], [0.0], cutoff_radius) * bump([z], [0.0], cutoff_radius)
    return FIOSpec(pp, HSymbol.of(amplitude, pp.variables), -0.5, label="fourier_kernel")


def mollifier_kernel(delta=1.0, theta_box=(-1.5, 1.5), box=((-2.0, 2.0), (-2.0, 2.0))) -> FIOSpec:
    """phi = (x - z) theta, amplitude bump(theta) / (2 pi), r = -2: a mollified identity."""
    x, z = _kernel_vars()
    theta = sym("theta")
    pp = PhasePresentation((x - z) * theta, (x,), (theta,), tuple(box) + (tuple(theta_box),), (z,), "mollifier")
    amplitude = bump([theta], [0.0], delta) / (2 * sp.pi)
    return FIOSpec(pp, HSymbol.of(amplitude, pp.variables), -2.0, label="mollifier_kernel")


def identity_relation() -> CanonicalRelation:
    return CanonicalRelation.identity(1)


def fourier_relation(box=((-2.0, 2.0), (-2.0, 2.0))) -> CanonicalRelation:
    """Relation of phi = -x z: (x, xi) = (eta, -z)."""
    spec = fourier_kernel()
    return CanonicalRelation.from_phase(spec.phase, box, label="fourier")


def shear_relation(box=((-1.5, 1.5), (-1.5, 1.5))) -> CanonicalRelation:
    """Relation of phi = x z + z^3 / 3: (x, xi) = (-eta - z^2, z)."""
    x, z = _kernel_vars()
    pp = PhasePresentation(x * z + z**3 / 3, (x,), (), ((-6.0, 6.0), (-3.0, 3.0)), (z,), label="shear")
    return CanonicalRelation.from_phase(pp, box, label="shear")


_ENTRIES = (
    CatalogEntry("bump", "state", "h-independent smooth bump", bump_state, {"center": 0.0, "delta": 1.0}),
    CatalogEntry("chirp_escape", "state", "bump times exp(i x / h^2)", chirp_escape_state, {"center": 0.0, "delta": 1.0}),
    CatalogEntry("coherent", "state", "Gaussian wave packet at (x0, xi0)", coherent_state, {"x0": 0.0, "xi0": 0.0}),
    CatalogEntry(
        "fold_state",
        "state",
        "I(a, phi) for the fold phase",
        fold_state,
        {"x_center": 1.2, "x_delta": 1.3, "theta_center": 1.0, "theta_delta": 0.7},
    ),
    CatalogEntry("gaussian", "state", "normalized Gaussian of fixed width", gaussian_state, {"width": 0.25, "center": 0.0}),
    CatalogEntry(
        "planewave_bump",
        "state",
        "bump times exp(i x xi0 / h)",
        planewave_bump_state,
        {"xi0": 1.0, "center": 0.0, "delta": 1.0},
    ),
    CatalogEntry(
        "wkb", "state", "b(x) exp(i S(x) / h)", wkb_state, {"S": "(mul 0.5 (pow x 2))", "b": "(bump x 0 1)"}
    ),
    CatalogEntry("zero", "state", "identically zero", zero_state, {}),
    CatalogEntry("cutoff", "symbol", "phase-space bump over a box", cutoff, {"box": ((-1.0, 1.0), (-1.0, 1.0)), "margin": 1.2, "n": 1}),
    CatalogEntry("diagonal", "phase", "(x1 - x2) theta (conormal of the diagonal)", diagonal_phase, {"box": ((-2.0, 2.0), (-2.0, 2.0), (-1.5, 1.5))}),
    CatalogEntry("fold", "phase", "x theta - theta^3 / 3", fold_phase, {"box": ((-3.0, 5.0), (-2.5, 2.5))}),
    CatalogEntry("quadratic", "phase", "theta^2 / 2 (Fresnel)", quadratic_phase, {"box": ((-10.0, 10.0),)}),
    CatalogEntry("wkb_phase", "phase", "x^2 / 2, no fiber variables", wkb_phase, {"box": ((-2.0, 2.0),)}),
    CatalogEntry(
        "fourier_kernel",
        "kernel",
        "semi-classical Fourier transform",
        fourier_kernel,
        {"cutoff_radius": None, "box": ((-3.0, 3.0), (-3.0, 3.0))},
    ),
    CatalogEntry(
        "mollifier_kernel",
        "kernel",
        "mollified identity (x - z) theta",
        mollifier_kernel,
        {"delta": 1.0, "theta_box": (-1.5, 1.5), "box": ((-2.0, 2.0), (-2.0, 2.0))},
    ),
    CatalogEntry("fourier", "relation", "graph of the Fourier transform", fourier_relation, {"box": ((-2.0, 2.0), (-2.0, 2.0))}),
    CatalogEntry("identity", "relation", "graph of the identity", identity_relation, {}),
    CatalogEntry("shear", "relation", "relation of x z + z^3 / 3", shear_relation, {"box": ((-1.5, 1.5), (-1.5, 1.5))}),
)

CATALOG: Mapping[str, CatalogEntry] = MappingProxyType({e.name: e for e in _ENTRIES})


def lookup(name: str, kind: str | None = None) -> CatalogEntry:
    """Catalog entry by name, optionally checking its kind.

    Raises:
        ScenarioError: If the name is unknown or of another kind.
    """
    entry = CATALOG.get(name)
    if entry is None:
        raise ScenarioError(f"Unknown catalog entry {name!r}; see 'mlk catalog'")
    if kind is not None and entry.kind != kind:
        raise ScenarioError(f"Catalog entry {name!r} is a {entry.kind}, expected a {kind}")
    return entry


def list_catalog() -> pd.DataFrame:
    """All entries sorted by kind then name."""
    rows = [
        {
            "name": e.name,
            "kind": e.kind,
            "description": e.description,
            "parameters": ", ".join(f"{k}={v!r}" for k, v in e.defaults.items()),
        }
        for e in _ENTRIES
    ]
    return pd.DataFrame(rows).sort_values(["kind", "name"], kind="stable").reset_index(drop=True)
