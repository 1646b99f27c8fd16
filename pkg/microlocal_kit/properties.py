"""Invariant suite: identities every component must satisfy on fixed fixtures.

Each check returns a PropertyCheck with the measured value and the tolerance it
is held to. ``run_suite`` runs all (or a named subset) in registry order.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np
import pandas as pd
import sympy as sp

from .catalog import coherent_state, gaussian_state
from .hgrid import HFamily, SweepSpec, decay_fit, isft, make_grid, pair, pair_spectral, sft
from .operators import apply_kernel, kernel, op_apply
from .oscint import PhasePresentation, generating_chart, lambda_phi
from .symcalc import (
    HSymbol,
    OperatorSpec,
    SymbolExpr,
    bump,
    finite_difference_check,
    phase_space_vars,
    position_vars,
    sharp,
)

logger = logging.getLogger(__name__)

X, XI = phase_space_vars(1)

# Fixture symbols; both lie in S(1) and split into x-factor times xi-factor.
SYMBOL_A = bump([X], [0.0], 3.0) * bump([XI], [1.0], 1.5)
SYMBOL_B = sp.cos(X) * bump([XI], [1.0], 2.0)


@dataclass(frozen=True)
class PropertyCheck:
    name: str
    value: float
    tolerance: float
    passed: bool
    detail: str = ""


@dataclass(frozen=True)
class PropertySuite:
    checks: tuple[PropertyCheck, ...]

    @property
    def all_passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def failures(self) -> list[str]:
        return [c.name for c in self.checks if not c.passed]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [
                {"check": c.name, "value": c.value, "tolerance": c.tolerance, "passed": c.passed, "detail": c.detail}
                for c in self.checks
            ],
            columns=["check", "value", "tolerance", "passed", "detail"],
        )


def _at_most(name: str, value: float, tolerance: float, detail: str = "") -> PropertyCheck:
    return PropertyCheck(name, float(value), tolerance, bool(value <= tolerance), detail)


def _fixture_state(h: float = 1.0 / 32.0):
    grid = make_grid(1, (-4.0,), (4.0,), (1024,))
    return coherent_state(grid, h, x0=0.5, xi0=1.0)


def _relative(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(float(np.max(np.abs(b))), 1e-300)
    return float(np.max(np.abs(a - b))) / scale


def check_round_trip(rng: np.random.Generator) -> PropertyCheck:
    """isft(sft(u)) reproduces u."""
    u = _fixture_state()
    return _at_most("round_trip", _relative(isft(sft(u)).values, u.values), 1e-12)


def check_plancherel(rng: np.random.Generator) -> PropertyCheck:
    """||F_h u|| (2 pi h)^(-n/2) equals ||u||."""
    u = _fixture_state()
    gap = abs(sft(u).l2_norm() - u.l2_norm()) / u.l2_norm()
    return _at_most("plancherel", gap, 1e-10)


def check_pairing_duality(rng: np.random.Generator) -> PropertyCheck:
    """int u1 u2 computed in position and in frequency agree."""
    u = _fixture_state()
    v = gaussian_state(u.grid, u.h, width=0.5, center=-0.3)
    direct, spectral = pair(u, v), pair_spectral(u, v)
    return _at_most("pairing_duality", abs(direct - spectral) / max(abs(direct), 1e-300), 1e-10)


def check_identity(rng: np.random.Generator) -> PropertyCheck:
    """Op_h(1) is the identity."""
    u = _fixture_state()
    identity = OperatorSpec.from_expr(sp.S.One, 1, label="identity")
    return _at_most("identity", _relative(op_apply(identity, u).values, u.values), 1e-10)


def check_linearity(rng: np.random.Generator) -> PropertyCheck:
    """Op_h(a)(alpha u + beta v) = alpha Op_h(a) u + beta Op_h(a) v for random alpha, beta."""
    u = _fixture_state()
    v = gaussian_state(u.grid, u.h, width=0.5, center=-0.3)
    alpha = complex(rng.normal(), rng.normal())
    beta = complex(rng.normal(), rng.normal())
    A = OperatorSpec.from_expr(SYMBOL_A, 1)
    combined = op_apply(A, alpha * u + beta * v).values
    separate = alpha * op_apply(A, u).values + beta * op_apply(A, v).values
    return _at_most("linearity", _relative(combined, separate), 1e-10)


def check_kernel_route(rng: np.random.Generator) -> PropertyCheck:
    """Applying the sampled kernel matches op_apply."""
    u = _fixture_state()
    A = OperatorSpec.from_expr(SYMBOL_A, 1)
    via_kernel = apply_kernel(kernel(A, u.grid, u.h), u).values
    return _at_most("kernel_route", _relative(via_kernel, op_apply(A, u).values), 1e-8)


def check_commutator(rng: np.random.Generator) -> PropertyCheck:
    """a # b - b # a = -i h {a, b} + O(h^2) with {a, b} = a_xi b_x - a_x b_xi."""
    a, b = HSymbol.of(SYMBOL_A, (X, XI)), HSymbol.of(SYMBOL_B, (X, XI))
    ab, ba = sharp(a, b, 1), sharp(b, a, 1)
    bracket = sp.diff(SYMBOL_A, XI) * sp.diff(SYMBOL_B, X) - sp.diff(SYMBOL_A, X) * sp.diff(SYMBOL_B, XI)
    points = rng.uniform([-2.5, -0.3], [2.5, 2.3], size=(64, 2))
    lhs = SymbolExpr(ab.term(1).expr - ba.term(1).expr, (X, XI)).evaluate(*points.T)
    rhs = SymbolExpr(-sp.I * bracket, (X, XI)).evaluate(*points.T)
    principal = SymbolExpr(ab.term(0).expr - ba.term(0).expr, (X, XI)).evaluate(*points.T)
    gap = max(float(np.max(np.abs(lhs - rhs))), float(np.max(np.abs(principal))))
    return _at_most("commutator", gap, 1e-10)


def check_derivative(rng: np.random.Generator) -> PropertyCheck:
    """Exact bump derivatives agree with central differences."""
    symbol = SymbolExpr(SYMBOL_A * sp.sin(XI), (X, XI))
    points = rng.uniform([-2.5, -0.3], [2.5, 2.3], size=(64, 2))
    worst = max(finite_difference_check(symbol, k, points) for k in range(2))
    return _at_most("derivative", worst, 1e-6)


def check_determinism(rng: np.random.Generator) -> PropertyCheck:
    """Two evaluations of the same operator give bit-identical samples."""
    u = _fixture_state()
    A = OperatorSpec.from_expr(SYMBOL_A + SYMBOL_B, 1)
    first, second = op_apply(A, u).values, op_apply(A, u).values
    same = bool(np.array_equal(first, second))
    return PropertyCheck("determinism", 0.0 if same else 1.0, 0.0, same)


def check_sharp_order(rng: np.random.Generator, J: int = 1, tolerance: float = 0.2) -> PropertyCheck:
    """||Op(a) Op(b) u - Op(a #_J b) u|| decays like h^(J + 1)."""
    grid = make_grid(1, (-6.0,), (6.0,), (2048,))
    sweep = SweepSpec(4, 8)
    family = HFamily.from_builder(grid, sweep.h_values, lambda g, h: coherent_state(g, h, 0.0, 1.0))
    a, b = HSymbol.of(SYMBOL_A, (X, XI)), HSymbol.of(SYMBOL_B, (X, XI))
    A, B = OperatorSpec(a, 1), OperatorSpec(b, 1)
    AB = OperatorSpec(sharp(a, b, J), 1)
    mags = [(op_apply(A, op_apply(B, u)) - op_apply(AB, u)).l2_norm() for u in family]
    regression = decay_fit(family.h_values, mags, strict=False)
    target = J + 1 - tolerance
    passed = math.isnan(regression.slope) or regression.slope >= target
    return PropertyCheck(
        "sharp_order", regression.slope, target, passed, f"J={J}, r2={regression.r_squared:.3f}"
    )


def check_chart_symmetry(rng: np.random.Generator) -> PropertyCheck:
    """A fitted 2D generating chart has a symmetric Jacobian dx/dxi."""
    x1, x2 = position_vars(2)
    pp = PhasePresentation(x1**2 / 2 + x2**2 / 2 + x1 * x2 / 4, (x1, x2), (), ((-1.0, 1.0), (-1.0, 1.0)))
    chart = generating_chart(lambda_phi(pp, 21), ((-0.5, 0.5), (-0.5, 0.5)))
    return _at_most("chart_symmetry", chart.jacobian_asymmetry, 1e-6)


CHECKS: dict[str, Callable[[np.random.Generator], PropertyCheck]] = {
    "round_trip": check_round_trip,
    "plancherel": check_plancherel,
    "pairing_duality": check_pairing_duality,
    "identity": check_identity,
    "linearity": check_linearity,
    "kernel_route": check_kernel_route,
    "commutator": check_commutator,
    "derivative": check_derivative,
    "determinism": check_determinism,
    "sharp_order": check_sharp_order,
    "chart_symmetry": check_chart_symmetry,
}


def run_suite(names: Sequence[str] | None = None, seed: int = 0) -> PropertySuite:
    """Run the named checks (all by default) with one seeded generator.

    Raises:
        ValueError: If a name is not in ``CHECKS``.
    """
    names = list(CHECKS) if names is None else list(names)
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise ValueError(f"Unknown property checks: {unknown}; known: {sorted(CHECKS)}")
    rng = np.random.default_rng(seed)
    checks = []
    for name in names:
        check = CHECKS[name](rng)
        logger.info("%-16s value=%.3g tol=%.3g %s", name, check.value, check.tolerance, "ok" if check.passed else "FAIL")
        checks.append(check)
    return PropertySuite(tuple(checks))
