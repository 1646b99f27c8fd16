"""Fourier integral operators, Lagrangian order tests, symbol reconstruction and Egorov transport.

An FIOSpec carries a phase phi(x, z, theta) and an amplitude u ~ sum_k h^k u_k.
Its kernel is

    K(x, z) = h^((n1 + n2)/4 + m/2 + r) int exp(i phi(x, z, theta) / h) u(x, z, theta) dtheta

so the order r follows the L2 normalization of Lagrangian distributions. The
canonical relation of the operator is
``{(x, phi'_x; z, -phi'_z) : phi'_theta = 0}``.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import sympy as sp
from scipy.interpolate import CubicSpline, RectBivariateSpline
from scipy.linalg import null_space
from scipy.spatial import cKDTree

from .errors import FoldError, GridMismatchError, MicrolocalError, WindowError
from .hgrid import (
    DEFAULT_FLOOR,
    Grid,
    HFamily,
    SampledFunction,
    SweepRegression,
    decay_fit,
    direct_sft_at,
    parallel_map,
    sft,
)
from .operators import apply_kernel, cutoff_symbol, op_apply
from .oscint import (
    GeneratingForm,
    PhasePresentation,
    _hessian_record,
    _lattice,
    _sample_critical_set,
    lambda_phi,
    newton_solve,
    oscint_sample,
    stationary_phase_operators,
    validate_phase,
)
from .symcalc import (
    HSymbol,
    OperatorSpec,
    SymbolExpr,
    _ComplexSpline1D,
    _ComplexSpline2D,
    box_cutoff,
    evaluate_expr,
    frequency_vars,
    phase_space_vars,
    position_vars,
    spline_function,
    sym,
)

logger = logging.getLogger(__name__)

ORDER_TOLERANCE = 0.15
SECTION_TOLERANCE = 1e-6
VANISHING_TOLERANCE = 1e-8
AMPLITUDE_FLOOR = 1e-6
MAX_ORDER_FACTORS = 3
OUTSIDE_MASS_LIMIT = 0.01


# -- operator specification and kernels ---------------------------------------


@dataclass(frozen=True)
class FIOSpec:
    """Oscillatory-integral operator, or the identity when ``kind == "identity"``.

    The phase has output variables ``x_vars``, input variables ``z_vars`` and
    fiber variables ``theta_vars``; the amplitude uses the same variables.
    Kernels live on product grids, so both base spaces are one-dimensional.
    """

    phase: PhasePresentation | None
    amplitude: HSymbol | None
    order: float = 0.0
    kind: str = "oscillatory"
    label: str = ""

    def __post_init__(self) -> None:
        if self.kind == "identity":
            return
        if self.kind != "oscillatory":
            raise ValueError(f"FIO kind must be 'oscillatory' or 'identity', got {self.kind!r}")
        if self.phase is None or self.amplitude is None:
            raise ValueError("An oscillatory FIO needs a phase and an amplitude")
        if not self.phase.z_vars:
            raise ValueError("FIO phases need input variables (z)")
        if len(self.phase.x_vars) != 1 or len(self.phase.z_vars) != 1:
            raise ValueError("FIO kernels are implemented for R^1 -> R^1")
        if self.amplitude.variables != self.phase.variables:
            raise ValueError(
                f"Amplitude variables {self.amplitude.variables} must match the phase "
                f"variables {self.phase.variables}"
            )
        if self.phase.m > 0 and not validate_phase(self.phase).all_passed:
            raise ValueError(f"Phase {self.phase.phi} is degenerate on part of its box")

    @classmethod
    def identity(cls, label: str = "identity") -> FIOSpec:
        return cls(None, None, 0.0, "identity", label)

    @property
    def is_identity(self) -> bool:
        return self.kind == "identity"

    @property
    def n1(self) -> int:
        return 1 if self.phase is None else len(self.phase.x_vars)

    @property
    def n2(self) -> int:
        return 1 if self.phase is None else len(self.phase.z_vars)

    @property
    def m(self) -> int:
        return 0 if self.phase is None else self.phase.m

    def prefactor(self, h: float) -> float:
        """h^((n1 + n2)/4 + m/2 + r)."""
        return h ** ((self.n1 + self.n2) / 4.0 + self.m / 2.0 + self.order)


def _product_grid(grid: Grid) -> Grid:
    if grid.dim != 1:
        raise ValueError("FIO kernels act on one-dimensional grids")
    return Grid((grid.lo[0],) * 2, (grid.hi[0],) * 2, (grid.n_points[0],) * 2)


def build_fio_kernel(spec: FIOSpec, grid: Grid, h: float, n_theta: int | None = None) -> SampledFunction:
    """Sample the kernel K(x, z) on ``grid x grid`` at parameter h.

    The identity kernel is the discrete delta ``diag(1 / dz)``.

    Raises:
        ResolutionError: If the grid or the theta quadrature under-resolves the phase.
    """
    product = _product_grid(grid)
    if spec.is_identity:
        values = np.eye(grid.n_points[0]) / grid.spacing[0]
        return SampledFunction(product, values, h)
    pp = spec.phase
    amplitude = SymbolExpr(spec.amplitude.full_expr(), pp.variables)
    K = oscint_sample(amplitude, pp, product, h, n_theta)
    logger.debug("build_fio_kernel: %s at h=%g on %d^2 nodes", spec.label or pp.phi, h, grid.n_points[0])
    return K * spec.prefactor(h)


def fio_apply(spec: FIOSpec, v: HFamily, n_theta: int | None = None) -> HFamily:
    """Apply the operator to every member by kernel quadrature."""
    if spec.is_identity:
        return v

    def apply(member: SampledFunction) -> SampledFunction:
        return apply_kernel(build_fio_kernel(spec, member.grid, member.h, n_theta), member)

    return v.map(apply)


# -- canonical relations ------------------------------------------------------


@dataclass(frozen=True)
class CanonicalRelation:
    """Canonical relation with a section kappa of its right projection.

    ``section`` expresses the phase's x and theta variables in the right
    coordinates (z, eta); ``pi1`` gives the left point (x, xi) the same way.
    The section is symbolic when sympy can solve the relation and a spline
    otherwise; ``box`` is the (z, eta) region on which it is valid.
    """

    phase: PhasePresentation | None
    z_vars: tuple[sp.Symbol, ...]
    eta_vars: tuple[sp.Symbol, ...]
    section: dict = field(repr=False)
    pi1: tuple[sp.Expr, ...] = field(repr=False)
    box: tuple[tuple[float, float], ...] = ()
    symbolic: bool = True
    label: str = ""

    @classmethod
    def identity(cls, n: int = 1, box: Sequence[tuple[float, float]] | None = None) -> CanonicalRelation:
        z_vars = position_vars(n, "z")
        eta_vars = frequency_vars(n, "eta")
        box = tuple(box) if box is not None else ((-math.inf, math.inf),) * (2 * n)
        return cls(None, z_vars, eta_vars, {}, z_vars + eta_vars, box, True, "identity")

    @classmethod
    def from_phase(
        cls, pp: PhasePresentation, box: Sequence[tuple[float, float]], resolution: int = 33, label: str = ""
    ) -> CanonicalRelation:
        """Build kappa from phi'_theta = 0 and -phi'_z = eta.

        Raises:
            FoldError: If kappa o pi_2 is not the identity on sampled points, or
                pi_2 restricted to the relation is not an immersion.
        """
        if not pp.z_vars:
            raise ValueError("Canonical relations need a phase with z variables")
        n2 = len(pp.z_vars)
        box = tuple((float(lo), float(hi)) for lo, hi in box)
        if len(box) != 2 * n2:
            raise ValueError(f"Relation box needs {2 * n2} intervals, got {len(box)}")
        eta_vars = frequency_vars(n2, "eta")
        unknowns = pp.x_vars + pp.theta_vars
        equations = pp.gradient(pp.theta_vars) + [
            -g - eta for g, eta in zip(pp.gradient(pp.z_vars), eta_vars)
        ]
        section = _solve_section(equations, unknowns)
        symbolic = section is not None
        if section is None:
            section = _spline_section(pp, equations, unknowns, eta_vars, box, resolution)
        xi_exprs = [g.subs(section, simultaneous=True) for g in pp.gradient(pp.x_vars)]
        pi1 = tuple(section[v] for v in pp.x_vars) + tuple(xi_exprs)
        relation = cls(pp, pp.z_vars, eta_vars, section, pi1, box, symbolic, label)
        error = relation.section_error()
        if error > SECTION_TOLERANCE:
            raise FoldError(f"kappa o pi_2 differs from the identity by {error:.3g} on {box}")
        sigma = relation.immersion_margin()
        if sigma <= 1e-8:
            raise FoldError(f"pi_2 is not an immersion on the relation (sigma_min={sigma:.3g})")
        logger.debug(
            "CanonicalRelation %s: %s section, error %.2e", label, "symbolic" if symbolic else "spline", error
        )
        return relation

    @property
    def n1(self) -> int:
        return len(self.pi1) // 2

    @property
    def n2(self) -> int:
        return len(self.z_vars)

    @property
    def coordinates(self) -> tuple[sp.Symbol, ...]:
        return self.z_vars + self.eta_vars

    def covers(self, z: Sequence[float], eta: Sequence[float]) -> bool:
        point = tuple(z) + tuple(eta)
        return all(lo <= p <= hi for p, (lo, hi) in zip(point, self.box))

    def pi1_at(self, z: np.ndarray, eta: np.ndarray) -> tuple[np.ndarray, ...]:
        """Left point (x, xi) over right points given as arrays, one per coordinate."""
        args = list(np.atleast_1d(z).reshape(self.n2, -1)) + list(np.atleast_1d(eta).reshape(self.n2, -1))
        return tuple(evaluate_expr(e, self.coordinates, args).real for e in self.pi1)

    def kappa(self, z: np.ndarray, eta: np.ndarray) -> dict[sp.Symbol, np.ndarray]:
        """Source variables (x, theta) of the relation over right points."""
        args = list(np.atleast_1d(z).reshape(self.n2, -1)) + list(np.atleast_1d(eta).reshape(self.n2, -1))
        return {v: evaluate_expr(e, self.coordinates, args).real for v, e in self.section.items()}

    def _source_samples(self, per_axis: int = 9) -> np.ndarray:
        pp = self.phase
        if pp.m == 0:
            return _lattice(pp.box, per_axis)
        return _sample_critical_set(pp, per_axis)

    def section_error(self) -> float:
        """max |kappa(pi_2(p)) - p| over sampled source points inside the box."""
        if self.phase is None:
            return 0.0
        pp = self.phase
        sources = self._source_samples()
        args = [sources[:, k] for k in range(sources.shape[1])]
        z = np.stack([args[pp.variables.index(v)] for v in pp.z_vars])
        eta = np.stack([-evaluate_expr(g, pp.variables, args).real for g in pp.gradient(pp.z_vars)])
        inside = np.all(
            [(c >= lo) & (c <= hi) for c, (lo, hi) in zip(np.concatenate([z, eta]), self.box)], axis=0
        )
        if not np.any(inside):
            raise WindowError(f"No sampled relation points fall inside the box {self.box}")
        recovered = self.kappa(z[:, inside], eta[:, inside])
        error = 0.0
        for v, values in recovered.items():
            truth = args[pp.variables.index(v)][inside]
            error = max(error, float(np.max(np.abs(values.ravel() - truth))))
        return error

    def immersion_margin(self) -> float:
        """Smallest singular value of d(pi_2 o j) restricted to the tangent space of C_phi."""
        if self.phase is None:
            return 1.0
        pp = self.phase
        sources = self._source_samples(5)
        args = [sources[:, k] for k in range(sources.shape[1])]

        def hess_rows(exprs: list[sp.Expr]) -> np.ndarray:
            return np.stack(
                [
                    np.stack([evaluate_expr(sp.diff(g, v), pp.variables, args).real for v in pp.variables], axis=1)
                    for g in exprs
                ],
                axis=1,
            )

        z_index = [pp.variables.index(v) for v in pp.z_vars]
        selector = np.zeros((len(z_index), len(pp.variables)))
        selector[range(len(z_index)), z_index] = 1.0
        eta_rows = -hess_rows(pp.gradient(pp.z_vars))
        theta_rows = hess_rows(pp.gradient(pp.theta_vars)) if pp.m else None
        margin = math.inf
        for k in range(len(sources)):
            tangent = null_space(theta_rows[k]) if theta_rows is not None else np.eye(len(pp.variables))
            D = np.concatenate([selector, eta_rows[k]]) @ tangent
            margin = min(margin, float(np.linalg.svd(D, compute_uv=False)[-1]))
        return margin


def _solve_section(equations: list[sp.Expr], unknowns: tuple[sp.Symbol, ...]) -> dict | None:
    try:
        solutions = sp.solve(equations, unknowns, dict=True)
    except (NotImplementedError, ValueError):
        return None
    if len(solutions) != 1 or set(solutions[0]) != set(unknowns):
        return None
    return {v: sp.simplify(solutions[0][v]) for v in unknowns}


def _spline_section(
    pp: PhasePresentation,
    equations: list[sp.Expr],
    unknowns: tuple[sp.Symbol, ...],
    eta_vars: tuple[sp.Symbol, ...],
    box: tuple[tuple[float, float], ...],
    resolution: int,
) -> dict:
    """Newton solves on a (z, eta) lattice, interpolated by degree-5 splines."""
    if len(pp.z_vars) != 1:
        raise ValueError("Numerical relation sections are implemented for n2 = 1")
    z_axis = np.linspace(*box[0], resolution)
    eta_axis = np.linspace(*box[1], resolution)
    Z, E = np.meshgrid(z_axis, eta_axis, indexing="ij")
    fixed = {pp.z_vars[0]: Z.ravel(), eta_vars[0]: E.ravel()}
    index = [pp.variables.index(v) for v in unknowns]
    unknown_box = [pp.box[i] for i in index]
    expr_vars = pp.variables + eta_vars
    solution = np.full((Z.size, len(unknowns)), np.nan)
    pending = np.ones(Z.size, dtype=bool)
    for seed in _lattice(unknown_box, 5):
        if not np.any(pending):
            break
        seeds = np.tile(seed, (int(pending.sum()), 1))
        sub_fixed = {v: a[pending] for v, a in fixed.items()}
        points, ok = newton_solve(equations, expr_vars, unknowns, seeds, unknown_box, sub_fixed)
        idx = np.flatnonzero(pending)
        solution[idx[ok]] = points[ok]
        pending[idx[ok]] = False
    if np.any(pending):
        bad = np.flatnonzero(pending)[0]
        raise FoldError(
            f"No relation point over (z, eta) = ({Z.ravel()[bad]:.4g}, {E.ravel()[bad]:.4g}) inside the phase box"
        )
    section = {}
    z, eta = pp.z_vars[0], eta_vars[0]
    for k, v in enumerate(unknowns):
        values = solution[:, k].reshape(Z.shape)
        spline = RectBivariateSpline(z_axis, eta_axis, values, kx=5, ky=5)
        func = spline_function(_ComplexSpline2D(spline, None, box), 2, f"kappa_{v}")
        section[v] = func(z, eta)
    return section


def egorov_transport(a0: SymbolExpr, rel: CanonicalRelation) -> SymbolExpr:
    """b0(z, eta) = i^(n1 - n2) a0(pi_1(kappa(z, eta))), returned in the variables (x, xi) of T*R^n2."""
    left_vars = phase_space_vars(rel.n1)
    if a0.variables != left_vars:
        raise ValueError(f"Transported symbols must use variables {left_vars}, got {a0.variables}")
    expr = sp.I ** (rel.n1 - rel.n2) * a0.expr.subs(dict(zip(left_vars, rel.pi1)), simultaneous=True)
    right_vars = phase_space_vars(rel.n2)
    expr = expr.subs(dict(zip(rel.coordinates, right_vars)), simultaneous=True)
    return SymbolExpr(expr, right_vars, a0.order)


# -- Egorov residuals ---------------------------------------------------------


@dataclass(frozen=True)
class EgorovReport:
    """Residual sweep of max_v ||(AF - FB) v|| / ||F v|| and its B = 0 baseline."""

    regression: SweepRegression
    baseline: SweepRegression

    @property
    def gain(self) -> float:
        """Slope gain over the baseline; inf when the residual sits at the floor."""
        if math.isnan(self.regression.slope):
            return math.inf
        return self.regression.slope - self.baseline.slope

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "h": self.regression.h_values,
                "residual": self.regression.magnitudes,
                "baseline": self.baseline.magnitudes,
            }
        )


def egorov_residual(
    A: OperatorSpec,
    F: FIOSpec,
    B: OperatorSpec,
    states: Sequence[HFamily],
    floor: float = DEFAULT_FLOOR,
) -> EgorovReport:
    """Regress max over states of ||(A F - F B) v|| / ||F v|| over the sweep.

    The kernel of F is built once per h and shared with the B = 0 baseline.

    Raises:
        GridMismatchError: If the states do not share one grid and sweep.
        ResolutionError: If the kernel is under-resolved at some h.
    """
    if not states:
        raise ValueError("egorov_residual needs at least one state family")
    first = states[0]
    for family in states[1:]:
        first.check_sweep(family)
        if not family.grid.matches(first.grid):
            raise GridMismatchError("All state families must share one grid")

    def magnitudes(index: int) -> tuple[float, float]:
        h = first.h_values[index]
        K = None if F.is_identity else build_fio_kernel(F, first.grid, h)

        def apply_F(w: SampledFunction) -> SampledFunction:
            return w if K is None else apply_kernel(K, w)

        worst = base = 0.0
        for family in states:
            v = family[index]
            Fv = apply_F(v)
            norm = Fv.l2_norm()
            if norm == 0.0:
                continue
            AFv = op_apply(A, Fv)
            residual = AFv - apply_F(op_apply(B, v))
            worst = max(worst, residual.l2_norm() / norm)
            base = max(base, AFv.l2_norm() / norm)
        return worst, base

    pairs = parallel_map(magnitudes, range(len(first)))
    regression = decay_fit(first.h_values, [p[0] for p in pairs], floor=floor, strict=False)
    baseline = decay_fit(first.h_values, [p[1] for p in pairs], floor=floor, strict=False)
    logger.info(
        "egorov_residual: slope %.3f, baseline %.3f", regression.slope, baseline.slope
    )
    return EgorovReport(regression, baseline)


def egorov_correction_m0(
    A: OperatorSpec,
    F: FIOSpec,
    rel: CanonicalRelation,
    box: Sequence[tuple[float, float]] | None = None,
    resolution: int = 48,
) -> SymbolExpr:
    """First correction b1 with A F = F Op_h(b0 + h b1) + O(h^2) for a phase without theta.

    Matching the h^1 terms of the left and right stationary-phase expansions gives

        u0 b1 = a1 u0 + L^l_1(a0 u0) - L^r_1(u0 b0)

    at (x, z) = (x(z, eta), z), with the left phase (x - y) w + phi(y, z) and the
    right phase phi(x, y) + (y - z) w, both integrated over (y, w).

    Raises:
        MicrolocalError: If |u0| < 1e-6 where the correction is needed.
        ValueError: If F has theta variables or maps between different dimensions.
    """
    if F.is_identity:
        return A.symbol.term(1)
    if F.m != 0:
        raise ValueError("egorov_correction_m0 needs a phase without theta variables")
    if F.n1 != F.n2 or A.dim != F.n1:
        raise ValueError("egorov_correction_m0 needs n1 = n2 = dim of A")
    box = tuple(box) if box is not None else rel.box
    if any(not math.isfinite(b) for pair in box for b in pair):
        raise ValueError("egorov_correction_m0 needs a bounded (z, eta) box")

    pp = F.phase
    (x,), (z,) = pp.x_vars, pp.z_vars
    xs, xis = phase_space_vars(1)
    y, w = sym("y_int"), sym("w_int")
    u0 = F.amplitude.principal.expr
    a0 = A.symbol.principal.expr
    a1 = A.symbol.term(1).expr
    b0 = egorov_transport(A.symbol.principal, rel).expr
    phi = pp.phi

    left_amp = a0.subs({xs: x, xis: w}, simultaneous=True) * u0.subs(x, y)
    left_phase = (x - y) * w + phi.subs(x, y)
    right_amp = u0.subs(z, y) * b0.subs({xs: y, xis: w}, simultaneous=True)
    right_phase = phi.subs(z, y) + (y - z) * w
    variables = (y, w, x, z)

    z_axis = np.linspace(*box[0], resolution)
    eta_axis = np.linspace(*box[1], resolution)
    Z, E = np.meshgrid(z_axis, eta_axis, indexing="ij")
    X = rel.kappa(Z.ravel(), E.ravel())[x].reshape(Z.shape)
    Xi = evaluate_expr(sp.diff(phi, x), pp.variables, [X, Z]).real

    L_left, _ = stationary_phase_operators(left_amp, left_phase, variables, [X, Xi, X, Z], 2, 1)
    L_right, _ = stationary_phase_operators(right_amp, right_phase, variables, [Z, E, X, Z], 2, 1)
    u0_values = evaluate_expr(u0, pp.variables, [X, Z])
    a0_values = evaluate_expr(a0, (xs, xis), [X, Xi])
    a1_values = evaluate_expr(a1, (xs, xis), [X, Xi])
    numerator = a1_values * u0_values + L_left[1] - L_right[1]

    scale = float(np.max(np.abs(numerator)))
    needed = (np.abs(a0_values) > 0) | (np.abs(numerator) > 1e-10 * scale)
    small = np.abs(u0_values) < AMPLITUDE_FLOOR
    if np.any(needed & small):
        raise MicrolocalError("amplitude vanishes; correction undefined")
    b1 = np.where(small, 0.0, numerator / np.where(small, 1.0, u0_values))

    real = RectBivariateSpline(z_axis, eta_axis, b1.real, kx=5, ky=5)
    imag = RectBivariateSpline(z_axis, eta_axis, b1.imag, kx=5, ky=5)
    func = spline_function(_ComplexSpline2D(real, imag, box), 2, "b1")
    logger.debug("egorov_correction_m0: max |b1| = %.3g on %s", float(np.max(np.abs(b1))), box)
    return SymbolExpr(func(xs, xis), (xs, xis))


# -- order tests --------------------------------------------------------------


LagrangianChart = GeneratingForm | PhasePresentation


def vanishing_symbols(chart: LagrangianChart, n: int) -> list[SymbolExpr]:
    """Principal symbols vanishing on the chart's Lagrangian, in the variables (x, xi) of T*R^n.

    - GeneratingForm: x_j - d_j H(xi).
    - Phase without theta: xi_j - d_j phi(x).
    - Phase linear in theta, phi = <theta, F(x)>: the F_k(x) and <v(x), xi> for
      a basis v of ker F'(x).
    """
    xs, xis = position_vars(n), frequency_vars(n)
    variables = xs + xis
    if isinstance(chart, GeneratingForm):
        if chart.n != n:
            raise ValueError(f"Chart lives on T*R^{chart.n}, expected T*R^{n}")
        H = chart.H.expr
        return [SymbolExpr(x - sp.diff(H, xi), variables) for x, xi in zip(xs, xis)]
    pp = chart
    if pp.z_vars or pp.x_vars != xs:
        raise ValueError(f"Phase charts must use base variables {xs}")
    if pp.m == 0:
        return [SymbolExpr(xi - sp.diff(pp.phi, x), variables) for x, xi in zip(xs, xis)]
    if not pp.is_linear_in_theta() or pp.phi.subs({t: 0 for t in pp.theta_vars}) != 0:
        raise ValueError(
            "order_test needs a GeneratingForm, a phase without theta, or a phase linear in theta"
        )
    F = [sp.diff(pp.phi, t) for t in pp.theta_vars]
    symbols = [SymbolExpr(f, variables) for f in F]
    jacobian = sp.Matrix([[sp.diff(f, x) for x in xs] for f in F])
    for vector in jacobian.nullspace():
        symbols.append(SymbolExpr(sp.simplify(sum(c * xi for c, xi in zip(vector, xis))), variables))
    return symbols


@dataclass(frozen=True)
class OrderTestPlan:
    """Localized vanishing operators, trailing cutoffs and the target exponents."""

    symbols: tuple[SymbolExpr, ...]
    factors: tuple[OperatorSpec, ...]
    trailing: tuple[OperatorSpec, ...]
    trailing_boxes: tuple[tuple[tuple[float, float], ...], ...]
    r: float
    k: int
    N_max: int

    def target(self, N: int) -> float:
        return N - self.r - self.k / 4.0

    def factor(self, j: int) -> OperatorSpec:
        """A_j for j >= 1, cycling through the vanishing symbols."""
        return self.factors[(j - 1) % len(self.factors)]


def _lagrangian_samples(chart: LagrangianChart) -> np.ndarray:
    if isinstance(chart, GeneratingForm):
        return chart.sample(17 if chart.n == 1 else 9)
    return lambda_phi(chart, 9).points


def plan_order_test(
    chart: LagrangianChart,
    n: int,
    r: float,
    N_max: int = 2,
    trailing_box: Sequence[tuple[float, float]] | None = None,
    variants: int = 8,
    seed: int = 0,
) -> OrderTestPlan:
    """Build the operators of an order test on T*R^n.

    Factors are ``Op_h(chi * a_j)`` with chi a frequency cutoff over the chart
    window (generating forms) or a position cutoff over the phase box. The
    trailing cutoffs are the phase-space bump over ``trailing_box`` (default:
    the bounding box of sampled Lagrangian points, padded by 0.25) and
    ``variants - 1`` seeded random perturbations of it.

    Raises:
        ValueError: If N_max is outside [0, 3] or a symbol does not vanish on the Lagrangian.
    """
    if not 0 <= N_max <= MAX_ORDER_FACTORS:
        raise ValueError(f"N_max must be in [0, {MAX_ORDER_FACTORS}], got {N_max}")
    if variants < 1:
        raise ValueError(f"variants must be positive, got {variants}")
    symbols = vanishing_symbols(chart, n)
    samples = _lagrangian_samples(chart)
    args = [samples[:, k] for k in range(2 * n)]
    scale = max(1.0, float(np.max(np.abs(samples))))
    for s in symbols:
        residual = float(np.max(np.abs(s.evaluate(*args))))
        if residual > VANISHING_TOLERANCE * scale:
            raise ValueError(f"Symbol {s} does not vanish on the Lagrangian (max {residual:.3g})")

    xs, xis = position_vars(n), frequency_vars(n)
    if isinstance(chart, GeneratingForm):
        chi = box_cutoff(xis, chart.window, 1.2)
    else:
        chi = box_cutoff(xs, chart.base_box, 1.2)
    factors = tuple(
        OperatorSpec.from_expr(chi * s.expr, n, label=f"A{j + 1}") for j, s in enumerate(symbols)
    )

    if trailing_box is None:
        lo, hi = samples.min(axis=0) - 0.25, samples.max(axis=0) + 0.25
        trailing_box = tuple(zip(lo.tolist(), hi.tolist()))
    base = tuple((float(a), float(b)) for a, b in trailing_box)
    boxes = [base]
    margins = [1.2]
    rng = np.random.default_rng(seed)
    for _ in range(variants - 1):
        widths = np.array([b - a for a, b in base])
        shift = rng.uniform(-0.1, 0.1, len(base)) * widths
        boxes.append(tuple((a + s, b + s) for (a, b), s in zip(base, shift)))
        margins.append(float(rng.uniform(1.05, 1.5)))
    trailing = tuple(
        OperatorSpec.from_expr(cutoff_symbol(box, n, margin), n, label=f"trail{i}")
        for i, (box, margin) in enumerate(zip(boxes, margins))
    )
    return OrderTestPlan(tuple(symbols), factors, trailing, tuple(boxes), r, n, N_max)


@dataclass(frozen=True)
class OrderTestResult:
    """One regression per number of vanishing factors N = 0..N_max."""

    plan: OrderTestPlan = field(repr=False)
    regressions: tuple[SweepRegression, ...]
    passed: tuple[bool, ...]
    tolerance: float = ORDER_TOLERANCE

    @property
    def all_passed(self) -> bool:
        return all(self.passed)

    @property
    def slopes(self) -> tuple[float, ...]:
        return tuple(r.slope for r in self.regressions)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "N": range(len(self.regressions)),
                "target": [self.plan.target(N) for N in range(len(self.regressions))],
                "slope": self.slopes,
                "r2": [r.r_squared for r in self.regressions],
                "floor_hit": [r.floor_hit for r in self.regressions],
                "passed": self.passed,
                "trailing": len(self.plan.trailing),
            }
        )


def order_test(
    u: HFamily,
    chart: LagrangianChart,
    r: float,
    N_max: int = 2,
    variants: int = 8,
    seed: int = 0,
    trailing_box: Sequence[tuple[float, float]] | None = None,
    floor: float = DEFAULT_FLOOR,
) -> OrderTestResult:
    """Regress max over trailing cutoffs of ||A_trail A_N ... A_1 u|| for N = 0..N_max.

    N passes when its slope reaches N - r - k/4 - 0.15 (k the dimension of the
    base space), or when the products fall below the floor.
    """
    plan = plan_order_test(chart, u.grid.dim, r, N_max, trailing_box, variants, seed)

    def norms(member: SampledFunction) -> list[float]:
        out = []
        w = member
        for N in range(N_max + 1):
            if N > 0:
                w = op_apply(plan.factor(N), w)
            out.append(max(op_apply(T, w).l2_norm() for T in plan.trailing))
        return out

    rows = parallel_map(norms, u.members)
    regressions = []
    passed = []
    for N in range(N_max + 1):
        reg = decay_fit(u.h_values, [row[N] for row in rows], floor=floor, strict=False)
        regressions.append(reg)
        ok = math.isnan(reg.slope) or reg.slope >= plan.target(N) - ORDER_TOLERANCE
        passed.append(bool(ok))
        logger.debug("order_test: N=%d slope=%.3f target=%.3f", N, reg.slope, plan.target(N))
    if not all(passed):
        logger.info("order_test: failed at N=%s", [N for N, ok in enumerate(passed) if not ok])
    return OrderTestResult(plan, tuple(regressions), tuple(passed))


# -- symbol reconstruction ----------------------------------------------------


@dataclass(frozen=True)
class ReconstructionResult:
    """Estimate of a0 at the critical points (x(xi), theta(xi)) over chart frequencies."""

    xi: np.ndarray = field(repr=False)
    sources: np.ndarray = field(repr=False)
    values: np.ndarray = field(repr=False)
    consistency: float
    h: float
    symbol: SymbolExpr = field(repr=False)

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({"xi": self.xi})
        for k in range(self.sources.shape[1]):
            frame[f"v{k}"] = self.sources[:, k]
        frame["a0_re"] = self.values.real
        frame["a0_im"] = self.values.imag
        return frame


def _outside_mass(u: SampledFunction, window: tuple[float, float]) -> float:
    U = sft(u)
    power = np.abs(U.values) ** 2
    total = float(np.sum(power))
    if total == 0.0:
        return 0.0
    xi = U.grid.axes()[0]
    outside = (xi < window[0]) | (xi > window[1])
    return float(np.sum(power[outside])) / total


def reconstruct_symbol(
    u: HFamily, chart: GeneratingForm, pp: PhasePresentation, samples: int = 65
) -> ReconstructionResult:
    """Read the principal amplitude of u = I(a, phi) back from F_h u (n = 1).

    With Phi = phi(x, theta) - x xi critical at (x(xi), theta(xi)) and
    H(xi) = x xi - phi there,

        a0 = (2 pi h)^(-(n + m)/2) exp(-i pi sgn / 4) |det Phi''|^(1/2) exp(i H / h) F_h u(xi).

    The estimate uses the smallest h; ``consistency`` is the relative sup
    difference to the estimate at the next smallest h.

    Raises:
        FoldError: If Phi has no non-degenerate critical point for some window frequency.
        WindowError: If more than 1% of |F_h u|^2 lies outside the chart window.
    """
    if pp.n != 1 or u.grid.dim != 1 or chart.n != 1:
        raise ValueError("reconstruct_symbol is implemented for n = 1")
    window = chart.window[0]
    xi_nodes = _lattice(chart.window, samples)[:, 0]
    xi_var = sym("xi_rec")

    cloud = lambda_phi(pp, 41)
    guesses = np.stack([chart.x_of(xi_nodes[:, None])[:, 0], xi_nodes], axis=1)
    _, nearest = cKDTree(cloud.points).query(guesses)
    Phi = pp.phi - pp.x_vars[0] * xi_var
    residuals = [sp.diff(Phi, v) for v in pp.variables]
    points, ok = newton_solve(
        residuals, pp.variables + (xi_var,), pp.variables, cloud.sources[nearest], pp.box, {xi_var: xi_nodes}
    )
    if not np.all(ok):
        bad = xi_nodes[~ok]
        raise FoldError(f"No critical point of phi - x xi for xi in [{bad.min():.4g}, {bad.max():.4g}]")

    args = [points[:, k] for k in range(points.shape[1])]
    hessian = np.stack(
        [
            np.stack([evaluate_expr(sp.diff(g, v), pp.variables, args).real for v in pp.variables], axis=1)
            for g in pp.gradient(pp.variables)
        ],
        axis=1,
    )
    records = [_hessian_record(p, Hm, 0.0, True) for p, Hm in zip(points, hessian)]
    if not all(rec.accepted for rec in records):
        raise FoldError("Degenerate critical point of phi - x xi inside the chart window")
    det = np.array([rec.det for rec in records])
    signature = np.array([rec.signature for rec in records])
    H_values = points[:, 0] * xi_nodes - evaluate_expr(pp.phi, pp.variables, args).real
    d = len(pp.variables)

    def estimate(member: SampledFunction) -> np.ndarray:
        mass = _outside_mass(member, window)
        if mass > OUTSIDE_MASS_LIMIT:
            raise WindowError(
                f"{100 * mass:.1f}% of |F_h u|^2 lies outside the chart window {window} at h={member.h:g}"
            )
        h = member.h
        factor = (2.0 * math.pi * h) ** (-d / 2.0) * np.exp(-1j * math.pi * signature / 4.0) * np.sqrt(np.abs(det))
        return factor * np.exp(1j * H_values / h) * direct_sft_at(member, xi_nodes)

    finest = estimate(u[len(u) - 1])
    consistency = math.nan
    if len(u) > 1:
        previous = estimate(u[len(u) - 2])
        consistency = float(np.max(np.abs(finest - previous)) / max(float(np.max(np.abs(finest))), 1e-300))
    real = CubicSpline(xi_nodes, finest.real)
    imag = CubicSpline(xi_nodes, finest.imag)
    func = spline_function(_ComplexSpline1D(real, imag, xi_nodes[0], xi_nodes[-1]), 1, "a0")
    variables = frequency_vars(1)
    logger.debug("reconstruct_symbol: consistency %.3g at h=%g", consistency, u.h_values[-1])
    return ReconstructionResult(
        xi_nodes, points, finest, consistency, u.h_values[-1], SymbolExpr(func(variables[0]), variables)
    )
