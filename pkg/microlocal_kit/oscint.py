"""Oscillatory integrals, critical points, stationary phase and Lagrangian charts.

``I(a, phi)(x) = int exp(i phi(x, theta) / h) a(x, theta) dtheta`` is evaluated by
trapezoid quadrature over the theta-box of a PhasePresentation. Its
asymptotics come from the stationary-phase expansion

    (2 pi h)^(d/2) |det Phi''|^(-1/2) exp(i pi sgn Phi'' / 4) exp(i Phi / h) sum_j h^j L_j a

with ``L_j a = sum_{nu - mu = j, 2 nu >= 3 mu} i^-j 2^-nu P^nu (g^mu a) / (mu! nu!)``,
``P = -sum Phi''^-1_kl d_k d_l`` and ``g`` the cubic remainder of the phase. The
operators act on truncated Taylor jets, so the phase is differentiated at
most 2j + 2 times and the amplitude at most 2j times.
"""

from __future__ import annotations

import itertools
import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import sympy as sp
from scipy.interpolate import CubicSpline
from scipy.spatial import cKDTree

from .errors import (
    FoldError,
    GridMismatchError,
    MicrolocalError,
    SingularCriticalPointError,
    WindowError,
)
from .hgrid import (
    Grid,
    HFamily,
    SampledFunction,
    check_resolution,
    parallel_map,
    required_points,
)
from .symcalc import (
    SymbolExpr,
    _ComplexSpline1D,
    evaluate_expr,
    frequency_vars,
    parse_expr,
    parse_header,
    spline_function,
)

logger = logging.getLogger(__name__)

NEWTON_TOL = 1e-10
NEWTON_MAX_ITER = 50
DEDUP_RADIUS = 1e-6
SINGULAR_RTOL = 1e-8
RANK_TOL = 1e-8
MAX_STATIONARY_ORDER = 2
SUPPORT_TOLERANCE = 1e-12


# -- phase presentations -----------------------------------------------------


@dataclass(frozen=True)
class PhasePresentation:
    """A real phase phi(x, z, theta) on a box V.

    ``x_vars`` (and ``z_vars`` for operator kernels) are the base variables,
    ``theta_vars`` the fiber variables; ``box`` has one (lo, hi) per variable
    in ``variables`` order.
    """

    phi: sp.Expr
    x_vars: tuple[sp.Symbol, ...]
    theta_vars: tuple[sp.Symbol, ...] = ()
    box: tuple[tuple[float, float], ...] = ()
    z_vars: tuple[sp.Symbol, ...] = ()
    label: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "phi", sp.sympify(self.phi))
        object.__setattr__(self, "box", tuple((float(lo), float(hi)) for lo, hi in self.box))
        if len(self.box) != len(self.variables):
            raise ValueError(
                f"Phase box needs {len(self.variables)} intervals, got {len(self.box)}"
            )
        for lo, hi in self.box:
            if not lo < hi:
                raise ValueError(f"Phase box bounds must satisfy lo < hi, got ({lo}, {hi})")
        unbound = self.phi.free_symbols - set(self.variables)
        if unbound:
            names = ", ".join(sorted(str(s) for s in unbound))
            raise ValueError(f"Phase uses undeclared symbols: {names}")
        lattice = _lattice(self.box, 5)
        values = evaluate_expr(self.phi, self.variables, lattice.T)
        scale = max(1.0, float(np.max(np.abs(values))))
        if np.max(np.abs(values.imag)) > 1e-12 * scale:
            raise ValueError("Phase functions must be real on their box")

    @classmethod
    def from_text(cls, text: str, box: Sequence[tuple[float, float]], label: str = "") -> PhasePresentation:
        """Parse a phase file: ``variables: x <n> [z <n2>] theta <m>`` then one expression."""
        stems, body = parse_header(text)
        unknown = set(stems) - {"x", "z", "theta"}
        if unknown:
            raise ValueError(f"Unknown variable stems in phase header: {sorted(unknown)}")
        x_vars = stems.get("x", ())
        z_vars = stems.get("z", ())
        theta_vars = stems.get("theta", ())
        phi = parse_expr(body, x_vars + z_vars + theta_vars)
        return cls(phi, x_vars, theta_vars, tuple(box), z_vars, label)

    @property
    def base_vars(self) -> tuple[sp.Symbol, ...]:
        return self.x_vars + self.z_vars

    @property
    def variables(self) -> tuple[sp.Symbol, ...]:
        return self.x_vars + self.z_vars + self.theta_vars

    @property
    def n(self) -> int:
        return len(self.base_vars)

    @property
    def m(self) -> int:
        return len(self.theta_vars)

    @property
    def theta_box(self) -> tuple[tuple[float, float], ...]:
        return self.box[self.n :]

    @property
    def base_box(self) -> tuple[tuple[float, float], ...]:
        return self.box[: self.n]

    def as_symbol(self) -> SymbolExpr:
        return SymbolExpr(self.phi, self.variables)

    def gradient(self, variables: Sequence[sp.Symbol]) -> list[sp.Expr]:
        return [sp.diff(self.phi, v) for v in variables]

    def is_linear_in_theta(self) -> bool:
        return self.m > 0 and all(
            sp.diff(self.phi, a, b) == 0 for a in self.theta_vars for b in self.theta_vars
        )


def _lattice(box: Sequence[tuple[float, float]], per_axis: int, interior: bool = True) -> np.ndarray:
    """Regular lattice over a box; interior lattices include the center for odd counts."""
    axes = []
    for lo, hi in box:
        if interior:
            axes.append(np.linspace(lo, hi, per_axis + 2)[1:-1])
        else:
            axes.append(np.linspace(lo, hi, per_axis))
    return np.array(list(itertools.product(*axes)), dtype=float).reshape(-1, len(box))


# -- oscillatory integrals ---------------------------------------------------


def _theta_grid(pp: PhasePresentation, point: Sequence[float], h: float, n_theta: int | None) -> Grid:
    lo = tuple(b[0] for b in pp.theta_box)
    hi = tuple(b[1] for b in pp.theta_box)
    probe = Grid(lo, hi, (256,) * pp.m)
    args = [np.full(probe.shape, p) for p in point] + list(probe.mesh())
    xi_eff = [
        float(np.max(np.abs(evaluate_expr(g, pp.variables, args))))
        for g in pp.gradient(pp.theta_vars)
    ]
    if n_theta is None:
        counts = tuple(
            required_points(b[1] - b[0], h, xe, minimum=64) for b, xe in zip(pp.theta_box, xi_eff)
        )
        grid = Grid(lo, hi, counts)
    else:
        grid = Grid(lo, hi, (n_theta,) * pp.m)
    check_resolution(grid, h, xi_eff, what="theta quadrature")
    return grid


def _check_support(values: np.ndarray, axis_count: int, what: str) -> None:
    peak = float(np.max(np.abs(values))) if values.size else 0.0
    if peak == 0.0:
        return
    edge = 0.0
    for axis in range(values.ndim - axis_count, values.ndim):
        moved = np.moveaxis(np.abs(values), axis, 0)
        edge = max(edge, float(np.max(moved[0])), float(np.max(moved[-1])))
    if edge > SUPPORT_TOLERANCE * peak:
        raise WindowError(f"{what} is not supported inside the phase box ({edge / peak:.2e} of peak)")


def oscint_eval(
    a: SymbolExpr, pp: PhasePresentation, x: Sequence[float], h: float, n_theta: int | None = None
) -> complex:
    """Evaluate I(a, phi) at one base point by trapezoid quadrature over the theta-box.

    Args:
        a: Amplitude in ``pp.variables``.
        pp: Phase presentation.
        x: Base point (x, or (x, z) for kernels).
        h: Semi-classical parameter.
        n_theta: Nodes per theta axis; chosen from the resolution rule when None.

    Raises:
        ResolutionError: If ``n_theta`` under-resolves exp(i phi / h).
        WindowError: If the amplitude does not vanish at the theta-box boundary.
    """
    x = tuple(float(v) for v in np.atleast_1d(x))
    if len(x) != pp.n:
        raise ValueError(f"Expected a base point with {pp.n} coordinates, got {len(x)}")
    if pp.m == 0:
        args = [np.asarray(v) for v in x]
        phase = evaluate_expr(pp.phi, pp.variables, args).real
        return complex(np.exp(1j * phase / h) * a.evaluate(*args, h=h))
    grid = _theta_grid(pp, x, h, n_theta)
    args = [np.full(grid.shape, v) for v in x] + list(grid.mesh())
    amplitude = a.evaluate(*args, h=h)
    _check_support(amplitude, pp.m, "Amplitude")
    phase = evaluate_expr(pp.phi, pp.variables, args).real
    return complex(grid.cell_volume * np.sum(np.exp(1j * phase / h) * amplitude))


def oscint_sample(
    a: SymbolExpr,
    pp: PhasePresentation,
    grid: Grid,
    h: float,
    n_theta: int | None = None,
    block: int = 128,
) -> SampledFunction:
    """Sample I(a, phi) on a base grid (the Lagrangian state or kernel it defines).

    Raises:
        ResolutionError: If the base grid under-resolves the x-gradient of the phase
            on the amplitude support, or the theta grid under-resolves the theta-gradient.
    """
    if grid.dim != pp.n:
        raise GridMismatchError(f"Base grid has dimension {grid.dim}, phase has {pp.n} base variables")
    nodes = np.stack([c.ravel() for c in grid.mesh()], axis=1)
    base_gradient = pp.gradient(pp.base_vars)

    if pp.m == 0:
        args = [nodes[:, d] for d in range(pp.n)]
        amplitude = a.evaluate(*args, h=h)
        phase = evaluate_expr(pp.phi, pp.variables, args).real
        support = np.abs(amplitude) > 0
        xi_eff = [
            float(np.max(np.abs(evaluate_expr(g, pp.variables, args)[support]), initial=0.0))
            for g in base_gradient
        ]
        check_resolution(grid, h, xi_eff, what="phase on the base grid")
        return SampledFunction(grid, np.exp(1j * phase / h) * amplitude, h)

    center = [0.5 * (lo + hi) for lo, hi in pp.base_box]
    theta_grid = _theta_grid(pp, center, h, n_theta)
    if n_theta is None:
        # refine for the worst base point of the grid
        worst = max(
            (_theta_grid(pp, point, h, None).n_points for point in nodes[:: max(1, len(nodes) // 16)]),
            key=lambda counts: np.prod(counts),
        )
        theta_grid = Grid(theta_grid.lo, theta_grid.hi, worst)
    theta_nodes = np.stack([c.ravel() for c in theta_grid.mesh()], axis=1)

    def rows(start: int) -> tuple[np.ndarray, list[float]]:
        xb = nodes[start : start + block]
        args = [xb[:, [d]] for d in range(pp.n)] + [theta_nodes[None, :, k] for k in range(pp.m)]
        amplitude = a.evaluate(*args, h=h)
        phase = evaluate_expr(pp.phi, pp.variables, args).real
        support = np.abs(amplitude) > 0
        xi_eff = [
            float(np.max(np.abs(evaluate_expr(g, pp.variables, args))[support], initial=0.0))
            for g in base_gradient
        ]
        values = theta_grid.cell_volume * np.sum(np.exp(1j * phase / h) * amplitude, axis=1)
        return values, xi_eff

    pieces = parallel_map(rows, range(0, len(nodes), block))
    xi_eff = np.max(np.array([p[1] for p in pieces]), axis=0)
    check_resolution(grid, h, xi_eff, what="phase on the base grid")
    values = np.concatenate([p[0] for p in pieces])
    return SampledFunction(grid, values, h)


# -- critical points ---------------------------------------------------------


@dataclass(frozen=True)
class CriticalPointRecord:
    """Root of the gradient with its Hessian data; ``accepted`` when non-degenerate."""

    location: tuple[float, ...]
    hessian: np.ndarray = field(repr=False)
    det: float
    signature: int
    converged: bool
    accepted: bool
    value: float = 0.0


def _hessian_record(
    location: np.ndarray, hessian: np.ndarray, value: float, converged: bool
) -> CriticalPointRecord:
    sym = 0.5 * (hessian + hessian.T)
    eigenvalues = np.linalg.eigvalsh(sym)
    norm = float(np.max(np.abs(eigenvalues))) if eigenvalues.size else 0.0
    # relative to max(1, |Phi''|) so a vanishing 1x1 Hessian is singular too
    eps = SINGULAR_RTOL * max(norm, 1.0)
    singular = float(np.min(np.abs(eigenvalues))) <= eps
    signature = int(np.sum(eigenvalues > eps) - np.sum(eigenvalues < -eps))
    return CriticalPointRecord(
        tuple(float(v) for v in location),
        sym,
        float(np.prod(eigenvalues)),
        signature,
        converged,
        converged and not singular,
        value,
    )


def _bind(
    expr_vars: Sequence[sp.Symbol],
    unknowns: Sequence[sp.Symbol],
    fixed: dict,
    points: np.ndarray,
) -> list[np.ndarray]:
    index = {v: k for k, v in enumerate(unknowns)}
    args = []
    for v in expr_vars:
        if v in index:
            args.append(points[:, index[v]])
        elif v in fixed:
            args.append(np.broadcast_to(np.asarray(fixed[v], dtype=float), (len(points),)))
        else:
            raise ValueError(f"Variable {v} is neither solved for nor fixed")
    return args


def newton_solve(
    residuals: Sequence[sp.Expr],
    expr_vars: Sequence[sp.Symbol],
    unknowns: Sequence[sp.Symbol],
    seeds: np.ndarray,
    box: Sequence[tuple[float, float]],
    fixed: dict | None = None,
    tol: float = NEWTON_TOL,
    max_iter: int = NEWTON_MAX_ITER,
) -> tuple[np.ndarray, np.ndarray]:
    """Batched Gauss-Newton on residuals = 0 with pseudo-inverse steps.

    Works for square and under-determined systems (it then lands on the
    nearest point of the solution set). Seeds leaving the box are dropped.
    ``fixed`` values may be scalars or arrays with one entry per seed.

    Returns:
        (points, converged mask) for every seed.
    """
    fixed = {v: np.asarray(a, dtype=float) for v, a in (fixed or {}).items()}
    residuals = list(residuals)
    jacobian = [[sp.diff(r, v) for v in unknowns] for r in residuals]
    points = np.array(seeds, dtype=float).reshape(-1, len(unknowns))
    converged = np.zeros(len(points), dtype=bool)
    active = np.ones(len(points), dtype=bool)
    lo = np.array([b[0] for b in box])
    hi = np.array([b[1] for b in box])

    for _ in range(max_iter):
        if not np.any(active):
            break
        current = points[active]
        fixed_now = {v: (a[active] if np.ndim(a) else a) for v, a in fixed.items()}
        args = _bind(expr_vars, unknowns, fixed_now, current)
        F = np.stack([evaluate_expr(r, tuple(expr_vars), args).real for r in residuals], axis=1)
        J = np.stack(
            [
                np.stack([evaluate_expr(d, tuple(expr_vars), args).real for d in row], axis=1)
                for row in jacobian
            ],
            axis=1,
        )
        step = np.einsum("sij,sj->si", np.linalg.pinv(J, rcond=1e-12), F)
        updated = current - step
        step_norm = np.linalg.norm(step, axis=1)
        grad_norm = np.linalg.norm(F, axis=1)
        done = (step_norm <= tol * (1.0 + np.linalg.norm(current, axis=1))) & (grad_norm <= 1e-8)
        inside = np.all((updated >= lo - 1e-9) & (updated <= hi + 1e-9), axis=1)
        idx = np.flatnonzero(active)
        points[idx] = np.where(done[:, None], current, updated)
        converged[idx[done]] = True
        active[idx[done | ~inside]] = False
    return points, converged


def _dedup(points: np.ndarray, radius: float = DEDUP_RADIUS) -> np.ndarray:
    if len(points) == 0:
        return points
    order = np.lexsort(points.T[::-1])
    kept: list[np.ndarray] = []
    for p in points[order]:
        if all(np.linalg.norm(p - q) > radius for q in kept):
            kept.append(p)
    return np.array(kept)


def find_critical_points(
    Phi: SymbolExpr,
    box: Sequence[tuple[float, float]],
    seeds: Sequence[Sequence[float]] | None = None,
    variables: Sequence[sp.Symbol] | None = None,
    fixed: dict | None = None,
) -> list[CriticalPointRecord]:
    """Critical points of Phi in the selected variables by Newton from a 5^d seed lattice.

    Args:
        Phi: Real phase expression.
        box: (lo, hi) per selected variable.
        seeds: Extra user seeds.
        variables: Variables to solve for (default: all of Phi's variables).
        fixed: Values for the remaining variables.

    Returns:
        Records in lexicographic order of location, duplicates within 1e-6
        merged. Degenerate roots are kept with ``accepted=False``.
    """
    unknowns = tuple(variables) if variables is not None else Phi.variables
    fixed = fixed or {}
    if len(box) != len(unknowns):
        raise ValueError(f"Expected {len(unknowns)} box intervals, got {len(box)}")
    seed_array = _lattice(box, 5)
    if seeds is not None and len(seeds):
        seed_array = np.concatenate([seed_array, np.asarray(seeds, dtype=float).reshape(-1, len(unknowns))])
    gradient = [sp.diff(Phi.expr, v) for v in unknowns]
    points, converged = newton_solve(gradient, Phi.variables, unknowns, seed_array, box, fixed)
    lo = np.array([b[0] for b in box])
    hi = np.array([b[1] for b in box])
    inside = np.all((points >= lo) & (points <= hi), axis=1)
    roots = _dedup(points[converged & inside])
    if len(roots) == 0:
        logger.warning("find_critical_points: no seed converged inside %s", box)
        return []

    args = _bind(Phi.variables, unknowns, fixed, roots)
    hessian = np.stack(
        [
            np.stack(
                [evaluate_expr(sp.diff(g, v), Phi.variables, args).real for v in unknowns], axis=1
            )
            for g in gradient
        ],
        axis=1,
    )
    values = evaluate_expr(Phi.expr, Phi.variables, args).real
    records = [_hessian_record(r, H, float(v), True) for r, H, v in zip(roots, hessian, values)]
    logger.debug(
        "find_critical_points: %d roots, %d accepted", len(records), sum(r.accepted for r in records)
    )
    return records


# -- Taylor jets and stationary phase ----------------------------------------


def _multi_indices(dim: int, degree: int) -> list[tuple[int, ...]]:
    return [a for a in itertools.product(range(degree + 1), repeat=dim) if sum(a) <= degree]


class Jet:
    """Truncated Taylor polynomial ``sum_alpha c_alpha t^alpha``; coefficients broadcast over samples."""

    def __init__(self, coeffs: dict[tuple[int, ...], np.ndarray], dim: int, degree: int):
        self.coeffs = {a: c for a, c in coeffs.items() if sum(a) <= degree}
        self.dim = dim
        self.degree = degree

    @classmethod
    def of_expr(
        cls,
        expr: sp.Expr,
        variables: tuple[sp.Symbol, ...],
        args: Sequence[np.ndarray],
        dim: int,
        degree: int,
        h: float = 1.0,
    ) -> Jet:
        """Jet of expr in its first ``dim`` variables at the point given by args."""
        local = variables[:dim]
        coeffs = {}
        for alpha in _multi_indices(dim, degree):
            spec = [(v, k) for v, k in zip(local, alpha) if k]
            d = sp.diff(expr, *itertools.chain.from_iterable(spec)) if spec else expr
            scale = math.prod(math.factorial(k) for k in alpha)
            coeffs[alpha] = evaluate_expr(d, variables, args, h) / scale
        return cls(coeffs, dim, degree)

    def __mul__(self, other: Jet) -> Jet:
        return self.multiply(other, min(self.degree, other.degree))

    def multiply(self, other: Jet, degree: int) -> Jet:
        """Product truncated at total degree ``degree``."""
        out: dict[tuple[int, ...], np.ndarray] = {}
        for a, ca in self.coeffs.items():
            for b, cb in other.coeffs.items():
                key = tuple(i + j for i, j in zip(a, b))
                if sum(key) <= degree:
                    out[key] = out[key] + ca * cb if key in out else ca * cb
        return Jet(out, self.dim, degree)

    def without_low_order(self, below: int) -> Jet:
        return Jet({a: c for a, c in self.coeffs.items() if sum(a) >= below}, self.dim, self.degree)

    def derivative(self, k: int) -> Jet:
        out = {}
        for a, c in self.coeffs.items():
            if a[k]:
                key = a[:k] + (a[k] - 1,) + a[k + 1 :]
                out[key] = a[k] * c
        return Jet(out, self.dim, max(self.degree - 1, 0))

    def apply_P(self, inverse_hessian: np.ndarray) -> Jet:
        """P f = -sum_kl M^-1_kl d_k d_l f, with M^-1 of shape (..., dim, dim)."""
        out: dict[tuple[int, ...], np.ndarray] = {}
        for k in range(self.dim):
            first = self.derivative(k)
            for l in range(self.dim):
                second = first.derivative(l)
                weight = -inverse_hessian[..., k, l]
                for a, c in second.coeffs.items():
                    out[a] = out[a] + weight * c if a in out else weight * c
        return Jet(out, self.dim, max(self.degree - 2, 0))

    def constant(self) -> np.ndarray | complex:
        return self.coeffs.get((0,) * self.dim, 0.0)

    def hessian(self) -> np.ndarray:
        """Second derivatives at the base point, shape (..., dim, dim)."""
        sample = next(iter(self.coeffs.values()))
        out = np.zeros(np.shape(sample) + (self.dim, self.dim), dtype=complex)
        for k in range(self.dim):
            for l in range(self.dim):
                alpha = [0] * self.dim
                alpha[k] += 1
                alpha[l] += 1
                c = self.coeffs.get(tuple(alpha), 0.0)
                out[..., k, l] = 2.0 * c if k == l else c
        return out


def _stationary_pairs(j: int) -> list[tuple[int, int]]:
    return [(mu + j, mu) for mu in range(0, 2 * j + 1) if 2 * (mu + j) >= 3 * mu]


def stationary_phase_operators(
    a: sp.Expr,
    Phi: sp.Expr,
    variables: tuple[sp.Symbol, ...],
    args: Sequence[np.ndarray],
    dim: int,
    K: int,
    h: float = 1.0,
) -> tuple[list[np.ndarray], np.ndarray]:
    """``[L_0 a, ..., L_K a]`` at the critical points given by args, plus Phi''.

    The first ``dim`` variables are integrated over; the rest are parameters.
    """
    if K < 0 or K > MAX_STATIONARY_ORDER:
        raise ValueError(f"Stationary phase order K must be in [0, {MAX_STATIONARY_ORDER}], got {K}")
    phase_jet = Jet.of_expr(Phi, variables, args, dim, 2 * K + 2, h)
    hessian = phase_jet.hessian().real
    inverse = np.linalg.inv(hessian)
    g = phase_jet.without_low_order(3)
    amp_jet = Jet.of_expr(a, variables, args, dim, 2 * K, h)
    terms = []
    for j in range(K + 1):
        total = 0.0
        for nu, mu in _stationary_pairs(j):
            # the jets carry every coefficient that reaches degree 2 nu of g^mu a
            product = Jet(amp_jet.coeffs, dim, 2 * nu)
            for _ in range(mu):
                product = product.multiply(g, 2 * nu)
            for _ in range(nu):
                product = product.apply_P(inverse)
            coeff = (1j) ** (-j) / (2.0**nu * math.factorial(mu) * math.factorial(nu))
            total = total + coeff * product.constant()
        terms.append(np.asarray(total, dtype=complex))
    return terms, hessian


@dataclass(frozen=True)
class StationaryPhaseResult:
    """Asymptotic value and its per-order terms (k, term, cumulative)."""

    value: complex
    terms: tuple[complex, ...]
    prefactor: complex
    h: float

    @property
    def cumulative(self) -> tuple[complex, ...]:
        return tuple(np.cumsum(self.terms))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "k": range(len(self.terms)),
                "term_re": [t.real for t in self.terms],
                "term_im": [t.imag for t in self.terms],
                "cumulative_re": [c.real for c in self.cumulative],
                "cumulative_im": [c.imag for c in self.cumulative],
            }
        )


def stationary_phase(
    a: SymbolExpr,
    Phi: SymbolExpr,
    cp: CriticalPointRecord,
    h: float,
    K: int = 0,
) -> StationaryPhaseResult:
    """Stationary-phase approximation of ``int exp(i Phi / h) a`` through order h^K.

    Raises:
        SingularCriticalPointError: If the record was not accepted.
        ValueError: If K is outside [0, 2].
    """
    if not cp.accepted:
        raise SingularCriticalPointError(
            f"Critical point at {cp.location} is degenerate (det={cp.det:.3g})"
        )
    if a.variables != Phi.variables:
        raise ValueError("Amplitude and phase must share their variables")
    d = len(cp.location)
    args = [np.asarray(v) for v in cp.location]
    L, _ = stationary_phase_operators(a.expr, Phi.expr, Phi.variables, args, d, K, h)
    prefactor = (
        (2.0 * math.pi * h) ** (d / 2.0)
        * abs(cp.det) ** -0.5
        * np.exp(1j * math.pi * cp.signature / 4.0)
        * np.exp(1j * cp.value / h)
    )
    terms = tuple(complex(prefactor * h**j * complex(Lj)) for j, Lj in enumerate(L))
    return StationaryPhaseResult(complex(sum(terms)), terms, complex(prefactor), h)


# -- non-degeneracy and Lagrangian clouds -------------------------------------


def _sample_critical_set(pp: PhasePresentation, per_axis: int) -> np.ndarray:
    """Points of C_phi = {d_theta phi = 0} by Gauss-Newton projection of a lattice."""
    seeds = _lattice(pp.box, per_axis)
    residuals = pp.gradient(pp.theta_vars)
    points, converged = newton_solve(residuals, pp.variables, pp.variables, seeds, pp.box)
    lo = np.array([b[0] for b in pp.box])
    hi = np.array([b[1] for b in pp.box])
    inside = np.all((points >= lo) & (points <= hi), axis=1)
    return _dedup(points[converged & inside])


def _theta_block(pp: PhasePresentation, points: np.ndarray) -> np.ndarray:
    """Rows (phi''_{theta base}, phi''_{theta theta}) at each point, shape (P, m, n + m)."""
    args = [points[:, k] for k in range(points.shape[1])]
    rows = []
    for t in pp.theta_vars:
        g = sp.diff(pp.phi, t)
        rows.append(
            np.stack([evaluate_expr(sp.diff(g, v), pp.variables, args).real for v in pp.variables], axis=1)
        )
    return np.stack(rows, axis=1)


@dataclass(frozen=True)
class PhaseValidation:
    """Rank check of the theta-block along sampled points of C_phi."""

    points: np.ndarray = field(repr=False)
    min_singular_values: np.ndarray = field(repr=False)
    passed: np.ndarray = field(repr=False)

    @property
    def all_passed(self) -> bool:
        return bool(np.all(self.passed))

    @property
    def failures(self) -> np.ndarray:
        return self.points[~self.passed]

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.points, columns=[f"v{k}" for k in range(self.points.shape[1])])
        frame["sigma_min"] = self.min_singular_values
        frame["passed"] = self.passed
        return frame


def validate_phase(pp: PhasePresentation, samples: int = 5) -> PhaseValidation:
    """Check that (phi''_{theta x}, phi''_{theta theta}) has rank m on sampled C_phi.

    Raises:
        ValueError: If m = 0.
        WindowError: If no point of C_phi is found inside the box.
    """
    if pp.m == 0:
        raise ValueError("validate_phase needs at least one theta variable")
    points = _sample_critical_set(pp, samples)
    if len(points) == 0:
        raise WindowError(f"No points of the critical set found inside the phase box {pp.box}")
    blocks = _theta_block(pp, points)
    sigma = np.linalg.svd(blocks, compute_uv=False)
    sigma_min = sigma[:, -1] if sigma.ndim == 2 else sigma
    passed = sigma_min > RANK_TOL
    if not np.all(passed):
        logger.warning("validate_phase: %d of %d points fail the rank condition", int((~passed).sum()), len(passed))
    return PhaseValidation(points, sigma_min, passed)


@dataclass(frozen=True)
class LagrangianCloud:
    """Sampled Lambda_phi: ``points[i] = (x, xi)`` is the image of ``sources[i] = (x, theta)``."""

    sources: np.ndarray = field(repr=False)
    points: np.ndarray = field(repr=False)
    n: int
    collisions: tuple[tuple[int, int], ...] = ()
    rank_ok: np.ndarray | None = field(default=None, repr=False)

    @property
    def x(self) -> np.ndarray:
        return self.points[:, : self.n]

    @property
    def xi(self) -> np.ndarray:
        return self.points[:, self.n :]

    @property
    def injective(self) -> bool:
        return not self.collisions

    def __len__(self) -> int:
        return len(self.points)

    def to_frame(self) -> pd.DataFrame:
        columns = [f"x{k}" for k in range(self.n)] + [f"xi{k}" for k in range(self.n)]
        return pd.DataFrame(self.points, columns=columns)


def lambda_phi(pp: PhasePresentation, resolution: int = 41) -> LagrangianCloud:
    """Sample Lambda_phi = {(x, phi'_x) : (x, theta) in C_phi} and check j_phi for collisions."""
    if pp.z_vars:
        raise ValueError("lambda_phi expects a phase without z variables")
    if pp.m == 0:
        sources = _lattice(pp.box, resolution, interior=False)
        rank_ok = np.ones(len(sources), dtype=bool)
    else:
        sources = _sample_critical_set(pp, resolution)
        if len(sources) == 0:
            raise WindowError(f"No points of the critical set found inside the phase box {pp.box}")
        sigma = np.linalg.svd(_theta_block(pp, sources), compute_uv=False)
        rank_ok = sigma[:, -1] > RANK_TOL
    args = [sources[:, k] for k in range(sources.shape[1])]
    xi = np.stack(
        [evaluate_expr(g, pp.variables, args).real for g in pp.gradient(pp.x_vars)], axis=1
    )
    points = np.concatenate([sources[:, : pp.n], xi], axis=1)
    order = np.lexsort(sources.T[::-1])
    sources, points, rank_ok = sources[order], points[order], rank_ok[order]

    collisions = []
    for i, j in sorted(cKDTree(points).query_pairs(r=1e-8)):
        if np.linalg.norm(sources[i] - sources[j]) > DEDUP_RADIUS:
            collisions.append((i, j))
    if collisions:
        i, j = collisions[0]
        logger.warning(
            "j_phi is not injective: sources %s and %s map to %s", sources[i], sources[j], points[i]
        )
    return LagrangianCloud(sources, points, pp.n, tuple(collisions), rank_ok)


# -- generating-function charts ----------------------------------------------


@dataclass(frozen=True)
class GeneratingForm:
    """Chart Lambda = {(H'(xi), xi) : xi in window} with gauge H(xi_ref) = 0."""

    H: SymbolExpr
    window: tuple[tuple[float, float], ...]
    xi_ref: tuple[float, ...]
    jacobian_asymmetry: float = 0.0

    @classmethod
    def from_expr(cls, expr, window: Sequence[tuple[float, float]], n: int = 1) -> GeneratingForm:
        variables = frequency_vars(n)
        window = tuple((float(lo), float(hi)) for lo, hi in window)
        ref = tuple(0.5 * (lo + hi) for lo, hi in window)
        expr = sp.sympify(expr)
        expr = expr - expr.subs(dict(zip(variables, ref)))
        return cls(SymbolExpr(expr, variables), window, ref)

    @property
    def n(self) -> int:
        return len(self.window)

    def gradient(self) -> list[SymbolExpr]:
        return [self.H.diff(v) for v in self.H.variables]

    def x_of(self, xi: np.ndarray) -> np.ndarray:
        """H'(xi) for an array of shape (P, n)."""
        xi = np.atleast_2d(np.asarray(xi, dtype=float))
        return np.stack([g.evaluate(*xi.T).real for g in self.gradient()], axis=1)

    def sample(self, per_axis: int = 33) -> np.ndarray:
        """Points (H'(xi), xi) over the window interior, shape (P, 2n)."""
        xi = _lattice(self.window, per_axis)
        return np.concatenate([self.x_of(xi), xi], axis=1)

    def contains(self, xi: Sequence[float]) -> bool:
        return all(lo <= v <= hi for v, (lo, hi) in zip(xi, self.window))


def _fold_check(xi: np.ndarray, x: np.ndarray) -> None:
    """Raise FoldError when points with nearly equal xi have clearly different x."""
    span = float(np.ptp(x)) if len(x) else 0.0
    bins = max(8, len(xi) // 8)
    edges = np.linspace(xi.min(), xi.max(), bins + 1)
    which = np.clip(np.searchsorted(edges, xi, side="right") - 1, 0, bins - 1)
    for b in range(bins):
        members = x[which == b]
        if len(members) > 1 and np.ptp(members) > max(0.25 * span, 1e-9):
            raise FoldError(
                f"Projection to xi is not injective for xi in [{edges[b]:.4g}, {edges[b + 1]:.4g}]: "
                f"x spreads over [{members.min():.4g}, {members.max():.4g}]"
            )


def generating_chart(
    cloud: LagrangianCloud,
    window: Sequence[tuple[float, float]],
    tol: float = 1e-6,
    degree: int = 3,
) -> GeneratingForm:
    """Fit x(xi) on the window and integrate it to a generating function H.

    1D charts use a cubic spline of x against xi and its exact antiderivative.
    2D charts fit a polynomial of total ``degree`` per component, check
    ``dx_1/dxi_2 = dx_2/dxi_1`` and integrate along axis-ordered paths.

    Raises:
        FoldError: If the projection to xi is not injective on the window.
        MicrolocalError: If the fitted Jacobian is not symmetric within ``tol``.
        ValueError: If fewer than four cloud points lie in the window.
    """
    window = tuple((float(lo), float(hi)) for lo, hi in window)
    n = cloud.n
    if len(window) != n:
        raise ValueError(f"Window needs {n} intervals, got {len(window)}")
    inside = np.all(
        [(cloud.xi[:, k] >= lo) & (cloud.xi[:, k] <= hi) for k, (lo, hi) in enumerate(window)], axis=0
    )
    xi, x = cloud.xi[inside], cloud.x[inside]
    if len(xi) < 4:
        raise ValueError(f"Only {len(xi)} cloud points inside the window {window}; need 4")
    ref = tuple(0.5 * (lo + hi) for lo, hi in window)
    if n == 1:
        return _chart_1d(xi[:, 0], x[:, 0], window, ref)
    return _chart_nd(xi, x, window, ref, tol, degree)


def _chart_1d(xi: np.ndarray, x: np.ndarray, window, ref) -> GeneratingForm:
    _fold_check(xi, x)
    order = np.argsort(xi, kind="stable")
    xi, x = xi[order], x[order]
    keep = np.concatenate([[True], np.diff(xi) > 1e-12])
    xi, x = xi[keep], x[keep]
    spline = CubicSpline(xi, x)
    antiderivative = spline.antiderivative()
    antiderivative.c[-1] -= antiderivative(ref[0])
    lo, hi = window[0]
    H_function = spline_function(_ComplexSpline1D(antiderivative, None, lo, hi), 1, "H")
    variables = frequency_vars(1)
    logger.debug("generating_chart: %d nodes on [%g, %g]", len(xi), lo, hi)
    return GeneratingForm(SymbolExpr(H_function(variables[0]), variables), window, ref, 0.0)


def _chart_nd(xi: np.ndarray, x: np.ndarray, window, ref, tol: float, degree: int) -> GeneratingForm:
    n = xi.shape[1]
    variables = frequency_vars(n)
    monomials = _multi_indices(n, degree)
    design = np.stack([np.prod(xi**np.array(a), axis=1) for a in monomials], axis=1)
    components = []
    for k in range(n):
        coeffs, *_ = np.linalg.lstsq(design, x[:, k], rcond=None)
        expr = sum(
            sp.Float(c) * sp.Mul(*(v**p for v, p in zip(variables, a)))
            for c, a in zip(coeffs, monomials)
            if abs(c) > 1e-14
        )
        components.append(sp.sympify(expr))
    asymmetry = 0.0
    samples = _lattice(window, 9)
    for i, j in itertools.combinations(range(n), 2):
        gap = sp.diff(components[i], variables[j]) - sp.diff(components[j], variables[i])
        values = evaluate_expr(gap, variables, samples.T).real
        asymmetry = max(asymmetry, float(np.max(np.abs(values))))
    scale = max(1.0, float(np.max(np.abs(x))))
    if asymmetry > tol * scale:
        raise MicrolocalError(
            f"Fitted chart is not Lagrangian at resolution: Jacobian asymmetry {asymmetry:.3g}"
        )
    # axis-ordered path from xi_ref: along xi_1 with the others at ref, then xi_2, ...
    H = sp.S.Zero
    s = sp.Symbol("s", real=True)
    for k in range(n):
        point = {variables[j]: (variables[j] if j < k else sp.Float(ref[j])) for j in range(n)}
        point[variables[k]] = s
        H += sp.integrate(components[k].subs(point, simultaneous=True), (s, ref[k], variables[k]))
    return GeneratingForm(SymbolExpr(sp.expand(H), variables), window, ref, asymmetry)


# -- quadratic twist ---------------------------------------------------------


def choose_twist(B: np.ndarray) -> np.ndarray:
    """lambda * I with lambda = 1 + spectral radius of B, so that det(B + lambda I) != 0."""
    B = np.atleast_2d(np.asarray(B, dtype=float))
    radius = float(np.max(np.abs(np.linalg.eigvals(B)))) if B.size else 0.0
    return (1.0 + radius) * np.eye(B.shape[0])


def quadratic_twist(u: HFamily, A_mat: np.ndarray) -> HFamily:
    """Multiply every member by exp(i <A x, x> / (2 h)).

    Raises:
        ResolutionError: If the twist's phase gradient is under-resolved at some h.
    """
    A = np.atleast_2d(np.asarray(A_mat, dtype=float))
    if A.shape != (u.grid.dim, u.grid.dim):
        raise ValueError(f"Twist matrix must be {u.grid.dim}x{u.grid.dim}, got {A.shape}")
    if not np.allclose(A, A.T):
        raise ValueError("Twist matrix must be symmetric")
    mesh = u.grid.mesh()
    coords = np.stack([c for c in mesh], axis=-1)
    quadratic = np.einsum("...i,ij,...j->...", coords, A, coords)
    gradient = np.abs(np.einsum("ij,...j->...i", A, coords))

    def twist(member: SampledFunction) -> SampledFunction:
        support = np.abs(member.values) > SUPPORT_TOLERANCE * max(member.peak, 1e-300)
        if np.any(support):
            xi_eff = [float(np.max(gradient[..., k][support])) for k in range(u.grid.dim)]
            check_resolution(u.grid, member.h, xi_eff, what="quadratic twist")
        return member.with_values(np.exp(0.5j * quadratic / member.h) * member.values)

    return u.map(twist)
