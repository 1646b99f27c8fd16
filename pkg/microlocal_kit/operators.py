"""Left quantization Op_h(a) on sampled functions, operator kernels and microlocal equivalence.

``Op_h(a) u(x) = (2 pi h)^-n int exp(i x xi / h) a(x, xi) F_h u(xi) dxi`` is evaluated
on the dual grid of ``u``. Terms of the symbol that factor as ``f(x) g(xi)``
go through one inverse transform each; the rest use direct quadrature
row by row.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np
import pandas as pd
import sympy as sp
from scipy import fft as sfft

from .errors import GridMismatchError, WindowError
from .hgrid import (
    DEFAULT_FLOOR,
    Grid,
    HFamily,
    SampledFunction,
    SweepRegression,
    decay_fit,
    isft,
    parallel_map,
    sft,
)
from .symcalc import (
    OperatorSpec,
    SymbolExpr,
    box_cutoff,
    evaluate_expr,
    phase_space_vars,
    position_vars,
)

logger = logging.getLogger(__name__)

# Relative size of the integrand allowed on the outermost dual-grid layer.
WINDOW_TOLERANCE = 1e-8

# Rows of the general quadrature evaluated per block.
_ROW_BLOCK = 256


def _edge_mask(shape: tuple[int, ...]) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    for axis in range(len(shape)):
        index = [slice(None)] * len(shape)
        index[axis] = 0
        mask[tuple(index)] = True
        index[axis] = -1
        mask[tuple(index)] = True
    return mask


def _check_window(integrand: np.ndarray, edge: np.ndarray, what: str) -> None:
    peak = float(np.max(np.abs(integrand))) if integrand.size else 0.0
    if peak == 0.0:
        return
    at_edge = float(np.max(np.abs(integrand[..., edge])))
    if at_edge > WINDOW_TOLERANCE * peak:
        raise WindowError(
            f"{what} reaches the Nyquist window edge ({at_edge / peak:.2e} of its peak); "
            "refine the grid or shrink the symbol support"
        )


def split_separable(
    expr: sp.Expr, xs: Sequence[sp.Symbol], xis: Sequence[sp.Symbol]
) -> tuple[dict[sp.Expr, sp.Expr], sp.Expr]:
    """Group the terms of expr as ``sum_g f_g(x) g(xi)`` plus a non-separable remainder.

    Returns:
        (mapping xi-factor -> summed x-factor, remainder expression).
    """
    separable: dict[sp.Expr, sp.Expr] = {}
    remainder = sp.S.Zero
    x_set = set(xs)
    for term in sp.Add.make_args(sp.expand(expr, deep=False)):
        x_part, xi_part = term.as_independent(*xis, as_Add=False)
        if xi_part.free_symbols & x_set:
            remainder += term
            continue
        separable[xi_part] = separable.get(xi_part, sp.S.Zero) + x_part
    return separable, remainder


def _quadrature_rows(
    expr: sp.Expr,
    variables: tuple[sp.Symbol, ...],
    grid: Grid,
    U: SampledFunction,
    edge: np.ndarray,
    h: float,
) -> np.ndarray:
    """(2 pi h)^-n sum_k dxi exp(i x xi_k / h) a(x, xi_k) U_k, one block of x rows at a time."""
    x_nodes = np.stack([c.ravel() for c in grid.mesh()], axis=1)
    xi_nodes = np.stack([c.ravel() for c in U.grid.mesh()], axis=1)
    weight = U.grid.cell_volume / (2.0 * math.pi * h) ** grid.dim
    spectrum = U.values.ravel()
    edge_flat = edge.ravel()

    def block(start: int) -> np.ndarray:
        xb = x_nodes[start : start + _ROW_BLOCK]
        args = [xb[:, [d]] for d in range(grid.dim)] + [xi_nodes[None, :, d] for d in range(grid.dim)]
        symbol = evaluate_expr(expr, variables, args, h)
        integrand = symbol * spectrum[None, :]
        _check_window(integrand, edge_flat, "Symbol times spectrum")
        phase = np.exp(1j * (xb @ xi_nodes.T) / h)
        return weight * np.sum(phase * integrand, axis=1)

    starts = range(0, len(x_nodes), _ROW_BLOCK)
    return np.concatenate(parallel_map(block, starts)).reshape(grid.shape)


def op_apply(A: OperatorSpec, u: SampledFunction) -> SampledFunction:
    """Apply Op_h(a) in left quantization to u at the h carried by u.

    Args:
        A: Operator with symbol in (x..., xi...) and h.
        u: Position-space samples; their spectrum must vanish at the Nyquist edge.

    Returns:
        Op_h(a) u on the grid of u.

    Raises:
        GridMismatchError: If the operator and u live in different dimensions.
        WindowError: If symbol times spectrum is not negligible at the window edge.
    """
    if u.grid.dim != A.dim:
        raise GridMismatchError(f"Operator acts on R^{A.dim}, state lives on R^{u.grid.dim}")
    grid, h = u.grid, u.h
    xs, xis = A.position_vars, A.frequency_vars
    U = sft(u)
    edge = _edge_mask(U.grid.shape)
    separable, remainder = split_separable(A.symbol.full_expr(), xs, xis)

    out = np.zeros(grid.shape, dtype=complex)
    x_mesh = grid.mesh()
    xi_mesh = U.grid.mesh()
    for xi_part, x_part in separable.items():
        g = evaluate_expr(xi_part, xis, xi_mesh, h)
        weighted = g * U.values
        _check_window(weighted, edge, f"Frequency factor {xi_part}")
        f = evaluate_expr(x_part, xs, x_mesh, h)
        out += f * isft(U.with_values(weighted)).values
    if remainder != 0:
        logger.debug("op_apply: non-separable remainder %s, direct quadrature", remainder)
        out += _quadrature_rows(remainder, xs + xis, grid, U, edge, h)
    return SampledFunction(grid, out, h)


def op_apply_family(A: OperatorSpec, family: HFamily) -> HFamily:
    """op_apply on every member of an h-family."""
    return family.map(lambda u: op_apply(A, u))


def kernel(A: OperatorSpec, grid: Grid, h: float) -> SampledFunction:
    """Schwartz kernel of Op_h(a) on the product grid ``grid x grid`` (1D symbols only).

    Row ``i`` is ``(1/L) fft(ifftshift(a(x_i, xi) exp(i (x_i - lo) xi / h)))``, which
    is the dual-grid quadrature of ``(2 pi h)^-1 int exp(i (x - y) xi / h) a(x, xi) dxi``.

    Raises:
        ValueError: If the operator or grid is not one-dimensional.
        WindowError: If the symbol is not negligible at the box or Nyquist edges.
    """
    if A.dim != 1 or grid.dim != 1:
        raise ValueError("kernel is implemented for operators on R^1")
    x = grid.axes()[0]
    xi = grid.dual(h).axes()[0]
    lo, length = grid.lo[0], grid.length[0]
    X, XI = np.meshgrid(x, xi, indexing="ij")
    symbol = A.symbol.evaluate(X, XI, h=h)
    peak = float(np.max(np.abs(symbol)))
    if peak > 0.0:
        edge = max(
            float(np.max(np.abs(symbol[:, [0, -1]]))),
            float(np.max(np.abs(symbol[[0, -1], :]))),
        )
        if edge > WINDOW_TOLERANCE * peak:
            raise WindowError(
                f"Kernel symbol is not supported inside the grid box and Nyquist window "
                f"(edge/peak = {edge / peak:.2e})"
            )
    rows = symbol * np.exp(1j * (X - lo) * XI / h)
    values = sfft.fft(sfft.ifftshift(rows, axes=1), axis=1) / length
    product = Grid((grid.lo[0], grid.lo[0]), (grid.hi[0], grid.hi[0]), (grid.n_points[0],) * 2)
    return SampledFunction(product, values, h)


def apply_kernel(K: SampledFunction, u: SampledFunction) -> SampledFunction:
    """Quadrature ``int K(x, y) u(y) dy`` for a kernel on the product grid of u's 1D grid."""
    if u.grid.dim != 1 or K.grid.dim != 2:
        raise ValueError("apply_kernel expects a 2D kernel and a 1D state")
    if not K.grid.axis_grid(1).matches(u.grid):
        raise GridMismatchError("Kernel y-axis does not match the state grid")
    if not math.isclose(K.h, u.h, rel_tol=1e-12):
        raise GridMismatchError(f"h mismatch: {K.h} vs {u.h}")
    values = (K.values @ u.values) * u.grid.spacing[0]
    return SampledFunction(K.grid.axis_grid(0), values, u.h)


def cutoff_symbol(box: Sequence[tuple[float, float]], n: int = 1, margin: float = 1.2) -> SymbolExpr:
    """Phase-space cutoff equal to a product of bumps covering ``box`` enlarged by margin.

    Args:
        box: (lo, hi) per phase-space coordinate, positions first then frequencies.
        n: Dimension of the base space.
        margin: Radius scale; values > 1 make the cutoff elliptic on the whole box.
    """
    if len(box) != 2 * n:
        raise ValueError(f"A phase-space box on R^{n} needs {2 * n} intervals, got {len(box)}")
    variables = phase_space_vars(n)
    return SymbolExpr(box_cutoff(variables, box, margin), variables)


@dataclass(frozen=True)
class EquivalenceReport:
    """Sweep of sup_u ||A (T - T') B u|| with the resulting verdict."""

    regression: SweepRegression
    threshold: float
    equivalent: bool

    def to_frame(self) -> pd.DataFrame:
        frame = self.regression.to_frame()
        frame["equivalent"] = self.equivalent
        return frame


def _check_box_in_window(box: Sequence[tuple[float, float]], grid: Grid, h: float) -> None:
    n = grid.dim
    nyquist = grid.nyquist(h)
    for axis in range(n):
        lo, hi = box[axis]
        if lo < grid.lo[axis] or hi > grid.hi[axis]:
            raise WindowError(f"Box x-range [{lo}, {hi}] leaves the grid on axis {axis}")
        lo, hi = box[n + axis]
        if max(abs(lo), abs(hi)) > nyquist[axis]:
            raise WindowError(
                f"Box xi-range [{lo}, {hi}] exceeds the Nyquist limit {nyquist[axis]:.3g} at h={h:g}"
            )


def microlocal_equiv(
    T_apply: Callable[[SampledFunction], SampledFunction],
    Tp_apply: Callable[[SampledFunction], SampledFunction],
    U: Sequence[tuple[float, float]],
    V: Sequence[tuple[float, float]],
    states: Sequence[HFamily],
    threshold: float = 6.0,
    margin: float = 1.2,
    floor: float = DEFAULT_FLOOR,
) -> EquivalenceReport:
    """Test whether T and T' are microlocally equivalent near V x U.

    Cutoffs A (on V) and B (on U) are bump products enlarged by ``margin``; for
    each h the largest ``||A (T - T') B u||_L2`` over the states is regressed.

    Raises:
        GridMismatchError: If the states do not share one sweep and grid.
        WindowError: If an enlarged box leaves the grid or the Nyquist window.
    """
    if not states:
        raise ValueError("microlocal_equiv needs at least one state family")
    first = states[0]
    for family in states[1:]:
        first.check_sweep(family)
        if not family.grid.matches(first.grid):
            raise GridMismatchError("All state families must share one grid")
    n = first.grid.dim
    enlarged = [
        [(0.5 * (lo + hi) - 0.5 * (hi - lo) * margin, 0.5 * (lo + hi) + 0.5 * (hi - lo) * margin)
         for lo, hi in box]
        for box in (U, V)
    ]
    for box in enlarged:
        _check_box_in_window(box, first.grid, min(first.h_values))
    B = OperatorSpec.from_expr(cutoff_symbol(U, n, margin), n, label="B")
    A = OperatorSpec.from_expr(cutoff_symbol(V, n, margin), n, label="A")

    def magnitude(index: int) -> float:
        worst = 0.0
        for family in states:
            Bu = op_apply(B, family[index])
            diff = T_apply(Bu) - Tp_apply(Bu)
            worst = max(worst, op_apply(A, diff).l2_norm())
        return worst

    mags = parallel_map(magnitude, range(len(first)))
    regression = decay_fit(first.h_values, mags, floor=floor, strict=False)
    # nan slope: too few magnitudes above the floor to fit
    equivalent = math.isnan(regression.slope) or regression.slope >= threshold
    logger.info(
        "microlocal_equiv: slope=%.3f floor_hit=%s -> %s",
        regression.slope,
        regression.floor_hit,
        "equivalent" if equivalent else "not equivalent",
    )
    return EquivalenceReport(regression, threshold, equivalent)


def h_multiplier(expr: sp.Expr, n: int = 1) -> Callable[[SampledFunction], SampledFunction]:
    """Multiplication by a position-space expression in x and h, as an operator action."""
    xs = position_vars(n)

    def apply(u: SampledFunction) -> SampledFunction:
        factor = evaluate_expr(sp.sympify(expr), xs, u.grid.mesh(), u.h)
        return u.with_values(factor * u.values)

    return apply


def kernel_norm_ratio(A: OperatorSpec, grid: Grid, h: float) -> float:
    """``||K||_L2 (2 pi h)^(1/2) / ||a||_L2`` with the symbol norm taken over the x-grid times its dual grid.

    Equals 1 for a symbol supported inside the grid box and Nyquist window.
    """
    K = kernel(A, grid, h)
    dual = grid.dual(h)
    X, XI = np.meshgrid(grid.axes()[0], dual.axes()[0], indexing="ij")
    symbol = A.symbol.evaluate(X, XI, h=h)
    symbol_norm = math.sqrt(grid.cell_volume * dual.cell_volume * float(np.sum(np.abs(symbol) ** 2)))
    if symbol_norm == 0.0:
        raise ValueError("kernel_norm_ratio needs a non-zero symbol")
    return K.l2_norm() * math.sqrt(2.0 * math.pi * h) / symbol_norm
