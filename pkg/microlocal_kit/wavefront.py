"""Semi-classical wavefront set estimation over an h sweep.

A phase-space point is tested by regressing a cutoff magnitude against h:

- Fourier test: ``max |F_h(chi u)(xi)|`` over a small xi-disc around xi0.
- Pseudodifferential test: ``||phi Op_h(chi(xi)) phi u||_L2``.
- Infinite points: ``max |F_h(chi u)(xi)| <xi>^T`` over a frequency cone.

A slope of at least ``threshold`` with a clean fit (or magnitudes hitting the
numerical floor) stands in for O(h^infinity) and classifies the point outside.
"""

from __future__ import annotations

import enum
import itertools
import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field, replace
from typing import Literal

import numpy as np
import pandas as pd

from .errors import GridMismatchError, WindowError
from .hgrid import (
    DEFAULT_FLOOR,
    Grid,
    HFamily,
    SampledFunction,
    SweepRegression,
    decay_fit,
    direct_sft_at,
    pair,
    parallel_map,
    sft,
    sobolev_norm,
)
from .operators import apply_kernel, op_apply
from .symcalc import OperatorSpec, SymbolExpr, bump, bump_values, frequency_vars

logger = logging.getLogger(__name__)


class Verdict(enum.StrEnum):
    INSIDE = "inside"
    OUTSIDE = "outside"
    INCONCLUSIVE = "inconclusive"


@dataclass(frozen=True)
class PhasePoint:
    """A point of T*R^n (finite) or a frequency direction over x (infinite)."""

    x: tuple[float, ...]
    xi: tuple[float, ...]
    kind: Literal["finite", "infinite"] = "finite"

    def __post_init__(self) -> None:
        object.__setattr__(self, "x", tuple(float(v) for v in np.atleast_1d(self.x)))
        object.__setattr__(self, "xi", tuple(float(v) for v in np.atleast_1d(self.xi)))
        if len(self.x) != len(self.xi):
            raise ValueError("x and xi must have the same dimension")
        if self.kind not in ("finite", "infinite"):
            raise ValueError(f"kind must be 'finite' or 'infinite', got {self.kind!r}")
        if self.kind == "infinite" and not math.isclose(
            float(np.linalg.norm(self.xi)), 1.0, abs_tol=1e-9
        ):
            raise ValueError(f"Infinite points need a unit direction, got |xi|={np.linalg.norm(self.xi):g}")

    @property
    def dim(self) -> int:
        return len(self.x)


@dataclass(frozen=True)
class WavefrontParams:
    """Thresholds and neighbourhood sizes shared by every point test."""

    delta: float = 0.5
    xi_radius: float = 0.25
    threshold: float = 6.0
    low_threshold: float = 2.0
    r2_outside: float = 0.98
    r2_inside: float = 0.9
    floor: float = DEFAULT_FLOOR
    stencil: int = 17
    shrink_disc: bool = False
    cone_angle: float = math.pi / 8
    cone_c: float = 1.0

    def __post_init__(self) -> None:
        if self.delta <= 0 or self.xi_radius <= 0:
            raise ValueError("delta and xi_radius must be positive")
        if self.stencil < 1:
            raise ValueError(f"stencil must be >= 1, got {self.stencil}")
        if self.cone_c <= 0:
            raise ValueError(f"cone_c must be positive, got {self.cone_c}")

    def with_delta(self, delta: float) -> WavefrontParams:
        return replace(self, delta=delta)


def classify(regression: SweepRegression, params: WavefrontParams) -> Verdict:
    """Apply the outside / inside / inconclusive rules to a sweep regression."""
    if regression.floor_hit:
        return Verdict.OUTSIDE
    if regression.slope >= params.threshold and regression.r_squared >= params.r2_outside:
        return Verdict.OUTSIDE
    if regression.slope <= params.low_threshold and regression.r_squared >= params.r2_inside:
        return Verdict.INSIDE
    return Verdict.INCONCLUSIVE


@dataclass(frozen=True)
class PointResult:
    point: PhasePoint
    regression: SweepRegression
    verdict: Verdict
    window: str = ""


@dataclass(frozen=True)
class WavefrontReport:
    """Classified points in probe order with the parameters that produced them."""

    results: tuple[PointResult, ...]
    params: WavefrontParams
    window: str = ""
    sweep_note: str = field(default="geometric sweep h = 2^-k chosen by the caller")

    def inside_points(self) -> list[PhasePoint]:
        return [r.point for r in self.results if r.verdict == Verdict.INSIDE]

    def outside_points(self) -> list[PhasePoint]:
        return [r.point for r in self.results if r.verdict == Verdict.OUTSIDE]

    def verdict_at(self, point: PhasePoint) -> Verdict:
        for result in self.results:
            if result.point == point:
                return result.verdict
        raise KeyError(f"Point {point} was not probed")

    def to_frame(self) -> pd.DataFrame:
        records = []
        for r in self.results:
            records.append(
                {
                    "x": " ".join(f"{v:g}" for v in r.point.x),
                    "xi": " ".join(f"{v:g}" for v in r.point.xi),
                    "kind": r.point.kind,
                    "slope": r.regression.slope,
                    "r2": r.regression.r_squared,
                    "floor_hit": r.regression.floor_hit,
                    "verdict": str(r.verdict),
                    "delta": self.params.delta,
                    "window": r.window or self.window,
                }
            )
        return pd.DataFrame(
            records,
            columns=["x", "xi", "kind", "slope", "r2", "floor_hit", "verdict", "delta", "window"],
        )


def _window_label(grid: Grid, h: float) -> str:
    return "|xi| <= " + ", ".join(f"{b:.4g}" for b in grid.nyquist(h))


def _check_cutoff(grid: Grid, x0: Sequence[float], delta: float) -> None:
    if not grid.contains(x0, margin=delta):
        raise WindowError(
            f"Cutoff of radius {delta:g} at x={tuple(x0)} touches the boundary of the grid box"
        )


def xi_stencil(xi0: Sequence[float], radius: float, count: int) -> np.ndarray:
    """Frequencies covering a disc around xi0: a line in 1D, center plus two rings in 2D."""
    xi0 = np.asarray(xi0, dtype=float)
    if xi0.size == 1:
        if count == 1:
            return xi0.reshape(1, 1)
        return (xi0[0] + radius * np.linspace(-1.0, 1.0, count)).reshape(-1, 1)
    per_ring = max(1, (count - 1) // 2)
    angles = 2.0 * math.pi * np.arange(per_ring) / per_ring
    ring = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    return np.concatenate([xi0[None, :], xi0 + 0.5 * radius * ring, xi0 + radius * ring])


def _disc_radius(params: WavefrontParams, h: float, h_max: float) -> float:
    if params.shrink_disc:
        return params.xi_radius * math.sqrt(h / h_max)
    return params.xi_radius


def _check_disc_window(grid: Grid, point: PhasePoint, params: WavefrontParams, h_min: float) -> None:
    nyquist = grid.nyquist(h_min)
    for axis, xi in enumerate(point.xi):
        if abs(xi) + params.xi_radius > nyquist[axis]:
            raise WindowError(
                f"xi-disc around {point.xi} exceeds the Nyquist limit {nyquist[axis]:.4g} "
                f"at h={h_min:g}"
            )


def wf_finite_test(u: HFamily, point: PhasePoint, params: WavefrontParams | None = None) -> PointResult:
    """Fourier-side test of a finite point.

    For each h the cutoff ``chi = bump(x; x0, delta)`` is applied and
    ``|F_h(chi u)|`` is maximized over a stencil in the xi-disc.

    Raises:
        WindowError: If the cutoff leaves the grid or the disc leaves the Nyquist window.
    """
    params = params or WavefrontParams()
    if point.kind != "finite":
        raise ValueError("wf_finite_test expects a finite point")
    grid = u.grid
    _check_cutoff(grid, point.x, params.delta)
    h_min, h_max = min(u.h_values), max(u.h_values)
    _check_disc_window(grid, point, params, h_min)
    chi = bump_values(grid.mesh(), point.x, params.delta)

    def magnitude(member: SampledFunction) -> float:
        stencil = xi_stencil(point.xi, _disc_radius(params, member.h, h_max), params.stencil)
        values = direct_sft_at(member.with_values(chi * member.values), stencil)
        return float(np.max(np.abs(values)))

    mags = parallel_map(magnitude, u.members)
    regression = decay_fit(u.h_values, mags, floor=params.floor, strict=False)
    verdict = classify(regression, params)
    logger.debug("finite test %s: slope=%.3f -> %s", point, regression.slope, verdict)
    return PointResult(point, regression, verdict, _window_label(grid, h_min))


def wf_psdo_test(u: HFamily, point: PhasePoint, params: WavefrontParams | None = None) -> PointResult:
    """Pseudodifferential test: regress ``||phi Op_h(chi(xi)) phi u||_L2`` over the sweep.

    ``phi`` is a bump of radius delta at x0 and ``chi`` a bump of radius xi_radius at xi0.
    """
    params = params or WavefrontParams()
    if point.kind != "finite":
        raise ValueError("wf_psdo_test expects a finite point")
    grid = u.grid
    _check_cutoff(grid, point.x, params.delta)
    h_min, h_max = min(u.h_values), max(u.h_values)
    _check_disc_window(grid, point, params, h_min)
    phi = bump_values(grid.mesh(), point.x, params.delta)
    xis = frequency_vars(grid.dim)

    def magnitude(member: SampledFunction) -> float:
        radius = _disc_radius(params, member.h, h_max)
        A = OperatorSpec.from_expr(bump(xis, point.xi, radius), grid.dim, label="chi(xi)")
        localized = op_apply(A, member.with_values(phi * member.values))
        return localized.with_values(phi * localized.values).l2_norm()

    mags = parallel_map(magnitude, u.members)
    regression = decay_fit(u.h_values, mags, floor=params.floor, strict=False)
    return PointResult(point, regression, classify(regression, params), _window_label(grid, h_min))


def _cone_mask(xi_mesh: tuple[np.ndarray, ...], direction: Sequence[float], params: WavefrontParams) -> np.ndarray:
    radius = np.sqrt(sum(c**2 for c in xi_mesh))
    along = sum(c * d for c, d in zip(xi_mesh, direction))
    mask = radius >= 1.0 / params.cone_c
    if len(xi_mesh) == 1:
        return mask & (along > 0)
    return mask & (along >= radius * math.cos(params.cone_angle))


def wf_infinite_test(u: HFamily, point: PhasePoint, params: WavefrontParams | None = None) -> PointResult:
    """Test of an infinite point (x0, direction) over the cone truncated to the Nyquist window.

    Transform values below the floor are zeroed before the ``<xi>^T`` weight is
    applied, so quadrature noise is never amplified.

    Raises:
        WindowError: If the cutoff touches the boundary or the truncated cone is empty.
    """
    params = params or WavefrontParams()
    if point.kind != "infinite":
        raise ValueError("wf_infinite_test expects an infinite point")
    grid = u.grid
    _check_cutoff(grid, point.x, params.delta)
    chi = bump_values(grid.mesh(), point.x, params.delta)

    def magnitude(member: SampledFunction) -> float:
        W = sft(member.with_values(chi * member.values))
        xi_mesh = W.grid.mesh()
        cone = _cone_mask(xi_mesh, point.xi, params)
        if not np.any(cone):
            raise WindowError(
                f"Frequency cone |xi| >= {1.0 / params.cone_c:g} around {point.xi} is empty "
                f"inside the Nyquist window at h={member.h:g}"
            )
        values = np.abs(W.values)
        values[values < params.floor] = 0.0
        weight = (1.0 + sum(c**2 for c in xi_mesh)) ** (params.threshold / 2.0)
        return float(np.max((values * weight)[cone]))

    mags = parallel_map(magnitude, u.members)
    regression = decay_fit(u.h_values, mags, floor=params.floor, strict=False)
    window = f"{1.0 / params.cone_c:g} <= |xi| <= {min(grid.nyquist(min(u.h_values))):.4g}"
    return PointResult(point, regression, classify(regression, params), window)


def probe_grid(x_values: Sequence[float], xi_values: Sequence[float]) -> list[PhasePoint]:
    """Finite 1D probe points, x-major order."""
    return [PhasePoint((x,), (xi,)) for x, xi in itertools.product(x_values, xi_values)]


def wf_scan(
    u: HFamily,
    points: Sequence[PhasePoint],
    params: WavefrontParams | None = None,
    method: Literal["fourier", "psdo"] = "fourier",
) -> WavefrontReport:
    """Run the point tests over a probe list; results keep the probe order."""
    params = params or WavefrontParams()
    finite_test = wf_finite_test if method == "fourier" else wf_psdo_test

    def run(point: PhasePoint) -> PointResult:
        if point.kind == "infinite":
            return wf_infinite_test(u, point, params)
        return finite_test(u, point, params)

    results = tuple(parallel_map(run, points))
    inconclusive = sum(r.verdict == Verdict.INCONCLUSIVE for r in results)
    if inconclusive:
        logger.info("wf_scan: %d of %d points inconclusive", inconclusive, len(results))
    return WavefrontReport(results, params, _window_label(u.grid, min(u.h_values)))


def verdict_stability(u: HFamily, point: PhasePoint, params: WavefrontParams | None = None) -> bool:
    """True when the finite-test verdict survives halving the cutoff radius."""
    params = params or WavefrontParams()
    full = wf_finite_test(u, point, params).verdict
    halved = wf_finite_test(u, point, params.with_delta(params.delta / 2.0)).verdict
    if full != halved:
        logger.warning("Verdict at %s changes from %s to %s when delta is halved", point, full, halved)
    return full == halved


# -- temperedness ------------------------------------------------------------


@dataclass(frozen=True)
class TemperednessReport:
    """Fitted growth orders k_m of ||chi u||_{H^m} ~ h^{-k_m}.

    A regression whose magnitudes all sit below the floor is read as
    k_m = -inf and counts as tempered.
    """

    m_values: tuple[float, ...]
    regressions: tuple[SweepRegression, ...]
    r2_min: float = 0.9

    @staticmethod
    def _below_floor(r: SweepRegression) -> bool:
        return r.floor_hit and not math.isfinite(r.slope)

    def _row_tempered(self, r: SweepRegression) -> bool:
        if self._below_floor(r):
            return True
        return math.isfinite(r.slope) and r.r_squared >= self.r2_min

    @property
    def growth_orders(self) -> tuple[float, ...]:
        return tuple(-math.inf if self._below_floor(r) else -r.slope for r in self.regressions)

    @property
    def tempered(self) -> bool:
        return all(self._row_tempered(r) for r in self.regressions)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "m": self.m_values,
                "k_m": self.growth_orders,
                "r2": [r.r_squared for r in self.regressions],
                "tempered": [self._row_tempered(r) for r in self.regressions],
            }
        )


def temperedness_check(
    u: HFamily,
    m_values: Sequence[float],
    center: Sequence[float] | None = None,
    delta: float | None = None,
    r2_min: float = 0.9,
    floor: float = DEFAULT_FLOOR,
) -> TemperednessReport:
    """Regress ``||chi u||_{H^m}`` over the sweep for each m.

    The cutoff defaults to a bump at the box center covering 80% of the
    shortest half-side.
    """
    grid = u.grid
    if center is None:
        center = tuple(0.5 * (lo + hi) for lo, hi in zip(grid.lo, grid.hi))
    if delta is None:
        delta = 0.4 * min(grid.length)
    _check_cutoff(grid, center, delta)
    chi = bump_values(grid.mesh(), center, delta)
    regressions = []
    for m in m_values:
        mags = [sobolev_norm(member.with_values(chi * member.values), m) for member in u]
        regressions.append(decay_fit(u.h_values, mags, floor=floor, strict=False))
    report = TemperednessReport(tuple(float(m) for m in m_values), tuple(regressions), r2_min)
    if not report.tempered:
        logger.warning("Family is not tempered at the fitted resolution: k_m=%s", report.growth_orders)
    return report


# -- wavefront calculus ------------------------------------------------------


def tensor(u: HFamily, v: HFamily) -> HFamily:
    """(u x v)(x, y) = u(x) v(y) for two 1D families on a shared sweep."""
    u.check_sweep(v)
    if u.grid.dim != 1 or v.grid.dim != 1:
        raise ValueError("tensor combines two 1D families into a 2D family")
    grid = Grid(u.grid.lo + v.grid.lo, u.grid.hi + v.grid.hi, u.grid.n_points + v.grid.n_points)
    members = tuple(
        SampledFunction(grid, np.outer(a.values, b.values), a.h) for a, b in zip(u, v)
    )
    return HFamily(grid, u.h_values, members)


def kernel_apply(V: HFamily, v: HFamily) -> HFamily:
    """(Vv)(x) = int V(x, y) v(y) dy per h."""
    V.check_sweep(v)
    members = tuple(apply_kernel(K, w) for K, w in zip(V, v))
    return HFamily(V.grid.axis_grid(0), V.h_values, members)


def kernel_compose(V: HFamily, W: HFamily) -> HFamily:
    """(V o W)(x, z) = int V(x, y) W(y, z) dy per h."""
    V.check_sweep(W)
    if V.grid.dim != 2 or W.grid.dim != 2:
        raise ValueError("kernel_compose expects two kernels on product grids")
    if not V.grid.axis_grid(1).matches(W.grid.axis_grid(0)):
        raise GridMismatchError("Inner axes of the composed kernels differ")
    grid = Grid(
        (V.grid.lo[0], W.grid.lo[1]), (V.grid.hi[0], W.grid.hi[1]), (V.grid.n_points[0], W.grid.n_points[1])
    )
    dy = V.grid.spacing[1]
    members = tuple(
        SampledFunction(grid, (K.values @ L.values) * dy, K.h) for K, L in zip(V, W)
    )
    return HFamily(grid, V.h_values, members)


def disjoint_pairing_test(u1: HFamily, u2: HFamily, floor: float = DEFAULT_FLOOR) -> SweepRegression:
    """Regression of |int u1 u2 dx| over the shared sweep."""
    u1.check_sweep(u2)
    mags = [abs(pair(a, b)) for a, b in zip(u1, u2)]
    return decay_fit(u1.h_values, mags, floor=floor, strict=False)


# -- operator wavefront ------------------------------------------------------


def _ball_offsets(n_coords: int, radius: float) -> np.ndarray:
    return radius * np.array(list(itertools.product((-1.0, 0.0, 1.0), repeat=n_coords)))


def op_wavefront(
    A: OperatorSpec,
    probes: Sequence[PhasePoint],
    h_values: Sequence[float],
    grid: Grid,
    params: WavefrontParams | None = None,
) -> WavefrontReport:
    """Classify probes by the decay of ``max |d^alpha a|`` (|alpha| <= 2) in a shrinking ball.

    The ball around each probe has radius ``xi_radius * sqrt(h / h_max)`` in
    every phase-space coordinate.

    Raises:
        WindowError: If a probe lies outside the grid box or the Nyquist window.
    """
    params = params or WavefrontParams()
    h_values = tuple(h_values)
    h_max, h_min = max(h_values), min(h_values)
    nyquist = grid.nyquist(h_min)
    n = A.dim
    for point in probes:
        if not grid.contains(point.x) or any(abs(xi) > b for xi, b in zip(point.xi, nyquist)):
            raise WindowError(f"Probe {point} lies outside the grid box or Nyquist window")

    full = SymbolExpr(A.symbol.full_expr(), A.symbol.variables)
    derivatives = [
        full.derivative(alpha)
        for alpha in itertools.product(range(3), repeat=2 * n)
        if sum(alpha) <= 2
    ]

    def run(point: PhasePoint) -> PointResult:
        center = np.array(point.x + point.xi)
        mags = []
        for h in h_values:
            ball = center + _ball_offsets(2 * n, params.xi_radius * math.sqrt(h / h_max))
            peak = 0.0
            for d in derivatives:
                values = d.evaluate(*ball.T, h=h)
                peak = max(peak, float(np.max(np.abs(values))))
            mags.append(peak)
        regression = decay_fit(h_values, mags, floor=params.floor, strict=False)
        return PointResult(point, regression, classify(regression, params))

    results = tuple(parallel_map(run, probes))
    return WavefrontReport(results, params, _window_label(grid, h_min))
