"""Grids, sampled h-families, the semi-classical Fourier transform and decay fits.

Conventions:
    Nodes are ``x_j = lo + j * dx`` with ``dx = (hi - lo) / N``. The dual grid of
    a grid at parameter ``h`` carries ``xi_k = 2*pi*h*k / L`` for
    ``k in [-N/2, N/2)``, so its Nyquist limit is ``pi * h / dx``.

    ``F_h u(xi) = int exp(-i x xi / h) u(x) dx`` is evaluated by trapezoid
    quadrature on the (assumed negligible at the boundary) box.
"""

from __future__ import annotations

import logging
import math
import os
from collections.abc import Callable, Iterable, Iterator, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import TypeVar

import numpy as np
import pandas as pd
from scipy import fft as sfft

from .errors import GridMismatchError, InsufficientPointsError, ResolutionError

logger = logging.getLogger(__name__)

DEFAULT_FLOOR = 1e-13
BOUNDARY_TOLERANCE = 1e-12
MIN_POINTS = 8

T = TypeVar("T")
R = TypeVar("R")


def _is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def next_power_of_two(n: float, minimum: int = MIN_POINTS) -> int:
    """Smallest power of two that is >= n and >= minimum."""
    target = max(int(math.ceil(n)), minimum)
    return 1 << (target - 1).bit_length()


@dataclass(frozen=True)
class Grid:
    """Uniform tensor grid on a box in R^dim (dim 1 or 2).

    The right endpoint ``hi`` is not a node: a grid with N points has nodes
    ``lo, lo + dx, ..., hi - dx``.
    """

    lo: tuple[float, ...]
    hi: tuple[float, ...]
    n_points: tuple[int, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "lo", tuple(float(v) for v in self.lo))
        object.__setattr__(self, "hi", tuple(float(v) for v in self.hi))
        object.__setattr__(self, "n_points", tuple(int(v) for v in self.n_points))

        if not (len(self.lo) == len(self.hi) == len(self.n_points)):
            raise ValueError("lo, hi and n_points must have one entry per axis")
        if self.dim not in (1, 2):
            raise ValueError(f"dim must be 1 or 2, got {self.dim}")
        for lo, hi in zip(self.lo, self.hi):
            if not lo < hi:
                raise ValueError(f"Grid bounds must satisfy lo < hi, got lo={lo}, hi={hi}")
        for n in self.n_points:
            if n < MIN_POINTS or not _is_power_of_two(n):
                raise ValueError(f"n_points must be a power of two >= {MIN_POINTS}, got {n}")

    @property
    def dim(self) -> int:
        return len(self.n_points)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.n_points

    @property
    def size(self) -> int:
        return int(np.prod(self.n_points))

    @property
    def length(self) -> tuple[float, ...]:
        return tuple(hi - lo for lo, hi in zip(self.lo, self.hi))

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple(length / n for length, n in zip(self.length, self.n_points))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    def axes(self) -> list[np.ndarray]:
        """Node coordinates along each axis."""
        return [
            lo + dx * np.arange(n) for lo, dx, n in zip(self.lo, self.spacing, self.n_points)
        ]

    def mesh(self) -> tuple[np.ndarray, ...]:
        """Broadcast node coordinates in 'ij' indexing."""
        return tuple(np.meshgrid(*self.axes(), indexing="ij"))

    def nyquist(self, h: float) -> tuple[float, ...]:
        """Largest reachable |xi| per axis at parameter h."""
        return tuple(math.pi * h / dx for dx in self.spacing)

    def dual(self, h: float) -> Grid:
        """Frequency grid on which ``sft`` returns samples at parameter h."""
        bounds = self.nyquist(h)
        return Grid(tuple(-b for b in bounds), bounds, self.n_points)

    def contains(self, point: Sequence[float], margin: float = 0.0) -> bool:
        return all(
            lo + margin <= p <= hi - margin for p, lo, hi in zip(point, self.lo, self.hi)
        )

    def matches(self, other: Grid) -> bool:
        """Equality up to floating-point noise in the bounds."""
        return (
            self.n_points == other.n_points
            and np.allclose(self.lo, other.lo, rtol=1e-12, atol=1e-14)
            and np.allclose(self.hi, other.hi, rtol=1e-12, atol=1e-14)
        )

    def axis_grid(self, axis: int) -> Grid:
        """The 1D grid of a single axis."""
        return Grid((self.lo[axis],), (self.hi[axis],), (self.n_points[axis],))


def make_grid(
    dim: int, lo: Sequence[float], hi: Sequence[float], n_points: Sequence[int]
) -> Grid:
    """Build a validated grid.

    Args:
        dim: Number of axes, 1 or 2.
        lo: Lower bound per axis.
        hi: Upper bound per axis.
        n_points: Power-of-two node count (>= 8) per axis.

    Returns:
        Grid with derived spacing ``(hi - lo) / n_points``.

    Raises:
        ValueError: On inverted bounds, bad counts or a dim/length mismatch.
    """
    if len(lo) != dim or len(hi) != dim or len(n_points) != dim:
        raise ValueError(f"Expected {dim} entries for lo, hi and n_points")
    return Grid(tuple(lo), tuple(hi), tuple(n_points))


@dataclass(frozen=True, eq=False)
class SampledFunction:
    """Complex samples of u(., h) at the nodes of a grid.

    ``dual_of`` is set when the samples live on the dual frequency grid of
    that position grid (the output of ``sft``).
    """

    grid: Grid
    values: np.ndarray
    h: float
    dual_of: Grid | None = None

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=complex)
        if values.size != self.grid.size:
            raise ValueError(
                f"values has {values.size} entries but the grid has {self.grid.size} nodes"
            )
        values = values.reshape(self.grid.shape).copy()
        if not np.all(np.isfinite(values)):
            raise ValueError("SampledFunction values must all be finite")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)
        if not self.h > 0:
            raise ValueError(f"h must be positive, got {self.h}")
        object.__setattr__(self, "h", float(self.h))

    @property
    def peak(self) -> float:
        return float(np.max(np.abs(self.values))) if self.values.size else 0.0

    @property
    def boundary_warning(self) -> bool:
        """True when the two outermost node layers carry non-negligible mass."""
        peak = self.peak
        if peak == 0.0 or self.dual_of is not None:
            return False
        edge = 0.0
        for axis in range(self.grid.dim):
            moved = np.moveaxis(np.abs(self.values), axis, 0)
            edge = max(edge, float(np.max(moved[:2])), float(np.max(moved[-2:])))
        return edge > BOUNDARY_TOLERANCE * peak

    def l2_norm(self) -> float:
        if self.dual_of is not None:
            # Plancherel weight on the frequency side
            weight = self.grid.cell_volume / (2.0 * math.pi * self.h) ** self.grid.dim
        else:
            weight = self.grid.cell_volume
        return float(math.sqrt(weight * np.sum(np.abs(self.values) ** 2)))

    def with_values(self, values: np.ndarray) -> SampledFunction:
        return SampledFunction(self.grid, values, self.h, self.dual_of)

    def _check_compatible(self, other: SampledFunction) -> None:
        if not self.grid.matches(other.grid):
            raise GridMismatchError("Sampled functions live on different grids")
        if not math.isclose(self.h, other.h, rel_tol=1e-12):
            raise GridMismatchError(f"h mismatch: {self.h} vs {other.h}")

    def __add__(self, other: SampledFunction) -> SampledFunction:
        self._check_compatible(other)
        return self.with_values(self.values + other.values)

    def __sub__(self, other: SampledFunction) -> SampledFunction:
        self._check_compatible(other)
        return self.with_values(self.values - other.values)

    def __mul__(self, other: complex | SampledFunction) -> SampledFunction:
        if isinstance(other, SampledFunction):
            self._check_compatible(other)
            return self.with_values(self.values * other.values)
        return self.with_values(self.values * complex(other))

    __rmul__ = __mul__

    def __neg__(self) -> SampledFunction:
        return self.with_values(-self.values)


def _phase_ramp(grid: Grid, dual: Grid, h: float, sign: float) -> np.ndarray:
    ramp = np.ones(grid.shape, dtype=complex)
    for axis, (lo, xi) in enumerate(zip(grid.lo, dual.axes())):
        shape = [1] * grid.dim
        shape[axis] = -1
        ramp = ramp * np.exp(sign * 1j * lo * xi / h).reshape(shape)
    return ramp


def sft(u: SampledFunction) -> SampledFunction:
    """Semi-classical Fourier transform on the dual grid.

    The endpoint phase ramp makes the result equal to trapezoid quadrature of
    ``int exp(-i x xi / h) u(x) dx`` at every dual node.

    Args:
        u: Position-space samples.

    Returns:
        Samples of F_h u on ``u.grid.dual(u.h)`` with ``dual_of`` set.

    Raises:
        GridMismatchError: If u already lives on a dual grid.
    """
    if u.dual_of is not None:
        raise GridMismatchError("sft expects a position-space function")
    grid, h = u.grid, u.h
    dual = grid.dual(h)
    spectrum = sfft.fftshift(sfft.fftn(u.values))
    values = grid.cell_volume * _phase_ramp(grid, dual, h, -1.0) * spectrum
    return SampledFunction(dual, values, h, dual_of=grid)


def isft(U: SampledFunction) -> SampledFunction:
    """Inverse of ``sft``: ``(2 pi h)^-n int exp(i x xi / h) U(xi) dxi`` on the dual grid.

    Raises:
        GridMismatchError: If U does not carry its position grid, or the grid
            is not the dual of that position grid at ``U.h``.
    """
    if U.dual_of is None:
        raise GridMismatchError("isft expects samples on a dual frequency grid")
    grid, h = U.dual_of, U.h
    dual = grid.dual(h)
    if not dual.matches(U.grid):
        raise GridMismatchError("Frequency samples do not match the dual grid of their position grid")
    shifted = sfft.ifftshift(_phase_ramp(grid, dual, h, 1.0) * U.values)
    values = sfft.ifftn(shifted) / grid.cell_volume
    return SampledFunction(grid, values, h)


def direct_sft_at(u: SampledFunction, xi_list: Sequence | np.ndarray) -> np.ndarray:
    """Trapezoid quadrature of F_h u at arbitrary frequencies.

    Args:
        u: Position-space samples.
        xi_list: Frequencies, shape (M,) in 1D or (M, 2) in 2D.

    Returns:
        Complex array of length M.

    Raises:
        ValueError: If xi_list is empty.
    """
    xi = np.asarray(xi_list, dtype=float)
    if xi.size == 0:
        raise ValueError("xi_list must not be empty")
    grid, h = u.grid, u.h
    xi = xi.reshape(-1, grid.dim)
    axes = grid.axes()
    if grid.dim == 1:
        support = np.nonzero(u.values)[0]
        if support.size == 0:
            return np.zeros(len(xi), dtype=complex)
        x = axes[0][support]
        vals = u.values[support]
        out = np.empty(len(xi), dtype=complex)
        chunk = max(1, 2_000_000 // max(1, x.size))
        for start in range(0, len(xi), chunk):
            block = xi[start : start + chunk, 0]
            out[start : start + chunk] = np.exp(-1j * np.outer(block, x) / h) @ vals
        return grid.cell_volume * out
    e0 = np.exp(-1j * np.outer(xi[:, 0], axes[0]) / h)
    e1 = np.exp(-1j * np.outer(xi[:, 1], axes[1]) / h)
    return grid.cell_volume * np.einsum("ma,ab,mb->m", e0, u.values, e1)


def dual_mesh(u: SampledFunction) -> tuple[np.ndarray, ...]:
    """Frequency coordinates of ``sft(u)`` in 'ij' indexing."""
    return u.grid.dual(u.h).mesh()


def sobolev_norm(u: SampledFunction, s: float) -> float:
    """Semi-classical H^s norm by quadrature over the dual grid."""
    U = sft(u)
    xi2 = sum(axis**2 for axis in U.grid.mesh())
    weight = U.grid.cell_volume / (2.0 * math.pi * u.h) ** u.grid.dim
    total = weight * np.sum((1.0 + xi2) ** s * np.abs(U.values) ** 2)
    return float(math.sqrt(total))


def pair(u1: SampledFunction, u2: SampledFunction) -> complex:
    """Bilinear pairing ``int u1 u2 dx`` (no complex conjugation).

    Raises:
        GridMismatchError: If the grids or h values differ.
    """
    u1._check_compatible(u2)
    return complex(u1.grid.cell_volume * np.sum(u1.values * u2.values))


def pair_spectral(u1: SampledFunction, u2: SampledFunction) -> complex:
    """Frequency-side form of ``pair``: ``(2 pi h)^-n int F u1(xi) F u2(-xi) dxi``.

    ``F u2(-xi)`` is read off as ``conj(F(conj u2)(xi))``, which holds exactly
    for the discrete transform.
    """
    u1._check_compatible(u2)
    U1 = sft(u1)
    U2_reflected = np.conj(sft(u2.with_values(np.conj(u2.values))).values)
    weight = U1.grid.cell_volume / (2.0 * math.pi * u1.h) ** u1.grid.dim
    return complex(weight * np.sum(U1.values * U2_reflected))


# -- resolution rule -------------------------------------------------------


def max_spacing(h: float, xi_eff: float) -> float:
    """Largest node spacing that resolves exp(i phi / h) with |grad phi| <= xi_eff."""
    return h * math.pi / (4.0 * xi_eff)


def required_points(length: float, h: float, xi_eff: float, minimum: int = MIN_POINTS) -> int:
    """Power-of-two node count that resolves the oscillation over a box side."""
    if xi_eff <= 0:
        return next_power_of_two(minimum, minimum)
    return next_power_of_two(length / max_spacing(h, xi_eff), minimum)


def check_resolution(grid: Grid, h: float, xi_eff: float | Sequence[float], what: str = "") -> None:
    """Raise ResolutionError when the grid under-resolves a phase at parameter h.

    Args:
        grid: Grid that carries the oscillation.
        h: Semi-classical parameter.
        xi_eff: Max phase-gradient magnitude on the support, scalar or per axis.
        what: Short label used in the error message.
    """
    xi_axes = np.broadcast_to(np.asarray(xi_eff, dtype=float), (grid.dim,))
    for axis, (dx, length, xe) in enumerate(zip(grid.spacing, grid.length, xi_axes)):
        if xe <= 0:
            continue
        allowed = max_spacing(h, xe)
        if dx > allowed * (1 + 1e-12):
            needed = required_points(length, h, xe)
            label = f" for {what}" if what else ""
            raise ResolutionError(
                f"Grid under-resolved{label} at h={h:g} on axis {axis}: spacing {dx:.3g} exceeds "
                f"{allowed:.3g}; need n_points >= {needed}",
                h=h,
                required_points=needed,
            )


# -- h families ------------------------------------------------------------


def worker_count() -> int:
    """Thread count from the MLK_THREADS environment variable (default 1)."""
    raw = os.environ.get("MLK_THREADS", "1").strip() or "1"
    try:
        count = int(raw)
    except ValueError as exc:
        raise ValueError(f"MLK_THREADS must be a positive integer, got {raw!r}") from exc
    if count < 1:
        raise ValueError(f"MLK_THREADS must be a positive integer, got {raw!r}")
    return count


def parallel_map(func: Callable[[T], R], items: Iterable[T]) -> list[R]:
    """Map over items with up to MLK_THREADS workers, results in input order."""
    items = list(items)
    workers = min(worker_count(), len(items))
    if workers <= 1:
        return [func(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(func, items))


def geometric_sweep(k_min: int, k_max: int) -> tuple[float, ...]:
    """h values 2^-k for k = k_min..k_max (strictly decreasing)."""
    if k_max < k_min:
        raise ValueError(f"Empty sweep: k_min={k_min} > k_max={k_max}")
    return tuple(2.0 ** (-k) for k in range(k_min, k_max + 1))


@dataclass(frozen=True)
class SweepSpec:
    """Geometric sweep h_k = 2^-k, k = k_min..k_max."""

    k_min: int = 4
    k_max: int = 10

    def __post_init__(self) -> None:
        if self.k_max < self.k_min:
            raise ValueError(f"Empty sweep: k_min={self.k_min} > k_max={self.k_max}")

    @property
    def h_values(self) -> tuple[float, ...]:
        return geometric_sweep(self.k_min, self.k_max)

    @classmethod
    def default_for(cls, dim: int) -> SweepSpec:
        return cls(4, 10) if dim == 1 else cls(4, 8)

    @classmethod
    def parse(cls, text: str) -> SweepSpec:
        """Parse 'k_min:k_max'."""
        try:
            k_min, k_max = (int(part) for part in text.split(":"))
        except ValueError as exc:
            raise ValueError(f"Sweep must look like 'k_min:k_max', got {text!r}") from exc
        return cls(k_min, k_max)


@dataclass(frozen=True, eq=False)
class HFamily:
    """One SampledFunction per h on a shared grid; h strictly decreasing and geometric."""

    grid: Grid
    h_values: tuple[float, ...]
    members: tuple[SampledFunction, ...] = field(repr=False)

    def __post_init__(self) -> None:
        h = tuple(float(v) for v in self.h_values)
        object.__setattr__(self, "h_values", h)
        object.__setattr__(self, "members", tuple(self.members))
        if not h:
            raise ValueError("HFamily needs at least one h value")
        if len(self.members) != len(h):
            raise ValueError("HFamily needs exactly one member per h value")
        if any(b >= a for a, b in zip(h, h[1:])):
            raise ValueError("h_values must be strictly decreasing")
        if len(h) > 2:
            ratios = np.array(h[1:]) / np.array(h[:-1])
            if np.max(np.abs(ratios - ratios[0])) > 1e-12:
                raise ValueError("h_values must form a geometric sequence")
        for member, hv in zip(self.members, h):
            if not member.grid.matches(self.grid):
                raise GridMismatchError("Every HFamily member must share the family grid")
            if not math.isclose(member.h, hv, rel_tol=1e-12):
                raise GridMismatchError(f"Member h={member.h} does not match sweep value {hv}")

    @classmethod
    def from_builder(
        cls,
        grid: Grid,
        h_values: Sequence[float],
        builder: Callable[[Grid, float], SampledFunction | np.ndarray],
    ) -> HFamily:
        """Synthesize a family by calling ``builder(grid, h)`` for every h."""

        def build(h: float) -> SampledFunction:
            out = builder(grid, h)
            if isinstance(out, SampledFunction):
                return out
            return SampledFunction(grid, out, h)

        members = parallel_map(build, list(h_values))
        return cls(grid, tuple(h_values), tuple(members))

    def map(self, func: Callable[[SampledFunction], SampledFunction]) -> HFamily:
        """Apply a per-member transformation; the result grid is taken from the members."""
        members = parallel_map(func, self.members)
        return HFamily(members[0].grid, self.h_values, tuple(members))

    def check_sweep(self, other: HFamily) -> None:
        if len(self.h_values) != len(other.h_values) or not np.allclose(
            self.h_values, other.h_values, rtol=1e-12
        ):
            raise GridMismatchError("h sweeps differ")

    def __iter__(self) -> Iterator[SampledFunction]:
        return iter(self.members)

    def __len__(self) -> int:
        return len(self.members)

    def __getitem__(self, index: int) -> SampledFunction:
        return self.members[index]


# -- decay regression ------------------------------------------------------


@dataclass(frozen=True)
class SweepRegression:
    """Log-log fit of magnitude ~ C * h^slope over an h sweep."""

    h_values: tuple[float, ...]
    magnitudes: tuple[float, ...]
    slope: float
    intercept: float
    r_squared: float
    floor_hit: bool
    floor: float = DEFAULT_FLOOR

    @property
    def usable(self) -> int:
        return sum(m >= self.floor for m in self.magnitudes)

    def predicted(self, h: float) -> float:
        return float(math.exp(self.intercept) * h**self.slope)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "h": self.h_values,
                "magnitude": self.magnitudes,
                "above_floor": [m >= self.floor for m in self.magnitudes],
            }
        )


def decay_fit(
    h_values: Sequence[float],
    magnitudes: Sequence[float],
    floor: float = DEFAULT_FLOOR,
    strict: bool = True,
    min_points: int = 4,
    flat_span: float = 0.25,
) -> SweepRegression:
    """Least-squares slope of log(magnitude) against log(h).

    Entries below ``floor`` are excluded and set ``floor_hit``. A sweep whose
    log-magnitudes vary by less than ``flat_span`` is reported with r² = 1:
    it is a confident slope-0 fit, not a bad one.

    Args:
        h_values: At least ``min_points`` geometric h values.
        magnitudes: Non-negative magnitudes, one per h.
        floor: Numerical floor.
        strict: When False, too few usable points yield a floor-only
            regression (slope and intercept nan) instead of an error.
        min_points: Minimum usable entries for a fit.
        flat_span: Log-span below which r² is set to 1.

    Returns:
        SweepRegression.

    Raises:
        ValueError: On mismatched lengths, non-positive or non-geometric h.
        InsufficientPointsError: Fewer than ``min_points`` usable entries (strict only).
    """
    h = np.asarray(h_values, dtype=float)
    mags = np.asarray(magnitudes, dtype=float)
    if h.shape != mags.shape:
        raise ValueError("h_values and magnitudes must have the same length")
    if len(h) < min_points:
        raise ValueError(f"decay_fit needs at least {min_points} h values, got {len(h)}")
    if np.any(h <= 0):
        raise ValueError("h values must be positive")
    ratios = h[1:] / h[:-1]
    if np.max(np.abs(ratios - ratios[0])) > 1e-9 * abs(ratios[0]):
        raise ValueError("h values must form a geometric sequence")
    if np.any(mags < 0) or not np.all(np.isfinite(mags)):
        raise ValueError("magnitudes must be finite and non-negative")

    keep = mags >= floor
    floor_hit = bool(np.any(~keep))
    if int(keep.sum()) < min_points:
        if strict:
            raise InsufficientPointsError(
                f"Only {int(keep.sum())} magnitudes above the floor {floor:g}; "
                f"need {min_points}",
                floor_hit=floor_hit,
            )
        return SweepRegression(
            tuple(h), tuple(mags), math.nan, math.nan, math.nan, floor_hit, floor
        )

    lx = np.log(h[keep])
    ly = np.log(mags[keep])
    slope, intercept = np.polyfit(lx, ly, 1)
    residual = ly - (slope * lx + intercept)
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    if np.ptp(ly) < flat_span or ss_tot <= 1e-300:
        r_squared = 1.0
    else:
        r_squared = float(np.clip(1.0 - np.sum(residual**2) / ss_tot, 0.0, 1.0))
    logger.debug("decay fit slope=%.4f r2=%.4f floor_hit=%s", slope, r_squared, floor_hit)
    return SweepRegression(
        tuple(h), tuple(mags), float(slope), float(intercept), r_squared, floor_hit, floor
    )
