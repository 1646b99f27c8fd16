"""Exception types raised by microlocal_kit.

Every error derives from ``ValueError`` so callers that validate input the
usual way keep working.
"""

from __future__ import annotations


class MicrolocalError(ValueError):
    """Base class for all domain errors."""


class GridMismatchError(MicrolocalError):
    """Grids, h values or sweeps of combined objects differ."""


class ResolutionError(MicrolocalError):
    """A grid is too coarse for the oscillation it has to carry.

    Attributes:
        h: The semi-classical parameter at which the rule failed.
        required_points: Smallest power-of-two point count per axis that satisfies it.
    """

    def __init__(self, message: str, h: float, required_points: int):
        super().__init__(message)
        self.h = h
        self.required_points = required_points


class WindowError(MicrolocalError):
    """A request leaves the grid box or the Nyquist frequency window."""


class InsufficientPointsError(MicrolocalError):
    """Fewer than the required number of sweep entries survived the floor."""

    def __init__(self, message: str, floor_hit: bool):
        super().__init__(message)
        self.floor_hit = floor_hit


class SingularCriticalPointError(MicrolocalError):
    """The Hessian at a critical point is numerically singular."""


class FoldError(MicrolocalError):
    """A projection is not injective (or not a local diffeomorphism) on a window."""


class ParseError(MicrolocalError):
    """Malformed symbol or phase text.

    Attributes:
        line: 1-based line of the offending token.
        column: 1-based column of the offending token.
        token: The offending token text ('' at end of input).
    """

    def __init__(self, message: str, line: int, column: int, token: str):
        super().__init__(f"{message} at line {line}, column {column}: {token!r}")
        self.line = line
        self.column = column
        self.token = token


class ScenarioError(MicrolocalError):
    """A scenario file is incomplete or contains unknown keys."""
