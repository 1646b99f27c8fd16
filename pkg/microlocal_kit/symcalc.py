"""Symbol expressions, h-expansions and the left-quantization composition rule.

Symbols are sympy expressions in position variables (``x`` or ``x1, x2``),
frequency variables (``xi`` or ``xi1, xi2``) and the semi-classical parameter
``h``. They are differentiated exactly and compiled with ``sympy.lambdify``
for numpy evaluation.

Two custom sympy functions keep the calculus closed:

- ``Bump(s, k)``: the k-th derivative in s of ``exp(1 - 1/(1 - s))`` for s < 1
  and 0 otherwise. ``bump(x; c, delta) = Bump(|x - c|^2 / delta^2, 0)`` equals
  1 at the center and is C-infinity with compact support.
- spline functions (``spline_function``): interpolants that carry their own
  derivatives, used for charts and transported symbols.
"""

from __future__ import annotations

import itertools
import logging
import re
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import sympy as sp
from numpy.polynomial import Polynomial

from .errors import ParseError

logger = logging.getLogger(__name__)

H = sp.Symbol("h", positive=True)

MAX_SHARP_ORDER = 3


def sym(name: str) -> sp.Symbol:
    """Real sympy symbol; sympy caches symbols by name and assumptions."""
    return sp.Symbol(name, real=True)


def axis_names(stem: str, n: int) -> tuple[str, ...]:
    """'x', 1 -> ('x',); 'x', 2 -> ('x1', 'x2')."""
    if n == 1:
        return (stem,)
    return tuple(f"{stem}{i + 1}" for i in range(n))


def position_vars(n: int, stem: str = "x") -> tuple[sp.Symbol, ...]:
    return tuple(sym(name) for name in axis_names(stem, n))


def frequency_vars(n: int, stem: str = "xi") -> tuple[sp.Symbol, ...]:
    return tuple(sym(name) for name in axis_names(stem, n))


def phase_space_vars(n: int) -> tuple[sp.Symbol, ...]:
    return position_vars(n) + frequency_vars(n)


# -- bump profile ------------------------------------------------------------


@lru_cache(maxsize=None)
def _bump_polynomial(k: int) -> Polynomial:
    # d/ds [P(t) e^(1-t)] = (P'(t) - P(t)) t^2 e^(1-t) with t = 1/(1-s)
    poly = Polynomial([1.0])
    t2 = Polynomial([0.0, 0.0, 1.0])
    for _ in range(k):
        poly = (poly.deriv() - poly) * t2
    return poly


def bump_derivative(s, k=0):
    """k-th derivative of exp(1 - 1/(1 - s)) (0 for s >= 1), elementwise."""
    s = np.asarray(s)
    k = int(np.asarray(k).flat[0]) if np.ndim(k) else int(k)
    out = np.zeros(np.shape(s), dtype=float)
    s_real = np.real(s)
    mask = s_real < 1.0
    if np.any(mask):
        t = 1.0 / (1.0 - s_real[mask])
        vals = np.zeros_like(t)
        alive = t < 745.0
        tt = t[alive]
        vals[alive] = _bump_polynomial(k)(tt) * np.exp(1.0 - tt)
        out[mask] = vals
    return out if out.ndim else float(out)


def bump_values(coords: Sequence[np.ndarray], center: Sequence[float], delta: float) -> np.ndarray:
    """Numeric bump(x; center, delta) on broadcast coordinate arrays."""
    r2 = sum((np.asarray(c) - c0) ** 2 for c, c0 in zip(coords, center))
    return bump_derivative(r2 / delta**2, 0)


class Bump(sp.Function):
    """k-th derivative of the compactly supported profile exp(1 - 1/(1 - s))."""

    nargs = 2
    _imp_ = staticmethod(bump_derivative)

    @classmethod
    def eval(cls, s, k):
        if s.is_Number and s >= 1:
            return sp.S.Zero
        if s.is_zero and k.is_zero:
            return sp.S.One
        return None

    def fdiff(self, argindex=1):
        if argindex != 1:
            raise sp.ArgumentIndexError(self, argindex)
        s, k = self.args
        return Bump(s, k + 1)

    def _eval_evalf(self, prec):
        s, k = self.args
        if s.is_Number and k.is_Integer:
            return sp.Float(bump_derivative(float(s), int(k)), prec)
        return None

    def _eval_is_real(self):
        return self.args[0].is_real


def bump(variables: Sequence[sp.Expr], center: Sequence[float], delta: float) -> sp.Expr:
    """Symbolic bump(v; center, delta) = exp(1 - delta^2 / (delta^2 - |v - c|^2))."""
    r2 = sum((v - sp.nsimplify(c)) ** 2 for v, c in zip(variables, center))
    return Bump(r2 / sp.nsimplify(delta) ** 2, 0)


def box_cutoff(variables: Sequence[sp.Expr], box: Sequence[tuple[float, float]], margin: float = 1.0) -> sp.Expr:
    """Product of 1D bumps, one per variable, covering box enlarged by margin."""
    expr = sp.S.One
    for v, (lo, hi) in zip(variables, box):
        center = 0.5 * (lo + hi)
        radius = 0.5 * (hi - lo) * margin
        expr = expr * bump([v], [center], radius)
    return expr


# -- spline-backed functions -------------------------------------------------


class _ComplexSpline1D:
    """Complex cubic spline with a zero extension outside [lo, hi]."""

    def __init__(self, real, imag, lo: float, hi: float, extend: bool = False):
        self.real = real
        self.imag = imag
        self.lo = lo
        self.hi = hi
        self.extend = extend

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        out = self.real(x) + 1j * self.imag(x) if self.imag is not None else self.real(x) + 0j
        if not self.extend:
            out = np.where((x >= self.lo) & (x <= self.hi), out, 0.0)
        return out

    def derivative(self) -> _ComplexSpline1D:
        imag = self.imag.derivative() if self.imag is not None else None
        return _ComplexSpline1D(self.real.derivative(), imag, self.lo, self.hi, self.extend)


class _ComplexSpline2D:
    """Complex RectBivariateSpline with tracked derivative orders, zero outside its box."""

    def __init__(self, real, imag, box, orders=(0, 0), degree: int = 5):
        self.real = real
        self.imag = imag
        self.box = box
        self.orders = orders
        self.degree = degree

    def __call__(self, x, y):
        x, y = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(y, dtype=float))
        (x0, x1), (y0, y1) = self.box
        dx, dy = self.orders
        if dx >= self.degree or dy >= self.degree:
            return np.zeros(x.shape, dtype=complex)
        flat_x, flat_y = x.ravel(), y.ravel()
        out = self.real.ev(flat_x, flat_y, dx=dx, dy=dy).astype(complex)
        if self.imag is not None:
            out = out + 1j * self.imag.ev(flat_x, flat_y, dx=dx, dy=dy)
        inside = (flat_x >= x0) & (flat_x <= x1) & (flat_y >= y0) & (flat_y <= y1)
        return np.where(inside, out, 0.0).reshape(x.shape)

    def partial(self, axis: int) -> _ComplexSpline2D:
        orders = list(self.orders)
        orders[axis] += 1
        return _ComplexSpline2D(self.real, self.imag, self.box, tuple(orders), self.degree)


_spline_counter = itertools.count()


def spline_function(spline, arity: int, name: str = "Interp") -> type[sp.Function]:
    """Wrap a spline object as an undefined sympy function with exact derivatives.

    ``spline`` must be callable with ``arity`` arrays and provide
    ``derivative()`` (arity 1) or ``partial(axis)`` (arity 2).
    """
    cls_name = f"{name}{next(_spline_counter)}"
    children: dict[int, type[sp.Function]] = {}

    def fdiff(self, argindex=1):
        if argindex not in children:
            child = spline.derivative() if arity == 1 else spline.partial(argindex - 1)
            children[argindex] = spline_function(child, arity, name)
        return children[argindex](*self.args)

    return type(sp.Function)(
        cls_name,
        (sp.Function,),
        {"nargs": arity, "_imp_": staticmethod(spline), "fdiff": fdiff},
    )


# -- compiled evaluation -----------------------------------------------------


@lru_cache(maxsize=4096)
def _compile(expr: sp.Expr, variables: tuple[sp.Symbol, ...]) -> Callable:
    return sp.lambdify(variables + (H,), expr, modules=["numpy"])


def evaluate_expr(expr: sp.Expr, variables: tuple[sp.Symbol, ...], args, h: float = 1.0) -> np.ndarray:
    """Evaluate expr at broadcast argument arrays; always returns a complex array."""
    arrays = [np.asarray(a, dtype=float) for a in args]
    shape = np.broadcast_shapes(*(a.shape for a in arrays)) if arrays else ()
    func = _compile(expr, variables)
    with np.errstate(all="ignore"):
        value = func(*arrays, h)
    return np.broadcast_to(np.asarray(value, dtype=complex), shape).copy()


@dataclass(frozen=True)
class SymbolExpr:
    """Expression in declared variables (plus ``h``) with exact derivatives.

    Attributes:
        expr: The sympy expression.
        variables: Ordered argument list used by ``evaluate``.
        order: Declared (m, k) symbol-class metadata.
        support: Optional box, one (lo, hi) per variable, on which evaluation is finite.
    """

    expr: sp.Expr
    variables: tuple[sp.Symbol, ...]
    order: tuple[float, float] = (0.0, 0.0)
    support: tuple[tuple[float, float], ...] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "expr", sp.sympify(self.expr))
        object.__setattr__(self, "variables", tuple(self.variables))
        unbound = self.expr.free_symbols - set(self.variables) - {H}
        if unbound:
            names = ", ".join(sorted(str(s) for s in unbound))
            raise ValueError(f"Expression uses undeclared symbols: {names}")

    @classmethod
    def on_phase_space(cls, expr, n: int = 1, **kwargs) -> SymbolExpr:
        return cls(sp.sympify(expr), phase_space_vars(n), **kwargs)

    def evaluate(self, *args, h: float = 1.0) -> np.ndarray:
        if len(args) != len(self.variables):
            raise ValueError(f"Expected {len(self.variables)} arguments, got {len(args)}")
        return evaluate_expr(self.expr, self.variables, args, h)

    def diff(self, var: sp.Symbol, k: int = 1) -> SymbolExpr:
        return SymbolExpr(sp.diff(self.expr, var, k), self.variables, self.order, self.support)

    def derivative(self, alpha: Sequence[int]) -> SymbolExpr:
        """Mixed partial derivative, one order per declared variable."""
        spec = [(v, a) for v, a in zip(self.variables, alpha) if a]
        expr = sp.diff(self.expr, *itertools.chain.from_iterable(spec)) if spec else self.expr
        return SymbolExpr(expr, self.variables, self.order, self.support)

    def subs(self, mapping: dict, variables: Sequence[sp.Symbol] | None = None) -> SymbolExpr:
        new_vars = tuple(variables) if variables is not None else self.variables
        return SymbolExpr(self.expr.subs(mapping, simultaneous=True), new_vars, self.order)

    @property
    def is_zero(self) -> bool:
        return bool(self.expr.is_zero)

    def _coerce(self, other) -> tuple[sp.Expr, tuple[sp.Symbol, ...]]:
        if isinstance(other, SymbolExpr):
            extra = tuple(v for v in other.variables if v not in self.variables)
            return other.expr, self.variables + extra
        return sp.sympify(other), self.variables

    def __add__(self, other) -> SymbolExpr:
        expr, variables = self._coerce(other)
        return SymbolExpr(self.expr + expr, variables)

    __radd__ = __add__

    def __sub__(self, other) -> SymbolExpr:
        expr, variables = self._coerce(other)
        return SymbolExpr(self.expr - expr, variables)

    def __rsub__(self, other) -> SymbolExpr:
        expr, variables = self._coerce(other)
        return SymbolExpr(expr - self.expr, variables)

    def __mul__(self, other) -> SymbolExpr:
        expr, variables = self._coerce(other)
        return SymbolExpr(self.expr * expr, variables)

    __rmul__ = __mul__

    def __truediv__(self, other) -> SymbolExpr:
        expr, variables = self._coerce(other)
        return SymbolExpr(self.expr / expr, variables)

    def __neg__(self) -> SymbolExpr:
        return SymbolExpr(-self.expr, self.variables, self.order, self.support)

    def __str__(self) -> str:
        return str(self.expr)


def finite_difference_check(
    symbol: SymbolExpr, var_index: int, points: np.ndarray, step: float = 1e-5, h: float = 1.0
) -> float:
    """Max relative gap between the exact derivative and a central difference.

    Args:
        symbol: Expression to check.
        var_index: Index of the variable to differentiate.
        points: Array of shape (P, len(variables)).
        step: Finite-difference step.
        h: Value of the semi-classical parameter.

    Returns:
        max |exact - fd| / max(1, max |exact|) over the points.
    """
    points = np.asarray(points, dtype=float)
    exact = symbol.diff(symbol.variables[var_index]).evaluate(*points.T, h=h)
    plus, minus = points.copy(), points.copy()
    plus[:, var_index] += step
    minus[:, var_index] -= step
    fd = (symbol.evaluate(*plus.T, h=h) - symbol.evaluate(*minus.T, h=h)) / (2 * step)
    scale = max(1.0, float(np.max(np.abs(exact))))
    return float(np.max(np.abs(exact - fd)) / scale)


# -- h-expansions ------------------------------------------------------------


@dataclass(frozen=True)
class HSymbol:
    """Asymptotic sum a ~ sum_j h^j a_j, truncated at ``truncation`` when given."""

    terms: tuple[tuple[int, SymbolExpr], ...]
    truncation: int | None = None

    def __post_init__(self) -> None:
        terms = tuple((int(j), a) for j, a in self.terms)
        object.__setattr__(self, "terms", terms)
        if not terms:
            raise ValueError("HSymbol needs at least one term")
        powers = [j for j, _ in terms]
        if powers[0] < 0 or any(b <= a for a, b in zip(powers, powers[1:])):
            raise ValueError(f"HSymbol powers must be strictly increasing and >= 0, got {powers}")
        variables = terms[0][1].variables
        if any(a.variables != variables for _, a in terms):
            raise ValueError("All HSymbol terms must share their variables")

    @classmethod
    def of(cls, value, variables: Sequence[sp.Symbol] | None = None) -> HSymbol:
        """Wrap a SymbolExpr, expression or number as a single power-0 term."""
        if isinstance(value, HSymbol):
            return value
        if isinstance(value, SymbolExpr):
            return cls(((0, value),))
        if variables is None:
            raise ValueError("variables are required to wrap a bare expression")
        return cls(((0, SymbolExpr(sp.sympify(value), tuple(variables))),))

    @property
    def variables(self) -> tuple[sp.Symbol, ...]:
        return self.terms[0][1].variables

    @property
    def principal(self) -> SymbolExpr:
        for j, a in self.terms:
            if j == 0:
                return a
        return SymbolExpr(sp.S.Zero, self.variables)

    def term(self, power: int) -> SymbolExpr:
        for j, a in self.terms:
            if j == power:
                return a
        return SymbolExpr(sp.S.Zero, self.variables)

    def full_expr(self) -> sp.Expr:
        return sp.Add(*(H**j * a.expr for j, a in self.terms))

    def evaluate(self, *args, h: float) -> np.ndarray:
        return evaluate_expr(self.full_expr(), self.variables, args, h)

    def truncate(self, order: int) -> HSymbol:
        kept = tuple((j, a) for j, a in self.terms if j <= order)
        if not kept:
            kept = ((0, SymbolExpr(sp.S.Zero, self.variables)),)
        return HSymbol(kept, order)

    def __add__(self, other: HSymbol) -> HSymbol:
        merged: dict[int, sp.Expr] = {}
        for j, a in self.terms + HSymbol.of(other, self.variables).terms:
            merged[j] = merged.get(j, sp.S.Zero) + a.expr
        return HSymbol(tuple((j, SymbolExpr(e, self.variables)) for j, e in sorted(merged.items())))

    def scaled(self, factor) -> HSymbol:
        return HSymbol(tuple((j, a * factor) for j, a in self.terms), self.truncation)


@dataclass(frozen=True)
class OperatorSpec:
    """Op_h(a) in left quantization on R^dim."""

    symbol: HSymbol
    dim: int = 1
    quantization: str = "left"
    label: str = field(default="", compare=False)

    def __post_init__(self) -> None:
        if self.quantization != "left":
            raise ValueError(f"Only left quantization is supported, got {self.quantization!r}")
        if self.dim not in (1, 2):
            raise ValueError(f"dim must be 1 or 2, got {self.dim}")
        expected = phase_space_vars(self.dim)
        if self.symbol.variables != expected:
            raise ValueError(
                f"Operator symbols must use variables {expected}, got {self.symbol.variables}"
            )

    @classmethod
    def from_expr(cls, expr, dim: int = 1, label: str = "") -> OperatorSpec:
        if isinstance(expr, SymbolExpr):
            expr = expr.expr
        return cls(HSymbol.of(sp.sympify(expr), phase_space_vars(dim)), dim, label=label)

    @property
    def position_vars(self) -> tuple[sp.Symbol, ...]:
        return position_vars(self.dim)

    @property
    def frequency_vars(self) -> tuple[sp.Symbol, ...]:
        return frequency_vars(self.dim)


def _multi_indices(n: int, max_order: int) -> list[tuple[int, ...]]:
    return [
        alpha
        for alpha in itertools.product(range(max_order + 1), repeat=n)
        if sum(alpha) <= max_order
    ]


def sharp(a: HSymbol, b: HSymbol, J: int) -> HSymbol:
    """Left-quantization composition symbol truncated at total h-order J.

    ``a # b = sum_alpha h^|alpha| / (i^|alpha| alpha!) d_xi^alpha a d_x^alpha b``,
    keeping terms with total power of h at most J.

    Raises:
        ValueError: If J is negative or larger than 3, or the variables differ.
    """
    if J < 0 or J > MAX_SHARP_ORDER:
        raise ValueError(f"sharp order J must be in [0, {MAX_SHARP_ORDER}], got {J}")
    if a.variables != b.variables:
        raise ValueError("sharp needs both symbols on the same phase space")
    n = len(a.variables) // 2
    xs, xis = a.variables[:n], a.variables[n:]
    collected: dict[int, sp.Expr] = {}
    for (ja, sa), (jb, sb) in itertools.product(a.terms, b.terms):
        for alpha in _multi_indices(n, J - ja - jb if J >= ja + jb else -1):
            order = sum(alpha)
            power = ja + jb + order
            da = sa.expr
            db = sb.expr
            for var_xi, var_x, k in zip(xis, xs, alpha):
                if k:
                    da = sp.diff(da, var_xi, k)
                    db = sp.diff(db, var_x, k)
            coeff = sp.Integer(1) / (sp.I**order * sp.prod([sp.factorial(k) for k in alpha]))
            collected[power] = collected.get(power, sp.S.Zero) + coeff * da * db
    terms = tuple(
        (power, SymbolExpr(expr, a.variables))
        for power, expr in sorted(collected.items())
        if power == 0 or expr != 0
    )
    if not terms or terms[0][0] != 0:
        terms = ((0, SymbolExpr(sp.S.Zero, a.variables)),) + terms
    return HSymbol(terms, J)


# -- prefix text format ------------------------------------------------------

_TOKEN = re.compile(r"\s*(?:(;[^\n]*)|(\()|(\))|([^\s();]+))")

_UNARY = {"exp": sp.exp, "sin": sp.sin, "cos": sp.cos, "sqrt": sp.sqrt, "neg": lambda e: -e}
_CONSTANTS = {"pi": sp.pi, "I": sp.I, "h": H}


@dataclass(frozen=True)
class _Token:
    text: str
    line: int
    column: int


def _tokenize(text: str) -> list[_Token]:
    tokens: list[_Token] = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        pos = 0
        while pos < len(line):
            match = _TOKEN.match(line, pos)
            if match is None or match.end() == pos:
                if line[pos:].strip() == "":
                    break
                raise ParseError("Unexpected character", line_no, pos + 1, line[pos])
            if match.group(1) is not None:
                break
            for group in (2, 3, 4):
                if match.group(group) is not None:
                    tokens.append(_Token(match.group(group), line_no, match.start(group) + 1))
            pos = match.end()
    return tokens


class _Parser:
    def __init__(self, tokens: list[_Token], variables: dict[str, sp.Symbol]):
        self.tokens = tokens
        self.pos = 0
        self.variables = variables

    def _peek(self) -> _Token | None:
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def _end_error(self, message: str) -> ParseError:
        last = self.tokens[-1] if self.tokens else _Token("", 1, 1)
        return ParseError(message, last.line, last.column + len(last.text), "")

    def parse(self) -> sp.Expr:
        if not self.tokens:
            raise ParseError("Empty expression", 1, 1, "")
        expr = self._expr()
        extra = self._peek()
        if extra is not None:
            raise ParseError("Unexpected token after expression", extra.line, extra.column, extra.text)
        return expr

    def _expr(self) -> sp.Expr:
        token = self._peek()
        if token is None:
            raise self._end_error("Unexpected end of input")
        self.pos += 1
        if token.text == "(":
            return self._application(token)
        if token.text == ")":
            raise ParseError("Unexpected ')'", token.line, token.column, token.text)
        return self._atom(token)

    def _atom(self, token: _Token) -> sp.Expr:
        text = token.text
        try:
            if re.fullmatch(r"[-+]?\d+", text):
                return sp.Integer(int(text))
            return sp.Float(float(text))
        except ValueError:
            pass
        if text in self.variables:
            return self.variables[text]
        if text in _CONSTANTS:
            return _CONSTANTS[text]
        raise ParseError("Unknown name", token.line, token.column, text)

    def _application(self, open_token: _Token) -> sp.Expr:
        op = self._peek()
        if op is None:
            raise self._end_error("Unexpected end of input")
        if op.text in ("(", ")"):
            raise ParseError("Expected an operator", op.line, op.column, op.text)
        self.pos += 1
        args: list[sp.Expr] = []
        while True:
            token = self._peek()
            if token is None:
                raise self._end_error(f"Missing ')' for {op.text!r}")
            if token.text == ")":
                self.pos += 1
                break
            args.append(self._expr())
        return self._apply(op, args)

    def _arity_error(self, op: _Token, expected: str) -> ParseError:
        return ParseError(f"Operator expects {expected} arguments", op.line, op.column, op.text)

    def _apply(self, op: _Token, args: list[sp.Expr]) -> sp.Expr:
        name = op.text
        if name in ("add", "+"):
            if not args:
                raise self._arity_error(op, "at least 1")
            return sp.Add(*args)
        if name in ("mul", "*"):
            if not args:
                raise self._arity_error(op, "at least 1")
            return sp.Mul(*args)
        if name in ("sub", "-"):
            if len(args) == 1:
                return -args[0]
            if len(args) != 2:
                raise self._arity_error(op, "1 or 2")
            return args[0] - args[1]
        if name in ("div", "/"):
            if len(args) != 2:
                raise self._arity_error(op, "2")
            return args[0] / args[1]
        if name in ("pow", "^"):
            if len(args) != 2:
                raise self._arity_error(op, "2")
            return args[0] ** args[1]
        if name in _UNARY:
            if len(args) != 1:
                raise self._arity_error(op, "1")
            return _UNARY[name](args[0])
        if name == "bump":
            if len(args) != 3:
                raise self._arity_error(op, "3")
            value, center, delta = args
            return Bump(((value - center) / delta) ** 2, 0)
        raise ParseError("Unknown operator", op.line, op.column, name)


def parse_expr(text: str, variables: Iterable[sp.Symbol]) -> sp.Expr:
    """Parse the prefix format, e.g. ``(mul (bump x 0 1) xi)``.

    Raises:
        ParseError: Naming the offending token with its line and column.
    """
    table = {str(v): v for v in variables}
    return _Parser(_tokenize(text), table).parse()


def parse_symbol(text: str, n: int = 1) -> SymbolExpr:
    """Parse a phase-space symbol in (x..., xi...) and h."""
    variables = phase_space_vars(n)
    return SymbolExpr(parse_expr(text, variables), variables)


def parse_function(text: str, n: int = 1, stem: str = "x") -> SymbolExpr:
    """Parse a position-space expression (states, amplitudes)."""
    variables = position_vars(n, stem)
    return SymbolExpr(parse_expr(text, variables), variables)


_HEADER = re.compile(r"^\s*variables\s*:(.*)$")


def parse_header(text: str) -> tuple[dict[str, tuple[sp.Symbol, ...]], str]:
    """Split a ``variables: x <n> theta <m> ...`` header from the expression body.

    Returns:
        (mapping stem -> symbols in declaration order, remaining text).

    Raises:
        ParseError: If the header is missing or malformed.
    """
    lines = text.splitlines()
    for index, line in enumerate(lines):
        if not line.strip() or line.strip().startswith(";"):
            continue
        match = _HEADER.match(line)
        if match is None:
            raise ParseError("Expected a 'variables:' header", index + 1, 1, line.strip()[:20])
        parts = match.group(1).split()
        if len(parts) % 2:
            raise ParseError("Header needs name/count pairs", index + 1, 1, line.strip())
        stems: dict[str, tuple[sp.Symbol, ...]] = {}
        for stem, count in zip(parts[::2], parts[1::2]):
            if not count.isdigit():
                column = line.index(count) + 1
                raise ParseError("Variable count must be an integer", index + 1, column, count)
            stems[stem] = tuple(sym(name) for name in axis_names(stem, int(count))) if int(count) else ()
        body = "\n".join([""] * (index + 1) + lines[index + 1 :])
        return stems, body
    raise ParseError("Empty phase text", 1, 1, "")

