"""Piecewise coefficient functions, the risk function and its minimum set.

Coefficients are written in a small text grammar::

    <expr> on [<a>,<b>); <expr> on [<b>,<c>); ... ; <expr> on [<y>,<L>]

Each ``<expr>`` uses numbers, ``x``, ``pi``, ``+ - * /``, powers (``**`` or
``^``) and the functions ``sin``, ``cos``, ``exp``.  Interval ends are
constant expressions (``1/8``, ``pi/4``).  A bare expression without ``on``
covers the whole domain when the caller supplies ``L``.

The parser leans on :mod:`ast`: the text is parsed as a Python expression and
every node is checked against a whitelist before compiling.
"""

from __future__ import annotations

import ast
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np
from scipy.optimize import brentq, minimize_scalar

from .grid import Grid1D

CONSERVED = "conserved"
RECRUITED = "recruited"

_FUNCS = {"sin": np.sin, "cos": np.cos, "exp": np.exp}
_CONSTS = {"pi": math.pi}
_BINOPS = (ast.Add, ast.Sub, ast.Mult, ast.Div, ast.Pow)


class CoefficientSyntaxError(ValueError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


class InvalidCoefficientError(ValueError):
    pass


def _check_node(node: ast.AST, allow_x: bool, offset: int, where=None) -> None:
    col = getattr(node, "col_offset", 0)
    pos = where(col) if where else offset + col
    if isinstance(node, ast.Expression):
        _check_node(node.body, allow_x, offset, where)
    elif isinstance(node, ast.BinOp):
        if not isinstance(node.op, _BINOPS):
            raise CoefficientSyntaxError(f"operator {type(node.op).__name__} not allowed", pos)
        _check_node(node.left, allow_x, offset, where)
        _check_node(node.right, allow_x, offset, where)
    elif isinstance(node, ast.UnaryOp):
        if not isinstance(node.op, (ast.UAdd, ast.USub)):
            raise CoefficientSyntaxError("unary operator not allowed", pos)
        _check_node(node.operand, allow_x, offset, where)
    elif isinstance(node, ast.Constant):
        if isinstance(node.value, bool) or not isinstance(node.value, (int, float)):
            raise CoefficientSyntaxError(f"literal {node.value!r} not allowed", pos)
    elif isinstance(node, ast.Name):
        if node.id == "x":
            if not allow_x:
                raise CoefficientSyntaxError("interval ends must be constant", pos)
        elif node.id not in _CONSTS:
            raise CoefficientSyntaxError(f"unknown name {node.id!r}", pos)
    elif isinstance(node, ast.Call):
        if not isinstance(node.func, ast.Name) or node.func.id not in _FUNCS:
            raise CoefficientSyntaxError("only sin, cos and exp may be called", pos)
        if len(node.args) != 1 or node.keywords:
            raise CoefficientSyntaxError(f"{node.func.id} takes exactly one argument", pos)
        _check_node(node.args[0], allow_x, offset, where)
    else:
        raise CoefficientSyntaxError(f"unsupported syntax {type(node).__name__}", pos)


def compile_expression(text: str, *, allow_x: bool = True, offset: int = 0):
    """Validate and compile one expression; returns a code object."""
    src = text.replace("−", "-").replace("×", "*")
    stripped = src.strip()
    if not stripped:
        raise CoefficientSyntaxError("empty expression", offset)
    lead = len(src) - len(src.lstrip())
    # '^' binds like '**'; each replacement shifts later columns by one
    carets = [i for i, ch in enumerate(stripped) if ch == "^"]
    py = stripped.replace("^", "**")

    def orig(col: int) -> int:
        return offset + lead + col - sum(1 for k, c in enumerate(carets) if c + k < col)

    try:
        tree = ast.parse(py, mode="eval")
    except SyntaxError as exc:
        col = exc.offset - 1 if exc.offset and exc.offset >= 1 else len(py)
        raise CoefficientSyntaxError(f"invalid expression {stripped!r}", orig(col)) from None
    _check_node(tree, allow_x, 0, orig)
    return compile(tree, "<coefficient>", "eval")


def _eval(code, x):
    with np.errstate(all="ignore"):
        val = eval(code, {"__builtins__": {}}, {**_FUNCS, **_CONSTS, "x": x})
    return np.broadcast_to(np.asarray(val, dtype=float), np.shape(x)).astype(float)


def _eval_constant(text: str, offset: int) -> float:
    code = compile_expression(text, allow_x=False, offset=offset)
    val = float(_eval(code, 0.0))
    if not math.isfinite(val):
        raise CoefficientSyntaxError(f"interval end {text.strip()!r} is not finite", offset)
    return val


@dataclass(frozen=True)
class Segment:
    a: float
    b: float
    source: str
    code: object = field(repr=False, compare=False)

    def __call__(self, x):
        return _eval(self.code, x)


@dataclass(frozen=True)
class PiecewiseFunction:
    """Ordered segments ``[a_i, b_i)`` partitioning ``[0, L]``; the last one is closed."""

    segments: tuple[Segment, ...]

    @property
    def length(self) -> float:
        return self.segments[-1].b

    @property
    def breakpoints(self) -> np.ndarray:
        """Interior piece boundaries."""
        return np.array([s.b for s in self.segments[:-1]])

    def segment_index(self, x) -> np.ndarray:
        idx = np.searchsorted(self.breakpoints, np.asarray(x, dtype=float), side="right")
        return np.minimum(idx, len(self.segments) - 1)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if len(self.segments) == 1:
            out = self.segments[0](x)
        else:
            idx = self.segment_index(x)
            out = np.empty(x.shape)
            for k, seg in enumerate(self.segments):
                m = idx == k
                if np.any(m):
                    out[m] = seg(x[m])
        return out if out.ndim else float(out)

    def on(self, grid: Grid1D) -> np.ndarray:
        return np.asarray(self(grid.nodes), dtype=float)

    def derivative(self, x, order: int = 1, step: float = 1e-3, side: str = "right"):
        """Central-difference derivative using the expression of the segment owning ``x``.

        The segment's own formula is evaluated at ``x +/- step`` even if that
        crosses its boundary, so kinks at breakpoints never pollute the result.
        ``side="left"`` attributes a breakpoint to the segment on its left.
        """
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if side == "left":
            idx = np.searchsorted(self.breakpoints, x, side="left")
        else:
            idx = self.segment_index(x)
        idx = np.minimum(idx, len(self.segments) - 1)
        out = np.empty(x.shape)
        for k, seg in enumerate(self.segments):
            m = idx == k
            if not np.any(m):
                continue
            xm = x[m]
            if order == 1:
                out[m] = (seg(xm + step) - seg(xm - step)) / (2 * step)
            elif order == 2:
                out[m] = (seg(xm + step) - 2 * seg(xm) + seg(xm - step)) / step**2
            else:
                raise ValueError("only first and second derivatives are supported")
        return out if out.size > 1 else float(out[0])

    def is_constant(self, tol: float = 1e-12, samples: int = 2001) -> bool:
        v = self(np.linspace(0.0, self.length, samples))
        return float(np.ptp(v)) <= tol * max(1.0, float(np.max(np.abs(v))))

    def jumps(self) -> list[tuple[float, float]]:
        """(breakpoint, value jump) for every interior breakpoint."""
        out = []
        for left, right in zip(self.segments[:-1], self.segments[1:]):
            out.append((left.b, float(right(left.b) - left(left.b))))
        return out

    def slope_jumps(self, step: float = 1e-4) -> list[tuple[float, float]]:
        out = []
        for left, right in zip(self.segments[:-1], self.segments[1:]):
            b = left.b
            dl = (left(b + step) - left(b - step)) / (2 * step)
            dr = (right(b + step) - right(b - step)) / (2 * step)
            out.append((b, float(dr - dl)))
        return out

    def is_c1(self, tol: float = 1e-6) -> bool:
        return all(abs(j) <= tol for _, j in self.jumps()) and all(
            abs(j) <= tol for _, j in self.slope_jumps()
        )

    @property
    def source(self) -> str:
        parts = []
        for k, s in enumerate(self.segments):
            close = "]" if k == len(self.segments) - 1 else ")"
            parts.append(f"{s.source} on [{s.a!r},{s.b!r}{close}")
        return "; ".join(parts)


def _split_top(text: str, sep: str) -> list[tuple[int, str]]:
    """Split on ``sep`` outside brackets, keeping start offsets."""
    parts, depth, start = [], 0, 0
    for i, ch in enumerate(text):
        if ch in "([":
            depth += 1
        elif ch in ")]":
            depth -= 1
        elif ch == sep and depth <= 0:
            parts.append((start, text[start:i]))
            start = i + 1
    parts.append((start, text[start:]))
    return parts


def parse_coefficient(text: str, L: float | None = None) -> PiecewiseFunction:
    """Parse the piecewise grammar into a :class:`PiecewiseFunction`."""
    if not isinstance(text, str):
        text = repr(float(text))
    pieces = []
    chunks = [(o, c) for o, c in _split_top(text, ";") if c.strip()]
    if not chunks:
        raise CoefficientSyntaxError("empty coefficient definition", 0)
    for offset, chunk in chunks:
        k = chunk.rfind(" on ")
        if k < 0:
            if len(chunks) > 1 or L is None:
                raise CoefficientSyntaxError("segment is missing 'on [a,b)'", offset + len(chunk))
            expr, a, b, closed = chunk, 0.0, float(L), True
            code = compile_expression(expr, offset=offset)
        else:
            expr, span = chunk[:k], chunk[k + 4 :]
            code = compile_expression(expr, offset=offset)
            span_off = offset + k + 4
            s = span.strip()
            s_off = span_off + (len(span) - len(span.lstrip()))
            if len(s) < 5 or s[0] != "[" or s[-1] not in ")]":
                raise CoefficientSyntaxError("interval must look like [a,b) or [a,b]", s_off)
            inner = _split_top(s[1:-1], ",")
            if len(inner) != 2:
                raise CoefficientSyntaxError("interval needs exactly two ends", s_off)
            a = _eval_constant(inner[0][1], s_off + 1 + inner[0][0])
            b = _eval_constant(inner[1][1], s_off + 1 + inner[1][0])
            closed = s[-1] == "]"
            if not b > a:
                raise CoefficientSyntaxError(f"empty interval [{a}, {b}]", s_off)
        pieces.append((expr.strip(), a, b, closed, code, offset))

    pieces.sort(key=lambda p: p[1])
    if abs(pieces[0][1]) > 1e-12:
        raise InvalidCoefficientError(f"gap: first segment starts at {pieces[0][1]} instead of 0")
    for prev, nxt in zip(pieces[:-1], pieces[1:]):
        if prev[3]:
            raise InvalidCoefficientError(f"overlap: segment ending at {prev[2]} is closed but not last")
        if abs(prev[2] - nxt[1]) > 1e-12 * max(1.0, abs(nxt[1])):
            kind = "gap" if prev[2] < nxt[1] else "overlap"
            raise InvalidCoefficientError(f"{kind} between {prev[2]} and {nxt[1]}")
    if not pieces[-1][3]:
        raise InvalidCoefficientError(f"gap: final segment must be closed at {pieces[-1][2]}")
    if L is not None and abs(pieces[-1][2] - L) > 1e-12 * max(1.0, L):
        raise InvalidCoefficientError(f"segments end at {pieces[-1][2]} but the domain ends at {L}")

    segs = []
    for i, (expr, a, b, _, code, _) in enumerate(pieces):
        b_ = pieces[i + 1][1] if i + 1 < len(pieces) else b
        segs.append(Segment(a, b_, expr, code))
    fn = PiecewiseFunction(tuple(segs))
    for seg, (_, _, _, _, _, off) in zip(segs, pieces):
        probe = np.linspace(seg.a, seg.b, 7)
        if not np.all(np.isfinite(seg(probe))):
            raise InvalidCoefficientError(
                f"segment {seg.source!r} on [{seg.a}, {seg.b}] does not evaluate finitely"
            )
    for b, jump in fn.jumps():
        if abs(jump) > 1e-8:
            warnings.warn(f"coefficient jumps by {jump:.3g} at x={b}", stacklevel=2)
    return fn


def combine(fns: Sequence[PiecewiseFunction], template: str) -> PiecewiseFunction:
    """Combine functions pointwise on the common refinement of their pieces.

    ``template`` is a format string over ``{0}``, ``{1}``, ... that receives the
    per-piece source expressions, e.g. ``"(({0})+({1}))/({2})"``.
    """
    L = fns[0].length
    for f in fns[1:]:
        if abs(f.length - L) > 1e-12 * max(1.0, L):
            raise InvalidCoefficientError("cannot combine functions on different domains")
    cuts = sorted({0.0, L, *(b for f in fns for b in f.breakpoints)})
    merged = []
    for a, b in zip(cuts[:-1], cuts[1:]):
        if b - a <= 1e-14 * max(1.0, L):
            continue
        mid = 0.5 * (a + b)
        srcs = [f.segments[int(f.segment_index(mid))].source for f in fns]
        src = template.format(*srcs)
        merged.append(Segment(a, b, src, compile_expression(src)))
    return PiecewiseFunction(tuple(merged))


def constant(value: float, L: float) -> PiecewiseFunction:
    return parse_coefficient(repr(float(value)), L=L)


def _sample(fn: PiecewiseFunction, samples: int = 2001) -> np.ndarray:
    x = np.unique(np.concatenate([np.linspace(0.0, fn.length, samples), fn.breakpoints]))
    return x


@dataclass(frozen=True)
class CoefficientSet:
    beta: PiecewiseFunction
    gamma: PiecewiseFunction
    kind: str = CONSERVED
    eta: PiecewiseFunction | None = None
    Lambda: PiecewiseFunction | None = None

    def __post_init__(self):
        if self.kind not in (CONSERVED, RECRUITED):
            raise InvalidCoefficientError(f"unknown model kind {self.kind!r}")
        x = _sample(self.beta)
        if np.any(self.beta(x) <= 0):
            raise InvalidCoefficientError("beta must be positive on [0, L]")
        if self.kind == CONSERVED:
            if self.eta is not None or self.Lambda is not None:
                raise InvalidCoefficientError("the conserved model takes no eta or Lambda")
            if np.any(self.gamma(x) <= 0):
                raise InvalidCoefficientError("gamma must be positive on [0, L]")
        else:
            if self.eta is None or self.Lambda is None:
                raise InvalidCoefficientError("the recruited model needs eta and Lambda")
            if np.any(self.eta(x) <= 0) or np.any(self.Lambda(x) <= 0):
                raise InvalidCoefficientError("eta and Lambda must be positive on [0, L]")
            if np.any(self.gamma(x) + self.eta(x) <= 0):
                raise InvalidCoefficientError("gamma + eta must be positive on [0, L]")
            if np.any(self.gamma(x) <= 0):
                # the fig4b and fig5 presets have gamma = h*beta - eta < 0 on plateaus
                warnings.warn("gamma is not positive everywhere", stacklevel=2)
        for f in (self.gamma, self.eta, self.Lambda):
            if f is not None and abs(f.length - self.length) > 1e-12 * max(1.0, self.length):
                raise InvalidCoefficientError("all coefficients must share the domain [0, L]")

    @property
    def length(self) -> float:
        return self.beta.length

    @classmethod
    def from_risk(cls, kind, beta, risk, eta=None, Lambda=None) -> "CoefficientSet":
        """Build gamma = risk*beta (conserved) or risk*beta - eta (recruited)."""
        if kind == CONSERVED:
            gamma = combine([risk, beta], "({0})*({1})")
        else:
            gamma = combine([risk, beta, eta], "({0})*({1})-({2})")
        return cls(beta=beta, gamma=gamma, kind=kind, eta=eta, Lambda=Lambda)

    def Lambda_value(self) -> float:
        """Lambda as a scalar; the free-boundary analysis needs it constant."""
        if self.Lambda is None:
            raise InvalidCoefficientError("conserved model has no Lambda")
        if not self.Lambda.is_constant():
            raise InvalidCoefficientError("Lambda must be constant here")
        return float(self.Lambda(0.0))

    def lambda_exceeds_risk(self, samples: int = 4001) -> bool:
        """Whether Lambda > h(x) at every sample point."""
        x = _sample(self.beta, samples)
        return bool(np.all(self.Lambda(x) > risk_function(self)(x)))


def risk_function(coeffs: CoefficientSet) -> PiecewiseFunction:
    """gamma/beta for the conserved model, (gamma+eta)/beta for the recruited one."""
    if coeffs.kind == CONSERVED:
        return combine([coeffs.gamma, coeffs.beta], "({0})/({1})")
    return combine([coeffs.gamma, coeffs.eta, coeffs.beta], "(({0})+({1}))/({2})")


@dataclass(frozen=True)
class IsolatedPoint:
    x: float


@dataclass(frozen=True)
class Interval:
    a: float
    b: float


Component = Union[IsolatedPoint, Interval]


@dataclass(frozen=True)
class RiskAnalysis:
    risk: PiecewiseFunction
    min_value: float
    components: tuple[Component, ...]
    is_constant: bool

    @property
    def points(self) -> list[float]:
        return [c.x for c in self.components if isinstance(c, IsolatedPoint)]

    @property
    def intervals(self) -> list[tuple[float, float]]:
        return [(c.a, c.b) for c in self.components if isinstance(c, Interval)]


def _refine_edge(f: Callable, level: float, inside: float, outside: float) -> float:
    fi, fo = f(inside) - level, f(outside) - level
    if fi <= 0 < fo:
        return brentq(lambda t: f(t) - level, min(inside, outside), max(inside, outside), xtol=1e-14)
    return inside


def _snap(risk: PiecewiseFunction, edge: float, level: float, h: float) -> float:
    """Move a plateau edge onto a nearby breakpoint where the risk is still at the minimum."""
    bps = risk.breakpoints
    if bps.size == 0:
        return edge
    k = int(np.argmin(np.abs(bps - edge)))
    if abs(bps[k] - edge) <= 2 * h and risk(bps[k]) <= level:
        return float(bps[k])
    return edge


def locate_minima(risk: PiecewiseFunction, grid: Grid1D, plateau_tol: float | None = None) -> RiskAnalysis:
    """Minimum of the risk function and the components of its minimum set."""
    x = grid.nodes
    v = risk.on(grid)
    vmin, vmax = float(v.min()), float(v.max())
    spread = vmax - vmin
    if spread <= 1e-12 * max(1.0, abs(vmax)):
        return RiskAnalysis(risk, vmin, (Interval(0.0, grid.length),), True)
    tol = 1e-8 * spread if plateau_tol is None else plateau_tol

    low = v <= vmin + tol
    comps: list[Component] = []
    i = 0
    while i < grid.n:
        if not low[i]:
            i += 1
            continue
        j = i
        while j + 1 < grid.n and low[j + 1]:
            j += 1
        if j - i > 2:
            level = vmin + tol
            a = x[i] if i == 0 else _refine_edge(risk, level, x[i], x[i - 1])
            b = x[j] if j == grid.n - 1 else _refine_edge(risk, level, x[j], x[j + 1])
            a, b = _snap(risk, a, level, grid.h), _snap(risk, b, level, grid.h)
            comps.append(Interval(float(a), float(b)))
        else:
            lo, hi = x[max(i - 1, 0)], x[min(j + 1, grid.n - 1)]
            best = x[i + int(np.argmin(v[i : j + 1]))]
            res = minimize_scalar(risk, bounds=(lo, hi), method="bounded", options={"xatol": 1e-12})
            xm = float(res.x) if res.success and risk(res.x) <= risk(best) else float(best)
            comps.append(IsolatedPoint(xm))
        i = j + 1
    # refined point minima can sit a little below the best node value
    vmin = min([vmin] + [float(risk(c.x)) for c in comps if isinstance(c, IsolatedPoint)])
    return RiskAnalysis(risk, vmin, tuple(comps), False)
