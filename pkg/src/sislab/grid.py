"""Uniform 1D grid, no-flux Laplacian, trapezoid quadrature and tridiagonal solves.

Everything downstream works on nodal numpy arrays paired with a :class:`Grid1D`.
The Neumann condition is imposed with a mirrored ghost node, which keeps the
stencil second order at the boundary and gives the weighted operator
``W @ lap`` (``W`` = trapezoid weights) a symmetric form with zero row sums.
That last property is what makes the discrete total mass exactly conserved.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp


class SingularSystemError(ArithmeticError):
    """Raised when a tridiagonal system hits a zero pivot."""


@dataclass(frozen=True)
class Grid1D:
    length: float
    n: int
    nodes: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not np.isfinite(self.length) or self.length <= 0.0:
            raise ValueError(f"grid length must be positive, got {self.length!r}")
        if int(self.n) != self.n or self.n < 3:
            raise ValueError(f"grid needs at least 3 nodes, got {self.n!r}")
        object.__setattr__(self, "n", int(self.n))
        object.__setattr__(self, "length", float(self.length))
        x = np.arange(self.n, dtype=float) * self.h
        x[-1] = self.length
        x.setflags(write=False)
        object.__setattr__(self, "nodes", x)

    @property
    def h(self) -> float:
        return self.length / (self.n - 1)

    @property
    def weights(self) -> np.ndarray:
        """Trapezoid quadrature weights."""
        w = np.full(self.n, self.h)
        w[0] = w[-1] = 0.5 * self.h
        return w

    def index_of(self, x: float) -> int:
        """Index of the node nearest to ``x``."""
        return int(np.clip(round(x / self.h), 0, self.n - 1))

    def mask(self, a: float, b: float) -> np.ndarray:
        """Boolean mask of nodes in the closed interval [a, b] (with a tiny slack)."""
        eps = 1e-9 * self.h
        return (self.nodes >= a - eps) & (self.nodes <= b + eps)


def build_grid(L: float, n: int) -> Grid1D:
    return Grid1D(L, n)


def as_field(grid: Grid1D, values) -> np.ndarray:
    """Validate nodal values against ``grid`` and return them as a float array."""
    v = np.asarray(values, dtype=float)
    if v.ndim == 0:
        v = np.full(grid.n, float(v))
    if v.shape != (grid.n,):
        raise ValueError(f"field has shape {v.shape}, grid has {grid.n} nodes")
    if not np.all(np.isfinite(v)):
        raise ValueError("field contains non-finite values")
    return v


def laplacian_diagonals(grid: Grid1D) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sub-, main- and super-diagonal of the discrete Neumann Laplacian.

    ``sub[i]`` multiplies ``u[i-1]`` and ``sup[i]`` multiplies ``u[i+1]``; the
    unused entries ``sub[0]`` and ``sup[-1]`` are zero.
    """
    n, inv = grid.n, 1.0 / grid.h**2
    sub = np.full(n, inv)
    sup = np.full(n, inv)
    main = np.full(n, -2.0 * inv)
    sub[0] = 0.0
    sup[-1] = 0.0
    # ghost-node reflection u[-1] = u[1], u[n] = u[n-2]
    sup[0] = 2.0 * inv
    sub[-1] = 2.0 * inv
    return sub, main, sup


def laplacian_matrix(grid: Grid1D) -> sp.csr_matrix:
    sub, main, sup = laplacian_diagonals(grid)
    return sp.diags([sub[1:], main, sup[:-1]], [-1, 0, 1], format="csr")


def apply_laplacian(u: np.ndarray, h: float) -> np.ndarray:
    """Discrete Neumann Laplacian of nodal values ``u`` (no sign, no diffusivity)."""
    out = np.empty_like(u)
    out[1:-1] = u[2:] - 2.0 * u[1:-1] + u[:-2]
    out[0] = 2.0 * (u[1] - u[0])
    out[-1] = 2.0 * (u[-2] - u[-1])
    return out / h**2


def neumann_laplacian(grid: Grid1D, u, D: float) -> np.ndarray:
    """Return ``-D u_xx`` with the ghost-point no-flux closure."""
    if D <= 0:
        raise ValueError("diffusivity must be positive")
    return -D * apply_laplacian(as_field(grid, u), grid.h)


def integrate(grid: Grid1D, u) -> float:
    """Trapezoid rule over the whole grid."""
    return float(np.dot(grid.weights, as_field(grid, u)))


def integrate_window(grid: Grid1D, u, a: float, b: float) -> float:
    """Trapezoid integral of nodal ``u`` over [a, b], linear interpolation at the ends."""
    a, b = max(a, 0.0), min(b, grid.length)
    if b <= a:
        return 0.0
    x = grid.nodes
    inner = x[(x > a) & (x < b)]
    xs = np.concatenate(([a], inner, [b]))
    ys = np.interp(xs, x, u)
    return float(np.sum(0.5 * (ys[1:] + ys[:-1]) * np.diff(xs)))


@dataclass(frozen=True)
class TridiagonalSystem:
    """``sub[i] x[i-1] + main[i] x[i] + sup[i] x[i+1] = rhs[i]``."""

    sub: np.ndarray
    main: np.ndarray
    sup: np.ndarray
    rhs: np.ndarray

    def __post_init__(self):
        n = len(self.main)
        if not (len(self.sub) == len(self.sup) == len(self.rhs) == n):
            raise ValueError("tridiagonal system diagonals have inconsistent lengths")

    def matvec(self, x: np.ndarray) -> np.ndarray:
        y = self.main * x
        y[1:] += self.sub[1:] * x[:-1]
        y[:-1] += self.sup[:-1] * x[1:]
        return y


def solve_tridiagonal(system: TridiagonalSystem) -> np.ndarray:
    """Solve a tridiagonal system with LAPACK's banded solver (``gbsv``)."""
    n = len(system.main)
    ab = np.zeros((3, n))
    ab[0, 1:] = system.sup[:-1]
    ab[1] = system.main
    ab[2, :-1] = system.sub[1:]
    try:
        x = scipy.linalg.solve_banded((1, 1), ab, system.rhs, check_finite=True)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(str(exc)) from exc
    if not np.all(np.isfinite(x)):
        raise SingularSystemError("tridiagonal solve produced non-finite values")
    return x


def thomas(sub, main, sup, rhs) -> np.ndarray:
    """Plain Thomas elimination, no pivoting. Used as an independent check."""
    n = len(main)
    c = np.zeros(n)
    d = np.zeros(n)
    if main[0] == 0.0:
        raise SingularSystemError("zero pivot at row 0")
    c[0] = sup[0] / main[0]
    d[0] = rhs[0] / main[0]
    for i in range(1, n):
        piv = main[i] - sub[i] * c[i - 1]
        if piv == 0.0:
            raise SingularSystemError(f"zero pivot at row {i}")
        c[i] = sup[i] / piv if i < n - 1 else 0.0
        d[i] = (rhs[i] - sub[i] * d[i - 1]) / piv
    x = np.empty(n)
    x[-1] = d[-1]
    for i in range(n - 2, -1, -1):
        x[i] = d[i] - c[i] * x[i + 1]
    return x
