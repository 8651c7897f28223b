"""Closed-form and semi-analytic profiles of the equilibria as dI -> 0.

Conserved model: ``S`` flattens to the minimum risk ``k_min`` and the infected
mass ``N - L k_min`` either collapses onto isolated minimum points or spreads
over minimum intervals as the positive solution of a logistic boundary value
problem whose growth constant ``a_hat`` is fixed by the mass.

Recruited model: the limiting susceptible profile touches the risk ``h`` on a
set found from tangency conditions and solves ``-dS S'' = Lambda - S`` with
exponential (cosh) pieces elsewhere; the limiting infected measure has density
``(Lambda - h + dS h'')/eta`` on the touching set plus possible boundary atoms.

Scalar roots (``a_hat``, tangency points, the critical dS) are all found by
bisection on functions known to be monotone.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.integrate
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

from .coefficients import (CONSERVED, RECRUITED, CoefficientSet, Interval, IsolatedPoint,
                           PiecewiseFunction, locate_minima, risk_function)
from .equilibrium import NumericalFailure
from .grid import Grid1D, TridiagonalSystem, integrate, integrate_window, solve_tridiagonal

logger = logging.getLogger(__name__)

DIRICHLET = "dirichlet"
NEUMANN = "neumann"

TANGENCY_TOL = 1e-12
CRITICAL_TOL = 1e-10


# ---------------------------------------------------------------------------
# derivatives of piecewise coefficients
# ---------------------------------------------------------------------------

def d1(fn: PiecewiseFunction, x, side: str = "right", step: float = 1e-3):
    """First derivative with one Richardson step on the owning segment's formula."""
    return (4.0 * fn.derivative(x, 1, step / 2, side) - fn.derivative(x, 1, step, side)) / 3.0


def d2(fn: PiecewiseFunction, x, side: str = "right", step: float = 2e-3):
    return (4.0 * fn.derivative(x, 2, step / 2, side) - fn.derivative(x, 2, step, side)) / 3.0


def _at_breakpoint(fn: PiecewiseFunction, x: float) -> bool:
    bps = fn.breakpoints
    return bps.size > 0 and float(np.min(np.abs(bps - x))) <= 1e-9 * max(1.0, fn.length)


# ---------------------------------------------------------------------------
# result types
# ---------------------------------------------------------------------------

@dataclass
class LimitMeasure:
    """Atoms plus an absolutely continuous part sampled on a grid."""

    atoms: list[tuple[float, float]]
    density: np.ndarray
    support: list[tuple] = field(default_factory=list)
    # "proved", "observed" (split taken from a finite-dI equilibrium) or "undetermined"
    atom_status: str = "proved"

    def atom_mass(self) -> float:
        return float(sum(m for _, m in self.atoms))


@dataclass
class LimitProfileA:
    """Small-dI limit of the conserved model."""

    S_limit: float
    measure: LimitMeasure | None
    a_hat: float | None = None
    I_hat: np.ndarray | None = None
    case_tag: str = ""
    supported: bool = True
    message: str = ""
    total_mass: float | None = None


@dataclass
class LimitProfileB:
    """Small-dI limit of the recruited model."""

    S_hat: np.ndarray | None
    touching_set: list[tuple[float, float]]
    tau1: float | None
    tau2: float | None
    measure: LimitMeasure | None
    case_tag: str
    supported: bool = True
    message: str = ""
    S_hat_fn: Callable | None = field(default=None, repr=False)
    checks: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# logistic problem on highest-risk intervals
# ---------------------------------------------------------------------------

@dataclass
class _LogisticBlock:
    """Nodes of one interval with the symmetric finite-volume stencil."""

    xs: np.ndarray          # all local nodes, endpoints included
    free: np.ndarray        # mask of unknowns (Dirichlet ends excluded)
    vol: np.ndarray         # control volumes of the unknowns
    K_main: np.ndarray
    K_off: np.ndarray       # couplings between consecutive unknowns
    g: np.ndarray           # beta/dS at the unknowns

    @classmethod
    def build(cls, beta, dS, a, b, left, right, nodes):
        inner = nodes[(nodes > a + 1e-12) & (nodes < b - 1e-12)]
        if inner.size < 31:
            inner = np.linspace(a, b, 65)[1:-1]
        xs = np.concatenate(([a], inner, [b]))
        hs = np.diff(xs)
        n = xs.size
        free = np.ones(n, dtype=bool)
        free[0] = left == NEUMANN
        free[-1] = right == NEUMANN
        vol_all = np.zeros(n)
        vol_all[:-1] += 0.5 * hs
        vol_all[1:] += 0.5 * hs
        main_all = np.zeros(n)
        main_all[:-1] += 1.0 / hs
        main_all[1:] += 1.0 / hs
        idx = np.flatnonzero(free)
        off = -1.0 / hs[idx[:-1]]
        return cls(xs, free, vol_all[idx], main_all[idx], off,
                   np.asarray(beta(xs[idx]), dtype=float) / dS)

    def residual(self, u, a_hat):
        Ku = self.K_main * u
        Ku[:-1] += self.K_off * u[1:]
        Ku[1:] += self.K_off * u[:-1]
        return Ku - self.vol * self.g * (a_hat - u) * u

    def mass(self, u) -> float:
        return float(np.dot(self.vol, u))

    def critical(self) -> float:
        """Smallest a with a positive solution: lowest eigenvalue of K u = a vol g u."""
        m = 1.0 / np.sqrt(self.vol * self.g)
        d = self.K_main * m * m
        e = self.K_off * m[:-1] * m[1:]
        return float(scipy.linalg.eigh_tridiagonal(d, e, eigvals_only=True, select="i",
                                                   select_range=(0, 0))[0])

    def guess(self, a_hat):
        x = self.xs[self.free]
        a, b = self.xs[0], self.xs[-1]
        t = (x - a) / (b - a)
        if self.free[0] and not self.free[-1]:
            shape = np.cos(0.5 * np.pi * t)
        elif self.free[-1] and not self.free[0]:
            shape = np.sin(0.5 * np.pi * t)
        elif self.free[0] and self.free[-1]:
            shape = np.ones_like(t)
        else:
            shape = np.sin(np.pi * t)
        return a_hat * shape

    def solve(self, a_hat, u0, max_iter=100, accept=1e-10):
        u = np.array(u0, dtype=float)
        r = self.residual(u, a_hat)
        rn = float(np.linalg.norm(r))
        best_u, best_r = u, float(np.max(np.abs(r)))
        sub = np.concatenate(([0.0], self.K_off))
        sup = np.concatenate((self.K_off, [0.0]))
        stalls = 0
        for _ in range(max_iter):
            jd = self.K_main - self.vol * self.g * (a_hat - 2.0 * u)
            try:
                du = solve_tridiagonal(TridiagonalSystem(sub, jd, sup, -r))
            except ArithmeticError:
                return None
            # converged once the Newton correction is at round-off size; the
            # residual alone is not enough when the Jacobian is nearly singular
            if np.max(np.abs(du)) <= 1e-14 * max(np.max(np.abs(u)), 1e-300):
                rmax = float(np.max(np.abs(r)))
                if rmax <= max(accept, best_r):
                    best_u, best_r = u, rmax
                break
            t = 1.0
            while t >= 2.0 ** -20:
                rt = self.residual(u + t * du, a_hat)
                if float(np.linalg.norm(rt)) < rn:
                    break
                t *= 0.5
            else:
                # no decrease: near the floor a plain Newton step is still the best move
                stalls += 1
                if stalls > 3:
                    break
                t = 1.0
                rt = self.residual(u + du, a_hat)
            u, r, rn = u + t * du, rt, float(np.linalg.norm(rt))
            rmax = float(np.max(np.abs(r)))
            if rmax < best_r:
                best_u, best_r = u, rmax
        if best_r > accept:
            return None
        return best_u

    def positive(self, a_hat, warm=None):
        """Positive solution at ``a_hat`` (None if Newton fails)."""
        for start in ([warm] if warm is not None else []) + [self.guess(a_hat),
                                                             np.full(int(self.free.sum()), a_hat)]:
            u = self.solve(a_hat, start)
            if u is not None and np.min(u) > 0.0:
                return u
        return None

    def full(self, u):
        out = np.zeros(self.xs.size)
        out[self.free] = u
        return out


def _boundary_kinds(a, b, L, tol=1e-12):
    left = NEUMANN if a <= tol * max(1.0, L) else DIRICHLET
    right = NEUMANN if b >= L - tol * max(1.0, L) else DIRICHLET
    return left, right


def _polish(blocks, sols, a_hat, mass, mass_target, iters=6):
    """Newton on (u, a_hat) with the mass as the bordering equation.

    Near the bifurcation the Jacobian in ``u`` alone is nearly singular, so
    bisection in ``a_hat`` cannot pin the mass below ~1e-7 relative; the
    bordered system stays well conditioned along the solution branch.
    """
    active = [k for k, u in enumerate(sols) if u is not None]
    if not active:
        return a_hat, mass, sols
    sizes = [sols[k].size for k in active]
    n = sum(sizes)

    def pack():
        return np.concatenate([sols[k] for k in active] + [np.array([a_hat])])

    z = pack()
    best = (a_hat, mass, list(sols))
    for _ in range(iters):
        rows, F, off = [], [], 0
        diag, lo, up, border = [], [], [], []
        for k, m in zip(active, sizes):
            blk, u = blocks[k], z[off:off + m]
            F.append(blk.residual(u, z[-1]))
            diag.append(blk.K_main - blk.vol * blk.g * (z[-1] - 2.0 * u))
            lo.append(np.concatenate((blk.K_off, [0.0])))
            up.append(np.concatenate(([0.0], blk.K_off)))
            border.append(-blk.vol * blk.g * u)
            rows.append(blk.vol)
            off += m
        vol = np.concatenate(rows)
        F.append(np.array([float(np.dot(vol, z[:n])) - mass_target]))
        J = scipy.sparse.diags([np.concatenate(lo)[:-1], np.concatenate(diag), np.concatenate(up)[1:]],
                               [-1, 0, 1], shape=(n, n), format="lil")
        # no coupling across block boundaries
        off = 0
        for m in sizes[:-1]:
            off += m
            J[off, off - 1] = 0.0
            J[off - 1, off] = 0.0
        J = scipy.sparse.bmat([[J, np.concatenate(border)[:, None]], [vol[None, :], None]], format="csc")
        dz = scipy.sparse.linalg.spsolve(J, -np.concatenate(F))
        if not np.all(np.isfinite(dz)):
            break
        trial = z + dz
        if np.min(trial[:n]) <= 0.0:
            break
        z = trial
        off = 0
        new = list(sols)
        for k, m in zip(active, sizes):
            new[k] = z[off:off + m].copy()
            off += m
        m_now = float(np.dot(vol, z[:n]))
        res = max(float(np.max(np.abs(blocks[k].residual(new[k], z[-1])))) for k in active)
        if res <= 1e-10 and abs(m_now - mass_target) <= abs(best[1] - mass_target):
            best = (float(z[-1]), m_now, new)
        if np.max(np.abs(dz)) <= 1e-15 * max(1.0, np.max(np.abs(z))):
            break
    return best


def solve_limit_I_multi(beta: PiecewiseFunction, dS: float, intervals: Sequence[tuple[float, float]],
                        mass_target: float, grid: Grid1D, boundaries=None,
                        mass_tol: float = 1e-10) -> tuple[float, np.ndarray, dict]:
    """Common ``a_hat`` and logistic profiles on several intervals sharing one total mass.

    Returns ``(a_hat, I_hat, info)`` with ``I_hat`` on ``grid`` (zero off the
    intervals) and ``info`` holding the per-interval local solutions, the
    finite-volume residual and the achieved mass.
    """
    if dS <= 0 or mass_target <= 0:
        raise ValueError("dS and the mass target must be positive")
    L = grid.length
    blocks = []
    for k, (a, b) in enumerate(intervals):
        if not 0.0 <= a < b <= L + 1e-12:
            raise ValueError(f"bad interval ({a}, {b})")
        bc = boundaries[k] if boundaries is not None else _boundary_kinds(a, b, L)
        blocks.append(_LogisticBlock.build(beta, dS, a, b, bc[0], bc[1], grid.nodes))
    crit = [blk.critical() for blk in blocks]
    width = sum(b - a for a, b in intervals)
    cap = max(1e6 * mass_target / width, 1e3 * max(crit))

    def evaluate(a_hat, warm):
        sols, total = [], 0.0
        for blk, c, w in zip(blocks, crit, warm):
            if a_hat <= c:
                sols.append(None)
                continue
            u = blk.positive(a_hat, w)
            if u is None:
                raise NumericalFailure(f"logistic Newton failed at a_hat={a_hat:.6g}")
            sols.append(u)
            total += blk.mass(u)
        return total, sols

    lo = min(crit)
    hi = max(crit) + max(2.0 * mass_target / width, 1.0)
    none = [None] * len(blocks)
    m_hi, s_hi = evaluate(hi, none)
    while m_hi < mass_target:
        hi *= 2.0
        if hi > cap:
            raise NumericalFailure("no bracket for a_hat below the search cap")
        m_hi, s_hi = evaluate(hi, s_hi)
    best = (hi, m_hi, s_hi)
    for _ in range(200):
        if abs(best[1] - mass_target) <= mass_tol * mass_target:
            break
        mid = 0.5 * (lo + hi)
        if not lo < mid < hi:
            break
        m_mid, s_mid = evaluate(mid, s_hi)
        if m_mid < mass_target:
            lo = mid
        else:
            hi, m_hi, s_hi = mid, m_mid, s_mid
        if abs(m_mid - mass_target) < abs(best[1] - mass_target):
            best = (mid, m_mid, s_mid)
    a_hat, mass, sols = best
    if abs(mass - mass_target) > mass_tol * mass_target:
        a_hat, mass, sols = _polish(blocks, sols, a_hat, mass, mass_target)
    if abs(mass - mass_target) > 1e-8 * mass_target:
        raise NumericalFailure(f"a_hat bisection stalled with mass error {mass - mass_target:.3g}")

    I_hat = np.zeros(grid.n)
    locals_, resid = [], 0.0
    for blk, u in zip(blocks, sols):
        vals = blk.full(u) if u is not None else np.zeros(blk.xs.size)
        if u is not None:
            resid = max(resid, float(np.max(np.abs(blk.residual(u, a_hat)))))
        m = grid.mask(blk.xs[0], blk.xs[-1])
        I_hat[m] = np.interp(grid.nodes[m], blk.xs, vals)
        locals_.append((blk.xs, vals))
    info = {"local": locals_, "residual": resid, "mass": mass, "critical": crit}
    return float(a_hat), I_hat, info


def solve_limit_I(beta: PiecewiseFunction, dS: float, interval: tuple[float, float],
                  mass_target: float, boundary=None, grid: Grid1D | None = None) -> tuple[float, np.ndarray]:
    """Solve ``-I'' = (beta/dS)(a_hat - I) I`` on one interval with ``int I = mass_target``.

    ``boundary`` is a pair from {"dirichlet", "neumann"}; by default an end
    lying on the domain boundary gets the no-flux condition and an interior
    end gets ``I = 0``.  ``I_hat`` is returned on ``grid`` (default: 961
    nodes over the coefficient domain).
    """
    if grid is None:
        grid = Grid1D(beta.length, 961)
    a_hat, I_hat, _ = solve_limit_I_multi(beta, dS, [interval], mass_target, grid,
                                          None if boundary is None else [boundary])
    return a_hat, I_hat


def logistic_mass(beta: PiecewiseFunction, dS: float, interval: tuple[float, float], a_hat: float,
                  grid: Grid1D, boundary=None) -> float:
    """Mass of the positive logistic solution at a fixed ``a_hat`` (zero below the threshold)."""
    bc = boundary or _boundary_kinds(interval[0], interval[1], grid.length)
    blk = _LogisticBlock.build(beta, dS, interval[0], interval[1], bc[0], bc[1], grid.nodes)
    if a_hat <= blk.critical():
        return 0.0
    u = blk.positive(a_hat)
    if u is None:
        raise NumericalFailure("logistic Newton failed")
    return blk.mass(u)


def logistic_threshold(beta: PiecewiseFunction, dS: float, interval: tuple[float, float],
                       grid: Grid1D, boundary=None) -> float:
    """The ``a_hat`` at which positive solutions bifurcate from zero."""
    bc = boundary or _boundary_kinds(interval[0], interval[1], grid.length)
    return _LogisticBlock.build(beta, dS, interval[0], interval[1], bc[0], bc[1], grid.nodes).critical()


# ---------------------------------------------------------------------------
# conserved model
# ---------------------------------------------------------------------------

def limit_profile_conserved(coeffs: CoefficientSet, N: float, dS: float, grid: Grid1D,
                            observed_I: np.ndarray | None = None) -> LimitProfileA:
    """Limit of the conserved-model equilibrium as dI -> 0.

    With several isolated minimum points and no interval the split of the
    mass between them is not determined by the limit problem; pass
    ``observed_I`` (a finite-dI equilibrium) to report the observed split.
    """
    if coeffs.kind != CONSERVED:
        raise ValueError("expected conserved-model coefficients")
    analysis = locate_minima(risk_function(coeffs), grid)
    kmin, L = analysis.min_value, grid.length
    if analysis.is_constant:
        return LimitProfileA(kmin, None, case_tag="constant-risk", supported=False,
                             message="risk is constant: the equilibrium is (k, N/L - k) for every dI")
    if not kmin < N / L:
        raise ValueError(f"no endemic equilibrium: k_min={kmin:g} >= N/L={N / L:g}")
    total = N - L * kmin
    points, intervals = analysis.points, analysis.intervals
    density = np.zeros(grid.n)
    support = [("interval", a, b) for a, b in intervals] + [("point", p) for p in points]

    if not intervals:
        if len(points) == 1:
            atoms, status = [(points[0], total)], "proved"
        elif observed_I is not None:
            half = 10 * grid.h
            raw = [integrate_window(grid, observed_I, p - half, p + half) for p in points]
            s = sum(raw)
            atoms = [(p, total * r / s) for p, r in zip(points, raw)]
            status = "observed"
        else:
            atoms = [(p, float("nan")) for p in points]
            status = "undetermined"
        measure = LimitMeasure(atoms, density, support, status)
        return LimitProfileA(kmin, measure, case_tag="concentration", total_mass=total)

    a_hat, I_hat, _ = solve_limit_I_multi(coeffs.beta, dS, intervals, total, grid)
    measure = LimitMeasure([(p, 0.0) for p in points], I_hat.copy(), support, "proved")
    return LimitProfileA(kmin, measure, a_hat=a_hat, I_hat=I_hat, case_tag="aggregation",
                         total_mass=total)


# ---------------------------------------------------------------------------
# recruited model: tangency, critical dS, density
# ---------------------------------------------------------------------------

def tangency_function(h: PiecewiseFunction, Lambda: float, dS: float, side: str) -> Callable[[float], float]:
    """Left: tanh(t/sqrt(dS)) + sqrt(dS) h'(t)/(Lambda - h(t)); Right uses t - L."""
    r = math.sqrt(dS)
    L = h.length
    side = side.lower()
    if side not in ("left", "right"):
        raise ValueError("side must be 'left' or 'right'")
    shift = 0.0 if side == "left" else L

    def f(t: float) -> float:
        return math.tanh((t - shift) / r) + r * float(d1(h, t)) / (Lambda - float(h(t)))

    return f


def _bisect(f: Callable[[float], float], lo: float, hi: float, tol: float, max_iter: int = 400):
    flo, fhi = f(lo), f(hi)
    if flo == 0.0:
        return lo
    if fhi == 0.0:
        return hi
    if flo * fhi > 0:
        return None
    best = lo if abs(flo) < abs(fhi) else hi
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if abs(fm) < abs(f(best)):
            best = mid
        if abs(fm) <= tol or not lo < mid < hi:
            break
        if (fm < 0) == (flo < 0):
            lo, flo = mid, fm
        else:
            hi = mid
    return best


def solve_tangency(h: PiecewiseFunction, Lambda: float, dS: float, side: str,
                   bracket: tuple[float, float]) -> float | None:
    """Free-boundary point where the cosh piece meets ``h`` with matching slope.

    Bisection to ``|f| <= 1e-12``; ``None`` if ``f`` does not change sign on
    the bracket.
    """
    f = tangency_function(h, Lambda, dS, side)
    lo, hi = bracket
    root = _bisect(f, lo, hi, TANGENCY_TOL)
    if root is None:
        return None
    if abs(f(root)) > TANGENCY_TOL:
        logger.info("tangency residual %.3g above target", f(root))
    return float(root)


def critical_dS(h: PiecewiseFunction, Lambda: float, L: float | None = None, side: str = "right") -> float | None:
    """dS at which the boundary minimum switches between atom and touching interval.

    Root of ``q(d) = d^{-1/2} tanh(L d^{-1/2}) + h'(L)/(Lambda - h(L))`` (mirrored
    with ``-h'(0)`` at the left end).  ``None`` when the slope at that end
    does not point into the domain, in which case no switch happens.
    """
    L = h.length if L is None else L
    if side.lower() == "right":
        slope = float(d1(h, L)) / (Lambda - float(h(L)))
    else:
        slope = -float(d1(h, 0.0)) / (Lambda - float(h(0.0)))
    if slope >= 0:
        return None

    def q(d):
        s = 1.0 / math.sqrt(d)
        return s * math.tanh(L * s) + slope

    # q is decreasing; bisect in log(d) so both ends of (1e-8, 1e8) are reachable
    g = lambda t: -q(math.exp(t))
    t = _bisect(g, math.log(1e-8), math.log(1e8), CRITICAL_TOL)
    if t is None:
        return None
    return float(math.exp(t))


def mu_density(h: PiecewiseFunction, eta: PiecewiseFunction, Lambda: float, dS: float, x: float) -> float:
    """(Lambda - h + dS h'')/eta at a point inside a segment of ``h``."""
    if _at_breakpoint(h, x) or _at_breakpoint(eta, x):
        raise ValueError(f"second derivative undefined at breakpoint x={x}")
    return float((Lambda - h(x) + dS * d2(h, x)) / eta(x))


def _density_field(h, eta, Lambda, dS, xs):
    """Density on nodes; breakpoint nodes get the mean of the one-sided values."""
    xs = np.asarray(xs, dtype=float)
    hxx = 0.5 * (d2(h, xs, "right") + d2(h, xs, "left"))
    return (Lambda - h(xs) + dS * np.atleast_1d(hxx)) / eta(xs)


# ---------------------------------------------------------------------------
# recruited model: case analysis
# ---------------------------------------------------------------------------

def _cosh_piece(h, Lambda, dS, tau, anchor):
    """S = Lambda + (h(tau) - Lambda) cosh((x-anchor)/r)/cosh((tau-anchor)/r), no flux at ``anchor``."""
    r = math.sqrt(dS)
    c = (float(h(tau)) - Lambda) / math.cosh((tau - anchor) / r)
    return lambda x: Lambda + c * np.cosh((np.asarray(x, dtype=float) - anchor) / r)


def _cosh_integral(h, Lambda, dS, tau, anchor):
    r = math.sqrt(dS)
    return Lambda * abs(tau - anchor) + (float(h(tau)) - Lambda) * r * math.tanh(abs(tau - anchor) / r)


def _assemble(h, Lambda, dS, L, tau1, tau2):
    """Piecewise S_hat: cosh piece on [0, tau1], h on [tau1, tau2], cosh piece on [tau2, L]."""
    left = _cosh_piece(h, Lambda, dS, tau1, 0.0) if tau1 > 0 else None
    right = _cosh_piece(h, Lambda, dS, tau2, L) if tau2 < L else None

    def S(x):
        x = np.asarray(x, dtype=float)
        out = np.asarray(h(x), dtype=float).copy() if x.ndim else np.array(h(x), dtype=float)
        if left is not None:
            m = x < tau1
            out = np.where(m, left(x), out)
        if right is not None:
            m = x > tau2
            out = np.where(m, right(x), out)
        return out if out.ndim else float(out)

    return S


def _slope_profile(h, grid_pts, bps):
    keep = np.ones(grid_pts.size, dtype=bool)
    for b in bps:
        keep &= np.abs(grid_pts - b) > 1e-6
    return grid_pts[keep], d1(h, grid_pts[keep])


def _nondecreasing(h, a, b, tol=1e-7, samples=801):
    if b - a <= 0:
        return True
    x = np.linspace(a, b, samples)
    x, s = _slope_profile(h, x, h.breakpoints)
    return bool(np.all(np.diff(np.atleast_1d(s)) >= -tol))


def _quad_pieces(fn, a, b, cuts):
    pts = sorted({a, b, *[c for c in cuts if a < c < b]})
    total = 0.0
    for lo, hi in zip(pts[:-1], pts[1:]):
        total += scipy.integrate.quad(fn, lo, hi, epsabs=1e-13, epsrel=1e-12, limit=200)[0]
    return total


def limit_profile_recruited(coeffs: CoefficientSet, dS: float, grid: Grid1D) -> LimitProfileB:
    """Limiting susceptible profile and infected measure of the recruited model.

    Tags: ``"i"`` (S_hat = h everywhere), ``"ii-a"`` / ``"iii"`` (interior
    minimum point / interval, two tangency points), ``"ii-b1"``, ``"ii-b2"``,
    ``"ii-c1"``, ``"ii-c2"`` (minimum at x = L or x = 0, with or without a
    touching interval) and ``"unsupported"``.
    """
    if coeffs.kind != RECRUITED:
        raise ValueError("expected recruited-model coefficients")
    if dS <= 0:
        raise ValueError("dS must be positive")
    Lam = coeffs.Lambda_value()
    if not coeffs.lambda_exceeds_risk():
        raise ValueError("Lambda must exceed the risk h everywhere")
    h, eta, L = risk_function(coeffs), coeffs.eta, grid.length
    x = grid.nodes
    analysis = locate_minima(h, grid)
    cuts = sorted(set(h.breakpoints) | set(eta.breakpoints))
    smooth = h.is_c1()

    def unsupported(msg):
        return LimitProfileB(None, [], None, None, None, "unsupported", supported=False, message=msg)

    # case (i)
    xs = np.linspace(0.0, L, 4001)
    xs_int, _ = _slope_profile(h, xs[1:-1], h.breakpoints)
    hxx = d2(h, xs_int)
    hx0, hxL = float(d1(h, 0.0)), float(d1(h, L))
    tol = 1e-7
    if smooth and np.all(-dS * hxx <= Lam - h(xs_int) + tol) and hx0 >= -tol and hxL <= tol:
        S_fn = lambda z: np.asarray(h(z), dtype=float)
        atoms = []
        if hx0 > tol:
            atoms.append((0.0, dS * hx0 / float(eta(0.0))))
        if hxL < -tol:
            atoms.append((L, -dS * hxL / float(eta(L))))
        dens = _density_field(h, eta, Lam, dS, x)
        measure = LimitMeasure(atoms, dens, [("interval", 0.0, L)])
        prof = LimitProfileB(h.on(grid), [(0.0, L)], None, None, measure, "i", S_hat_fn=S_fn)
        return _with_checks(prof, coeffs, dS, grid, analysis, cuts)

    if not smooth:
        return unsupported("risk is not continuously differentiable; no closed-form limit")
    comps = analysis.components
    if len(comps) != 1:
        return unsupported("highest-risk set has several components")
    comp = comps[0]
    edge = 1e-6 * L

    if isinstance(comp, IsolatedPoint):
        tau0 = comp.x
        if not _nondecreasing(h, 0.0, L):
            return unsupported("h' is not non-decreasing")
        if tau0 <= edge or tau0 >= L - edge:
            return _boundary_case(coeffs, h, eta, Lam, dS, grid, analysis, cuts, at_right=tau0 >= L - edge)
        tau1 = solve_tangency(h, Lam, dS, "left", (0.0, tau0))
        tau2 = solve_tangency(h, Lam, dS, "right", (tau0, L))
        tag = "ii-a"
    else:
        r1, r2 = comp.a, comp.b
        if r1 <= edge or r2 >= L - edge:
            return unsupported("highest-risk interval touches the boundary")
        if not (_nondecreasing(h, 0.0, r1) and _nondecreasing(h, r2, L)):
            return unsupported("h' is not non-decreasing on the flanks")
        tau1 = solve_tangency(h, Lam, dS, "left", (0.0, r1))
        tau2 = solve_tangency(h, Lam, dS, "right", (r2, L))
        tag = "iii"
    if tau1 is None or tau2 is None:
        return unsupported("tangency equation has no root in its bracket")
    S_fn = _assemble(h, Lam, dS, L, tau1, tau2)
    dens = np.where((x > tau1) & (x < tau2), _density_field(h, eta, Lam, dS, x), 0.0)
    measure = LimitMeasure([], dens, [("interval", tau1, tau2)])
    prof = LimitProfileB(np.asarray(S_fn(x)), [(tau1, tau2)], tau1, tau2, measure, tag, S_hat_fn=S_fn)
    return _with_checks(prof, coeffs, dS, grid, analysis, cuts)


def _boundary_case(coeffs, h, eta, Lam, dS, grid, analysis, cuts, at_right):
    L, x = grid.length, grid.nodes
    r = math.sqrt(dS)
    T = math.tanh(L / r)
    if at_right:
        end = L
        thresh = -r * float(d1(h, L)) / (Lam - float(h(L)))
    else:
        end = 0.0
        thresh = r * float(d1(h, 0.0)) / (Lam - float(h(0.0)))
    eta_end = float(eta(end))
    if T > thresh:
        if at_right:
            tau1 = solve_tangency(h, Lam, dS, "left", (0.0, L))
            tau2, tag = L, "ii-b1"
            atom = -dS * float(d1(h, L)) / eta_end
        else:
            tau2 = solve_tangency(h, Lam, dS, "right", (0.0, L))
            tau1, tag = 0.0, "ii-c1"
            atom = dS * float(d1(h, 0.0)) / eta_end
        if tau1 is None or tau2 is None:
            return LimitProfileB(None, [], None, None, None, "unsupported", supported=False,
                                 message="tangency equation has no root")
        S_fn = _assemble(h, Lam, dS, L, tau1, tau2)
        dens = np.where((x > tau1) & (x < tau2), _density_field(h, eta, Lam, dS, x), 0.0)
        atoms = [(end, atom)] if atom > 0 else []
        measure = LimitMeasure(atoms, dens, [("interval", tau1, tau2)])
        prof = LimitProfileB(np.asarray(S_fn(x)), [(tau1, tau2)], tau1 if at_right else None,
                             None if at_right else tau2, measure, tag, S_hat_fn=S_fn)
    else:
        piece = _cosh_piece(h, Lam, dS, end, L - end)
        S_fn = lambda z: np.asarray(piece(z), dtype=float)
        mass = (Lam - float(h(end))) * r * T / eta_end
        measure = LimitMeasure([(end, mass)], np.zeros(grid.n), [("point", end)])
        prof = LimitProfileB(np.asarray(S_fn(x)), [(end, end)], None, None, measure,
                             "ii-b2" if at_right else "ii-c2", S_hat_fn=S_fn)
    return _with_checks(prof, coeffs, dS, grid, analysis, cuts)


def _with_checks(prof: LimitProfileB, coeffs, dS, grid, analysis, cuts) -> LimitProfileB:
    """Attach the consistency checks every supported profile must pass."""
    h, eta, L = risk_function(coeffs), coeffs.eta, grid.length
    Lam = coeffs.Lambda_value()
    S_fn = prof.S_hat_fn
    checks = {}
    # mass balance: Lambda L - int S_hat = int eta dmu
    int_S = _quad_pieces(lambda z: float(S_fn(z)), 0.0, L, cuts + [t for t in (prof.tau1, prof.tau2) if t])
    eta_mu = sum(float(eta(p)) * m for p, m in prof.measure.atoms)
    for a, b in prof.touching_set:
        if b > a:
            # h is C^1 in every supported case, so the h'' term telescopes
            eta_mu += _quad_pieces(lambda z: float(Lam - h(z)), a, b, cuts)
            eta_mu += dS * (float(d1(h, b, "left")) - float(d1(h, a, "right")))
    checks["closure_error"] = abs(Lam * L - int_S - eta_mu)
    # tangency: one-sided slope of the cosh piece equals h' at each free boundary
    r = math.sqrt(dS)
    slope_err = 0.0
    for tau, anchor in ((prof.tau1, 0.0), (prof.tau2, L)):
        if tau is not None and 0.0 < tau < L:
            s_piece = (float(h(tau)) - Lam) * math.tanh((tau - anchor) / r) / r
            slope_err = max(slope_err, abs(s_piece - float(d1(h, tau))))
    checks["c1_mismatch"] = slope_err
    # ODE on the non-touching part, checked on the closed form
    zs = np.linspace(0.0, L, 2001)
    off = np.ones(zs.size, dtype=bool)
    for a, b in prof.touching_set:
        off &= ~((zs >= a - 1e-9) & (zs <= b + 1e-9))
    step = 1e-3
    for tau in (prof.tau1, prof.tau2):
        if tau is not None:
            off &= np.abs(zs - tau) > 2 * step
    zs = zs[off]
    if zs.size:
        Szz = (S_fn(zs + step) - 2 * S_fn(zs) + S_fn(zs - step)) / step**2
        Szz2 = (S_fn(zs + step / 2) - 2 * S_fn(zs) + S_fn(zs - step / 2)) / (step / 2) ** 2
        Szz = (4 * Szz2 - Szz) / 3
        checks["ode_residual"] = float(np.max(np.abs(-dS * Szz - (Lam - S_fn(zs)))))
    else:
        checks["ode_residual"] = 0.0
    Sg = np.asarray(prof.S_hat, dtype=float)
    hg = h.on(grid)
    checks["above_h"] = float(np.max(Sg - hg))
    checks["below_hmin"] = float(analysis.min_value - np.min(Sg))
    # highest-risk set inside the touching set
    inside = True
    for comp in analysis.components:
        pts = [comp.x] if isinstance(comp, IsolatedPoint) else [comp.a, comp.b]
        for p in pts:
            if not any(a - grid.h <= p <= b + grid.h for a, b in prof.touching_set):
                inside = False
    checks["theta_in_touching_set"] = inside
    dens = prof.measure.density
    checks["min_density"] = float(np.min(dens)) if dens.size else 0.0
    checks["atoms_nonnegative"] = all(m >= 0 for _, m in prof.measure.atoms)
    prof.checks = checks
    if checks["min_density"] < -1e-9:
        logger.warning("negative limit density: the coefficient data are inconsistent with the case")
    return prof


def limit_profile(coeffs: CoefficientSet, dS: float, grid: Grid1D, N: float | None = None, **kw):
    if coeffs.kind == CONSERVED:
        return limit_profile_conserved(coeffs, N, dS, grid, **kw)
    return limit_profile_recruited(coeffs, dS, grid)
