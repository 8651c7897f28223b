"""Steady states by damped Newton, the principal eigenvalue and the w-diagnostic.

The infected density is carried as ``u = log I``.  For small ``dI`` the
endemic ``I`` decays by several orders of magnitude per grid cell away from
the highest-risk set, so in the linear variable Newton updates would
constantly cross zero.  In log form the ``I`` equation is divided through by
``I``::

    G_i = -dI (lap e^u)_i / e^{u_i} - (beta S - gamma [- eta])_i

which stays O(1) even where ``I`` underflows.  Reported residuals are those
of the original equations in finite-volume form (each row times its cell
width), whose round-off floor sits far below the convergence tolerance.

For the conserved model the two equations sum to a pure Neumann Laplace
relation, so they are dependent.  The mass constraint closes the system
through a bordering multiplier ``lam`` added to the S equation; any solution
has ``lam = 0`` (integrate the sum of the equations), so this only restores
a nonsingular Jacobian.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .coefficients import CONSERVED, RECRUITED, CoefficientSet, risk_function
from .grid import (Grid1D, TridiagonalSystem, apply_laplacian, as_field, integrate,
                   laplacian_diagonals, laplacian_matrix, solve_tridiagonal)

logger = logging.getLogger(__name__)

NEWTON_TOL = 1e-10


class NumericalFailure(ArithmeticError):
    pass


@dataclass
class EquilibriumSolution:
    S: np.ndarray
    I: np.ndarray
    grid: Grid1D
    kind: str
    dS: float
    dI: float
    residual_inf: float
    converged: bool
    iterations: int
    mass: float | None = None
    endemic: bool = True
    meta: dict = field(default_factory=dict)
    # log I from the Newton variables; finite even where I underflows to 0.0
    log_I: np.ndarray | None = None

    @property
    def x(self) -> np.ndarray:
        return self.grid.nodes


@dataclass
class _Problem:
    kind: str
    grid: Grid1D
    dS: float
    dI: float
    beta: np.ndarray
    gamma: np.ndarray
    eta: np.ndarray | None
    Lam: np.ndarray | None
    N: float | None

    @classmethod
    def build(cls, coeffs, grid, dS, dI, N=None):
        if dS <= 0 or dI <= 0:
            raise ValueError("diffusion rates must be positive")
        rec = coeffs.kind == RECRUITED
        return cls(coeffs.kind, grid, float(dS), float(dI), coeffs.beta.on(grid),
                   coeffs.gamma.on(grid), coeffs.eta.on(grid) if rec else None,
                   coeffs.Lambda.on(grid) if rec else None, N)

    @property
    def conserved(self) -> bool:
        return self.kind == CONSERVED

    def loss(self) -> np.ndarray:
        return self.gamma if self.conserved else self.gamma + self.eta

    def unpack(self, z):
        n = self.grid.n
        return z[:n], z[n:2 * n], (z[2 * n] if self.conserved else 0.0)

    def residuals(self, S, I, lam=0.0):
        """Unscaled residuals (F_S, F_I[, mass defect])."""
        h = self.grid.h
        inf = (self.beta * S - self.gamma) * I
        F_S = -self.dS * apply_laplacian(S, h) + inf + lam
        if not self.conserved:
            F_S = F_S - self.Lam + S
        F_I = -self.dI * apply_laplacian(I, h) - (self.beta * S - self.loss()) * I
        extra = [integrate(self.grid, S + I) - self.N] if self.conserved else []
        return F_S, F_I, extra

    def residual_inf(self, S, I) -> float:
        """Max-norm of the equations in finite-volume form (rows times cell widths)."""
        F_S, F_I, extra = self.residuals(S, I)
        w = self.grid.weights
        vals = [np.max(np.abs(w * F_S)), np.max(np.abs(w * F_I))] + [abs(e) for e in extra]
        return float(max(vals))

    def scaled(self, z):
        S, u, lam = self.unpack(z)
        I = np.exp(u)
        n, h = self.grid.n, self.grid.h
        F_S, _, extra = self.residuals(S, I, lam)
        # G_i = -dI/h^2 * (sum of neighbour ratios - 2)
        ratio_r = np.exp(u[1:] - u[:-1])  # I[i+1]/I[i]
        ratio_l = np.exp(u[:-1] - u[1:])  # I[i]/I[i+1]
        lapI = np.empty(n)
        lapI[1:-1] = ratio_r[1:] + ratio_l[:-1] - 2.0
        lapI[0] = 2.0 * (ratio_r[0] - 1.0)
        lapI[-1] = 2.0 * (ratio_l[-1] - 1.0)
        G = -self.dI * lapI / h**2 - (self.beta * S - self.loss())
        return np.concatenate([F_S, G, extra]), I, ratio_r, ratio_l

    def jacobian(self, z, I, ratio_r, ratio_l):
        S, u, _ = self.unpack(z)
        n, c = self.grid.n, self.dI / self.grid.h**2
        lap = laplacian_matrix(self.grid)
        a = self.beta * S - self.gamma
        dFS_dS = -self.dS * lap + sp.diags(self.beta * I + (0.0 if self.conserved else 1.0))
        dFS_du = sp.diags(a * I)
        dG_dS = sp.diags(-self.beta)
        # d G_i / d u_j for the neighbour ratios e^{u_j - u_i}
        up = np.zeros(n - 1)    # (i, i+1)
        low = np.zeros(n - 1)   # (i+1, i)
        diag = np.zeros(n)
        up[1:] = -c * ratio_r[1:]
        up[0] = -2.0 * c * ratio_r[0]
        low[:-1] = -c * ratio_l[:-1]
        low[-1] = -2.0 * c * ratio_l[-1]
        diag[1:-1] = c * (ratio_r[1:] + ratio_l[:-1])
        diag[0] = 2.0 * c * ratio_r[0]
        diag[-1] = 2.0 * c * ratio_l[-1]
        dG_du = sp.diags([low, diag, up], [-1, 0, 1])
        blocks = [[dFS_dS, dFS_du], [dG_dS, dG_du]]
        if self.conserved:
            w = self.grid.weights
            ones = sp.csr_matrix(np.concatenate([np.ones(n), np.zeros(n)])[:, None])
            row = sp.csr_matrix(np.concatenate([w, w * I])[None, :])
            J = sp.bmat([[sp.bmat(blocks), ones], [row, None]], format="csc")
        else:
            J = sp.bmat(blocks, format="csc")
        return J


def _pseudo_transient(prob: _Problem, z, tol: float, max_iter: int):
    """Pseudo-transient continuation: Newton on ``z/dt + F(z)`` with a growing ``dt``.

    Used when plain damped Newton creeps, which happens when a boundary
    layer of ``I`` sharpens faster than the Newton basin allows.  The
    pseudo-time step doubles after each step that does not increase the
    residual much and halves otherwise; for large ``dt`` this is Newton.
    """
    n = prob.grid.n
    m = 2 * n
    F, I, rr, rl = prob.scaled(z)
    nrm = float(np.linalg.norm(F))
    res = prob.residual_inf(z[:n], I)
    shift = sp.diags(np.concatenate([np.ones(m), np.zeros(len(z) - m)]))
    dt = 1e-2
    it = 0
    while res > tol and it < max_iter and dt > 1e-12:
        it += 1
        J = prob.jacobian(z, I, rr, rl)
        try:
            dz = spla.spsolve((J + shift / dt).tocsc(), -F)
        except RuntimeError:
            dt *= 0.25
            continue
        zt = z + dz
        if not np.all(np.isfinite(dz)) or np.any(zt[:n] <= 0):
            dt *= 0.25
            continue
        with np.errstate(over="ignore", invalid="ignore"):
            Ft, It, rrt, rlt = prob.scaled(zt)
        nt = float(np.linalg.norm(Ft))
        if not np.isfinite(nt) or nt > 1.2 * nrm:
            dt *= 0.5
            continue
        dt = min(2.0 * dt, 1e15)
        z, F, I, rr, rl, nrm = zt, Ft, It, rrt, rlt, nt
        res = prob.residual_inf(z[:n], I)
    return z, F, I, rr, rl, res, it


def newton(prob: _Problem, S0, I0, tol: float = NEWTON_TOL, max_iter: int = 200,
           min_step: float = 2.0 ** -20, max_log_step: float = 20.0,
           polish: int = 3) -> EquilibriumSolution:
    """Damped Newton with Armijo backtracking on the scaled residual.

    Falls back to pseudo-transient continuation from the last iterate when
    the line search fails or the accepted steps stay tiny.
    """
    grid = prob.grid
    S0 = as_field(grid, S0)
    I0 = as_field(grid, I0)
    if np.any(S0 <= 0) or np.any(I0 < 0) or not np.any(I0 > 0):
        raise ValueError("Newton initial guess must be positive")
    # values that underflowed in a previous solve restart from the smallest normal float
    I0 = np.maximum(I0, np.finfo(float).tiny)
    z = np.concatenate([S0, np.log(I0)] + ([np.zeros(1)] if prob.conserved else []))
    n = grid.n
    F, I, rr, rl = prob.scaled(z)
    phi = 0.5 * float(F @ F)
    res = prob.residual_inf(z[:n], I)
    it = short = 0
    converged = res <= tol
    while not converged and it < max_iter:
        it += 1
        J = prob.jacobian(z, I, rr, rl)
        try:
            dz = spla.spsolve(J, -F)
        except RuntimeError as exc:
            logger.debug("singular Jacobian: %s", exc)
            break
        if not np.all(np.isfinite(dz)):
            break
        t = 1.0
        du = np.max(np.abs(dz[n:2 * n]))
        if du * t > max_log_step:
            t = max_log_step / du
        accepted = False
        while t >= min_step:
            zt = z + t * dz
            if np.all(zt[:n] > 0):
                with np.errstate(over="ignore", invalid="ignore"):
                    Ft, It, rrt, rlt = prob.scaled(zt)
                if np.all(np.isfinite(Ft)):
                    phit = 0.5 * float(Ft @ Ft)
                    if phit <= (1.0 - 1e-4 * t) * phi:
                        accepted = True
                        break
            t *= 0.5
        if not accepted:
            logger.debug("line search failed at iteration %d (res=%.3g)", it, res)
            break
        z, F, I, rr, rl, phi = zt, Ft, It, rrt, rlt, phit
        res = prob.residual_inf(z[:n], I)
        converged = res <= tol
        short = short + 1 if t < 1.0 / 64 else 0
        if short >= 10:
            logger.debug("damped Newton creeping at iteration %d (res=%.3g)", it, res)
            break
    if not converged:
        z, F, I, rr, rl, res, extra = _pseudo_transient(prob, z, tol, 5 * max_iter)
        it += extra
        converged = res <= tol
    # a few extra steps push the residual down to round-off level
    for _ in range(polish if converged else 0):
        J = prob.jacobian(z, I, rr, rl)
        try:
            dz = spla.spsolve(J, -F)
        except RuntimeError:
            break
        zt = z + dz
        if not np.all(np.isfinite(dz)) or np.any(zt[:n] <= 0):
            break
        with np.errstate(over="ignore", invalid="ignore"):
            Ft, It, rrt, rlt = prob.scaled(zt)
        rest = prob.residual_inf(zt[:n], It) if np.all(np.isfinite(Ft)) else np.inf
        if not rest < 0.5 * res:
            break
        z, F, I, rr, rl, res = zt, Ft, It, rrt, rlt, rest
    S, _, lam = prob.unpack(z)
    sol = EquilibriumSolution(
        S=S.copy(), I=I.copy(), grid=grid, kind=prob.kind, dS=prob.dS, dI=prob.dI,
        residual_inf=res, converged=bool(converged), iterations=it,
        mass=integrate(grid, S + I) if prob.conserved else None,
        meta={"multiplier": float(lam), "scaled_residual": float(np.max(np.abs(F)))},
        log_I=z[n:2 * n].copy(),
    )
    return sol


def _dI_ladder(start: float, target: float, factor: float = 10.0) -> list[float]:
    vals = [start]
    while vals[-1] / factor > target * (1 + 1e-12):
        vals.append(vals[-1] / factor)
    if vals[-1] != target:
        vals.append(target)
    return vals


def _continue(prob_for, S0, I0, dI_target: float, dI_start: float, tol: float,
              min_ratio: float = 1.25) -> tuple[EquilibriumSolution, list]:
    """Newton continuation in dI, refining the ladder when a step fails."""
    path = []
    sol = newton(prob_for(dI_start), S0, I0, tol=tol)
    path.append((dI_start, sol.converged, sol.iterations))
    if not sol.converged:
        return sol, path
    current = dI_start
    ratio = 10.0
    while current > dI_target * (1 + 1e-12):
        nxt = max(current / ratio, dI_target)
        trial = newton(prob_for(nxt), sol.S, sol.I, tol=tol)
        path.append((nxt, trial.converged, trial.iterations))
        if trial.converged:
            sol, current = trial, nxt
            ratio = min(10.0, ratio * 2.0)
        else:
            ratio = np.sqrt(ratio)
            if ratio < min_ratio:
                return trial, path
    return sol, path


def _fallback_guess(coeffs, grid, dS, dI, N):
    from .dynamics import default_initial_state, run_to_equilibrium

    state = default_initial_state(coeffs, grid, dS, dI, N=N)
    run = run_to_equilibrium(state, residual_tol=1e-6, t_max=2e3)
    return run.S, np.maximum(run.I, 1e-300)


def _initial_guess(coeffs, grid, N):
    from .dynamics import default_initial_state

    st = default_initial_state(coeffs, grid, 1.0, 1.0, N=N)
    return st.S, st.I


def solve_ee_conserved(coeffs: CoefficientSet, N: float, dS: float, dI: float, grid: Grid1D,
                       init=None, tol: float = NEWTON_TOL, dI_start: float = 1e-2) -> EquilibriumSolution:
    """Endemic equilibrium of the conserved model with total mass ``N``.

    With ``init=(S, I)`` Newton starts there directly.  Otherwise it starts
    from a guess near the small-dI limit at ``max(dI, dI_start)`` and
    continues down in dI; if that first solve fails the dynamics are run
    briefly to produce a better guess.
    """
    if coeffs.kind != CONSERVED:
        raise ValueError("expected conserved-model coefficients")
    kmin = float(risk_function(coeffs).on(grid).min())
    if not kmin < N / grid.length:
        raise ValueError(f"no endemic equilibrium: k_min={kmin:g} >= N/L={N / grid.length:g}")

    def prob_for(d):
        return _Problem.build(coeffs, grid, dS, d, N)

    if init is not None:
        sol = newton(prob_for(dI), init[0], init[1], tol=tol)
        sol.meta["path"] = [(dI, sol.converged, sol.iterations)]
        return sol
    start = max(dI, dI_start)
    S0, I0 = _initial_guess(coeffs, grid, N)
    sol, path = _continue(prob_for, S0, I0, dI, start, tol)
    if not sol.converged and not path[0][1]:
        S0, I0 = _fallback_guess(coeffs, grid, dS, start, N)
        sol, path2 = _continue(prob_for, S0, I0, dI, start, tol)
        path += [("dynamics-guess", None, None)] + path2
    sol.meta["path"] = path
    return sol


def disease_free_state(coeffs: CoefficientSet, dS: float, grid: Grid1D) -> np.ndarray:
    """Solve -dS S'' = Lambda - S with no-flux ends."""
    sub, main, sup = laplacian_diagonals(grid)
    return solve_tridiagonal(TridiagonalSystem(-dS * sub, 1.0 - dS * main, -dS * sup, coeffs.Lambda.on(grid)))


def solve_ee_recruited(coeffs: CoefficientSet, dS: float, dI: float, grid: Grid1D,
                       init=None, tol: float = NEWTON_TOL, dI_start: float = 1e-2) -> EquilibriumSolution:
    """Endemic equilibrium of the model with recruitment and infected deaths.

    An initial ``I`` that is identically zero returns the disease-free state
    with ``endemic=False``.
    """
    if coeffs.kind != RECRUITED:
        raise ValueError("expected recruited-model coefficients")
    if init is not None and np.all(np.asarray(init[1]) == 0):
        S = disease_free_state(coeffs, dS, grid)
        prob = _Problem.build(coeffs, grid, dS, dI)
        I = np.zeros(grid.n)
        return EquilibriumSolution(S, I, grid, RECRUITED, dS, dI, prob.residual_inf(S, I),
                                   True, 0, endemic=False, meta={"path": []})
    S_tilde = disease_free_state(coeffs, dS, grid)
    if not np.any(coeffs.beta.on(grid) * S_tilde > coeffs.gamma.on(grid) + coeffs.eta.on(grid)):
        raise ValueError("no endemic equilibrium: beta*S_tilde <= gamma+eta everywhere")

    def prob_for(d):
        return _Problem.build(coeffs, grid, dS, d)

    if init is not None:
        sol = newton(prob_for(dI), init[0], np.maximum(init[1], 1e-300), tol=tol)
        sol.meta["path"] = [(dI, sol.converged, sol.iterations)]
        return sol
    start = max(dI, dI_start)
    S0, I0 = _initial_guess(coeffs, grid, None)
    sol, path = _continue(prob_for, S0, I0, dI, start, tol)
    if not sol.converged and not path[0][1]:
        S0, I0 = _fallback_guess(coeffs, grid, dS, start, None)
        sol, path2 = _continue(prob_for, S0, I0, dI, start, tol)
        path += [("dynamics-guess", None, None)] + path2
    sol.meta["path"] = path
    return sol


def solve_equilibrium(coeffs, dS, dI, grid, N=None, **kw) -> EquilibriumSolution:
    if coeffs.kind == CONSERVED:
        return solve_ee_conserved(coeffs, N, dS, dI, grid, **kw)
    return solve_ee_recruited(coeffs, dS, dI, grid, **kw)


def equilibrium_residual(sol: EquilibriumSolution, coeffs: CoefficientSet, N: float | None = None) -> float:
    """Max-norm residual of the discrete steady equations at ``sol``."""
    prob = _Problem.build(coeffs, sol.grid, sol.dS, sol.dI, N if N is not None else sol.mass)
    return prob.residual_inf(sol.S, sol.I)


@dataclass
class EigenPair:
    lambda1: float
    phi: np.ndarray
    residual: float


def principal_eigenvalue(D: float, f, grid: Grid1D, max_iter: int = 50) -> EigenPair:
    """Smallest eigenvalue of ``-D lap + f`` with no-flux ends, and its positive eigenvector.

    The operator is similar to a symmetric tridiagonal matrix through the
    trapezoid weights, so the two lowest eigenvalues come from LAPACK's
    symmetric tridiagonal solver.  The eigenvector is then obtained by
    inverse iteration from a positive vector with the shift placed a tenth
    of the spectral gap below the eigenvalue (a fixed shift ``min f - 1``
    converges far too slowly when the gap is O(sqrt(D))).
    """
    f = as_field(grid, f)
    if D <= 0:
        raise ValueError("D must be positive")
    sub, main, sup = laplacian_diagonals(grid)
    w = grid.weights
    sw = np.sqrt(w)
    # symmetrised: W^{1/2} A W^{-1/2}
    d = -D * main + f
    e = -D * sup[:-1] * sw[:-1] / sw[1:]
    lam, lam2 = scipy.linalg.eigh_tridiagonal(d, e, eigvals_only=True, select="i", select_range=(0, 1))
    shift = lam - 0.1 * (lam2 - lam)
    phi = np.ones(grid.n)
    A = TridiagonalSystem(-D * sub, -D * main + f - shift, -D * sup, phi)
    resid = np.inf
    for _ in range(max_iter):
        try:
            nxt = solve_tridiagonal(TridiagonalSystem(A.sub, A.main, A.sup, phi))
        except ArithmeticError:
            shift -= 0.1 * (lam2 - lam)
            A = TridiagonalSystem(-D * sub, -D * main + f - shift, -D * sup, phi)
            continue
        nxt /= np.max(np.abs(nxt))
        if nxt[np.argmax(np.abs(nxt))] < 0:
            nxt = -nxt
        phi = nxt
        Aphi = -D * apply_laplacian(phi, grid.h) + f * phi
        rq = float(np.dot(w * phi, Aphi) / np.dot(w * phi, phi))
        resid = float(np.max(np.abs(Aphi - rq * phi)))
        if resid <= 1e-10:
            break
    if resid > 1e-8:
        raise NumericalFailure(f"inverse iteration stagnated, residual {resid:.3g}")
    if np.any(phi <= 0):
        # round-off can leave exponentially small tails at zero or slightly below
        phi = np.maximum(phi, np.finfo(float).tiny)
    return EigenPair(rq if abs(rq - lam) < 1e-8 else float(lam), phi, resid)


@dataclass
class WDiagnostic:
    w: np.ndarray
    c: np.ndarray         # dS*w + I, constant at an exact equilibrium
    c_mean: float
    c_spread: float       # max |c - mean| / mean


def w_diagnostic(sol: EquilibriumSolution, k_min: float) -> WDiagnostic:
    """Rescaled susceptible excess ``(S - k_min)/dI`` and the combination ``dS*w + I``."""
    w = (sol.S - k_min) / sol.dI
    c = sol.dS * w + sol.I
    mean = float(integrate(sol.grid, c) / sol.grid.length)
    spread = float(np.max(np.abs(c - mean)) / abs(mean)) if mean != 0 else np.inf
    return WDiagnostic(w, c, mean, spread)
