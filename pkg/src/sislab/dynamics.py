"""IMEX time stepping of the parabolic SIS systems.

Diffusion is implicit (one tridiagonal solve per species), reactions are
explicit and evaluated once per step.  In the conserved model the infection
and recovery terms enter ``S`` and ``I`` with opposite signs from the same
nodal array, so together with the zero-column-sum Laplacian the discrete
total mass is conserved up to round-off.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .coefficients import CONSERVED, CoefficientSet, locate_minima, risk_function
from .grid import Grid1D, TridiagonalSystem, as_field, integrate, laplacian_diagonals, solve_tridiagonal

logger = logging.getLogger(__name__)


class StepRejected(ArithmeticError):
    """A step would have produced a negative density; retry with a smaller dt."""


@dataclass(frozen=True)
class SimState:
    t: float
    S: np.ndarray
    I: np.ndarray
    grid: Grid1D
    coeffs: CoefficientSet
    dS: float
    dI: float
    # nodal coefficient samples, filled in automatically
    beta: np.ndarray = field(default=None, repr=False, compare=False)
    gamma: np.ndarray = field(default=None, repr=False, compare=False)
    eta: Optional[np.ndarray] = field(default=None, repr=False, compare=False)
    Lambda: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.dS <= 0 or self.dI <= 0:
            raise ValueError("diffusion rates must be positive")
        S = as_field(self.grid, self.S)
        I = as_field(self.grid, self.I)
        if np.any(S < 0) or np.any(I < 0):
            raise ValueError("densities must be nonnegative")
        object.__setattr__(self, "S", S)
        object.__setattr__(self, "I", I)
        if self.beta is None:
            c, g = self.coeffs, self.grid
            object.__setattr__(self, "beta", c.beta.on(g))
            object.__setattr__(self, "gamma", c.gamma.on(g))
            if c.kind != CONSERVED:
                object.__setattr__(self, "eta", c.eta.on(g))
                object.__setattr__(self, "Lambda", c.Lambda.on(g))

    @property
    def conserved(self) -> bool:
        return self.coeffs.kind == CONSERVED

    def reactions(self) -> tuple[np.ndarray, np.ndarray]:
        infection = (self.beta * self.S - self.gamma) * self.I
        if self.conserved:
            return -infection, infection
        return self.Lambda - self.S - infection, infection - self.eta * self.I

    def reaction_lipschitz(self) -> float:
        """Max absolute row sum of the reaction Jacobian over the nodes."""
        bI = self.beta * self.I
        a = np.abs(self.beta * self.S - self.gamma)
        if self.conserved:
            return float(np.max(bI + a))
        b = np.abs(self.beta * self.S - self.gamma - self.eta)
        return float(max(np.max(1.0 + bI + a), np.max(bI + b)))


def total_mass(state: SimState) -> float:
    return integrate(state.grid, state.S + state.I)


def _implicit_solve(grid: Grid1D, D: float, dt: float, rhs: np.ndarray) -> np.ndarray:
    sub, main, sup = laplacian_diagonals(grid)
    x = solve_tridiagonal(TridiagonalSystem(-dt * D * sub, 1.0 - dt * D * main, -dt * D * sup, rhs))
    # (I - dt D lap) preserves the trapezoid mass of rhs exactly; the rounded
    # diagonal 1 + 2 dt D / h^2 does not, so undo that O(eps * cond) bias.
    w = grid.weights
    m_x = float(np.dot(w, x))
    if m_x > 0.0:
        x *= float(np.dot(w, rhs)) / m_x
    return x


def step_imex(state: SimState, dt: float) -> SimState:
    """One IMEX Euler step; raises :class:`StepRejected` on negative values."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    rS, rI = state.reactions()
    S = _implicit_solve(state.grid, state.dS, dt, state.S + dt * rS)
    I = _implicit_solve(state.grid, state.dI, dt, state.I + dt * rI)
    if np.any(S < 0) or np.any(I < 0):
        raise StepRejected(f"negative density after step dt={dt:g}")
    return replace(state, t=state.t + dt, S=S, I=I)


@dataclass
class EquilibriumRun:
    """Outcome of :func:`run_to_equilibrium`."""

    state: SimState
    residual: float
    converged: bool
    steps: int
    rejected: int
    history: list = field(default_factory=list)

    @property
    def S(self) -> np.ndarray:
        return self.state.S

    @property
    def I(self) -> np.ndarray:
        return self.state.I

    @property
    def t(self) -> float:
        return self.state.t


def run_to_equilibrium(
    init: SimState,
    residual_tol: float = 1e-8,
    t_max: float = 1e6,
    dt0: float = 1e-3,
    max_steps: int = 10_000_000,
    grow_after: int = 50,
    lipschitz_cap: float = 0.5,
    callback: Callable[[SimState], None] | None = None,
    snapshot_every: float | None = None,
) -> EquilibriumRun:
    """March in time until the per-unit-time increment drops below ``residual_tol``.

    Hitting ``t_max`` or ``max_steps`` is reported through ``converged=False``
    together with the last state rather than raised.
    """
    state, dt = init, dt0
    accepted_run = steps = rejected = 0
    residual = np.inf
    next_snap = snapshot_every
    history = []
    while state.t < t_max and steps < max_steps:
        lip = state.reaction_lipschitz()
        dt_step = min(dt, lipschitz_cap / lip if lip > 0 else dt, t_max - state.t)
        try:
            new = step_imex(state, dt_step)
        except StepRejected:
            rejected += 1
            dt = 0.5 * dt_step
            accepted_run = 0
            if dt < 1e-14:
                logger.warning("time step underflow at t=%g", state.t)
                break
            continue
        residual = max(np.max(np.abs(new.S - state.S)), np.max(np.abs(new.I - state.I))) / dt_step
        state = new
        steps += 1
        accepted_run += 1
        if accepted_run >= grow_after:
            dt = 2.0 * dt
            accepted_run = 0
        if callback is not None and snapshot_every is not None and state.t >= next_snap:
            callback(state)
            next_snap += snapshot_every
        if steps % 1000 == 0:
            history.append((state.t, residual))
        if residual <= residual_tol:
            break
    converged = bool(residual <= residual_tol)
    if not converged:
        logger.info("dynamics stopped at t=%g with residual %.3g", state.t, residual)
    return EquilibriumRun(state, float(residual), converged, steps, rejected, history)


def default_initial_state(coeffs: CoefficientSet, grid: Grid1D, dS: float, dI: float,
                          N: float | None = None) -> SimState:
    """Initial data close to the predicted small-dI limit.

    Conserved: S0 is the risk function clipped from above so that a positive
    mass is left for I0, which is spread uniformly.  Recruited: S0 is the risk
    clipped to [h_min, Lambda] and I0 = 0.1.
    """
    risk = risk_function(coeffs)
    r = risk.on(grid)
    rmin = float(r.min())
    L = grid.length
    if coeffs.kind == CONSERVED:
        if N is None:
            raise ValueError("the conserved model needs the total mass N")
        if rmin >= N / L:
            raise ValueError("no endemic state: min risk >= N/L")
        S0 = np.clip(r, rmin, 0.5 * (rmin + N / L))
        I0 = np.full(grid.n, (N - integrate(grid, S0)) / L)
    else:
        S0 = np.clip(r, rmin, coeffs.Lambda.on(grid))
        I0 = np.full(grid.n, 0.1)
    return SimState(0.0, S0, I0, grid, coeffs, dS, dI)
