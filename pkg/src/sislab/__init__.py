"""Spatial SIS epidemic models on an interval: equilibria and small-dI limits."""

from .coefficients import (CONSERVED, RECRUITED, CoefficientSet, Interval, IsolatedPoint, PiecewiseFunction,
                           RiskAnalysis, locate_minima, parse_coefficient, risk_function)
from .dynamics import SimState, default_initial_state, run_to_equilibrium, step_imex, total_mass
from .equilibrium import (EquilibriumSolution, NumericalFailure, principal_eigenvalue, solve_ee_conserved,
                          solve_ee_recruited, solve_equilibrium, w_diagnostic)
from .experiments import (ModelConfig, Preset, SweepReport, emit_plot, list_presets, load_config, load_preset,
                          run_figure_preset, sweep_dI)
from .grid import Grid1D, build_grid, integrate, solve_tridiagonal
from .limits import (LimitMeasure, LimitProfileA, LimitProfileB, critical_dS, limit_profile,
                     limit_profile_conserved, limit_profile_recruited, solve_limit_I, solve_tangency)

__version__ = "0.1.0"

__all__ = [
    "CONSERVED", "RECRUITED", "CoefficientSet", "Interval", "IsolatedPoint", "PiecewiseFunction",
    "RiskAnalysis", "locate_minima", "parse_coefficient", "risk_function",
    "SimState", "default_initial_state", "run_to_equilibrium", "step_imex", "total_mass",
    "EquilibriumSolution", "NumericalFailure", "principal_eigenvalue", "solve_ee_conserved",
    "solve_ee_recruited", "solve_equilibrium", "w_diagnostic",
    "ModelConfig", "Preset", "SweepReport", "emit_plot", "list_presets", "load_config", "load_preset",
    "run_figure_preset", "sweep_dI",
    "Grid1D", "build_grid", "integrate", "solve_tridiagonal",
    "LimitMeasure", "LimitProfileA", "LimitProfileB", "critical_dS", "limit_profile",
    "limit_profile_conserved", "limit_profile_recruited", "solve_limit_I", "solve_tangency",
]
