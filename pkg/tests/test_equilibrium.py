from __future__ import annotations

import numpy as np
import pytest

from sislab.coefficients import CONSERVED, RECRUITED, CoefficientSet, constant, parse_coefficient, risk_function
from sislab.equilibrium import (NumericalFailure, disease_free_state, equilibrium_residual, principal_eigenvalue,
                                solve_ee_conserved, solve_ee_recruited, solve_equilibrium, w_diagnostic)
from sislab.experiments import load_preset
from sislab.grid import build_grid, integrate, integrate_window, laplacian_matrix

BETA1 = "1+0.5*sin(2*pi*x)"


def preset_solution(pid, dI=None, n=None):
    cfg = load_preset(pid).config
    co, g = cfg.coefficients(), cfg.grid(n)
    return co, solve_equilibrium(co, cfg.resolved_dS(), dI or cfg.dI, g, N=cfg.N)


@pytest.mark.parametrize("beta", ["1", BETA1, "3+x"])
def test_constant_risk_conserved(beta):
    g = build_grid(1.0, 201)
    co = CoefficientSet.from_risk(CONSERVED, parse_coefficient(beta, L=1.0), constant(0.5, 1.0))
    sol = solve_ee_conserved(co, 2.0, 1.0, 1e-3, g)
    assert sol.converged
    np.testing.assert_allclose(sol.S, 0.5, atol=1e-8)
    np.testing.assert_allclose(sol.I, 1.5, atol=1e-8)
    assert sol.mass == pytest.approx(2.0, rel=1e-12)


def test_constant_risk_recruited():
    # beta*S = gamma + eta forces S = h, then Lambda - h = eta*I
    g = build_grid(1.0, 201)
    L = 1.0
    co = CoefficientSet(constant(2, L), constant(1.5, L), RECRUITED, constant(0.5, L), constant(6, L))
    sol = solve_ee_recruited(co, 1.0, 1e-4, g)
    assert sol.converged and sol.endemic
    np.testing.assert_allclose(sol.S, 1.0, atol=1e-9)
    np.testing.assert_allclose(sol.I, (6 - 1.0) / 0.5, atol=1e-8)


def test_existence_preconditions():
    g = build_grid(1.0, 101)
    co = CoefficientSet.from_risk(CONSERVED, constant(1, 1.0), parse_coefficient("1+x", L=1.0))
    with pytest.raises(ValueError):
        solve_ee_conserved(co, 0.9, 1.0, 1e-2, g)
    one = constant(1, 1.0)
    rc = CoefficientSet.from_risk(RECRUITED, one, parse_coefficient("5+x", L=1.0), one, constant(4, 1.0))
    with pytest.raises(ValueError):
        solve_ee_recruited(rc, 1.0, 1e-2, g)
    with pytest.raises(ValueError):
        solve_ee_recruited(co, 1.0, 1e-2, g)


def test_zero_infection_returns_disease_free():
    g = build_grid(1.0, 201)
    one = constant(1, 1.0)
    co = CoefficientSet.from_risk(RECRUITED, one, parse_coefficient("1+(x-1/2)^2", L=1.0), one,
                                  parse_coefficient("10+cos(pi*x)", L=1.0))
    sol = solve_ee_recruited(co, 0.5, 1e-3, g, init=(np.ones(g.n), np.zeros(g.n)))
    assert not sol.endemic
    assert np.all(sol.I == 0)
    # -dS S'' = Lambda - S, checked against a dense solve
    A = np.eye(g.n) - 0.5 * laplacian_matrix(g).toarray()
    np.testing.assert_allclose(sol.S, np.linalg.solve(A, co.Lambda.on(g)), rtol=1e-12)
    np.testing.assert_allclose(disease_free_state(co, 0.5, g), sol.S)


def test_fig1a_concentrates():
    co, sol = preset_solution("fig1a")
    assert sol.converged
    assert np.max(np.abs(sol.S - 0.5)) <= 0.05
    assert np.ptp(sol.S) <= 0.05
    frac = integrate_window(sol.grid, sol.I, 0.45, 0.55) / integrate(sol.grid, sol.I)
    assert frac >= 0.9


def test_conserved_invariants():
    co, sol = preset_solution("fig1b", dI=1e-4)
    assert sol.converged
    assert np.all(sol.S > 0) and np.all(sol.I > 0)
    k = risk_function(co).on(sol.grid)
    slack = 10 * sol.residual_inf
    assert sol.S.min() >= k.min() - slack and sol.S.max() <= k.max() + slack
    assert integrate(sol.grid, sol.S + sol.I) == pytest.approx(2.0, rel=1e-12)
    assert equilibrium_residual(sol, co, N=2.0) <= 1e-10


def test_fig2a_interval_mass():
    co, sol = preset_solution("fig2a")
    assert integrate_window(sol.grid, sol.I, 0.25, 0.75) >= 0.95 * 1.5


def test_fig2a_w_combination_constant():
    co, sol = preset_solution("fig2a")
    wd = w_diagnostic(sol, 0.5)
    assert wd.c_spread <= 1e-6


def test_w_diagnostic_constant_equilibrium():
    g = build_grid(1.0, 101)
    co = CoefficientSet.from_risk(CONSERVED, constant(1, 1.0), constant(0.5, 1.0))
    sol = solve_ee_conserved(co, 2.0, 1.0, 1e-2, g)
    wd = w_diagnostic(sol, 0.5)
    np.testing.assert_allclose(wd.w, 0.0, atol=1e-6)
    np.testing.assert_allclose(wd.c, sol.I, atol=1e-8)


@pytest.mark.slow
def test_fig4a_between_hmin_and_h():
    co, sol = preset_solution("fig4a")
    h = risk_function(co).on(sol.grid)
    assert sol.converged
    assert np.all(sol.S <= h + 0.02)
    assert np.all(sol.S >= h.min() - 0.02)


def test_warm_start_from_previous_solution():
    co, sol = preset_solution("fig3a", dI=1e-4)
    nxt = solve_equilibrium(co, 1.0, 5e-5, sol.grid, init=(sol.S, sol.I))
    assert nxt.converged and nxt.iterations < 30


# -- principal eigenvalue ----------------------------------------------------

def test_eigen_constant_weight():
    g = build_grid(2.0, 101)
    pair = principal_eigenvalue(0.3, np.full(g.n, 1.7), g)
    assert pair.lambda1 == pytest.approx(1.7, abs=1e-12)
    np.testing.assert_allclose(pair.phi, pair.phi[0], rtol=1e-10)


def test_eigen_against_dense_solver():
    g = build_grid(1.0, 151)
    f = np.sin(3 * g.nodes) - g.nodes**2
    D = 0.05
    A = -D * laplacian_matrix(g).toarray() + np.diag(f)
    dense = np.min(np.linalg.eigvals(A).real)
    pair = principal_eigenvalue(D, f, g)
    assert pair.lambda1 == pytest.approx(dense, abs=1e-10)
    assert np.all(pair.phi > 0)


def test_eigen_small_D_approaches_min_weight():
    g = build_grid(1.0, 961)
    beta = parse_coefficient(BETA1, L=1.0)
    k = parse_coefficient("1+0.5*cos(2*pi*x)", L=1.0)
    f = beta.on(g) * k.on(g) - 0.5 * beta.on(g)  # gamma - beta*k_min, minimum 0 at x = 1/2
    lams = [principal_eigenvalue(D, f, g).lambda1 for D in (1.0, 0.1, 0.01, 1e-4)]
    assert all(b < a for a, b in zip(lams, lams[1:]))
    assert 0.0 < lams[-1] < 0.05


def test_eigen_identity_at_equilibrium():
    co, sol = preset_solution("fig1b", dI=1e-4)
    f = co.gamma.on(sol.grid) - co.beta.on(sol.grid) * sol.S
    assert abs(principal_eigenvalue(sol.dI, f, sol.grid).lambda1) <= 1e-6


def test_eigen_rejects_bad_input():
    g = build_grid(1.0, 11)
    with pytest.raises(ValueError):
        principal_eigenvalue(0.0, np.zeros(g.n), g)
    with pytest.raises(ValueError):
        principal_eigenvalue(1.0, np.zeros(5), g)


def test_numerical_failure_is_arithmetic_error():
    assert issubclass(NumericalFailure, ArithmeticError)
