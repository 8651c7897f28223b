from __future__ import annotations

import numpy as np
import pytest

from sislab.coefficients import CONSERVED, RECRUITED, CoefficientSet, constant, parse_coefficient
from sislab.dynamics import (SimState, StepRejected, default_initial_state, run_to_equilibrium, step_imex,
                             total_mass)
from sislab.grid import build_grid


def conserved(k="1/2", beta="1", L=1.0):
    b = parse_coefficient(beta, L=L)
    return CoefficientSet.from_risk(CONSERVED, b, parse_coefficient(k, L=L))


def recruited(h, Lam, L=1.0):
    one = constant(1.0, L)
    return CoefficientSet.from_risk(RECRUITED, one, parse_coefficient(h, L=L), one, constant(Lam, L))


def test_total_mass_trivial():
    g = build_grid(1.0, 11)
    st = SimState(0.0, np.ones(g.n), np.ones(g.n), g, conserved(), 1.0, 1.0)
    assert total_mass(st) == pytest.approx(2.0, abs=1e-15)


def test_state_validation():
    g = build_grid(1.0, 11)
    with pytest.raises(ValueError):
        SimState(0.0, -np.ones(g.n), np.ones(g.n), g, conserved(), 1.0, 1.0)
    with pytest.raises(ValueError):
        SimState(0.0, np.ones(g.n), np.ones(g.n), g, conserved(), 0.0, 1.0)
    with pytest.raises(ValueError):
        step_imex(SimState(0.0, np.ones(g.n), np.ones(g.n), g, conserved(), 1.0, 1.0), 0.0)


def test_constant_equilibrium_is_fixed_point():
    g = build_grid(1.0, 101)
    st = SimState(0.0, np.full(g.n, 0.5), np.full(g.n, 1.5), g, conserved(beta="1+0.5*sin(2*pi*x)"), 1.0, 0.01)
    for _ in range(20):
        st = step_imex(st, 0.05)
    np.testing.assert_allclose(st.S, 0.5, rtol=0, atol=1e-14)
    np.testing.assert_allclose(st.I, 1.5, rtol=0, atol=1e-14)


def test_disease_free_constant_is_fixed_point():
    g = build_grid(1.0, 101)
    st = SimState(0.0, np.full(g.n, 4.0), np.zeros(g.n), g, recruited("2+x", 4.0), 0.5, 0.01)
    for _ in range(20):
        st = step_imex(st, 0.1)
    np.testing.assert_allclose(st.S, 4.0, atol=1e-13)
    assert np.all(st.I == 0.0)


def test_mass_drift_per_step():
    g = build_grid(1.0, 201)
    rng = np.random.default_rng(3)
    co = conserved(k="1+0.5*cos(2*pi*x)", beta="1+0.5*sin(2*pi*x)")
    st = SimState(0.0, rng.uniform(0.2, 2.0, g.n), rng.uniform(0.1, 1.0, g.n), g, co, 1.0, 1e-3)
    m0 = total_mass(st)
    for _ in range(200):
        new = step_imex(st, 0.01)
        assert abs(total_mass(new) - total_mass(st)) <= 1e-12 * m0
        st = new


def test_negative_step_rejected():
    g = build_grid(1.0, 51)
    co = conserved(k="1/10", beta="50")
    st = SimState(0.0, np.full(g.n, 5.0), np.full(g.n, 5.0), g, co, 1.0, 1.0)
    with pytest.raises(StepRejected):
        step_imex(st, 1.0)


def test_run_to_constant_equilibrium():
    g = build_grid(1.0, 101)
    co = conserved(beta="1+0.5*sin(2*pi*x)")
    S0 = 0.5 + 0.3 * np.cos(np.pi * g.nodes)
    I0 = np.full(g.n, 1.5)
    st = SimState(0.0, S0, I0, g, co, 1.0, 0.5)
    run = run_to_equilibrium(st, residual_tol=1e-11, t_max=1e4)
    assert run.converged
    np.testing.assert_allclose(run.S, 0.5, atol=1e-8)
    np.testing.assert_allclose(run.I, 1.5, atol=1e-8)


def test_run_reports_nonconvergence_without_raising():
    g = build_grid(1.0, 101)
    co = conserved(k="1+0.5*cos(2*pi*x)", beta="1+0.5*sin(2*pi*x)")
    st = default_initial_state(co, g, 1.0, 1e-3, N=2.0)
    run = run_to_equilibrium(st, residual_tol=1e-14, t_max=1.0)
    assert not run.converged
    assert run.t == pytest.approx(1.0)
    assert np.all(np.isfinite(run.S)) and np.all(run.I >= 0)


def test_infection_dies_out_when_lambda_below_risk():
    g = build_grid(1.0, 101)
    co = recruited("3+x", 2.0)
    st = SimState(0.0, np.full(g.n, 2.0), np.full(g.n, 0.05), g, co, 1.0, 0.1)
    masses = []

    def record(s):
        masses.append(float(np.dot(g.weights, s.I)))

    run_to_equilibrium(st, residual_tol=1e-12, t_max=20.0, callback=record, snapshot_every=1.0)
    assert len(masses) >= 10
    assert all(b < a for a, b in zip(masses, masses[1:]))
    assert masses[-1] < 1e-3 * 0.05


def test_default_initial_state():
    g = build_grid(1.0, 101)
    co = conserved(k="1+0.5*cos(2*pi*x)")
    st = default_initial_state(co, g, 1.0, 0.1, N=2.0)
    assert total_mass(st) == pytest.approx(2.0, rel=1e-13)
    assert st.S.min() == pytest.approx(0.5, abs=1e-9)
    assert np.ptp(st.I) == 0.0
    with pytest.raises(ValueError):
        default_initial_state(co, g, 1.0, 0.1, N=0.4)
    rc = default_initial_state(recruited("1+x", 10.0), g, 1.0, 0.1)
    assert np.all(rc.I == 0.1)
    np.testing.assert_allclose(rc.S, 1 + g.nodes)
