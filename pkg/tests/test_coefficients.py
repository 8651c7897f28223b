from __future__ import annotations

import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sislab.coefficients import (CONSERVED, RECRUITED, CoefficientSet, CoefficientSyntaxError, Interval,
                                 InvalidCoefficientError, IsolatedPoint, combine, constant, locate_minima,
                                 parse_coefficient, risk_function)
from sislab.grid import build_grid

FIG1B = "1-4*x on [0,1/8); 4*x on [1/8,1/4); 3/2-2*x on [1/4,1/2); x on [1/2,1]"
FIG2A = "1/2+5*(x-1/4)^2 on [0,1/4); 1/2 on [1/4,3/4); 1/2+5*(x-3/4)^2 on [3/4,1]"
FIG2B = ("1/2+4*(x-1/4)^2 on [0,1/4); 1/2 on [1/4,1/2); 1/2+4*(x-1/2)^2 on [1/2,3/4); "
         "1/2+16*(x-7/8)^2 on [3/4,1]")


def test_parse_single_segment():
    f = parse_coefficient("1 + 0.5*sin(2*pi*x) on [0,1]")
    assert f(0.25) == pytest.approx(1.5, abs=1e-15)
    assert f.length == 1.0


def test_parse_left_limit_at_breakpoint():
    f = parse_coefficient(FIG1B)
    assert f(0.125 - 1e-12) == pytest.approx(0.5, abs=1e-10)
    seg = f.segments[0]
    assert seg(0.125) == pytest.approx(0.5, abs=1e-15)
    # the breakpoint itself belongs to the right-hand segment
    assert f(0.125) == pytest.approx(0.5)
    np.testing.assert_allclose(f.breakpoints, [0.125, 0.25, 0.5])


def test_parse_bare_expression_needs_length():
    assert parse_coefficient("2*x", L=3.0)(1.5) == pytest.approx(3.0)
    with pytest.raises(CoefficientSyntaxError):
        parse_coefficient("2*x")


def test_caret_power_and_constants():
    f = parse_coefficient("x^2 + exp(0)*cos(pi) on [0,2]")
    assert f(2.0) == pytest.approx(3.0)


@pytest.mark.parametrize("text", ["x/ on [0,1]", "x** on [0,1]", "(x on [0,1]"])
def test_syntax_errors_carry_position(text):
    with pytest.raises(CoefficientSyntaxError) as exc:
        parse_coefficient(text)
    assert exc.value.position >= 0
    assert "position" in str(exc.value)


@pytest.mark.parametrize("text", ["__import__('os') on [0,1]", "y on [0,1]", "sqrt(x) on [0,1]",
                                  "x.real on [0,1]", "[x][0] on [0,1]"])
def test_disallowed_names_rejected(text):
    with pytest.raises(CoefficientSyntaxError):
        parse_coefficient(text)


@pytest.mark.parametrize("text", [
    "1 on [0,0.5); 2 on [0.6,1]",           # gap
    "1 on [0,0.6); 2 on [0.5,1]",           # overlap
    "1 on [0.1,1]",                          # does not start at 0
    "1 on [0,1)",                            # open at the right end
    "1 on [0,0.5]; 2 on [0.5,1]",           # closed interior segment
])
def test_partition_errors(text):
    with pytest.raises(InvalidCoefficientError):
        parse_coefficient(text)


def test_domain_length_mismatch():
    with pytest.raises(InvalidCoefficientError):
        parse_coefficient("1 on [0,1]", L=2.0)


def test_non_finite_segment():
    with pytest.raises(InvalidCoefficientError):
        parse_coefficient("1/(x-1/2) on [0,1]")


def test_jump_warns():
    with pytest.warns(UserWarning, match="jumps"):
        f = parse_coefficient("1 on [0,1/2); 2 on [1/2,1]")
    assert f.jumps() == [(0.5, 1.0)]
    assert not f.is_c1()


def test_derivative_uses_owning_segment():
    f = parse_coefficient("x^2 on [0,1/2); 1/4+(x-1/2) on [1/2,1]")
    assert f.derivative(0.5, side="right") == pytest.approx(1.0, abs=1e-9)
    assert f.derivative(0.5, side="left") == pytest.approx(1.0, abs=1e-6)
    assert f.derivative(0.25, order=2) == pytest.approx(2.0, abs=1e-6)
    assert f.is_c1()
    with pytest.raises(ValueError):
        f.derivative(0.2, order=3)


def test_source_round_trip():
    f = parse_coefficient(FIG2A)
    g = parse_coefficient(f.source)
    x = np.linspace(0, 1, 101)
    np.testing.assert_allclose(f(x), g(x), rtol=0, atol=1e-15)


def test_risk_conserved_fig1():
    beta = parse_coefficient("1+0.5*sin(2*pi*x)", L=1.0)
    k = parse_coefficient("1+0.5*cos(2*pi*x)", L=1.0)
    c = CoefficientSet.from_risk(CONSERVED, beta, k)
    x = np.linspace(0, 1, 57)
    np.testing.assert_allclose(risk_function(c)(x), k(x), rtol=1e-14)


def test_risk_recruited_and_trivial():
    L = 1.0
    h = parse_coefficient("2+x^2", L=L)
    c = CoefficientSet(constant(1, L), combine([h], "({0})-1"), RECRUITED, constant(1, L), constant(5, L))
    x = np.linspace(0, 1, 33)
    np.testing.assert_allclose(risk_function(c)(x), h(x), rtol=1e-14)

    beta = parse_coefficient("2+sin(x)", L=L)
    same = CoefficientSet(beta, beta, CONSERVED)
    np.testing.assert_allclose(risk_function(same)(x), 1.0, rtol=1e-15)


def test_coefficient_set_validation():
    L = 1.0
    one = constant(1, L)
    with pytest.raises(InvalidCoefficientError):
        CoefficientSet(parse_coefficient("x-1/2", L=L), one, CONSERVED)
    with pytest.raises(InvalidCoefficientError):
        CoefficientSet(one, one, CONSERVED, eta=one)
    with pytest.raises(InvalidCoefficientError):
        CoefficientSet(one, one, RECRUITED)
    with pytest.raises(InvalidCoefficientError):
        CoefficientSet(one, one, "sir")
    with pytest.warns(UserWarning, match="gamma"):
        CoefficientSet(one, constant(-0.5, L), RECRUITED, one, constant(4, L))


def test_lambda_exceeds_risk():
    L = 1.0
    one = constant(1, L)
    c = CoefficientSet.from_risk(RECRUITED, one, parse_coefficient("1+x", L=L), one, constant(3, L))
    assert c.lambda_exceeds_risk()
    assert c.Lambda_value() == 3.0
    c2 = CoefficientSet.from_risk(RECRUITED, one, parse_coefficient("1+x", L=L), one, constant(1.5, L))
    assert not c2.lambda_exceeds_risk()


def test_minima_single_point():
    g = build_grid(1.0, 961)
    an = locate_minima(parse_coefficient("1+0.5*cos(2*pi*x)", L=1.0), g)
    assert an.min_value == pytest.approx(0.5, abs=1e-12)
    assert len(an.components) == 1
    assert isinstance(an.components[0], IsolatedPoint)
    assert an.components[0].x == pytest.approx(0.5, abs=1e-6)


def test_minima_interval_fig2a():
    g = build_grid(1.0, 961)
    an = locate_minima(parse_coefficient(FIG2A), g)
    assert an.min_value == pytest.approx(0.5)
    assert an.components == (Interval(0.25, 0.75),)


def test_minima_interval_plus_point():
    g = build_grid(1.0, 961)
    an = locate_minima(parse_coefficient(FIG2B), g)
    assert len(an.components) == 2
    assert an.intervals == [(0.25, 0.5)]
    assert an.points == [pytest.approx(0.875, abs=1e-6)]


def test_minima_constant():
    g = build_grid(2.0, 101)
    an = locate_minima(constant(0.7, 2.0), g)
    assert an.is_constant
    assert an.components == (Interval(0.0, 2.0),)


def test_minima_boundary_point():
    g = build_grid(1.0, 201)
    an = locate_minima(parse_coefficient("2+(1-x)", L=1.0), g)
    assert an.points == [pytest.approx(1.0, abs=1e-9)]


@given(c=st.floats(0.05, 0.95), a=st.floats(0.5, 5.0))
@settings(max_examples=30, deadline=None)
def test_minima_components_in_sublevel_set(c, a):
    g = build_grid(1.0, 401)
    risk = parse_coefficient(f"1+{a!r}*(x-{c!r})^2", L=1.0)
    an = locate_minima(risk, g)
    assert an.min_value <= risk(c) + 1e-12
    for comp in an.components:
        xs = [comp.x] if isinstance(comp, IsolatedPoint) else [comp.a, comp.b]
        for x in xs:
            assert risk(x) <= an.min_value + 1e-6
    assert math.isclose(an.points[0], c, abs_tol=1e-5)


def test_fig1b_has_two_isolated_minima():
    g = build_grid(1.0, 961)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        an = locate_minima(parse_coefficient(FIG1B), g)
    assert an.min_value == pytest.approx(0.5)
    assert an.points == [pytest.approx(0.125, abs=1e-6), pytest.approx(0.5, abs=1e-6)]
