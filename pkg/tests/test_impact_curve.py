import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import rk4_flow_and_cost, sin_f
from impactlab.exceptions import ConvergenceError, DomainEscapeError
from impactlab.impact_curve import (
    IMPACT_REGISTRY,
    AccuracyWarning,
    ImpactCurve,
    ImpactFunction,
    affine_bounded_impact,
    constant_impact,
    identity_residuals,
    make_impact,
    sinusoidal_impact,
)


def test_fixed_impact_closed_forms(const_curve):
    assert const_curve.flow(100.0, 2.0) == 101.0
    assert const_curve.delta_x(100.0, 2.0) == 1.0
    assert const_curve.cost(100.0, 2.0) == 1.0
    assert const_curve.inverse_flow(100.0, 101.0) == pytest.approx(2.0, abs=1e-12)
    assert const_curve.round_trip_state(100.0, 0.0, 10.0, 2.0) == (101.0, 2.0, 11.0)


@pytest.mark.parametrize("x", [-3.0, 0.0, 1.0, 2.5])
def test_zero_order_is_identity(sinus_curve, x):
    assert sinus_curve.flow(x, 0.0) == x
    assert sinus_curve.delta_x(x, 0.0) == 0.0
    assert sinus_curve.cost(x, 0.0) == 0.0
    assert sinus_curve.inverse_flow(x, x) == 0.0
    assert sinus_curve.round_trip_state(x, 0.3, 1.2, 0.0) == (x, 0.3, 1.2)


def test_flow_matches_fine_rk4(sinus_curve):
    ref, _ = rk4_flow_and_cost(1.0, 0.4, sin_f)
    assert abs(sinus_curve.flow(1.0, 0.4) - ref) < 1e-10


def test_delta_x_negative_order_matches_fine_rk4(sinus_curve):
    ref, _ = rk4_flow_and_cost(1.0, -0.4, sin_f)
    dx = sinus_curve.delta_x(1.0, -0.4)
    assert dx < 0
    assert abs(dx - (ref - 1.0)) < 1e-10


def test_cost_matches_fine_quadrature(sinus_curve):
    _, ref = rk4_flow_and_cost(1.0, 0.4, sin_f)
    assert abs(sinus_curve.cost(1.0, 0.4) - ref) < 1e-9


def test_flow_against_adaptive_ode_solver():
    from scipy.integrate import solve_ivp

    impact = affine_bounded_impact(0.5, 0.1, 2.0)
    curve = ImpactCurve(impact)

    def rhs(s, z):
        fx = impact(np.array([z[0]]))[0]
        return [fx, s * fx]

    for x0, d in [(0.3, 1.7), (-1.0, -2.2), (4.0, 0.05)]:
        sol = solve_ivp(rhs, (0.0, d), [x0, 0.0], method="DOP853", rtol=1e-13, atol=1e-14)
        X, cost = curve.flow_and_cost(np.array([x0]), np.array([d]))
        assert abs(X[0] - sol.y[0, -1]) < 1e-11
        assert abs(cost[0] - sol.y[1, -1]) < 1e-11


def test_inverse_flow_round_trip(sinus_curve):
    assert abs(sinus_curve.inverse_flow(1.0, sinus_curve.flow(1.0, 0.4)) - 0.4) < 1e-8


def test_quadrature_inverse_agrees_with_newton(sinus_curve, rng):
    x = rng.uniform(-3, 3, 200)
    target = x + rng.uniform(-1.5, 1.5, 200)
    assert np.max(np.abs(sinus_curve.inverse_flow(x, target) - sinus_curve.inverse_flow_quadrature(x, target))) < 1e-9


def test_inverse_flow_reports_nonconvergence():
    curve = ImpactCurve(sinusoidal_impact(), max_iter=1, newton_tol=1e-15)
    with pytest.raises(ConvergenceError):
        curve.inverse_flow(np.array([0.0, 1.0]), np.array([2.0, -1.0]))


def test_cost_is_nonnegative_and_even_for_fixed_impact(const_curve, rng):
    z = rng.normal(size=100)
    c = const_curve.cost(np.zeros(100), z)
    assert np.all(c >= 0)
    np.testing.assert_array_equal(c, const_curve.cost(np.zeros(100), -z))


def test_domain_escape_is_reported():
    curve = ImpactCurve(constant_impact(1.0), price_box=(-1.0, 1.0))
    with pytest.raises(DomainEscapeError) as info:
        curve.flow(np.array([0.0, 0.5]), np.array([0.1, 2.0]))
    assert info.value.values is not None


def test_derivative_identities_against_finite_differences(sinus_curve):
    x, y, h = np.array([0.7, -1.3]), np.array([0.9, -0.6]), 1e-4
    fd = (sinus_curve.flow(x + h, y) - sinus_curve.flow(x - h, y)) / (2 * h)
    np.testing.assert_allclose(sinus_curve.dflow_dx(x, y), fd, atol=1e-7)
    fd2 = (sinus_curve.flow(x + h, y) - 2 * sinus_curve.flow(x, y) + sinus_curve.flow(x - h, y)) / h**2
    np.testing.assert_allclose(sinus_curve.d2flow_dx2(x, y), fd2, atol=1e-5)
    fdc = (sinus_curve.cost(x + h, y) - sinus_curve.cost(x - h, y)) / (2 * h)
    np.testing.assert_allclose(sinus_curve.dcost_dx(x, y), fdc, atol=1e-7)
    fdc2 = (sinus_curve.cost(x + h, y) - 2 * sinus_curve.cost(x, y) + sinus_curve.cost(x - h, y)) / h**2
    np.testing.assert_allclose(sinus_curve.d2cost_dx2(x, y), fdc2, atol=1e-5)


def test_identity_residuals_small_for_every_registered_impact(rng):
    x, y, i = rng.uniform(-2, 2, 300), rng.uniform(-1, 1, 300), rng.uniform(-1, 1, 300)
    for name in IMPACT_REGISTRY:
        res = identity_residuals(ImpactCurve(make_impact(name)), x, y, i)
        assert max(float(np.abs(r).max()) for r in res.values()) < 1e-8, name


def test_richardson_warning_for_coarse_steps():
    curve = ImpactCurve(sinusoidal_impact(0.5, 0.4, freq=5.0), ode_step=0.2, richardson_tol=1e-12)
    with pytest.warns(AccuracyWarning):
        curve.flow_with_error(0.0, 2.0)


def test_batch_composition_does_not_change_results(sinus_curve):
    alone = sinus_curve.flow(np.array([0.3]), np.array([0.4]))
    together = sinus_curve.flow(np.array([0.3, 0.0]), np.array([0.4, 5.0]))
    assert alone[0] == together[0]


def test_lower_bound_must_be_positive():
    with pytest.raises(ValueError):
        ImpactFunction(f=lambda x: x, lower_bound=0.0)


def test_numeric_derivative_fallback():
    impact = ImpactFunction(f=lambda x: 0.5 + 0.1 * np.sin(x))
    assert impact.numeric_derivatives
    x = np.linspace(-1, 1, 5)
    np.testing.assert_allclose(impact.prime(x), 0.1 * np.cos(x), atol=1e-9)
    np.testing.assert_allclose(impact.second(x), -0.1 * np.sin(x), atol=1e-4)


def test_unknown_registry_name():
    with pytest.raises(KeyError, match="known"):
        make_impact("quadratic")


@settings(max_examples=60, deadline=None)
@given(
    x=st.floats(-3, 3),
    y=st.floats(-1, 1),
    v=st.floats(-5, 5),
    d=st.floats(-1.5, 1.5),
)
def test_round_trip_restores_state(x, y, v, d):
    curve = ImpactCurve(sinusoidal_impact())
    there = curve.round_trip_state(x, y, v, d)
    back = curve.round_trip_state(*there, -d)
    assert abs(back[0] - x) < 1e-9 and abs(back[1] - y) < 1e-12 and abs(back[2] - v) < 1e-9


@settings(max_examples=60, deadline=None)
@given(x=st.floats(-3, 3), a=st.floats(-1, 1), b=st.floats(-1, 1))
def test_flow_composes(x, a, b):
    curve = ImpactCurve(sinusoidal_impact())
    assert abs(curve.flow(curve.flow(x, a), b) - curve.flow(x, a + b)) < 1e-10


@settings(max_examples=40, deadline=None)
@given(x=st.floats(-3, 3), d=st.floats(-2, 2))
def test_flow_monotone_and_deterministic(x, d):
    curve = ImpactCurve(affine_bounded_impact())
    X = curve.flow(x, d)
    assert (X - x) * d >= 0
    assert curve.flow(x, d) == X
