import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import brute, fmin

from conftest import fixture_market
from optinsure.generator import (
    Actuarial,
    GeneratorInputs,
    UtilitySpec,
    argmin_theta_exponential,
    argmin_theta_power,
    closed_form_pi_nojump,
    closed_form_theta_nojump_exponential,
    consumption_objective_exponential,
    effective_prices_of_risk,
    generator_exponential,
    generator_power,
    m_function,
    optimal_consumption_exponential,
    optimal_fractions_power,
    optimal_premium_exponential,
    premium_objective_exponential,
    solve_exponential_portfolio,
    theta_minimand_exponential,
    theta_objective_exponential,
    theta_objective_power,
)
from optinsure.market import DegenerateMarketError, JumpMeasure, constant_scenario, local_market
from optinsure.mortality import InsuranceContract, MortalityCurve
from optinsure.paths import Boxes
from optinsure.tables import StepFunction

JUMPY = dict(jumps=JumpMeasure((1.0,), (0.5,)), gamma_S=(-0.2,), gamma_I=(0.05,), gamma_r=(0.02,))
MORT = MortalityCurve(StepFunction.constant(0.01), 10.0)
CONTRACT = InsuranceContract(StepFunction.constant(0.02))
small = st.floats(-0.1, 0.1)


def test_utility_spec_validation():
    assert UtilitySpec.exponential(2.0).delta == 2.0
    assert UtilitySpec.power(-1.0).kappa == -1.0
    for bad in (lambda: UtilitySpec.exponential(0.0), lambda: UtilitySpec.power(1.0), lambda: UtilitySpec.power(0.0)):
        with pytest.raises(ValueError):
            bad()
    with pytest.raises(AttributeError):
        UtilitySpec.power(0.5).delta


def test_m_function_values():
    assert m_function(1.0, 1.0) == pytest.approx(math.e - 2.0, abs=1e-15)
    assert m_function(0.0, 3.0) == 0.0
    # no cancellation for tiny arguments: m ~ delta x^2 / 2
    assert m_function(1e-9, 2.0) == pytest.approx(1e-18, rel=1e-6)


@settings(max_examples=100, deadline=None)
@given(st.floats(-30.0, 30.0), st.floats(0.01, 10.0))
def test_m_function_nonnegative(x, delta):
    assert m_function(x, delta) >= 0.0


def test_theta_objective_hand_value_without_jumps():
    # theta = 0 leaves delta/2 |z|^2
    gi = GeneratorInputs(0.0, 0.0, (0.1, 0.2, 0.25))
    expected = (0.1**2 + 0.2**2 + 0.25**2) / 4.0
    assert theta_objective_exponential(np.zeros(3), gi, fixture_market(), 0.5) == pytest.approx(expected, abs=1e-16)


def test_theta_objective_hand_value_with_jump():
    sc = constant_scenario(jumps=JumpMeasure((1.0,), (2.0,)), gamma_S=(-0.5,))
    gi = GeneratorInputs(0.0, 0.0, (0.0, 0.0, 0.0), (0.3,))
    # only the jump sum survives at theta = 0
    assert theta_objective_exponential(np.zeros(3), gi, sc, 1.0) == pytest.approx(2.0 * (math.exp(0.3) - 1.3), abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.tuples(small, small, small), st.floats(-0.05, 0.05), st.floats(0.2, 4.0),
       st.lists(st.floats(-3.0, 3.0), min_size=6, max_size=6))
def test_exponential_objective_convex_and_completion(z, ups, delta, coords):
    sc = fixture_market(**JUMPY)
    gi = GeneratorInputs(1.0, 0.0, z, (ups,))
    a, b = np.array(coords[:3]), np.array(coords[3:])
    f = lambda th: theta_objective_exponential(th, gi, sc, delta)
    assert f((a + b) / 2) <= (f(a) + f(b)) / 2 + 1e-12
    # the completed-square minimand differs by a theta-free constant
    offset = theta_minimand_exponential(a, gi, sc, delta) - f(a)
    assert offset == pytest.approx(theta_minimand_exponential(b, gi, sc, delta) - f(b), abs=1e-10)


@settings(max_examples=50, deadline=None)
@given(st.tuples(small, small, small), st.floats(-0.05, 0.05), st.sampled_from([0.5, -1.0, -3.0]),
       st.lists(st.floats(-2.0, 2.0), min_size=6, max_size=6))
def test_power_objective_convex(z, ups, kappa, coords):
    sc = fixture_market(**JUMPY)
    gi = GeneratorInputs(1.0, 0.0, z, (ups,))
    a, b = np.array(coords[:3]), np.array(coords[3:])
    f = lambda pi: theta_objective_power(pi, gi, sc, kappa)
    assert f((a + b) / 2) <= (f(a) + f(b)) / 2 + 1e-12


def test_power_objective_infinite_outside_jump_domain():
    sc = fixture_market(**JUMPY)
    gi = GeneratorInputs(1.0, 0.0, (0, 0, 0), (0.0,))
    assert theta_objective_power(np.array([0.0, 0.0, 6.0]), gi, sc, 0.5) == math.inf


def test_nojump_hand_values():
    sc = fixture_market()
    gi = GeneratorInputs(0.0, 0.0)
    theta = argmin_theta_exponential(gi, sc, 2.0).theta_or_pi
    # stock holding (mu_S - r) / (delta sigma_S^2) with an uncorrelated stock
    assert theta[2] == pytest.approx(0.05 / (2.0 * 0.04), abs=1e-10)
    assert theta[2] == pytest.approx(0.625, abs=1e-10)
    pi = argmin_theta_power(gi, sc, 0.5).theta_or_pi
    assert pi[2] == pytest.approx(2.5, abs=1e-10)
    xi, _ = optimal_fractions_power(0.2, 0.0, 0.5, MORT, CONTRACT)
    assert xi.value == pytest.approx(math.exp(-0.4), abs=1e-15)


def test_scalar_exponential_controls():
    assert optimal_consumption_exponential(1.5, 0.25, 2.0).value == pytest.approx(1.25)
    clipped = optimal_consumption_exponential(1.5, 0.25, 2.0, (0.0, 1.0))
    assert clipped.value == 1.0 and clipped.flagged
    p = optimal_premium_exponential(0.1, 0.0, 2.0, MORT, CONTRACT)
    assert p.value == pytest.approx(0.02 * (math.log(0.5) / 2.0 - 0.1), abs=1e-15)


@pytest.mark.parametrize("x,y,delta", [(1.0, 0.3, 1.0), (0.2, -0.4, 2.5), (3.0, 1.0, 0.5)])
def test_scalar_minimisers_against_golden_section(x, y, delta):
    from scipy.optimize import minimize_scalar

    c = minimize_scalar(lambda c: consumption_objective_exponential(c, x, y, delta), bracket=(-5, 5), tol=1e-12).x
    assert optimal_consumption_exponential(x, y, delta).value == pytest.approx(c, abs=1e-6)
    p = minimize_scalar(lambda p: premium_objective_exponential(p, y, 0.01, 0.02, delta), bracket=(-1, 1), tol=1e-12).x
    assert optimal_premium_exponential(y, 0.0, delta, MORT, CONTRACT).value == pytest.approx(p, abs=1e-6)


def test_foc_vanishes_at_interior_argmin():
    sc = fixture_market(**JUMPY)
    loc = local_market(sc, 1.0)
    z, ups = np.array([0.01, -0.02, 0.03]), np.array([0.02])
    lower, upper = np.full(3, -50.0), np.full(3, 50.0)
    sol, prob = solve_exponential_portfolio(loc, 1.5, z, ups, lower, upper)
    grad, _ = prob.derivatives(sol.x, np.array([0]))
    assert np.max(np.abs(grad)) <= 1e-8
    # central differences of the objective agree with the analytic gradient
    gi = GeneratorInputs(1.0, 0.0, tuple(z), tuple(ups))
    h = 1e-5
    fd = [(theta_objective_exponential(sol.x[0] + h * e, gi, sc, 1.5)
           - theta_objective_exponential(sol.x[0] - h * e, gi, sc, 1.5)) / (2 * h) for e in np.eye(3)]
    assert np.max(np.abs(fd)) <= 1e-6


def test_argmin_matches_grid_search_with_one_atom():
    sc = fixture_market(**JUMPY)
    gi = GeneratorInputs(1.0, 0.0, (0.01, 0.0, -0.02), (0.03,))
    # interior optimum: the box only bounds the search
    box = Boxes.uniform((0, 1), (0, 1), 100.0)
    ours = argmin_theta_exponential(gi, sc, 5.0, box).theta_or_pi
    assert np.all(np.abs(ours) < 90)
    f = lambda th: theta_objective_exponential(th, gi, sc, 5.0)
    grid = brute(f, [(-100, 100)] * 3, Ns=21, finish=None)
    polished = fmin(f, grid, xtol=1e-10, ftol=1e-16, maxiter=20000, maxfun=20000, disp=False)
    assert np.max(np.abs(ours - polished)) <= 1e-6


@settings(max_examples=30, deadline=None)
@given(st.tuples(small, small, small), st.floats(-0.05, 0.05), st.lists(st.floats(-1, 1), min_size=3, max_size=3))
def test_argmin_is_minimal_on_box(z, ups, step):
    sc = fixture_market(**JUMPY)
    gi = GeneratorInputs(1.0, 0.0, z, (ups,))
    box = Boxes.uniform((0, 1), (0, 1), 3.0)
    best = argmin_theta_exponential(gi, sc, 2.0, box)
    other = np.clip(best.theta_or_pi + np.array(step), -3, 3)
    assert best.minimand_value <= theta_objective_exponential(other, gi, sc, 2.0) + 1e-12


def test_printed_corollaries_match_first_order_conditions():
    sc = fixture_market(mu_I=0.0)
    gi = GeneratorInputs(0.0, 0.0, (0.01, -0.02, 0.03))
    exp_nj = closed_form_theta_nojump_exponential(gi, sc, 1.0)
    np.testing.assert_allclose(exp_nj.foc, argmin_theta_exponential(gi, sc, 1.0).theta_or_pi, atol=1e-9)
    np.testing.assert_allclose(exp_nj.printed, exp_nj.foc, atol=1e-12)
    pow_nj = closed_form_pi_nojump(gi, sc, 0.5)
    np.testing.assert_allclose(pow_nj.foc, argmin_theta_power(gi, sc, 0.5).theta_or_pi, atol=1e-9)
    np.testing.assert_allclose(pow_nj.printed, pow_nj.foc, atol=1e-12)


def test_degenerate_prices_of_risk_raise():
    with pytest.raises(DegenerateMarketError):
        effective_prices_of_risk(local_market(constant_scenario(), 0.0))


def test_generator_modes_agree():
    sc = fixture_market(**JUMPY)
    exp_box = Boxes.uniform((-50, 50), (-50, 50), 5.0)
    pow_box = Boxes.uniform((1e-6, 50), (-0.0199, 50), 5.0)
    gi = GeneratorInputs(1.0, 0.2, (0.01, 0.02, -0.01), (0.01,), 1.3)
    for d in (1.0, 2.0):
        a = generator_exponential(gi, sc, MORT, CONTRACT, d, exp_box, "inf").value
        b = generator_exponential(gi, sc, MORT, CONTRACT, d, exp_box, "closed").value
        assert a == pytest.approx(b, abs=1e-9)
    for k in (0.5, -1.0):
        a = generator_power(gi, sc, MORT, CONTRACT, k, pow_box, "inf").value
        b = generator_power(gi, sc, MORT, CONTRACT, k, pow_box, "closed").value
        assert a == pytest.approx(b, abs=1e-9)


def test_generator_scalar_part_hand_value():
    sc = fixture_market()
    box = Boxes.uniform((-50, 50), (-50, 50), 5.0)
    gi = GeneratorInputs(0.0, 0.1, (0, 0, 0), (), 1.0)
    val = generator_exponential(gi, sc, MORT, CONTRACT, 1.0, box, "closed")
    act = Actuarial.at(0.0, MORT, CONTRACT, sc)
    p = act.eta * (math.log(act.lam / act.eta) - 0.1)
    scalar = (1.0 + 0.9) + (act.eta + p)
    expected = scalar - (act.rho + act.lam) - 0.03 * 1.0 + val.controls.minimand_value
    assert val.value == pytest.approx(expected, abs=1e-14)
    assert val.controls.c_or_xi == pytest.approx(0.9)
