from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import fixture_market
from optinsure.market import (
    DegenerateMarketError,
    HjmCurve,
    InflationModel,
    JumpMeasure,
    bond_loading_coefficients,
    constant_scenario,
    local_market,
    market_prices_of_risk,
    real_bond_dynamics,
    validate_scenario,
)
from optinsure.tables import StepFunction, Surface


def curve(sigma=0.0, gamma=(), alpha=0.0, r=0.03):
    return HjmCurve(StepFunction.constant(r), Surface.constant(alpha), Surface.constant(sigma),
                    tuple(Surface.constant(g) for g in gamma))


def test_bond_coefficients_vanishing_loadings():
    bc = bond_loading_coefficients(curve(), JumpMeasure(), 0.0, 2.0)
    assert bc.b == 0.0 and bc.c.size == 0 and bc.a == pytest.approx(0.03, abs=1e-15)


def test_bond_coefficients_constant_sigma():
    bc = bond_loading_coefficients(curve(sigma=0.02), JumpMeasure(), 0.0, 2.0)
    assert bc.b == pytest.approx(-0.04, abs=1e-15)


def test_bond_coefficients_hand_evaluated_drift():
    jumps = JumpMeasure((1.0,), (1.0,))
    bc = bond_loading_coefficients(curve(sigma=0.02, gamma=(0.01,)), jumps, 0.0, 2.0)
    assert bc.c[0] == pytest.approx(-0.02, abs=1e-15)
    assert bc.a == pytest.approx(0.0508, abs=1e-14)


def test_bond_coefficients_at_maturity():
    jumps = JumpMeasure((1.0,), (0.3,))
    bc = bond_loading_coefficients(curve(sigma=0.02, gamma=(0.05,), alpha=0.01), jumps, 3.0, 3.0)
    assert bc.b == 0.0 and bc.c[0] == 0.0 and bc.a == pytest.approx(bc.spot_rate, abs=1e-15)


def test_bond_coefficients_reject_t_after_maturity():
    with pytest.raises(ValueError):
        bond_loading_coefficients(curve(), JumpMeasure(), 3.0, 2.0)


def test_real_bond_dynamics_hand_values():
    jumps = JumpMeasure((1.0,), (1.0,))
    infl = InflationModel(mu=StepFunction.constant(0.02), gamma=(StepFunction.constant(0.01),))
    bc = bond_loading_coefficients(curve(sigma=0.02, gamma=(0.01,)), jumps, 0.0, 2.0)
    rb = real_bond_dynamics(bc, infl, jumps, 0.0)
    assert rb.A_tilde == pytest.approx(bc.a + 0.02 - 0.0002, abs=1e-15)
    assert rb.C_tilde[0] == pytest.approx(-0.0102, abs=1e-15)


def test_real_bond_dynamics_without_jumps():
    infl = InflationModel(mu=StepFunction.constant(0.02))
    bc = bond_loading_coefficients(curve(sigma=0.02), JumpMeasure(), 0.0, 2.0)
    rb = real_bond_dynamics(bc, infl, JumpMeasure(), 0.0)
    assert rb.A_tilde == bc.a + 0.02 and rb.C_tilde.size == 0


@settings(max_examples=50, deadline=None)
@given(st.floats(-0.5, 0.5), st.floats(-0.5, 0.5))
def test_multiplicative_jump_identity(c_r, gamma_i):
    jumps = JumpMeasure((1.0,), (0.7,))
    infl = InflationModel(gamma=(StepFunction.constant(gamma_i),))
    bc = bond_loading_coefficients(curve(gamma=(-c_r / 2.0,)), jumps, 0.0, 2.0)
    rb = real_bond_dynamics(bc, infl, jumps, 0.0)
    assert (1 + bc.c[0]) * (1 + gamma_i) - 1 == pytest.approx(rb.C_tilde[0], abs=1e-15)


def test_fixture_prices_of_risk():
    loc = local_market(fixture_market(), 0.0)
    assert loc.b == pytest.approx(0.04, abs=1e-15)
    mpr = market_prices_of_risk(fixture_market(), 0.0)
    assert mpr.phi3 == pytest.approx(0.25, abs=1e-14)
    assert mpr.phi2 == pytest.approx(2.0, abs=1e-12)
    np.testing.assert_allclose(mpr.effective, [0.02, 2.0, 0.25], atol=1e-12)
    # the effective vector solves loadings @ phi = excess returns
    np.testing.assert_allclose(loc.loadings @ mpr.effective, loc.excess_return, atol=1e-15)


def test_zero_excess_bond_return_gives_zero_phi1():
    # alpha = b^2 / 24 on the whole curve cancels the b^2/2 term over 12 years
    sc = fixture_market(mu_I=0.0)
    sc = replace(sc, real_curve=replace(sc.real_curve, alpha=Surface.constant(0.04**2 / 24.0)))
    loc = local_market(sc, 0.0)
    assert loc.real_bond.A_tilde == pytest.approx(loc.r, abs=1e-16)
    assert market_prices_of_risk(sc, 0.0).phi1 == pytest.approx(0.0, abs=1e-13)


def _scaled_bond_market(scale: float, alpha_base: float = 0.001):
    """Market whose (A~ - r, b_r) are (scale * e0, scale * b0) for the base pair (e0, b0)."""
    base = fixture_market(mu_I=0.0)
    b0 = local_market(base, 0.0).b
    e0 = 0.5 * b0 * b0 - 12.0 * alpha_base
    # excess = b^2/2 - 12 alpha with b = scale * b0; solve for alpha
    alpha = (0.5 * (scale * b0) ** 2 - scale * e0) / 12.0
    sc = fixture_market(mu_I=0.0, sigma_r=-0.02 * scale)
    return replace(sc, real_curve=replace(sc.real_curve, alpha=Surface.constant(alpha)))


@settings(max_examples=30, deadline=None)
@given(st.floats(0.1, 10.0))
def test_phi1_scale_invariance(scale):
    base = market_prices_of_risk(_scaled_bond_market(1.0), 0.0)
    loc = local_market(_scaled_bond_market(scale), 0.0)
    assert loc.b == pytest.approx(scale * 0.04, rel=1e-12)
    assert market_prices_of_risk(_scaled_bond_market(scale), 0.0).phi1 == pytest.approx(base.phi1, rel=1e-9)


def test_degenerate_market_error():
    with pytest.raises(DegenerateMarketError, match="sigma_I"):
        market_prices_of_risk(fixture_market(sigma_I=0.0), 0.0)


def test_validation_benign_is_clean():
    assert validate_scenario(fixture_market()).violations == ()


def test_validation_names_gamma_s_and_atom():
    sc = constant_scenario(sigma_S=0.2, sigma_I=0.01, jumps=JumpMeasure((0.5, 1.0), (0.1, 0.2)),
                           gamma_S=(0.1, -1.5))
    rep = validate_scenario(sc)
    assert not rep.ok
    assert any("gamma_S" in v and "atom 1" in v for v in rep.violations)


def test_validation_warns_on_zero_sigma_s():
    rep = validate_scenario(constant_scenario(sigma_I=0.01, sigma_r=0.01))
    assert rep.ok and any("sigma_S" in w for w in rep.warnings)
