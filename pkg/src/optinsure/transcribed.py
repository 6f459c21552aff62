"""Textbook closed forms, transcribed literally, for cross-checking.

The functions here reproduce published formulas symbol for symbol, including
their slips, so that they can be compared against the derived generators in
``generator``.  Nothing in the solvers depends on this module.

Known differences from the derived forms (see ``generator``):

* exponential: the consumption and premium objectives lack the 1/delta factor,
  which moves c* by ln(delta)/delta and turns the premium coefficient of y into
  eta/delta; prices of risk use phi1 = (A~ - r)/b without the CPI drift
* power: the generator lacks the overall kappa factor and the +eta produced by
  the premium supremum; the jump term reads exp(kappa upsilon) without 1/kappa;
  the last Brownian loading is cubed; the standalone |z|^2 term carries 1/kappa
  where the Ito expansion of the verification process gives 1/(2 kappa)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar

from .generator import (
    Actuarial,
    effective_prices_of_risk,
    solve_exponential_portfolio,
)
from .market import DegenerateMarketError, LocalMarket
from .market import local_market as local_market_for


def printed_prices_of_risk(loc: LocalMarket) -> np.ndarray:
    """(A~ - r)/b, mu_I/sigma_I, (mu_S - r)/sigma_S."""
    effective_prices_of_risk(loc)
    return np.array(
        [
            (loc.real_bond.A_tilde - loc.r) / loc.b,
            loc.mu_I / loc.sigma_I,
            (loc.mu_S - loc.r) / loc.sigma_S,
        ]
    )


def _nojump_terms(loc: LocalMarket):
    b, sI, sS = loc.b, loc.sigma_I, loc.sigma_S
    if b == 0 or sI == 0 or sS == 0:
        raise DegenerateMarketError("no-jump corollary needs nonzero b_r, sigma_I, sigma_S")
    excess_bond = loc.real_bond.A_tilde - loc.r
    return b, sI, sS, excess_bond


def printed_theta_nojump_exponential(loc: LocalMarket, z, delta: float) -> np.ndarray:
    b, sI, sS, ex = _nojump_terms(loc)
    z1, z2, z3 = np.asarray(z, float)
    mu_I, mu_S, r = loc.mu_I, loc.mu_S, loc.r
    return np.array(
        [
            (ex - mu_I) / (delta * b**2) + z1 / b,
            ((1 / sI**2 + 1 / b**2) * mu_I - ex / b**2 + z2 / sI - z1 / b) / delta,
            (mu_S - r) / (delta * sS**2) + z3 / sS,
        ]
    )


def printed_pi_nojump(loc: LocalMarket, z, kappa: float) -> np.ndarray:
    b, sI, sS, ex = _nojump_terms(loc)
    z1, z2, z3 = np.asarray(z, float)
    mu_I, mu_S, r = loc.mu_I, loc.mu_S, loc.r
    k = 1.0 / (1.0 - kappa)
    return k * np.array(
        [
            (ex - mu_I) / b**2 + z1 / b,
            (1 / sI**2 + 1 / b**2) * mu_I - ex / b**2 + z2 / sI - z1 / b,
            (mu_S - r) / sS**2 + z3 / sS,
        ]
    )


def printed_consumption_exponential(x, y, delta: float):
    return np.asarray(x, float) - np.asarray(y, float) + np.log(delta) / delta


def printed_premium_exponential(y, lam: float, eta: float, delta: float):
    return eta * (np.log(delta * lam / eta) / delta - np.asarray(y, float))


def _printed_portfolio_inf(loc, delta, z, ups, boxes_lower, boxes_upper) -> float:
    phi = printed_prices_of_risk(loc)
    sol, _ = solve_exponential_portfolio(
        loc, delta, np.atleast_2d(z), np.atleast_2d(ups), boxes_lower, boxes_upper, excess=loc.loadings @ phi
    )
    return float(sol.value[0])


def _golden_min(fun, center: float, width: float) -> float:
    res = minimize_scalar(
        fun, bounds=(center - width, center + width), method="bounded", options={"xatol": 1e-12, "maxiter": 500}
    )
    return float(res.fun)


def printed_generator_exponential_inf(
    loc: LocalMarket, act: Actuarial, delta: float, x: float, y: float, z, ups, lower, upper
) -> float:
    """inf over (theta, c, p) of the published integrand, scalar parts by 1-d search."""
    c_val = _golden_min(lambda c: np.exp(delta * (x - y - c)) + c, x - y, 50.0 / delta)
    p_val = _golden_min(
        lambda p: act.lam * np.exp(-delta * (y + p / act.eta)) + p,
        float(printed_premium_exponential(y, act.lam, act.eta, delta)),
        50.0 * act.eta / delta,
    )
    return (
        c_val + p_val - (act.rho + act.lam) / delta - loc.r * x
        + _printed_portfolio_inf(loc, delta, z, ups, lower, upper)
    )


def printed_generator_exponential_closed(
    loc: LocalMarket, act: Actuarial, delta: float, x: float, y: float, z, ups, lower, upper
) -> float:
    eta, lam = act.eta, act.lam
    const = (1 + eta - act.rho - lam + np.log(delta) + eta * np.log(delta * lam / eta)) / delta
    return (
        (1 - loc.r) * x + const - (1 + eta / delta) * y
        + _printed_portfolio_inf(loc, delta, z, ups, lower, upper)
    )


def printed_power_portfolio_term(loc: LocalMarket, kappa: float, pi, z, ups) -> float:
    """The published braced pi-expression, evaluated at a given pi."""
    phi = printed_prices_of_risk(loc)
    pi = np.asarray(pi, float)
    shifted = pi @ loc.loadings + (np.asarray(z, float) + phi) / (kappa - 1)
    out = 0.5 * (kappa - 1) * float(shifted @ shifted)
    if loc.n_atoms:
        g = loc.jump_loadings @ pi
        ups = np.asarray(ups, float)
        out += float(((1 + g) ** kappa * np.exp(kappa * ups) - 1 - kappa * g - ups) @ loc.weights)
    return out


def _z_terms(loc, kappa, z, cube_last: bool) -> float:
    z = np.asarray(z, float)
    s = z + printed_prices_of_risk(loc)
    last = z[2] ** 3 if cube_last else z[2] ** 2
    return -float(s @ s) / (2 * (kappa - 1)) + (z[0] ** 2 + z[1] ** 2 + last) / kappa


def printed_generator_power_closed(
    loc: LocalMarket, act: Actuarial, kappa: float, y: float, z, ups, pi,
    restore_eta: bool = False, cube_last: bool = True,
) -> float:
    """Published h1; ``restore_eta`` adds the missing +eta, ``cube_last=False`` reads z3^2."""
    eta, lam = act.eta, act.lam
    ratio = eta / lam
    bracket = (1 + lam * ratio ** (-kappa / (1 - kappa))) / kappa - (1 + eta * ratio ** (-1 / (1 - kappa)))
    out = (
        bracket * np.exp(-y / (1 - kappa)) - (act.rho + lam) / kappa + loc.r
        + printed_power_portfolio_term(loc, kappa, pi, z, ups) + _z_terms(loc, kappa, z, cube_last)
    )
    return out + eta if restore_eta else out


def printed_generator_power_inf(
    loc: LocalMarket, act: Actuarial, kappa: float, y: float, z, ups, pi,
) -> float:
    """Published supremum form with the consumption and premium suprema found by 1-d search."""
    eta, lam = act.eta, act.lam
    xi_star = np.exp(-y / (1 - kappa))
    xi_val = -_golden_min(
        lambda v: -(np.exp(-y) * v**kappa / kappa - v), xi_star, 0.999 * xi_star
    )
    q = (eta / lam) ** (-1 / (1 - kappa)) * np.exp(-y / (1 - kappa))
    zeta_star = eta * (q - 1)
    zeta_val = -_golden_min(
        lambda v: -(lam * np.exp(-y) * (1 + v / eta) ** kappa / kappa - v), zeta_star, 0.999 * eta * q
    )
    return (
        xi_val + zeta_val - (act.rho + lam) / kappa + loc.r
        + printed_power_portfolio_term(loc, kappa, pi, z, ups) + _z_terms(loc, kappa, z, cube_last=False)
    )


@dataclass(frozen=True, slots=True)
class DiscrepancyRow:
    utility: str
    parameter: float
    derived: float
    printed_inf: float
    printed_closed: float

    @property
    def derived_minus_printed(self) -> float:
        return self.derived - self.printed_closed

    @property
    def printed_inf_minus_closed(self) -> float:
        return self.printed_inf - self.printed_closed


def discrepancy_report(
    scenario, mort, contract, boxes, deltas=(1.0, 2.0), kappas=(0.5, -1.0),
    n_inputs: int = 20, seed: int = 0, t: float = 0.0, power_boxes=None,
) -> list[DiscrepancyRow]:
    """Derived generator vs the published inf and closed forms on random states.

    ``boxes`` serve the exponential rows; ``power_boxes`` (default ``boxes``)
    hold the fractional controls for the power rows.

    The power entries compare h1 / kappa (the published forms lack the kappa
    factor) and evaluate the published portfolio term at the derived optimum.
    Closed forms are read literally: -(1+eta/delta) y, z3 cubed, no +eta.
    """
    from .generator import GeneratorInputs, generator_exponential, generator_power

    loc = local_market_for(scenario, t)
    act = Actuarial.at(t, mort, contract, scenario)
    rng = np.random.default_rng(seed)
    n_atoms = scenario.jumps.n_atoms
    rows = []
    for kind, params in (("exponential", deltas), ("power", kappas)):
        for param in params:
            for _ in range(n_inputs):
                y = rng.uniform(-0.5, 0.5)
                z = rng.uniform(-0.05, 0.05, 3)
                ups = rng.uniform(-0.05, 0.05, n_atoms)
                if kind == "exponential":
                    x = rng.uniform(0.5, 2.0)
                    gi = GeneratorInputs(t, y, tuple(z), tuple(ups), x)
                    derived = generator_exponential(gi, scenario, mort, contract, param, boxes).value
                    p_inf = printed_generator_exponential_inf(loc, act, param, x, y, z, ups, boxes.lower, boxes.upper)
                    p_closed = printed_generator_exponential_closed(
                        loc, act, param, x, y, z, ups, boxes.lower, boxes.upper
                    )
                else:
                    gi = GeneratorInputs(t, y, tuple(z), tuple(ups))
                    val = generator_power(gi, scenario, mort, contract, param, power_boxes or boxes)
                    pi = val.controls.theta_or_pi
                    derived = val.value / param
                    p_inf = printed_generator_power_inf(loc, act, param, y, z, ups, pi)
                    p_closed = printed_generator_power_closed(loc, act, param, y, z, ups, pi)
                rows.append(DiscrepancyRow(kind, float(param), float(derived), float(p_inf), float(p_closed)))
    return rows
