"""BSDE generators for exponential and power utility and the optimal controls.

Notation used throughout (all at one instant t):

* ``L`` is the 3x3 loading matrix, ``exposure = portfolio @ L`` on (W_r, W_I, W_S),
* ``mu`` is the excess-return vector, ``G`` the (atoms x 3) jump-loading matrix,
* ``w`` the atom intensities, ``g = G @ portfolio`` the per-atom wealth jumps.

Exponential utility, U(x) = -exp(-delta x).  With Phi = exp(delta (x - y))::

    h = min_c [exp(delta (x-y-c))/delta + c] + min_p [lam exp(-delta (y + p/eta))/delta + p]
        - (rho + lam)/delta - r x + min_theta E(theta)
    E(theta) = -theta.mu + delta/2 |theta L - z|^2 + sum_z w m(upsilon - g)

Power utility, U(x) = x^kappa / kappa, value (x^kappa/kappa) exp(Y)::

    h1 = kappa * sup F(xi, zeta, pi)
    F = exp(-y) [xi^kappa + lam (1 + zeta/eta)^kappa] / kappa - xi - zeta - (rho+lam)/kappa + r
        + |z|^2 / (2 kappa) - P(pi)
    P(pi) = -pi.mu + (1-kappa)/2 |pi L|^2 - (pi L).z
            - sum_z w [(1+g)^kappa e^upsilon - 1 - kappa g - upsilon] / kappa

Both portfolio objectives are convex; they are minimised on the box by
projected Newton.  Scalar consumption/premium problems have closed forms.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from scipy.optimize import linprog, minimize_scalar

from .market import DegenerateMarketError, LocalMarket, MarketScenario, local_market
from .mortality import InsuranceContract, MortalityCurve
from .optimize import BoxSolution, minimize_on_box
from .paths import Boxes

EXP_CAP = 700.0
UNBOUNDED = 1e8

Mode = Literal["inf", "closed"]


@dataclass(frozen=True, slots=True)
class UtilitySpec:
    kind: Literal["exponential", "power"]
    parameter: float

    def __post_init__(self) -> None:
        if self.kind == "exponential":
            if not self.parameter > 0:
                raise ValueError("exponential utility needs delta > 0")
        elif self.kind == "power":
            if not (self.parameter < 1 and self.parameter != 0):
                raise ValueError("power utility needs kappa < 1, kappa != 0")
        else:
            raise ValueError(f"unknown utility kind {self.kind!r}")

    @classmethod
    def exponential(cls, delta: float) -> "UtilitySpec":
        return cls("exponential", float(delta))

    @classmethod
    def power(cls, kappa: float) -> "UtilitySpec":
        return cls("power", float(kappa))

    @property
    def delta(self) -> float:
        if self.kind != "exponential":
            raise AttributeError("delta is defined for exponential utility only")
        return self.parameter

    @property
    def kappa(self) -> float:
        if self.kind != "power":
            raise AttributeError("kappa is defined for power utility only")
        return self.parameter


@dataclass(frozen=True, slots=True)
class GeneratorInputs:
    t: float
    y: float
    z: tuple[float, float, float] = (0.0, 0.0, 0.0)
    upsilon: tuple[float, ...] = ()
    x: float = 0.0

    @property
    def z_array(self) -> np.ndarray:
        return np.asarray(self.z, dtype=float)

    @property
    def upsilon_array(self) -> np.ndarray:
        return np.asarray(self.upsilon, dtype=float)


@dataclass(frozen=True, slots=True)
class OptimalControls:
    theta_or_pi: np.ndarray
    c_or_xi: float
    p_or_zeta: float
    minimand_value: float
    flags: tuple[str, ...] = ()


@dataclass(frozen=True, slots=True)
class GeneratorValue:
    value: float
    controls: OptimalControls
    flags: tuple[str, ...] = field(default=())


@dataclass(frozen=True, slots=True)
class Actuarial:
    """Mortality, premium ratio and discount rate at one instant."""

    lam: float
    eta: float
    rho: float

    @classmethod
    def at(cls, t: float, mort: MortalityCurve, contract: InsuranceContract, scenario: MarketScenario) -> "Actuarial":
        return cls(mort.hazard(t), contract.premium_ratio(t), scenario.discount(t))


def _loc(market, t: float) -> LocalMarket:
    return market if isinstance(market, LocalMarket) else local_market(market, t)


def _box_arrays(boxes: Boxes | None) -> tuple[np.ndarray, np.ndarray]:
    if boxes is None:
        return np.full(3, -UNBOUNDED), np.full(3, UNBOUNDED)
    return boxes.lower, boxes.upper


def m_function(x, delta: float):
    """(exp(delta x) - 1 - delta x) / delta, computed without cancellation near 0."""
    x = np.asarray(x, dtype=float)
    out = (np.expm1(delta * x) - delta * x) / delta
    return float(out) if out.ndim == 0 else out


def _capped_exp(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    sat = a > EXP_CAP
    return np.exp(np.minimum(a, EXP_CAP)), sat


def effective_prices_of_risk(loc: LocalMarket) -> np.ndarray:
    """phi with loadings @ phi = excess return; raises when a loading vanishes."""
    for name, v in (("b_r", loc.b), ("sigma_I", loc.sigma_I), ("sigma_S", loc.sigma_S)):
        if v == 0.0:
            raise DegenerateMarketError(f"market price of risk undefined: {name} = 0 at t={loc.t}")
    return np.linalg.solve(loc.loadings, loc.excess_return)


# --------------------------------------------------------------------------- portfolio problems


class ExponentialPortfolioProblem:
    """Batch of E(theta) problems, one per row of ``z`` / ``upsilon``."""

    def __init__(self, loc: LocalMarket, delta: float, z: np.ndarray, upsilon: np.ndarray, excess=None):
        self.delta = delta
        self.L = loc.loadings
        self.LLt = self.L @ self.L.T
        self.mu = loc.excess_return if excess is None else np.asarray(excess, float)
        self.G = loc.jump_loadings
        self.w = loc.weights
        self.z = np.atleast_2d(np.asarray(z, float))
        self.ups = np.asarray(upsilon, float).reshape(self.z.shape[0], -1)
        self.saturated = np.zeros(self.z.shape[0], dtype=bool)

    def _exposure_gap(self, th, rows):
        return th @ self.L - self.z[rows]

    def value(self, th, rows):
        gap = self._exposure_gap(th, rows)
        out = -th @ self.mu + 0.5 * self.delta * np.einsum("ki,ki->k", gap, gap)
        if self.w.size:
            arg = self.delta * (self.ups[rows] - th @ self.G.T)
            e, sat = _capped_exp(arg)
            self.saturated[rows] |= sat.any(axis=1)
            out = out + ((e - 1.0 - arg) / self.delta) @ self.w
        return out

    def derivatives(self, th, rows):
        gap = self._exposure_gap(th, rows)
        g = -self.mu + self.delta * gap @ self.L.T
        H = np.broadcast_to(self.delta * self.LLt, (th.shape[0], 3, 3)).copy()
        if self.w.size:
            arg = self.delta * (self.ups[rows] - th @ self.G.T)
            e, _ = _capped_exp(arg)
            g = g - ((e - 1.0) * self.w) @ self.G
            H = H + self.delta * np.einsum("kz,z,zi,zj->kij", e, self.w, self.G, self.G)
        return g, H


class PowerPortfolioProblem:
    """Batch of P(pi) problems on the open set {1 + G pi > 0}."""

    def __init__(self, loc: LocalMarket, kappa: float, z: np.ndarray, upsilon: np.ndarray, excess=None):
        self.kappa = kappa
        self.L = loc.loadings
        self.LLt = self.L @ self.L.T
        self.mu = loc.excess_return if excess is None else np.asarray(excess, float)
        self.G = loc.jump_loadings
        self.w = loc.weights
        self.z = np.atleast_2d(np.asarray(z, float))
        self.ups = np.asarray(upsilon, float).reshape(self.z.shape[0], -1)
        self.saturated = np.zeros(self.z.shape[0], dtype=bool)

    def feasible(self, pi, rows):
        if not self.w.size:
            return np.ones(pi.shape[0], dtype=bool)
        return np.all(1.0 + pi @ self.G.T > 0, axis=1)

    def value(self, pi, rows):
        k = self.kappa
        v = pi @ self.L
        out = -pi @ self.mu + 0.5 * (1 - k) * np.einsum("ki,ki->k", v, v) - np.einsum(
            "ki,ki->k", v, self.z[rows]
        )
        if self.w.size:
            g = pi @ self.G.T
            ups = self.ups[rows]
            e, sat = _capped_exp(k * np.log1p(g) + ups)
            self.saturated[rows] |= sat.any(axis=1)
            out = out - ((e - 1.0 - k * g - ups) / k) @ self.w
        return out

    def derivatives(self, pi, rows):
        k = self.kappa
        g_out = -self.mu + (1 - k) * pi @ self.LLt - self.z[rows] @ self.L.T
        H = np.broadcast_to((1 - k) * self.LLt, (pi.shape[0], 3, 3)).copy()
        if self.w.size:
            g = pi @ self.G.T
            ups = self.ups[rows]
            e1, _ = _capped_exp((k - 1) * np.log1p(g) + ups)
            e2, _ = _capped_exp((k - 2) * np.log1p(g) + ups)
            g_out = g_out - ((e1 - 1.0) * self.w) @ self.G
            H = H + (1 - k) * np.einsum("kz,z,zi,zj->kij", e2, self.w, self.G, self.G)
        return g_out, H


def _feasible_start(loc: LocalMarket, lower: np.ndarray, upper: np.ndarray) -> np.ndarray:
    """A point of the box with 1 + G pi > 0 (the projection of 0 if it qualifies)."""
    start = np.clip(np.zeros(3), lower, upper)
    G = loc.jump_loadings
    if G.shape[0] == 0 or np.all(1.0 + G @ start > 0):
        return start
    # maximise the smallest margin s subject to 1 + G pi >= s inside the box
    n_atoms = G.shape[0]
    res = linprog(
        c=np.r_[np.zeros(3), -1.0],
        A_ub=np.c_[-G, np.ones(n_atoms)],
        b_ub=np.ones(n_atoms),
        bounds=[*zip(lower, upper), (None, None)],
        method="highs",
    )
    if not res.success or res.x[3] <= 0:
        raise ValueError("infeasible portfolio box: no point satisfies 1 + <pi, gamma_hat> > 0")
    # pull slightly toward the analytic centre direction for a strictly interior start
    return res.x[:3]


def solve_exponential_portfolio(
    loc: LocalMarket, delta: float, z: np.ndarray, upsilon: np.ndarray, lower, upper, start=None, excess=None
) -> tuple[BoxSolution, ExponentialPortfolioProblem]:
    prob = ExponentialPortfolioProblem(loc, delta, z, upsilon, excess)
    m = prob.z.shape[0]
    x0 = np.zeros((m, 3)) if start is None else np.broadcast_to(start, (m, 3))
    return minimize_on_box(prob, x0, lower, upper), prob


def solve_power_portfolio(
    loc: LocalMarket, kappa: float, z: np.ndarray, upsilon: np.ndarray, lower, upper, start=None
) -> tuple[BoxSolution, PowerPortfolioProblem]:
    prob = PowerPortfolioProblem(loc, kappa, z, upsilon)
    m = prob.z.shape[0]
    if start is None:
        start = _feasible_start(loc, lower, upper)
    x0 = np.broadcast_to(start, (m, 3))
    if not np.all(prob.feasible(np.clip(x0, lower, upper), np.arange(m))):
        x0 = np.broadcast_to(_feasible_start(loc, lower, upper), (m, 3))
    return minimize_on_box(prob, x0, lower, upper), prob


# --------------------------------------------------------------------------- scalar API: exponential


def theta_objective_exponential(theta, inputs: GeneratorInputs, market, delta: float) -> float:
    """E(theta): the portfolio part of the exponential generator, uncompleted."""
    loc = _loc(market, inputs.t)
    prob = ExponentialPortfolioProblem(loc, delta, inputs.z_array, inputs.upsilon_array)
    return float(prob.value(np.atleast_2d(np.asarray(theta, float)), np.array([0]))[0])


def theta_minimand_exponential(theta, inputs: GeneratorInputs, market, delta: float) -> float:
    """delta/2 |theta L - (z + phi/delta)|^2 + sum_z w m(upsilon - g).

    Equals E(theta) + z.phi + |phi|^2/(2 delta); needs all three prices of risk.
    """
    loc = _loc(market, inputs.t)
    phi = effective_prices_of_risk(loc)
    z = inputs.z_array
    return theta_objective_exponential(theta, inputs, loc, delta) + float(z @ phi + phi @ phi / (2 * delta))


def argmin_theta_exponential(
    inputs: GeneratorInputs, market, delta: float, boxes: Boxes | None = None
) -> OptimalControls:
    loc = _loc(market, inputs.t)
    lower, upper = _box_arrays(boxes)
    sol, prob = solve_exponential_portfolio(loc, delta, inputs.z_array, inputs.upsilon_array, lower, upper)
    flags = []
    if not sol.converged[0]:
        flags.append("not_converged")
    if prob.saturated[0]:
        flags.append("exponent_saturated")
    return OptimalControls(sol.x[0], float("nan"), float("nan"), float(sol.value[0]), tuple(flags))


@dataclass(frozen=True, slots=True)
class NoJumpPortfolio:
    """First-order-condition portfolio and the textbook corollary for comparison."""

    foc: np.ndarray
    printed: np.ndarray


def _solve_exposure(loc: LocalMarket, target: np.ndarray) -> np.ndarray:
    """theta with theta @ L = target."""
    effective_prices_of_risk(loc)  # raises on vanishing loadings
    return np.linalg.solve(loc.loadings.T, target)


def closed_form_theta_nojump_exponential(inputs: GeneratorInputs, market, delta: float) -> NoJumpPortfolio:
    from .transcribed import printed_theta_nojump_exponential

    loc = _loc(market, inputs.t)
    if loc.n_atoms and np.any(loc.weights > 0):
        raise ValueError("no-jump closed form needs a zero jump measure")
    phi = effective_prices_of_risk(loc)
    foc = _solve_exposure(loc, inputs.z_array + phi / delta)
    return NoJumpPortfolio(foc, printed_theta_nojump_exponential(loc, inputs.z_array, delta))


@dataclass(frozen=True, slots=True)
class ScalarChoice:
    value: float | np.ndarray
    flagged: bool | np.ndarray


def optimal_consumption_exponential(x, y, delta: float, box: tuple[float, float] | None = None) -> ScalarChoice:
    """argmin_c exp(delta (x - y - c))/delta + c, i.e. c = x - y (clipped)."""
    c = np.asarray(x, float) - np.asarray(y, float)
    if box is not None:
        clipped = np.clip(c, *box)
        return ScalarChoice(_scalar(clipped), _scalar(clipped != c))
    return ScalarChoice(_scalar(c), _scalar(np.zeros_like(c, dtype=bool)))


def _premium_exp(y, lam: float, eta: float, delta: float, box):
    y = np.asarray(y, float)
    if lam <= 0:
        if box is None:
            raise ValueError("zero mortality makes the premium problem unbounded without a box")
        return np.full_like(y, box[0]), np.ones_like(y, dtype=bool)
    p = eta * (np.log(lam / eta) / delta - y)
    if box is None:
        return p, np.zeros_like(y, dtype=bool)
    clipped = np.clip(p, *box)
    return clipped, clipped != p


def optimal_premium_exponential(
    y, t: float, delta: float, mort: MortalityCurve, contract: InsuranceContract,
    box: tuple[float, float] | None = None,
) -> ScalarChoice:
    """argmin_p lam exp(-delta (y + p/eta))/delta + p = eta (ln(lam/eta)/delta - y)."""
    p, flag = _premium_exp(y, mort.hazard(t), contract.premium_ratio(t), delta, box)
    return ScalarChoice(_scalar(p), _scalar(flag))


def _scalar(a):
    a = np.asarray(a)
    return a.item() if a.ndim == 0 else a


def consumption_objective_exponential(c, x, y, delta):
    return np.exp(delta * (x - y - c)) / delta + c


def premium_objective_exponential(p, y, lam, eta, delta):
    return lam * np.exp(-delta * (y + p / eta)) / delta + p


# --------------------------------------------------------------------------- batch generators


@dataclass(frozen=True, slots=True)
class GeneratorBatch:
    """Generator values and optimal controls for a batch of states."""

    h: np.ndarray
    portfolio: np.ndarray
    consumption: np.ndarray
    premium: np.ndarray
    portfolio_value: np.ndarray
    saturated: np.ndarray
    clamped: np.ndarray
    converged: np.ndarray


@dataclass(frozen=True, slots=True)
class ScalarPart:
    """Consumption/premium minimisers and the y-dependent part of a generator."""

    consumption: np.ndarray
    premium: np.ndarray
    value: np.ndarray
    clamped: np.ndarray


def exponential_scalar_part(act: Actuarial, delta: float, boxes: Boxes | None, x, y) -> ScalarPart:
    """min_c + min_p of the exponential generator, closed form."""
    y = np.asarray(y, float)
    x = np.broadcast_to(np.asarray(x, float), y.shape)
    c_box = None if boxes is None else boxes.consumption
    d_box = None if boxes is None else boxes.premium
    c_free = x - y
    c = c_free if c_box is None else np.clip(c_free, *c_box)
    p, p_clamped = _premium_exp(y, act.lam, act.eta, delta, d_box)
    c_val = np.where(c == c_free, 1.0 / delta + x - y, consumption_objective_exponential(c, x, y, delta))
    if act.lam > 0:
        p_free = act.eta * (np.log(act.lam / act.eta) / delta - y)
        p_val = np.where(
            p == p_free, act.eta / delta + p_free, premium_objective_exponential(p, y, act.lam, act.eta, delta)
        )
    else:
        p_val = p
    return ScalarPart(c, p, c_val + p_val, (c != c_free) | p_clamped)


def exponential_generator_batch(
    loc: LocalMarket, act: Actuarial, delta: float, boxes: Boxes | None,
    x, y, z, upsilon, start=None,
) -> GeneratorBatch:
    """Closed-form consumption and premium, numerical portfolio; vectorised over rows."""
    y = np.atleast_1d(np.asarray(y, float))
    m = y.shape[0]
    x = np.broadcast_to(np.asarray(x, float), (m,))
    z = np.broadcast_to(np.asarray(z, float), (m, 3))
    ups = np.broadcast_to(np.asarray(upsilon, float), (m, loc.n_atoms))
    lower, upper = _box_arrays(boxes)
    sol, prob = solve_exponential_portfolio(loc, delta, z, ups, lower, upper, start)
    part = exponential_scalar_part(act, delta, boxes, x, y)
    h = part.value - (act.rho + act.lam) / delta - loc.r * x + sol.value
    return GeneratorBatch(
        h=h, portfolio=sol.x, consumption=part.consumption, premium=part.premium,
        portfolio_value=sol.value, saturated=prob.saturated, clamped=part.clamped, converged=sol.converged,
    )


def optimal_fractions_power(
    y, t: float, kappa: float, mort: MortalityCurve, contract: InsuranceContract,
    boxes: Boxes | None = None,
) -> tuple[ScalarChoice, ScalarChoice]:
    """Consumption and premium fractions maximising the power generator."""
    xi, xi_flag = _xi_power(y, kappa, None if boxes is None else boxes.consumption)
    zeta, zeta_flag = _zeta_power(
        y, kappa, mort.hazard(t), contract.premium_ratio(t), None if boxes is None else boxes.premium
    )
    return ScalarChoice(_scalar(xi), _scalar(xi_flag)), ScalarChoice(_scalar(zeta), _scalar(zeta_flag))


def _xi_power(y, kappa, box):
    y = np.asarray(y, float)
    xi = np.exp(-y / (1 - kappa))
    if box is None:
        return xi, np.zeros_like(y, dtype=bool)
    clipped = np.clip(xi, *box)
    return clipped, clipped != xi


def _zeta_power(y, kappa, lam, eta, box):
    y = np.asarray(y, float)
    if lam <= 0:
        if box is None:
            raise ValueError("zero mortality makes the premium problem unbounded without a box")
        return np.full_like(y, box[0]), np.ones_like(y, dtype=bool)
    q = (eta / lam) ** (-1.0 / (1 - kappa)) * np.exp(-y / (1 - kappa))
    zeta = eta * (q - 1.0)
    if box is None:
        return zeta, np.zeros_like(y, dtype=bool)
    clipped = np.clip(zeta, *box)
    return clipped, clipped != zeta


def consumption_objective_power(xi, y, kappa):
    return np.exp(-y) * np.power(xi, kappa) / kappa - xi


def premium_objective_power(zeta, y, kappa, lam, eta):
    return lam * np.exp(-y) * np.power(1.0 + zeta / eta, kappa) / kappa - zeta


def power_scalar_part(act: Actuarial, kappa: float, boxes: Boxes | None, y) -> ScalarPart:
    """sup over consumption and premium fractions of the power generator, closed form."""
    y = np.asarray(y, float)
    if boxes is not None:
        if boxes.consumption[0] <= 0:
            raise ValueError("power utility needs a consumption-fraction box inside (0, inf)")
        if boxes.premium[0] <= -act.eta:
            raise ValueError("power utility needs premium fractions above -eta")
    xi, xi_flag = _xi_power(y, kappa, None if boxes is None else boxes.consumption)
    zeta, zeta_flag = _zeta_power(y, kappa, act.lam, act.eta, None if boxes is None else boxes.premium)
    xi_free = np.exp(-y / (1 - kappa))
    xi_val = np.where(xi_flag, consumption_objective_power(xi, y, kappa), (1 - kappa) / kappa * xi_free)
    if act.lam > 0:
        q = (act.eta / act.lam) ** (-1.0 / (1 - kappa)) * np.exp(-y / (1 - kappa))
        zeta_val = np.where(
            zeta_flag,
            premium_objective_power(zeta, y, kappa, act.lam, act.eta),
            act.eta * q * (1 - kappa) / kappa + act.eta,
        )
    else:
        zeta_val = -zeta
    return ScalarPart(xi, zeta, xi_val + zeta_val, xi_flag | zeta_flag)


def power_generator_batch(
    loc: LocalMarket, act: Actuarial, kappa: float, boxes: Boxes | None, y, z, upsilon, start=None,
) -> GeneratorBatch:
    y = np.atleast_1d(np.asarray(y, float))
    m = y.shape[0]
    z = np.broadcast_to(np.asarray(z, float), (m, 3))
    ups = np.broadcast_to(np.asarray(upsilon, float), (m, loc.n_atoms))
    part = power_scalar_part(act, kappa, boxes, y)
    lower, upper = _box_arrays(boxes)
    sol, prob = solve_power_portfolio(loc, kappa, z, ups, lower, upper, start)
    zz = np.einsum("ki,ki->k", z, z)
    sup_f = part.value - (act.rho + act.lam) / kappa + loc.r + zz / (2 * kappa) - sol.value
    return GeneratorBatch(
        h=kappa * sup_f, portfolio=sol.x, consumption=part.consumption, premium=part.premium,
        portfolio_value=sol.value, saturated=prob.saturated, clamped=part.clamped, converged=sol.converged,
    )


# --------------------------------------------------------------------------- scalar API: generators


def _bounded_scalar_min(fun, lo: float, hi: float) -> tuple[float, float]:
    big = 1e250  # finite, with headroom for the parabolic-step products

    def safe(v: float) -> float:
        # overflow far from the minimiser is just "very large" to the search
        with np.errstate(over="ignore", invalid="ignore"):
            f = float(fun(v))
        return f if np.isfinite(f) else big

    res = minimize_scalar(safe, bounds=(lo, hi), method="bounded", options={"xatol": 1e-12, "maxiter": 500})
    best_x, best_f = float(res.x), float(res.fun)
    for edge in (lo, hi):
        fe = safe(edge)
        if fe < best_f:
            best_x, best_f = edge, fe
    return best_x, best_f


def _flags(batch: GeneratorBatch) -> tuple[str, ...]:
    out = []
    if batch.saturated[0]:
        out.append("exponent_saturated")
    if batch.clamped[0]:
        out.append("clamped")
    if not batch.converged[0]:
        out.append("not_converged")
    return tuple(out)


def generator_exponential(
    inputs: GeneratorInputs, scenario: MarketScenario, mort: MortalityCurve, contract: InsuranceContract,
    delta: float, boxes: Boxes, mode: Mode = "inf",
) -> GeneratorValue:
    """Exponential generator at one state.

    ``mode="inf"`` minimises the consumption and premium objectives
    numerically; ``mode="closed"`` uses their closed-form minimisers.  The
    portfolio infimum is numerical in both modes.
    """
    loc = local_market(scenario, inputs.t)
    act = Actuarial.at(inputs.t, mort, contract, scenario)
    batch = exponential_generator_batch(
        loc, act, delta, boxes, inputs.x, inputs.y, inputs.z_array, inputs.upsilon_array
    )
    if mode == "closed":
        ctl = OptimalControls(batch.portfolio[0], float(batch.consumption[0]), float(batch.premium[0]),
                              float(batch.portfolio_value[0]), _flags(batch))
        return GeneratorValue(float(batch.h[0]), ctl, _flags(batch))
    if mode != "inf":
        raise ValueError(f"unknown generator mode {mode!r}")
    x, y = inputs.x, inputs.y
    c, c_val = _bounded_scalar_min(lambda c: consumption_objective_exponential(c, x, y, delta), *boxes.consumption)
    p, p_val = _bounded_scalar_min(
        lambda p: premium_objective_exponential(p, y, act.lam, act.eta, delta), *boxes.premium
    )
    h = c_val + p_val - (act.rho + act.lam) / delta - loc.r * x + float(batch.portfolio_value[0])
    ctl = OptimalControls(batch.portfolio[0], c, p, float(batch.portfolio_value[0]), _flags(batch))
    return GeneratorValue(h, ctl, _flags(batch))


def theta_objective_power(pi, inputs: GeneratorInputs, market, kappa: float) -> float:
    """P(pi): the (convex) portfolio part of the power generator."""
    loc = _loc(market, inputs.t)
    prob = PowerPortfolioProblem(loc, kappa, inputs.z_array, inputs.upsilon_array)
    pi = np.atleast_2d(np.asarray(pi, float))
    if not prob.feasible(pi, np.array([0]))[0]:
        return float("inf")
    return float(prob.value(pi, np.array([0]))[0])


def theta_minimand_power(pi, inputs: GeneratorInputs, market, kappa: float) -> float:
    """(1-kappa)/2 |pi L - (z+phi)/(1-kappa)|^2 - jump sum / kappa = P(pi) + |z+phi|^2 / (2 (1-kappa))."""
    loc = _loc(market, inputs.t)
    phi = effective_prices_of_risk(loc)
    s = inputs.z_array + phi
    return theta_objective_power(pi, inputs, loc, kappa) + float(s @ s) / (2 * (1 - kappa))


def argmin_theta_power(inputs: GeneratorInputs, market, kappa: float, boxes: Boxes | None = None) -> OptimalControls:
    loc = _loc(market, inputs.t)
    lower, upper = _box_arrays(boxes)
    sol, prob = solve_power_portfolio(loc, kappa, inputs.z_array, inputs.upsilon_array, lower, upper)
    flags = []
    if not sol.converged[0]:
        flags.append("not_converged")
    if prob.saturated[0]:
        flags.append("exponent_saturated")
    return OptimalControls(sol.x[0], float("nan"), float("nan"), float(sol.value[0]), tuple(flags))


def closed_form_pi_nojump(inputs: GeneratorInputs, market, kappa: float) -> NoJumpPortfolio:
    from .transcribed import printed_pi_nojump

    loc = _loc(market, inputs.t)
    if loc.n_atoms and np.any(loc.weights > 0):
        raise ValueError("no-jump closed form needs a zero jump measure")
    phi = effective_prices_of_risk(loc)
    foc = _solve_exposure(loc, (inputs.z_array + phi) / (1 - kappa))
    return NoJumpPortfolio(foc, printed_pi_nojump(loc, inputs.z_array, kappa))


def generator_power(
    inputs: GeneratorInputs, scenario: MarketScenario, mort: MortalityCurve, contract: InsuranceContract,
    kappa: float, boxes: Boxes, mode: Mode = "inf",
) -> GeneratorValue:
    """Power generator kappa * sup F at one state (see module docstring)."""
    loc = local_market(scenario, inputs.t)
    act = Actuarial.at(inputs.t, mort, contract, scenario)
    batch = power_generator_batch(loc, act, kappa, boxes, inputs.y, inputs.z_array, inputs.upsilon_array)
    if mode == "closed":
        ctl = OptimalControls(batch.portfolio[0], float(batch.consumption[0]), float(batch.premium[0]),
                              float(batch.portfolio_value[0]), _flags(batch))
        return GeneratorValue(float(batch.h[0]), ctl, _flags(batch))
    if mode != "inf":
        raise ValueError(f"unknown generator mode {mode!r}")
    y = inputs.y
    xi, xi_val = _bounded_scalar_min(lambda v: -consumption_objective_power(v, y, kappa), *boxes.consumption)
    zeta, zeta_val = _bounded_scalar_min(
        lambda v: -premium_objective_power(v, y, kappa, act.lam, act.eta), *boxes.premium
    )
    z = inputs.z_array
    sup_f = -xi_val - zeta_val - (act.rho + act.lam) / kappa + loc.r + float(z @ z) / (2 * kappa) - float(
        batch.portfolio_value[0]
    )
    ctl = OptimalControls(batch.portfolio[0], xi, zeta, float(batch.portfolio_value[0]), _flags(batch))
    return GeneratorValue(kappa * sup_f, ctl, _flags(batch))
