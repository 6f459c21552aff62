"""Market coefficients: HJM curves, CPI, risky share, real-bond dynamics.

All coefficients are deterministic piecewise-constant tables.  Spot rates are
the noise-free part of the forward curve on its diagonal,
``r_k(t) = f_k(0, t) + int_0^t alpha_k(s, t) ds``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tables import StepFunction, Surface


class DegenerateMarketError(ValueError):
    """A market price of risk was requested where its volatility vanishes."""


@dataclass(frozen=True, slots=True)
class JumpMeasure:
    """Finite-atom jump measure: marks with per-year intensities."""

    marks: tuple[float, ...] = ()
    intensities: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        marks = tuple(float(m) for m in self.marks)
        weights = tuple(float(w) for w in self.intensities)
        if len(marks) != len(weights):
            raise ValueError("marks and intensities must have equal length")
        if len(set(marks)) != len(marks):
            raise ValueError(f"jump marks must be distinct: {marks}")
        if any(not np.isfinite(w) or w < 0 for w in weights):
            raise ValueError(f"jump intensities must be finite and >= 0: {weights}")
        object.__setattr__(self, "marks", marks)
        object.__setattr__(self, "intensities", weights)

    @property
    def n_atoms(self) -> int:
        return len(self.marks)

    @property
    def weights(self) -> np.ndarray:
        return np.asarray(self.intensities, dtype=float)

    @property
    def total_intensity(self) -> float:
        return float(sum(self.intensities))


def _atom_tables(tables, n_atoms: int, kind):
    if len(tables) == 0:
        return tuple(kind.constant(0.0) for _ in range(n_atoms))
    return tuple(tables)


@dataclass(frozen=True, slots=True)
class HjmCurve:
    """Forward-rate curve ``f(0, .)`` with drift, volatility and jump tables.

    ``gamma`` holds one surface per jump atom; leave it empty for no jumps.
    """

    initial_curve: StepFunction
    alpha: Surface = field(default_factory=lambda: Surface.constant(0.0))
    sigma: Surface = field(default_factory=lambda: Surface.constant(0.0))
    gamma: tuple[Surface, ...] = ()

    def gamma_for(self, n_atoms: int) -> tuple[Surface, ...]:
        return _atom_tables(self.gamma, n_atoms, Surface)

    def spot_rate(self, t: float) -> float:
        return self.initial_curve(t) + self.alpha.diagonal_integral(t, t)

    def spot_rate_integral(self, t0: float, t1: float) -> float:
        """Exact ``int_{t0}^{t1} r(u) du``; the integrand is piecewise linear between knots."""
        knots = sorted(
            {t0, t1}
            | {s for s in self.initial_curve.starts if t0 < s < t1}
            | {s for s in self.alpha.maturity_breaks(t1) if t0 < s < t1}
        )
        return sum(
            self.spot_rate(0.5 * (a + b)) * (b - a) for a, b in zip(knots, knots[1:])
        )


@dataclass(frozen=True, slots=True)
class InflationModel:
    initial_index: float = 1.0
    mu: StepFunction = field(default_factory=lambda: StepFunction.constant(0.0))
    sigma: StepFunction = field(default_factory=lambda: StepFunction.constant(0.0))
    gamma: tuple[StepFunction, ...] = ()

    def gamma_at(self, t: float, n_atoms: int) -> np.ndarray:
        return np.array([g(t) for g in _atom_tables(self.gamma, n_atoms, StepFunction)])


@dataclass(frozen=True, slots=True)
class RiskyAssetModel:
    initial_price: float = 1.0
    mu: StepFunction = field(default_factory=lambda: StepFunction.constant(0.0))
    sigma: StepFunction = field(default_factory=lambda: StepFunction.constant(0.0))
    gamma: tuple[StepFunction, ...] = ()

    def gamma_at(self, t: float, n_atoms: int) -> np.ndarray:
        return np.array([g(t) for g in _atom_tables(self.gamma, n_atoms, StepFunction)])


@dataclass(frozen=True, slots=True)
class MarketScenario:
    real_curve: HjmCurve
    nominal_curve: HjmCurve
    inflation: InflationModel
    risky: RiskyAssetModel
    jumps: JumpMeasure
    discount: StepFunction
    horizon: float
    bond_maturity: float

    def __post_init__(self) -> None:
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if self.bond_maturity < self.horizon:
            raise ValueError("bond maturity must be at least the horizon")
        n = self.jumps.n_atoms
        for name, seq in (
            ("real_curve.gamma", self.real_curve.gamma),
            ("nominal_curve.gamma", self.nominal_curve.gamma),
            ("inflation.gamma", self.inflation.gamma),
            ("risky.gamma", self.risky.gamma),
        ):
            if len(seq) not in (0, n):
                raise ValueError(f"{name} has {len(seq)} entries for {n} jump atoms")

    def local(self, t: float) -> "LocalMarket":
        return local_market(self, t)


@dataclass(frozen=True, slots=True)
class BondCoefficients:
    a: float
    b: float
    c: np.ndarray
    spot_rate: float


@dataclass(frozen=True, slots=True)
class RealBondDynamics:
    A_tilde: float
    C_tilde: np.ndarray


@dataclass(frozen=True, slots=True)
class MarketPricesOfRisk:
    """Market prices of risk.

    ``phi1`` is the conventional ratio (A~ - r)/b.  ``phi1_adjusted`` is
    (A~ - r - mu_I)/b, the value that actually solves ``loadings @ phi = mu_hat``
    because the real bond also loads on the CPI noise.
    """

    phi1: float
    phi2: float
    phi3: float
    phi1_adjusted: float

    @property
    def effective(self) -> np.ndarray:
        return np.array([self.phi1_adjusted, self.phi2, self.phi3])


def bond_loading_coefficients(
    curve: HjmCurve, jumps: JumpMeasure, t: float, maturity: float
) -> BondCoefficients:
    """Drift, Brownian and jump loadings of the zero-coupon bond maturing at ``maturity``."""
    if t > maturity:
        raise ValueError(f"bond coefficients need t <= maturity, got t={t} > {maturity}")
    if t < 0:
        raise ValueError("time must be nonnegative")
    n = jumps.n_atoms
    b = -curve.sigma.maturity_integral(t, t, maturity)
    c = np.array([-g.maturity_integral(t, t, maturity) for g in curve.gamma_for(n)])
    r = curve.spot_rate(t)
    drift_integral = curve.alpha.maturity_integral(t, t, maturity)
    compensator = float(np.dot(c, jumps.weights)) if n else 0.0
    a = r - drift_integral + 0.5 * b * b - compensator
    return BondCoefficients(a=a, b=b, c=c, spot_rate=r)


def real_bond_dynamics(
    real_bond: BondCoefficients, infl: InflationModel, jumps: JumpMeasure, t: float
) -> RealBondDynamics:
    """Drift and jump loading of the CPI-indexed real bond ``I * P_r``."""
    gamma_i = infl.gamma_at(t, jumps.n_atoms)
    cross = float(np.dot(real_bond.c * gamma_i, jumps.weights)) if jumps.n_atoms else 0.0
    a_tilde = real_bond.a + infl.mu(t) + cross
    c_tilde = real_bond.c + gamma_i + real_bond.c * gamma_i
    return RealBondDynamics(A_tilde=a_tilde, C_tilde=c_tilde)


@dataclass(frozen=True, slots=True)
class LocalMarket:
    """Every coefficient the wealth equation and generators need at one instant.

    ``loadings`` maps holdings in (real bond, CPI account, share) to exposures
    on (W_r, W_I, W_S): ``exposure = holdings @ loadings``.
    """

    t: float
    r: float
    bond: BondCoefficients
    real_bond: RealBondDynamics
    mu_I: float
    sigma_I: float
    mu_S: float
    sigma_S: float
    gamma_I: np.ndarray
    gamma_S: np.ndarray
    weights: np.ndarray

    @property
    def b(self) -> float:
        return self.bond.b

    @property
    def loadings(self) -> np.ndarray:
        return np.array(
            [
                [self.bond.b, self.sigma_I, 0.0],
                [0.0, self.sigma_I, 0.0],
                [0.0, 0.0, self.sigma_S],
            ]
        )

    @property
    def excess_return(self) -> np.ndarray:
        return np.array(
            [self.real_bond.A_tilde - self.r, self.mu_I, self.mu_S - self.r]
        )

    @property
    def jump_loadings(self) -> np.ndarray:
        """Rows are atoms, columns are (real bond, CPI account, share)."""
        return np.column_stack([self.real_bond.C_tilde, self.gamma_I, self.gamma_S]).reshape(
            len(self.weights), 3
        )

    @property
    def n_atoms(self) -> int:
        return len(self.weights)


def local_market(scenario: MarketScenario, t: float) -> LocalMarket:
    n = scenario.jumps.n_atoms
    bond = bond_loading_coefficients(
        scenario.real_curve, scenario.jumps, t, scenario.bond_maturity
    )
    rb = real_bond_dynamics(bond, scenario.inflation, scenario.jumps, t)
    return LocalMarket(
        t=t,
        r=bond.spot_rate,
        bond=bond,
        real_bond=rb,
        mu_I=scenario.inflation.mu(t),
        sigma_I=scenario.inflation.sigma(t),
        mu_S=scenario.risky.mu(t),
        sigma_S=scenario.risky.sigma(t),
        gamma_I=scenario.inflation.gamma_at(t, n),
        gamma_S=scenario.risky.gamma_at(t, n),
        weights=scenario.jumps.weights,
    )


def market_prices_of_risk(scenario: MarketScenario, t: float) -> MarketPricesOfRisk:
    loc = local_market(scenario, t)
    for name, value in (("b_r", loc.b), ("sigma_I", loc.sigma_I), ("sigma_S", loc.sigma_S)):
        if value == 0.0:
            raise DegenerateMarketError(f"market price of risk undefined: {name} = 0 at t={t}")
    excess_bond = loc.real_bond.A_tilde - loc.r
    return MarketPricesOfRisk(
        phi1=excess_bond / loc.b,
        phi2=loc.mu_I / loc.sigma_I,
        phi3=(loc.mu_S - loc.r) / loc.sigma_S,
        phi1_adjusted=(excess_bond - loc.mu_I) / loc.b,
    )


@dataclass(frozen=True, slots=True)
class ValidationReport:
    violations: tuple[str, ...] = ()
    warnings: tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations


def _check_times(scenario: MarketScenario) -> list[float]:
    """Times where piecewise quantities attain their extremes on [0, T]."""
    pts = {0.0, scenario.horizon}
    tables = [
        scenario.inflation.mu, scenario.inflation.sigma, scenario.risky.mu,
        scenario.risky.sigma, scenario.discount, *scenario.inflation.gamma,
        *scenario.risky.gamma, scenario.real_curve.initial_curve,
    ]
    for tab in tables:
        pts.update(s for s in tab.starts if s < scenario.horizon)
    for curve in (scenario.real_curve, scenario.nominal_curve):
        for surf in (curve.alpha, curve.sigma, *curve.gamma):
            pts.update(s for s in surf.time_starts if s < scenario.horizon)
            if surf.relative:
                pts.update(
                    scenario.bond_maturity - m
                    for m in surf.maturity_starts
                    if 0.0 <= scenario.bond_maturity - m <= scenario.horizon
                )
    srt = sorted(pts)
    mids = [0.5 * (a + b) for a, b in zip(srt, srt[1:])]
    # left limits just before each break
    lefts = [max(0.0, p - 1e-9 * max(1.0, p)) for p in srt[1:]]
    return sorted(set(srt) | set(mids) | set(lefts))


def validate_scenario(scenario: MarketScenario) -> ValidationReport:
    """Check jump loadings > -1, bounded tables and finite integrability sums."""
    violations: list[str] = []
    warnings: list[str] = []
    n = scenario.jumps.n_atoms
    marks = scenario.jumps.marks

    def finite_table(name: str, tab) -> None:
        vals = [tab.values] if isinstance(tab, StepFunction) else tab.values
        flat = np.asarray(vals, dtype=float).ravel()
        if not np.all(np.isfinite(flat)):
            violations.append(f"{name}: table contains non-finite values (unbounded)")

    for cname, curve in (("real", scenario.real_curve), ("nominal", scenario.nominal_curve)):
        finite_table(f"{cname}_curve.initial_curve", curve.initial_curve)
        finite_table(f"{cname}_curve.alpha", curve.alpha)
        finite_table(f"{cname}_curve.sigma", curve.sigma)
        for k, g in enumerate(curve.gamma):
            finite_table(f"{cname}_curve.gamma[atom {k}]", g)
    for name, tab in (
        ("inflation.mu", scenario.inflation.mu), ("inflation.sigma", scenario.inflation.sigma),
        ("risky.mu", scenario.risky.mu), ("risky.sigma", scenario.risky.sigma),
        ("discount", scenario.discount),
    ):
        finite_table(name, tab)
    if violations:
        return ValidationReport(tuple(violations), tuple(warnings))

    if min(scenario.discount.values) <= 0:
        violations.append("discount: rate must be positive")
    if scenario.inflation.initial_index <= 0:
        violations.append("inflation.initial_index must be positive")
    if scenario.risky.initial_price <= 0:
        violations.append("risky.initial_price must be positive")

    for k in range(n):
        for name, tabs in (("gamma_I", scenario.inflation.gamma), ("gamma_S", scenario.risky.gamma)):
            if tabs and min(tabs[k].values) <= -1.0:
                violations.append(
                    f"{name}: jump loading {min(tabs[k].values)} <= -1 on atom {k} (mark {marks[k]})"
                )

    times = _check_times(scenario)
    T = scenario.horizon
    zero_sigma_s = True
    for t in times:
        loc = local_market(scenario, t)
        for k in range(n):
            if loc.bond.c[k] <= -1.0:
                violations.append(f"c_r: real-bond jump loading <= -1 on atom {k} at t={t:g}")
            if loc.real_bond.C_tilde[k] <= -1.0:
                violations.append(f"C_tilde: real-bond jump loading <= -1 on atom {k} at t={t:g}")
        nb = bond_loading_coefficients(scenario.nominal_curve, scenario.jumps, t, scenario.bond_maturity)
        for k in range(n):
            if nb.c[k] <= -1.0:
                violations.append(f"c_n: nominal bond jump loading <= -1 on atom {k} at t={t:g}")
        if loc.sigma_S != 0.0:
            zero_sigma_s = False
    # integrability sums over the horizon, exact on the pieces
    weights = scenario.jumps.weights
    integ = (
        scenario.inflation.mu.bound() + scenario.inflation.sigma.bound() ** 2
        + scenario.risky.mu.bound() + scenario.risky.sigma.bound() ** 2
    ) * T
    for tabs in (scenario.inflation.gamma, scenario.risky.gamma):
        for k, g in enumerate(tabs):
            integ += g.bound() ** 2 * weights[k] * T
    if not np.isfinite(integ):
        violations.append("integrability sum is not finite")
    if zero_sigma_s:
        warnings.append("sigma_S is identically zero: phi3 is undefined downstream")
    if all(local_market(scenario, t).b == 0.0 for t in times):
        warnings.append("b_r is identically zero: phi1 is undefined downstream")
    if scenario.inflation.sigma.bound() == 0.0:
        warnings.append("sigma_I is identically zero: phi2 is undefined downstream")
    return ValidationReport(tuple(dict.fromkeys(violations)), tuple(warnings))


def constant_scenario(
    *,
    r: float = 0.03,
    sigma_r: float = 0.0,
    sigma_r_span: float | None = None,
    mu_I: float = 0.0,
    sigma_I: float = 0.0,
    mu_S: float = 0.0,
    sigma_S: float = 0.0,
    jumps: JumpMeasure = JumpMeasure(),
    gamma_r: tuple[float, ...] = (),
    gamma_I: tuple[float, ...] = (),
    gamma_S: tuple[float, ...] = (),
    discount: float = 0.03,
    horizon: float = 10.0,
    bond_maturity: float | None = None,
) -> MarketScenario:
    """Time-homogeneous scenario with a flat real curve.

    ``sigma_r`` applies on relative maturities ``[0, sigma_r_span)`` (zero
    beyond), so b_r = -sigma_r * sigma_r_span is constant in t while the bond
    has at least ``sigma_r_span`` years left.  ``sigma_r_span=None`` spreads
    the volatility over the whole maturity axis instead.  Real-bond jump
    loadings ``gamma_r`` use the same maturity window.
    """
    maturity = horizon if bond_maturity is None else bond_maturity

    def window(value: float) -> Surface:
        if sigma_r_span is None:
            return Surface.constant(value)
        return Surface.maturity_profile((0.0, sigma_r_span), (value, 0.0))

    flat = HjmCurve(StepFunction.constant(r), sigma=window(sigma_r), gamma=tuple(window(g) for g in gamma_r))
    return MarketScenario(
        real_curve=flat,
        nominal_curve=HjmCurve(StepFunction.constant(r)),
        inflation=InflationModel(
            mu=StepFunction.constant(mu_I),
            sigma=StepFunction.constant(sigma_I),
            gamma=tuple(StepFunction.constant(g) for g in gamma_I),
        ),
        risky=RiskyAssetModel(
            mu=StepFunction.constant(mu_S),
            sigma=StepFunction.constant(sigma_S),
            gamma=tuple(StepFunction.constant(g) for g in gamma_S),
        ),
        jumps=jumps,
        discount=StepFunction.constant(discount),
        horizon=horizon,
        bond_maturity=maturity,
    )
