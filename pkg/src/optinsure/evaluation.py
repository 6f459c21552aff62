"""Monte Carlo objective estimates and numerical checks of optimality.

Conventions
-----------
``D(t) = exp(-int_0^t (rho + lam))`` is computed exactly from the tables.
Running utilities are integrated with the trapezoidal rule on the grid; the
controls at every node are recomputed from the stored wealth and held over
the following step, as in the wealth simulation.

The verification processes are

    exponential:  R(t) = -int_0^t D [exp(-delta c) + lam exp(-delta l)] ds - D(t) exp(-delta (X - Y))
    power:        R(t) =  int_0^t D [xi^k + lam (1 + zeta/eta)^k] X^k / k ds + D(t) X^k exp(Y) / k

Both are martingales at the optimum and supermartingales otherwise.  Their
drifts factor as ``delta D exp(-delta (X - Y)) A`` and ``D X^k exp(Y) A``
with the positive prefactor dropped; ``A`` is what :func:`drift_residual`
reports.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .bsde import BsdeSolution
from .generator import (
    Actuarial,
    UtilitySpec,
    exponential_generator_batch,
    m_function,
    power_generator_batch,
)
from .market import LocalMarket, MarketScenario, local_market
from .mortality import InsuranceContract, MortalityCurve
from .paths import (
    Boxes,
    CompanionState,
    Controls,
    DriverPaths,
    StrategyRule,
    TimeGrid,
    WealthPath,
    excess_drift,
    exposures,
    jump_exposures,
    simulate_wealth,
    simulate_wealth_power_logform,
)

SE_THRESHOLD = 3.0
SEPARATION_SE = 5.0
DRIFT_TOLERANCE = 1e-8
DRIFT_SAMPLES = 256


# --------------------------------------------------------------------------- value estimates


@dataclass(frozen=True)
class ValueEstimate:
    mean: float
    standard_error: float
    n_paths: int
    flagged_fraction: float
    samples: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))

    def __post_init__(self) -> None:
        if not self.standard_error >= 0:
            raise ValueError("standard error must be nonnegative")


def _estimate(samples: np.ndarray, flagged: np.ndarray) -> ValueEstimate:
    kept = samples[~flagged]
    n = kept.size
    if n == 0:
        return ValueEstimate(float("nan"), 0.0, 0, 1.0, kept)
    se = float(np.std(kept, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return ValueEstimate(float(np.mean(kept)), se, int(samples.size), float(np.mean(flagged)), kept)


def discount_factors(scenario: MarketScenario, mort: MortalityCurve, grid: TimeGrid) -> np.ndarray:
    """exp(-int_0^t (rho + lam)) on the grid nodes, exact for step functions."""
    return np.array(
        [np.exp(-(scenario.discount.cumulative(t) + mort.cumulative_hazard(t))) for t in grid.nodes]
    )


def _node_data(scenario, mort, contract, grid):
    locs = [local_market(scenario, t) for t in grid.nodes]
    acts = [Actuarial.at(t, mort, contract, scenario) for t in grid.nodes]
    return locs, acts


def _companion(solution, i: int, x: np.ndarray) -> CompanionState | None:
    if solution is None:
        return None
    if solution.feedback is not None:
        return solution.feedback.at(i, x)
    return solution.state_at(i, slice(0, x.shape[0]))


def _node_controls(strategy: StrategyRule, grid: TimeGrid, wealth: np.ndarray, solution=None) -> list[Controls]:
    """Controls per node as the strategy returns them (constant ones stay unbroadcast)."""
    out = []
    for i, t in enumerate(grid.nodes):
        x = wealth[:, i]
        u = strategy.controls(i, t, x, _companion(solution, i, x))
        out.append(u)
    return out


def _broadcast(u: Controls, n: int) -> Controls:
    return Controls(
        np.broadcast_to(u.portfolio, (n, 3)), np.broadcast_to(u.consumption, (n,)), np.broadcast_to(u.premium, (n,))
    )


def _running_exponential(act: Actuarial, delta: float, wealth_term, u: Controls) -> np.ndarray:
    """``wealth_term`` is exp(-delta x)."""
    return -(np.exp(-delta * u.consumption) + act.lam * np.exp(-delta * u.premium / act.eta) * wealth_term)


def _running_power(act: Actuarial, kappa: float, wealth_term, u: Controls) -> np.ndarray:
    """``wealth_term`` is x^kappa."""
    weight = np.power(u.consumption, kappa) + act.lam * np.power(1.0 + u.premium / act.eta, kappa)
    return weight * wealth_term / kappa


@dataclass(frozen=True)
class FunctionalPaths:
    """Discounted running-utility integral and terminal term on every node."""

    running: np.ndarray  # (paths, N+1) cumulative trapezoid of D * running utility
    discount: np.ndarray
    wealth: np.ndarray
    wealth_term: np.ndarray  # exp(-delta X) or X^kappa
    controls: list[Controls] = field(repr=False)


def _functional_paths(kind, param, scenario, mort, contract, strategy, wealth, solution=None) -> FunctionalPaths:
    grid = wealth.grid
    D = discount_factors(scenario, mort, grid)
    _, acts = _node_data(scenario, mort, contract, grid)
    X = wealth.wealth
    ctl = _node_controls(strategy, grid, X, solution)
    f = _running_exponential if kind == "exponential" else _running_power
    W = np.exp(-param * X) if kind == "exponential" else np.power(X, param)
    # controls are held over each step, so both trapezoid ends use the left node's controls
    step = np.empty((X.shape[0], grid.steps))
    for i in range(grid.steps):
        left = D[i] * f(acts[i], param, W[:, i], ctl[i])
        right = D[i + 1] * f(acts[i], param, W[:, i + 1], ctl[i])
        step[:, i] = 0.5 * grid.dt * (left + right)
    cum = np.zeros_like(X)
    cum[:, 1:] = np.cumsum(step, axis=1)
    return FunctionalPaths(cum, D, X, W, ctl)


def _terminal(kind, param, x):
    if kind == "exponential":
        return -np.exp(-param * x)
    return np.power(x, param) / param


def estimate_value_exponential(
    scenario: MarketScenario, mort: MortalityCurve, contract: InsuranceContract,
    strategy: StrategyRule, delta: float, x0: float, drivers: DriverPaths,
    solution: BsdeSolution | None = None, wealth: WealthPath | None = None, workers: int = 1,
) -> ValueEstimate:
    """MC mean of -int D [e^{-delta c} + lam e^{-delta l}] - D(T) e^{-delta X(T)}.

    Bankrupt (flagged) paths are left out of the mean and reported.
    """
    if strategy.mode != "absolute":
        raise ValueError("exponential utility needs an absolute-mode strategy")
    if wealth is None:
        wealth = simulate_wealth(scenario, strategy, drivers, x0, workers=workers)
    fp = _functional_paths("exponential", delta, scenario, mort, contract, strategy, wealth, solution)
    samples = fp.running[:, -1] + fp.discount[-1] * _terminal("exponential", delta, fp.wealth[:, -1])
    return _estimate(samples, wealth.bankrupt)


def estimate_value_power(
    scenario: MarketScenario, mort: MortalityCurve, contract: InsuranceContract,
    strategy: StrategyRule, kappa: float, x0: float, drivers: DriverPaths,
    wealth: WealthPath | None = None, workers: int = 1,
) -> ValueEstimate:
    """MC mean of int D [xi^k + lam (1+zeta/eta)^k] X^k / k + D(T) X(T)^k / k on log-form wealth."""
    if strategy.mode != "fractional":
        raise ValueError("power utility needs a fractional strategy")
    if not x0 > 0:
        raise ValueError("power utility needs x0 > 0")
    if wealth is None:
        wealth = simulate_wealth_power_logform(scenario, strategy, drivers, x0, workers)
    if np.any(wealth.wealth <= 0):
        raise ValueError("nonpositive wealth in power mode")
    fp = _functional_paths("power", kappa, scenario, mort, contract, strategy, wealth)
    samples = fp.running[:, -1] + fp.discount[-1] * _terminal("power", kappa, fp.wealth[:, -1])
    return _estimate(samples, wealth.bankrupt)


# --------------------------------------------------------------------------- drift of R


def drift_exponential(
    loc: LocalMarket, act: Actuarial, delta: float, x, y, z, upsilon, h, u: Controls
) -> np.ndarray:
    """A(t) for exponential utility: <= 0 for every control, 0 at the minimiser."""
    x, y, h = (np.asarray(a, float) for a in (x, y, h))
    theta, c, p = u.portfolio, u.consumption, u.premium
    v = exposures(loc, theta)
    gap = v - z
    out = (
        -(np.exp(delta * (x - y - c)) + act.lam * np.exp(-delta * (y + p / act.eta))) / delta
        + (act.rho + act.lam) / delta + loc.r * x + excess_drift(loc, theta) - c - p + h
        - 0.5 * delta * np.sum(gap * gap, axis=-1)
    )
    if loc.n_atoms:
        g = jump_exposures(loc, theta)
        out = out - m_function(np.asarray(upsilon, float) - g, delta) @ loc.weights
    return out


def drift_power(loc: LocalMarket, act: Actuarial, kappa: float, y, z, upsilon, h1, u: Controls) -> np.ndarray:
    """A(t) for power utility, F(xi, zeta, pi) - h1/kappa."""
    k = kappa
    y, h1 = np.asarray(y, float), np.asarray(h1, float)
    pi, xi, zeta = u.portfolio, u.consumption, u.premium
    v = exposures(loc, pi)
    z = np.asarray(z, float)
    portfolio_term = (
        -excess_drift(loc, pi) + 0.5 * (1 - k) * np.sum(v * v, axis=-1) - np.sum(v * z, axis=-1)
    )
    if loc.n_atoms:
        g = jump_exposures(loc, pi)
        ups = np.asarray(upsilon, float)
        if np.any(1.0 + g <= 0):
            raise ValueError("portfolio violates 1 + <pi, gamma_hat> > 0")
        portfolio_term = portfolio_term - (
            (np.power(1.0 + g, k) * np.exp(ups) - 1.0 - k * g - ups) / k
        ) @ loc.weights
    F = (
        np.exp(-y) * (np.power(xi, k) + act.lam * np.power(1.0 + zeta / act.eta, k)) / k
        - xi - zeta - (act.rho + act.lam) / k + loc.r + np.sum(z * z, axis=-1) / (2 * k) - portfolio_term
    )
    return F - h1 / k


@dataclass(frozen=True)
class DriftReport:
    values: np.ndarray  # (samples, nodes) over nodes 0..N-1
    max_positive_excursion: float
    rms_residual_at_optimum: float

    def __post_init__(self) -> None:
        if not (np.isfinite(self.max_positive_excursion) and np.isfinite(self.rms_residual_at_optimum)):
            raise ValueError("drift report fields must be finite")

    def node_statistics(self) -> IncrementCheck:
        """Per-node sample mean of A and its standard error over the sampled states."""
        n = self.values.shape[0]
        se = self.values.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.zeros(self.values.shape[1])
        return IncrementCheck(self.values.mean(axis=0), se)


def _state_on_node(solution: BsdeSolution | None, i: int, x: np.ndarray, n_atoms: int) -> CompanionState:
    n = x.shape[0]
    if solution is None:
        return CompanionState(np.zeros(n), np.zeros((n, 3)), np.zeros((n, n_atoms)))
    comp = _companion(solution, i, x)
    return CompanionState(
        np.broadcast_to(comp.y, (n,)), np.broadcast_to(comp.z, (n, 3)), np.broadcast_to(comp.upsilon, (n, n_atoms))
    )


def drift_residual(
    scenario: MarketScenario, mort: MortalityCurve, contract: InsuranceContract,
    utility: UtilitySpec, solution: BsdeSolution | None, strategy: StrategyRule,
    states: np.ndarray, boxes: Boxes | None,
) -> DriftReport:
    """A(t) at sampled wealth states (samples, N+1) under ``strategy``.

    (Y, Z, Upsilon) come from the solution's feedback fits, or from its
    deterministic values.  The generator is recomputed at the same inputs, so
    A is the gap between the generator's optimum and the chosen controls.
    """
    grid = solution.grid if solution is not None else TimeGrid(scenario.horizon, states.shape[1] - 1)
    if states.shape[1] != grid.steps + 1:
        raise ValueError("sample states do not match the solution grid")
    locs, acts = _node_data(scenario, mort, contract, grid)
    n_atoms = scenario.jumps.n_atoms
    out = np.empty((states.shape[0], grid.steps))
    for i in range(grid.steps):
        x = np.asarray(states[:, i], float)
        st = _state_on_node(solution, i, x, n_atoms)
        u = strategy.controls(i, grid.nodes[i], x, st)
        n = x.shape[0]
        u = _broadcast(u, n)
        if utility.kind == "exponential":
            b = exponential_generator_batch(locs[i], acts[i], utility.delta, boxes, x, st.y, st.z, st.upsilon)
            out[:, i] = drift_exponential(locs[i], acts[i], utility.delta, x, st.y, st.z, st.upsilon, b.h, u)
        else:
            b = power_generator_batch(locs[i], acts[i], utility.kappa, boxes, st.y, st.z, st.upsilon)
            out[:, i] = drift_power(locs[i], acts[i], utility.kappa, st.y, st.z, st.upsilon, b.h, u)
    return DriftReport(out, float(max(out.max(initial=0.0), 0.0)), float(np.sqrt(np.mean(out * out))))


# --------------------------------------------------------------------------- R process


def _y_on_paths(solution: BsdeSolution, wealth: np.ndarray) -> np.ndarray:
    if solution.mode == "deterministic":
        return np.broadcast_to(solution.Y, wealth.shape)
    if solution.feedback is None:
        raise ValueError("per-path solution needs feedback fits to evaluate Y off its own paths")
    return np.column_stack([solution.feedback.y_at(i, wealth[:, i]) for i in range(wealth.shape[1])])


def verification_process(
    utility: UtilitySpec, scenario: MarketScenario, mort: MortalityCurve, contract: InsuranceContract,
    solution: BsdeSolution, strategy: StrategyRule, wealth: WealthPath,
) -> np.ndarray:
    """R on every node and path, shape (paths, N+1)."""
    fp = _functional_paths(utility.kind, utility.parameter, scenario, mort, contract, strategy, wealth, solution)
    Y = _y_on_paths(solution, fp.wealth)
    D = fp.discount[None, :]
    if utility.kind == "exponential":
        return fp.running - D * fp.wealth_term * np.exp(utility.delta * Y)
    k = utility.kappa
    return fp.running + D * fp.wealth_term * np.exp(Y) / k


@dataclass(frozen=True)
class IncrementCheck:
    """Per-node sample means of R increments and their standard errors."""

    mean: np.ndarray
    standard_error: np.ndarray

    @property
    def z_scores(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(self.standard_error > 0, self.mean / self.standard_error, 0.0)
        return np.where((self.standard_error == 0) & (self.mean != 0), np.inf * np.sign(self.mean), z)

    @property
    def worst_z(self) -> float:
        return float(np.max(np.abs(self.z_scores), initial=0.0))

    def within(self, n_se: float = SE_THRESHOLD, atol: float = 0.0) -> np.ndarray:
        """Per node: |mean| <= n_se * SE + atol (``atol`` absorbs roundoff where SE is 0)."""
        return np.abs(self.mean) <= n_se * self.standard_error + atol


def increment_check(R: np.ndarray) -> IncrementCheck:
    inc = np.diff(R, axis=1)
    n = inc.shape[0]
    se = inc.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.zeros(inc.shape[1])
    return IncrementCheck(inc.mean(axis=0), se)


@dataclass(frozen=True)
class StrategyGap:
    name: str
    gap: float
    standard_error: float
    optimal: bool
    increments: IncrementCheck | None = field(default=None, repr=False)
    flagged_fraction: float = 0.0
    terminal: np.ndarray | None = field(default=None, repr=False)  # R(T) per path, NaN where flagged

    @property
    def tested(self) -> bool:
        """False when every path was flagged: no admissible sample to test."""
        return self.flagged_fraction < 1.0

    @property
    def gap_in_se(self) -> float:
        if self.standard_error == 0:
            return 0.0 if self.gap == 0 else float(np.inf * np.sign(self.gap))
        return self.gap / self.standard_error

    @property
    def passed(self) -> bool:
        if not self.tested:
            return not self.optimal
        if self.optimal:
            return abs(self.gap) <= SE_THRESHOLD * self.standard_error + _roundoff(self.gap)
        return self.gap <= SE_THRESHOLD * self.standard_error + _roundoff(self.gap)


def _roundoff(v: float) -> float:
    return 64 * np.finfo(float).eps * max(1.0, abs(v))


def _simulate(utility, scenario, strategy, drivers, x0, solution, workers):
    if utility.kind == "power":
        return simulate_wealth_power_logform(scenario, strategy, drivers, x0, workers)
    return simulate_wealth(scenario, strategy, drivers, x0, workers=workers)


def supermartingale_check(
    scenario: MarketScenario, mort: MortalityCurve, contract: InsuranceContract,
    utility: UtilitySpec, solution: BsdeSolution, strategies: Sequence[tuple[str, StrategyRule, bool]],
    x0: float, drivers: DriverPaths, workers: int = 1,
) -> list[StrategyGap]:
    """E[R(T)] - R(0) per strategy on one set of drivers.

    ``strategies`` holds (name, rule, is_optimal).  Flagged paths are dropped.
    """
    rows = []
    for name, rule, optimal in strategies:
        wealth = _simulate(utility, scenario, rule, drivers, x0, solution, workers)
        R = verification_process(utility, scenario, mort, contract, solution, rule, wealth)
        flagged = float(np.mean(wealth.bankrupt))
        terminal = np.where(wealth.bankrupt, np.nan, R[:, -1])
        R = R[~wealth.bankrupt]
        if R.shape[0] == 0:
            rows.append(StrategyGap(name, float("nan"), float("nan"), optimal, None, flagged, terminal))
            continue
        end = R[:, -1]
        se = float(end.std(ddof=1) / np.sqrt(end.size)) if end.size > 1 else 0.0
        rows.append(
            StrategyGap(name, float(end.mean() - R[0, 0]), se, optimal, increment_check(R), flagged, terminal)
        )
    return rows


# --------------------------------------------------------------------------- optimality separation


@dataclass(frozen=True)
class SeparationEntry:
    """J(strategy) - J(optimal) on common drivers.

    ``paired_se`` is the SE of the per-path difference (used for "not better
    than optimal"); ``unpaired_se`` combines the two marginal SEs and is the
    larger, stricter yardstick for "clearly worse".
    """

    name: str
    difference: float
    paired_se: float
    unpaired_se: float

    @property
    def not_better(self) -> bool:
        if not np.isfinite(self.difference):
            return True
        return bool(self.difference <= SE_THRESHOLD * self.paired_se + _roundoff(self.difference))

    @property
    def clearly_worse(self) -> bool:
        return bool(np.isfinite(self.difference) and self.difference <= -SEPARATION_SE * self.unpaired_se)


@dataclass(frozen=True)
class SeparationReport:
    entries: tuple[SeparationEntry, ...]

    @property
    def all_not_better(self) -> bool:
        return all(e.not_better for e in self.entries)

    @property
    def any_clearly_worse(self) -> bool:
        return any(e.clearly_worse for e in self.entries)

    @property
    def passed(self) -> bool:
        return self.all_not_better and self.any_clearly_worse


def _mean_se(a: np.ndarray) -> tuple[float, float]:
    if a.size == 0:
        return float("nan"), float("nan")
    return float(a.mean()), float(a.std(ddof=1) / np.sqrt(a.size)) if a.size > 1 else 0.0


def separation_check(gaps: Sequence[StrategyGap]) -> SeparationReport:
    """Compare every non-optimal strategy with the optimal one path by path.

    R(T) equals the realised objective because Y(T) = 0, so the stored
    terminal values are the objective samples.  Paths flagged under either
    strategy are dropped from the paired difference.
    """
    optimal = [g for g in gaps if g.optimal]
    if len(optimal) != 1 or optimal[0].terminal is None:
        raise ValueError("separation needs exactly one optimal strategy with terminal samples")
    ref = optimal[0].terminal
    _, ref_se = _mean_se(ref[np.isfinite(ref)])
    out = []
    for g in gaps:
        if g.optimal or g.terminal is None:
            continue
        both = np.isfinite(g.terminal) & np.isfinite(ref)
        diff, paired = _mean_se(g.terminal[both] - ref[both])
        _, own_se = _mean_se(g.terminal[np.isfinite(g.terminal)])
        out.append(SeparationEntry(g.name, diff, paired, float(np.hypot(own_se, ref_se))))
    return SeparationReport(tuple(out))


# --------------------------------------------------------------------------- value consistency


@dataclass(frozen=True)
class ConsistencyEntry:
    v_formula: float
    j_mc: float
    standard_error: float

    @property
    def discrepancy_se(self) -> float:
        d = abs(self.v_formula - self.j_mc)
        if self.standard_error == 0:
            return 0.0 if d <= _roundoff(self.v_formula) else float("inf")
        return d / self.standard_error


def value_formula(utility: UtilitySpec, y0: float, x0: float) -> float:
    if utility.kind == "exponential":
        return float(-np.exp(-utility.delta * (x0 - y0)))
    k = utility.kappa
    return float(x0**k / k * np.exp(y0))


def value_consistency(
    scenario: MarketScenario, mort: MortalityCurve, contract: InsuranceContract,
    utility: UtilitySpec, solution: BsdeSolution, strategy: StrategyRule, x0: float,
    drivers: DriverPaths, workers: int = 1,
) -> tuple[ConsistencyEntry, ValueEstimate]:
    if utility.kind == "exponential":
        est = estimate_value_exponential(scenario, mort, contract, strategy, utility.delta, x0, drivers,
                                         solution=solution, workers=workers)
        y0 = float(_y_on_paths(solution, np.full((1, solution.grid.steps + 1), x0))[0, 0]) \
            if solution.mode == "per-path" else float(solution.Y[0])
    else:
        est = estimate_value_power(scenario, mort, contract, strategy, utility.kappa, x0, drivers, workers=workers)
        y0 = float(solution.Y[0])
    return ConsistencyEntry(value_formula(utility, y0, x0), est.mean, est.standard_error), est


# --------------------------------------------------------------------------- BMO and bounded processes


@dataclass(frozen=True)
class BmoReport:
    bmo_constant_estimate: float
    positivity_violations: int


def bmo_diagnostics(
    loadings: np.ndarray, dt: float, jump_sizes: np.ndarray | None = None,
    jump_counts: np.ndarray | None = None, weights: np.ndarray | None = None,
) -> BmoReport:
    """Largest remaining predictable quadratic variation over paths and nodes.

    ``loadings`` are Brownian integrands (paths, steps, d); ``jump_sizes``
    (paths, steps, atoms) the jump integrands, compensated with ``weights``.
    The pathwise maximum bounds the conditional one from above.
    """
    qv = np.sum(np.asarray(loadings, float) ** 2, axis=-1) * dt
    violations = 0
    if jump_sizes is not None and np.size(jump_sizes):
        s = np.asarray(jump_sizes, float)
        w = np.ones(s.shape[-1]) if weights is None else np.asarray(weights, float)
        qv = qv + (s * s) @ w * dt
        hit = np.ones(s.shape, dtype=bool) if jump_counts is None else np.asarray(jump_counts) > 0
        violations = int(np.count_nonzero(hit & (s <= -1.0)))
    remaining = np.cumsum(qv[:, ::-1], axis=1)[:, ::-1]
    return BmoReport(float(remaining.max(initial=0.0)), violations)


def strategy_loadings(
    utility: UtilitySpec, scenario: MarketScenario, controls: list[Controls], grid: TimeGrid
) -> tuple[np.ndarray, np.ndarray]:
    """Integrands of the martingale in the stochastic-exponential factorisation.

    Exponential: -delta v and exp(-delta g) - 1.  Power: kappa v and kappa ln(1 + g).
    """
    brown, jumps = [], []
    for i in range(grid.steps):
        loc = local_market(scenario, grid.nodes[i])
        v = exposures(loc, controls[i].portfolio)
        g = jump_exposures(loc, controls[i].portfolio)
        if utility.kind == "exponential":
            brown.append(-utility.delta * v)
            jumps.append(np.expm1(-utility.delta * g))
        else:
            brown.append(utility.kappa * v)
            jumps.append(utility.kappa * np.log1p(g))
    return np.stack(brown, axis=1), np.stack(jumps, axis=1)


@dataclass(frozen=True)
class BoundCheck:
    values: np.ndarray  # (paths, N+1)
    bound: np.ndarray  # (paths, N+1) or (N+1,)

    @property
    def within(self) -> bool:
        return bool(np.all(np.abs(self.values) <= self.bound * (1 + 1e-12) + 1e-300))


def _box_extremes(boxes: Boxes):
    lo, hi = boxes.lower, boxes.upper
    corners = np.array(np.meshgrid(*zip(lo, hi), indexing="ij")).reshape(3, -1).T
    return corners


def _jump_range(loc: LocalMarket, boxes: Boxes) -> tuple[np.ndarray, np.ndarray]:
    """Per-atom range of <portfolio, gamma_hat> over the box (linear, so corners suffice)."""
    g = jump_exposures(loc, _box_extremes(boxes))
    return g.min(axis=0), g.max(axis=0)


def k_process(
    scenario: MarketScenario, strategy_controls: list[Controls], wealth: np.ndarray, delta: float,
    grid: TimeGrid, boxes: Boxes,
) -> BoundCheck:
    """K(t) (left-point sums) with the bound from box and coefficient bounds.

    The r X term has no a priori bound, so it enters with each path's own
    running maximum of |X|.
    """
    n = wealth.shape[0]
    K = np.zeros((n, grid.steps + 1))
    bound = np.zeros((n, grid.steps + 1))
    corners = _box_extremes(boxes)
    c_max = max(abs(v) for v in boxes.consumption)
    p_max = max(abs(v) for v in boxes.premium)
    xmax = np.maximum.accumulate(np.abs(wealth), axis=1)
    for i in range(grid.steps):
        loc = local_market(scenario, grid.nodes[i])
        u = strategy_controls[i]
        v = exposures(loc, u.portfolio)
        integrand = -delta * (loc.r * wealth[:, i] + excess_drift(loc, u.portfolio) - u.consumption - u.premium)
        integrand = integrand + 0.5 * delta * np.sum(v * v, axis=-1)
        level = delta * (abs(loc.r) * xmax[:, i] + np.max(np.abs(excess_drift(loc, corners))) + c_max + p_max)
        level = level + 0.5 * delta * np.max(np.sum(exposures(loc, corners) ** 2, axis=-1))
        if loc.n_atoms:
            g = jump_exposures(loc, u.portfolio)
            integrand = integrand + (np.expm1(-delta * g) + delta * g) @ loc.weights
            gl, gh = _jump_range(loc, boxes)
            edge = np.maximum(np.expm1(-delta * gl) + delta * gl, np.expm1(-delta * gh) + delta * gh)
            level = level + edge @ loc.weights
        K[:, i + 1] = K[:, i] + integrand * grid.dt
        bound[:, i + 1] = bound[:, i] + level * grid.dt
    return BoundCheck(K, bound)


def q_process(
    scenario: MarketScenario, strategy_controls: list[Controls], kappa: float, grid: TimeGrid, boxes: Boxes,
    n_paths: int,
) -> BoundCheck:
    """Q(t) (left-point sums) with its deterministic bound over the boxes."""
    k = kappa
    Q = np.zeros((n_paths, grid.steps + 1))
    bound = np.zeros(grid.steps + 1)
    corners = _box_extremes(boxes)
    xi_max = max(abs(v) for v in boxes.consumption)
    zeta_max = max(abs(v) for v in boxes.premium)

    def jump_term(g):
        return 1.0 - k * np.log1p(g) - np.power(1.0 + g, -k)

    for i in range(grid.steps):
        loc = local_market(scenario, grid.nodes[i])
        u = strategy_controls[i]
        v = exposures(loc, u.portfolio)
        integrand = (
            loc.r + excess_drift(loc, u.portfolio) - u.consumption - u.premium
            + 0.5 * k * (k - 1) * np.sum(v * v, axis=-1)
        )
        level = (
            abs(loc.r) + np.max(np.abs(excess_drift(loc, corners))) + xi_max + zeta_max
            + 0.5 * abs(k * (k - 1)) * np.max(np.sum(exposures(loc, corners) ** 2, axis=-1))
        )
        if loc.n_atoms:
            g = jump_exposures(loc, u.portfolio)
            integrand = integrand + jump_term(g) @ loc.weights
            gl, gh = _jump_range(loc, boxes)
            if np.any(1.0 + gl <= 0):
                raise ValueError("portfolio box allows 1 + <pi, gamma_hat> <= 0")
            level = level + np.maximum(np.abs(jump_term(gl)), np.abs(jump_term(gh))) @ loc.weights
        Q[:, i + 1] = Q[:, i] + np.broadcast_to(integrand, (n_paths,)) * grid.dt
        bound[i + 1] = bound[i] + level * grid.dt
    return BoundCheck(Q, bound)


# --------------------------------------------------------------------------- full report


@dataclass(frozen=True)
class VerificationReport:
    supermartingale_gaps: tuple[StrategyGap, ...]
    value_consistency: float
    bmo_constant_estimate: float
    positivity_violations: int
    consistency: ConsistencyEntry
    drift: DriftReport | None = None
    bounded_process_within: bool = True
    tested_strategies: tuple[str, ...] = ()
    separation: SeparationReport | None = None
    drift_other_max: float = 0.0

    def __post_init__(self) -> None:
        if not np.isfinite(self.bmo_constant_estimate):
            raise ValueError("BMO estimate must be finite")

    @property
    def passed(self) -> bool:
        return (
            all(g.passed for g in self.supermartingale_gaps)
            and self.value_consistency <= SE_THRESHOLD
            and self.positivity_violations == 0
            and self.bounded_process_within
            and (self.drift is None or self.drift.max_positive_excursion <= DRIFT_TOLERANCE)
            and self.drift_other_max <= DRIFT_TOLERANCE
            and (self.separation is None or self.separation.passed)
        )

    def rows(self) -> list[dict[str, object]]:
        out: list[dict[str, object]] = [
            {"check": "value_consistency", "strategy": "optimal", "value": self.consistency.j_mc,
             "reference": self.consistency.v_formula, "standard_error": self.consistency.standard_error,
             "se_units": self.value_consistency, "passed": self.value_consistency <= SE_THRESHOLD},
        ]
        for g in self.supermartingale_gaps:
            out.append({"check": "supermartingale_gap" if g.tested else "untested_all_flagged",
                        "strategy": g.name, "value": g.gap, "reference": 0.0,
                        "standard_error": g.standard_error, "se_units": g.gap_in_se if g.tested else float("nan"),
                        "passed": g.passed})
        if self.drift is not None:
            out.append({"check": "drift_max_positive", "strategy": "optimal",
                        "value": self.drift.max_positive_excursion, "reference": 0.0, "standard_error": 0.0,
                        "se_units": 0.0, "passed": self.drift.max_positive_excursion <= DRIFT_TOLERANCE})
            out.append({"check": "drift_rms_at_optimum", "strategy": "optimal",
                        "value": self.drift.rms_residual_at_optimum, "reference": 0.0, "standard_error": 0.0,
                        "se_units": 0.0, "passed": True})
        out.append({"check": "drift_max_positive_other", "strategy": "tested", "value": self.drift_other_max,
                    "reference": 0.0, "standard_error": 0.0, "se_units": 0.0,
                    "passed": self.drift_other_max <= DRIFT_TOLERANCE})
        if self.separation is not None:
            for e in self.separation.entries:
                out.append({"check": "separation", "strategy": e.name, "value": e.difference, "reference": 0.0,
                            "standard_error": e.paired_se,
                            "se_units": e.difference / e.paired_se if e.paired_se > 0 else 0.0,
                            "passed": e.not_better})
            out.append({"check": "separation_far_worse", "strategy": "any", "value":
                        float(self.separation.any_clearly_worse), "reference": 1.0, "standard_error": 0.0,
                        "se_units": 0.0, "passed": self.separation.any_clearly_worse})
        out.append({"check": "bmo_constant", "strategy": "optimal", "value": self.bmo_constant_estimate,
                    "reference": 0.0, "standard_error": 0.0, "se_units": 0.0, "passed": True})
        out.append({"check": "positivity_violations", "strategy": "optimal", "value": self.positivity_violations,
                    "reference": 0, "standard_error": 0.0, "se_units": 0.0,
                    "passed": self.positivity_violations == 0})
        out.append({"check": "bounded_process", "strategy": "optimal", "value": float(self.bounded_process_within),
                    "reference": 1.0, "standard_error": 0.0, "se_units": 0.0, "passed": self.bounded_process_within})
        return out

    def summary(self) -> str:
        lines = [
            f"value consistency: V={self.consistency.v_formula:.10g} J={self.consistency.j_mc:.10g} "
            f"SE={self.consistency.standard_error:.3g} ({self.value_consistency:.2f} SE)",
        ]
        for g in self.supermartingale_gaps:
            tag = "optimal" if g.optimal else "tested"
            if not g.tested:
                lines.append(f"  {g.name:<24} {tag:<8} not tested: every path flagged bankrupt")
                continue
            flagged = f" flagged={g.flagged_fraction:.3f}" if g.flagged_fraction else ""
            lines.append(f"  {g.name:<24} {tag:<8} gap={g.gap:+.4e} ({g.gap_in_se:+.2f} SE){flagged} "
                         f"{'ok' if g.passed else 'FAIL'}")
        if self.drift is not None:
            lines.append(f"drift: max positive {self.drift.max_positive_excursion:.3e}, "
                         f"rms at optimum {self.drift.rms_residual_at_optimum:.3e}")
        lines.append(f"drift at tested non-optimal strategies: max positive {self.drift_other_max:.3e}")
        if self.separation is not None:
            worst = max((e.difference / e.paired_se for e in self.separation.entries if e.paired_se > 0),
                        default=0.0)
            lines.append(f"separation: all not better {self.separation.all_not_better} "
                         f"(largest {worst:+.2f} paired SE), clearly worse exists {self.separation.any_clearly_worse}")
        lines.append(f"BMO estimate {self.bmo_constant_estimate:.6g}, positivity violations "
                     f"{self.positivity_violations}, bounded process within bound: {self.bounded_process_within}")
        lines.append("overall: " + ("PASS" if self.passed else "FAIL"))
        return "\n".join(lines)


def random_constant_strategies(
    mode: str, boxes: Boxes, count: int, seed: int, scenario: MarketScenario | None = None
) -> list[tuple[str, StrategyRule, bool]]:
    """Constant strategies drawn uniformly from the boxes (feasible for power jumps)."""
    rng = np.random.default_rng(seed)
    out = []
    loc = local_market(scenario, 0.0) if scenario is not None else None
    while len(out) < count:
        pi = rng.uniform(boxes.lower, boxes.upper)
        if mode == "fractional" and loc is not None and loc.n_atoms and np.any(1 + jump_exposures(loc, pi) <= 0):
            continue
        c = rng.uniform(*boxes.consumption)
        p = rng.uniform(*boxes.premium)
        out.append((f"random_{len(out):02d}", StrategyRule.constant(mode, pi, c, p, boxes), False))
    return out


def far_perturbation(
    scenario: MarketScenario, solution: BsdeSolution, optimal: StrategyRule, boxes: Boxes, x0: float
) -> tuple[str, StrategyRule, bool]:
    """Constant strategy at the box corner farthest from the optimum at (0, x0).

    In fractional mode with jumps, corners that break 1 + <pi, gamma> > 0 are
    skipped in favour of the farthest admissible one.
    """
    x = np.array([float(x0)])
    u = optimal.controls(0, 0.0, x, _state_on_node(solution, 0, x, scenario.jumps.n_atoms))
    pi0 = np.asarray(u.portfolio, float).reshape(-1, 3)[0]
    loc = local_market(scenario, 0.0)
    corners = np.array(np.meshgrid(*boxes.portfolio, indexing="ij")).reshape(3, -1).T
    order = np.argsort(-np.linalg.norm(corners - pi0, axis=1), kind="stable")
    pick = None
    for k in order:
        if optimal.mode == "absolute" or not loc.n_atoms or np.all(1 + jump_exposures(loc, corners[k]) > 0):
            pick = corners[k]
            break
    if pick is None:
        raise ValueError("no admissible portfolio corner for the far perturbation")

    def far_end(value: float, box: tuple[float, float]) -> float:
        lo, hi = box
        return lo if abs(value - lo) >= abs(value - hi) else hi

    c = far_end(float(np.ravel(u.consumption)[0]), boxes.consumption)
    p = far_end(float(np.ravel(u.premium)[0]), boxes.premium)
    return "far_corner", StrategyRule.constant(optimal.mode, pick, c, p, boxes), False


def verify(
    scenario: MarketScenario, mort: MortalityCurve, contract: InsuranceContract,
    utility: UtilitySpec, solution: BsdeSolution, optimal: StrategyRule, boxes: Boxes,
    x0: float, drivers: DriverPaths, n_random: int = 20, seed: int = 0, workers: int = 1,
) -> VerificationReport:
    """Value consistency, supermartingale gaps, drift, BMO and bound checks in one pass."""
    strategies = [("optimal", optimal, True)] + random_constant_strategies(
        optimal.mode, boxes, n_random, seed, scenario
    ) + [far_perturbation(scenario, solution, optimal, boxes, x0)]
    gaps = supermartingale_check(scenario, mort, contract, utility, solution, strategies, x0, drivers, workers)
    separation = separation_check(gaps)
    consistency, _ = value_consistency(scenario, mort, contract, utility, solution, optimal, x0, drivers, workers)
    wealth = _simulate(utility, scenario, optimal, drivers, x0, solution, workers)
    grid = drivers.grid
    ctl = [_broadcast(u, wealth.n_paths) for u in _node_controls(optimal, grid, wealth.wealth, solution)]
    brown, jumps = strategy_loadings(utility, scenario, ctl, grid)
    bmo = bmo_diagnostics(brown, grid.dt, jumps, drivers.counts, scenario.jumps.weights)
    if utility.kind == "exponential":
        bounded = k_process(scenario, ctl, wealth.wealth, utility.delta, grid, boxes).within
    else:
        bounded = q_process(scenario, ctl, utility.kappa, grid, boxes, wealth.n_paths).within
    n_sample = min(wealth.n_paths, DRIFT_SAMPLES)
    drift = drift_residual(scenario, mort, contract, utility, solution, optimal, wealth.wealth[:n_sample], boxes)
    # A at the non-optimal strategies, on their own wealth paths
    few = drivers.subset(slice(0, n_sample))
    others = 0.0
    for _, rule, is_opt in strategies:
        if is_opt:
            continue
        w = _simulate(utility, scenario, rule, few, x0, solution, 1)
        states = w.wealth[~w.bankrupt]
        if states.shape[0]:
            rep = drift_residual(scenario, mort, contract, utility, solution, rule, states, boxes)
            others = max(others, rep.max_positive_excursion)
    return VerificationReport(
        tuple(gaps), consistency.discrepancy_se, bmo.bmo_constant_estimate, bmo.positivity_violations,
        consistency, drift, bounded, tuple(name for name, _, _ in strategies), separation, others,
    )
