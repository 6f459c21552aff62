"""Backward equations for both utilities.

* Power utility with deterministic coefficients: Y is deterministic, Z = 0,
  Upsilon = 0 and Y' = -h1(t, Y, 0, 0).  Solved by classical RK4 backward.
* Exponential utility: the generator contains (1 - r) x, so Y is coupled to
  the optimally controlled wealth.  Solved as a forward-backward system by
  Picard iteration on feedback functions x -> (Y, Z, Upsilon) fitted by
  regression Monte Carlo at each node.

The backward step is the trapezoidal theta-scheme

    Y_i = E_i[Y_{i+1} + (1 - theta) dt h_{i+1}] + theta dt h_i(Y_i)
    Z_i = E_i[(Y_{i+1} - E_i Y_{i+1}) dW_i] / dt
    Upsilon_i(z) = E_i[(Y_{i+1} - E_i Y_{i+1}) (dN_i(z) - w_z dt)] / (w_z dt)

with the implicit part solved by fixed-point iteration.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from typing import Callable, Literal, Protocol

import numpy as np
from scipy.optimize import brentq

from .generator import (
    Actuarial,
    exponential_scalar_part,
    power_scalar_part,
    solve_exponential_portfolio,
    solve_power_portfolio,
    _box_arrays,
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
    simulate_drivers,
)

FIXED_POINT_TOL = 1e-14
FIXED_POINT_ITERS = 100


class NonConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True, slots=True)
class RegressionSpec:
    degree: int = 2
    ridge: float = 1e-8

    def __post_init__(self) -> None:
        if self.degree < 0:
            raise ValueError("regression degree must be >= 0")
        if self.ridge < 0:
            raise ValueError("ridge must be nonnegative")


@dataclass(frozen=True, slots=True)
class PicardSettings:
    damping: float = 1.0
    max_iterations: int = 50
    tolerance: float = 1e-6
    initial_spread: float = 0.2

    def __post_init__(self) -> None:
        if not 0 < self.damping <= 1:
            raise ValueError("damping must lie in (0, 1]")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if not 0 <= self.initial_spread < 1:
            raise ValueError("initial_spread must lie in [0, 1)")


# --------------------------------------------------------------------------- regression


def basis_exponents(dim: int, degree: int) -> list[tuple[int, ...]]:
    """Monomial exponents of total degree <= ``degree`` in ``dim`` variables."""
    out = []
    for d in range(degree + 1):
        for combo in combinations_with_replacement(range(dim), d):
            e = [0] * dim
            for k in combo:
                e[k] += 1
            out.append(tuple(e))
    return out


def _design(std_state: np.ndarray, exponents: list[tuple[int, ...]]) -> np.ndarray:
    n, dim = std_state.shape
    top = max(max(e) for e in exponents)
    powers = np.ones((top + 1, n, dim))
    for p in range(1, top + 1):
        powers[p] = powers[p - 1] * std_state
    out = np.empty((n, len(exponents)))
    for j, e in enumerate(exponents):
        col = powers[e[0], :, 0].copy()
        for k in range(1, dim):
            col *= powers[e[k], :, k]
        out[:, j] = col
    return out


@dataclass(frozen=True, slots=True)
class FittedRegression:
    """Polynomial in standardised state variables; call it on new states."""

    coefficients: np.ndarray
    center: np.ndarray
    scale: np.ndarray
    exponents: tuple[tuple[int, ...], ...]
    degenerate: bool = False

    def __call__(self, state) -> np.ndarray:
        s = np.asarray(state, float)
        if s.ndim == 1:
            s = s[:, None]
        std = (s - self.center) / self.scale
        return _design(std, list(self.exponents)) @ self.coefficients

    @classmethod
    def constant(cls, value, dim: int = 1) -> "FittedRegression":
        value = np.atleast_1d(np.asarray(value, float))
        return cls(value[None, :] if value.size > 1 else value, np.zeros(dim), np.ones(dim), ((0,) * dim,))


def regression_conditional_expectation(state, target, spec: RegressionSpec = RegressionSpec()) -> FittedRegression:
    """Ridge least squares of ``target`` on a total-degree polynomial basis of ``state``.

    State columns with (numerically) no spread are dropped, so a cloud of
    identical states gives the constant fit.  ``target`` may be (n,) or (n, q).
    """
    s = np.asarray(state, float)
    if s.ndim == 1:
        s = s[:, None]
    y = np.asarray(target, float)
    n, dim = s.shape
    center = s.mean(axis=0)
    scale = s.std(axis=0)
    live = scale > 1e-10 * (1.0 + np.abs(center))
    scale = np.where(live, scale, 1.0)
    exps = [e for e in basis_exponents(dim, spec.degree) if all(p == 0 or live[k] for k, p in enumerate(e))]
    if n < len(exps):
        raise ValueError(f"regression needs at least {len(exps)} samples, got {n}")
    B = _design((s - center) / scale, exps)
    k = B.shape[1]
    reg = np.sqrt(spec.ridge) * np.eye(k)
    reg[0, 0] = 0.0  # the intercept is not shrunk
    A = np.vstack([B, reg])
    rhs = np.concatenate([y, np.zeros((k,) + y.shape[1:])])
    coef, _, rank, _ = np.linalg.lstsq(A, rhs, rcond=None)
    if not np.all(np.isfinite(coef)):
        raise np.linalg.LinAlgError("regression design is degenerate beyond ridge rescue")
    return FittedRegression(coef, center, scale, tuple(exps), degenerate=bool(rank < k))


# --------------------------------------------------------------------------- solutions


@dataclass(frozen=True)
class BsdeSolution:
    """(Y, Z, Upsilon) on the grid.

    Deterministic mode: ``Y`` is (N+1,), ``Z`` (N+1, 3), ``upsilon`` (N+1, atoms).
    Per-path mode: a leading path axis is added.  Z columns follow (W_r, W_I, W_S).
    """

    grid: TimeGrid
    mode: Literal["deterministic", "per-path"]
    Y: np.ndarray
    Z: np.ndarray
    upsilon: np.ndarray
    converged: bool = True
    flags: tuple[str, ...] = ()
    trace: tuple[float, ...] = ()
    feedback: "FeedbackFits | None" = field(default=None, repr=False)

    @property
    def y0(self) -> float:
        return float(self.Y[0]) if self.mode == "deterministic" else float(np.mean(self.Y[:, 0]))

    def state_at(self, i: int, sl: slice) -> CompanionState:
        if self.mode == "per-path":
            return CompanionState(self.Y[sl, i], self.Z[sl, i], self.upsilon[sl, i])
        m = sl.stop - sl.start
        return CompanionState(
            np.full(m, self.Y[i]), np.broadcast_to(self.Z[i], (m, 3)),
            np.broadcast_to(self.upsilon[i], (m, self.upsilon.shape[-1])),
        )

    def node_summary(self) -> dict[str, np.ndarray]:
        """Per-node means (and Y spread) for reporting."""
        if self.mode == "deterministic":
            out = {"Y_mean": self.Y, "Y_sd": np.zeros_like(self.Y)}
            z, u = self.Z, self.upsilon
        else:
            out = {"Y_mean": self.Y.mean(axis=0), "Y_sd": self.Y.std(axis=0)}
            z, u = self.Z.mean(axis=0), self.upsilon.mean(axis=0)
        for k, name in enumerate(("Z1", "Z2", "Z3")):
            out[f"{name}_mean"] = z[:, k]
        for a in range(u.shape[-1]):
            out[f"Upsilon{a}_mean"] = u[:, a]
        return out


@dataclass(frozen=True)
class FeedbackFits:
    """Per-node fitted maps wealth -> Y, Z, Upsilon (each a weighted sum of fits)."""

    y: tuple[tuple[tuple[float, FittedRegression], ...], ...]
    z: tuple[tuple[tuple[float, FittedRegression], ...], ...]
    upsilon: tuple[tuple[tuple[float, FittedRegression], ...], ...]
    n_atoms: int

    @staticmethod
    def _eval(terms, x, width):
        out = np.zeros((x.shape[0], width)) if width else np.zeros(x.shape[0])
        for w, fit in terms:
            v = fit(x)
            out = out + w * (v.reshape(out.shape) if width else v.reshape(-1))
        return out

    def y_at(self, i: int, x: np.ndarray) -> np.ndarray:
        return self._eval(self.y[i], np.asarray(x, float), 0)

    def at(self, i: int, x: np.ndarray) -> CompanionState:
        x = np.asarray(x, float)
        return CompanionState(
            self._eval(self.y[i], x, 0),
            self._eval(self.z[i], x, 3),
            self._eval(self.upsilon[i], x, self.n_atoms) if self.n_atoms else np.zeros((x.shape[0], 0)),
        )

    @classmethod
    def zero(cls, steps: int, n_atoms: int) -> "FeedbackFits":
        y = FittedRegression.constant(0.0)
        z = FittedRegression.constant(np.zeros(3))
        u = FittedRegression.constant(np.zeros(max(n_atoms, 1)))
        one = ((1.0, y),)
        return cls(
            tuple(one for _ in range(steps + 1)),
            tuple(((1.0, z),) for _ in range(steps + 1)),
            tuple(((1.0, u),) for _ in range(steps + 1)),
            n_atoms,
        )

    def blend(self, new: "FeedbackFits", damping: float) -> "FeedbackFits":
        if damping == 1.0:
            return new

        def mix(old_terms, new_terms):
            kept = tuple((w * (1 - damping), f) for w, f in old_terms if w * (1 - damping) > 1e-14)
            return kept + tuple((w * damping, f) for w, f in new_terms)

        return FeedbackFits(
            tuple(mix(a, b) for a, b in zip(self.y, new.y)),
            tuple(mix(a, b) for a, b in zip(self.z, new.z)),
            tuple(mix(a, b) for a, b in zip(self.upsilon, new.upsilon)),
            self.n_atoms,
        )


# --------------------------------------------------------------------------- generic backward pass


class NodeGenerator(Protocol):
    def __call__(self, i: int, state: np.ndarray, z: np.ndarray, upsilon: np.ndarray) -> Callable[[np.ndarray], np.ndarray]:
        """Return y -> h(t_i, state, y, z, upsilon) for the rows given."""


@dataclass(frozen=True)
class BackwardResult:
    solution: BsdeSolution
    fits: FeedbackFits
    degenerate_regressions: int


def _secant_fixed_point(
    anchor: np.ndarray, step: float, h: Callable[[np.ndarray], np.ndarray], start: np.ndarray
) -> tuple[np.ndarray, bool]:
    """Solve y = anchor + step * h(y) elementwise by secant steps on the residual."""
    y0 = start
    r0 = anchor + step * h(y0) - y0
    y1 = y0 + r0
    for _ in range(FIXED_POINT_ITERS):
        r1 = anchor + step * h(y1) - y1
        if np.max(np.abs(r1), initial=0.0) <= FIXED_POINT_TOL * (1.0 + np.max(np.abs(y1), initial=0.0)):
            return y1, True
        denom = r1 - r0
        slope_ok = np.abs(denom) > 1e-300
        # fall back to a plain fixed-point step where the secant is undefined
        y2 = np.where(slope_ok, y1 - r1 * (y1 - y0) / np.where(slope_ok, denom, 1.0), y1 + r1)
        y0, r0, y1 = y1, r1, y2
    return y1, False


def _solve_implicit(anchor: np.ndarray, step: float, h: Callable[[np.ndarray], np.ndarray]) -> tuple[np.ndarray, bool]:
    return _secant_fixed_point(anchor, step, h, anchor.copy())


def solve_bsde_regression(
    drivers: DriverPaths,
    states: np.ndarray,
    generator: NodeGenerator,
    spec: RegressionSpec = RegressionSpec(),
    theta: float = 0.5,
) -> BackwardResult:
    """Regression Monte Carlo backward pass with Y(T) = 0 on given state paths.

    ``states`` is (paths, N+1) or (paths, N+1, d); conditional expectations at
    node i are regressions on ``states[:, i]``.
    """
    grid = drivers.grid
    dt, N, n = grid.dt, grid.steps, drivers.n_paths
    n_atoms = drivers.n_atoms
    st = states if states.ndim == 3 else states[:, :, None]
    Y = np.zeros((n, N + 1))
    Z = np.zeros((n, N + 1, 3))
    U = np.zeros((n, N + 1, n_atoms))
    weights = drivers.weights
    jump_live = weights > 0
    fits_y = [((1.0, FittedRegression.constant(0.0, st.shape[2])),)] * (N + 1)
    fits_z = [((1.0, FittedRegression.constant(np.zeros(3), st.shape[2])),)] * (N + 1)
    fits_u = [((1.0, FittedRegression.constant(np.zeros(max(n_atoms, 1)), st.shape[2])),)] * (N + 1)
    degenerate = 0
    implicit_ok = True
    h_next = generator(N, st[:, N], Z[:, N], U[:, N])(Y[:, N])
    for i in range(N - 1, -1, -1):
        s = st[:, i]
        y_next = Y[:, i + 1]
        fit_anchor = regression_conditional_expectation(s, y_next + (1 - theta) * dt * h_next, spec)
        fit_mean = regression_conditional_expectation(s, y_next, spec)
        resid = y_next - fit_mean(s)
        dw = drivers.wealth_noise(i)
        fit_z = regression_conditional_expectation(s, resid[:, None] * dw / dt, spec)
        Z[:, i] = fit_z(s).reshape(n, 3)
        fit_u = FittedRegression.constant(np.zeros(max(n_atoms, 1)), st.shape[2])
        if n_atoms:
            comp = drivers.compensated_counts(i)
            scale = np.where(jump_live, weights * dt, 1.0)
            tgt = np.where(jump_live, resid[:, None] * comp / scale, 0.0)
            fit_u = regression_conditional_expectation(s, tgt, spec)
            U[:, i] = fit_u(s).reshape(n, n_atoms)
        h_of_y = generator(i, s, Z[:, i], U[:, i])
        Y[:, i], ok = _solve_implicit(fit_anchor(s).reshape(n), theta * dt, h_of_y)
        implicit_ok &= ok
        h_next = h_of_y(Y[:, i])
        fit_y = regression_conditional_expectation(s, Y[:, i], spec)
        degenerate += sum(f.degenerate for f in (fit_anchor, fit_mean, fit_z, fit_y))
        fits_y[i] = ((1.0, fit_y),)
        fits_z[i] = ((1.0, fit_z),)
        fits_u[i] = ((1.0, fit_u),)
    flags = () if implicit_ok else ("implicit_step_not_converged",)
    if degenerate:
        flags = flags + ("rank_deficient_regression",)
    sol = BsdeSolution(grid, "per-path", Y, Z, U, flags=flags)
    return BackwardResult(sol, FeedbackFits(tuple(fits_y), tuple(fits_z), tuple(fits_u), n_atoms), degenerate)


# --------------------------------------------------------------------------- per-node context


class _NodeContext:
    """Cached local market and actuarial data on grid nodes."""

    def __init__(self, scenario: MarketScenario, mort: MortalityCurve, contract: InsuranceContract, grid: TimeGrid):
        self.grid = grid
        self.locs = [local_market(scenario, t) for t in grid.nodes]
        self.acts = [Actuarial.at(t, mort, contract, scenario) for t in grid.nodes]


class ExponentialNodeGenerator:
    """h(t_i, x, y, z, upsilon) for exponential utility, portfolio solved once per call."""

    def __init__(self, ctx: _NodeContext, delta: float, boxes: Boxes | None):
        self.ctx, self.delta, self.boxes = ctx, delta, boxes
        self.saturated = False
        self.unconverged = 0
        self.starts: np.ndarray | None = None

    def portfolio(self, i: int, z: np.ndarray, ups: np.ndarray):
        lower, upper = _box_arrays(self.boxes)
        start = None
        if self.starts is not None and i < self.starts.shape[1] and self.starts.shape[0] == z.shape[0]:
            start = self.starts[:, i]
        sol, prob = solve_exponential_portfolio(self.ctx.locs[i], self.delta, z, ups, lower, upper, start)
        self.saturated |= bool(prob.saturated.any())
        self.unconverged += int((~sol.converged).sum())
        return sol

    def __call__(self, i, state, z, ups):
        x = state[:, 0] if state.ndim == 2 else state
        loc, act, delta = self.ctx.locs[i], self.ctx.acts[i], self.delta
        sol = self.portfolio(i, z, ups)
        base = -(act.rho + act.lam) / delta - loc.r * x + sol.value

        def h(y):
            return exponential_scalar_part(act, delta, self.boxes, x, y).value + base

        return h


class PowerNodeGenerator:
    """h1(t_i, y, z, upsilon) for power utility (no wealth dependence)."""

    def __init__(self, ctx: _NodeContext, kappa: float, boxes: Boxes | None):
        self.ctx, self.kappa, self.boxes = ctx, kappa, boxes
        self.saturated = False

    def __call__(self, i, state, z, ups):
        loc, act, k = self.ctx.locs[i], self.ctx.acts[i], self.kappa
        lower, upper = _box_arrays(self.boxes)
        sol, prob = solve_power_portfolio(loc, k, z, ups, lower, upper)
        self.saturated |= bool(prob.saturated.any())
        zz = np.einsum("ki,ki->k", z, z)
        base = -(act.rho + act.lam) / k + loc.r + zz / (2 * k) - sol.value

        def h(y):
            return k * (power_scalar_part(act, k, self.boxes, y).value + base)

        return h


# --------------------------------------------------------------------------- power: deterministic ODE


def _loc_key(loc: LocalMarket) -> tuple:
    return (
        loc.r, loc.b, loc.real_bond.A_tilde, tuple(loc.real_bond.C_tilde), loc.mu_I, loc.sigma_I,
        loc.mu_S, loc.sigma_S, tuple(loc.gamma_I), tuple(loc.gamma_S), tuple(loc.weights),
    )


class PowerOdeGenerator:
    """t, y -> h1(t, y, 0, 0) with the portfolio infimum cached per coefficient set.

    Stage times are read with left limits inside [t_left, t_right] so that a
    step never sees the coefficients of the next piece.
    """

    def __init__(self, scenario, mort, contract, kappa: float, boxes: Boxes | None):
        self.scenario, self.mort, self.contract = scenario, mort, contract
        self.kappa, self.boxes = kappa, boxes
        self._cache: dict[tuple, tuple[float, np.ndarray]] = {}
        self._local: dict[float, tuple[LocalMarket, Actuarial]] = {}
        self.saturated = False

    def local(self, t: float) -> tuple[LocalMarket, Actuarial]:
        if t not in self._local:
            self._local[t] = (
                local_market(self.scenario, t), Actuarial.at(t, self.mort, self.contract, self.scenario)
            )
        return self._local[t]

    def portfolio(self, t: float) -> tuple[float, np.ndarray]:
        loc, _ = self.local(t)
        key = _loc_key(loc)
        if key not in self._cache:
            lower, upper = _box_arrays(self.boxes)
            sol, prob = solve_power_portfolio(
                loc, self.kappa, np.zeros((1, 3)), np.zeros((1, loc.n_atoms)), lower, upper
            )
            self.saturated |= bool(prob.saturated.any())
            self._cache[key] = (float(sol.value[0]), sol.x[0])
        return self._cache[key]

    def __call__(self, t: float, y: float) -> float:
        k = self.kappa
        loc, act = self.local(t)
        p_val, _ = self.portfolio(t)
        part = power_scalar_part(act, k, self.boxes, y)
        return float(k * (part.value - (act.rho + act.lam) / k + loc.r - p_val))


def _stage_time(t: float, lo: float, hi: float) -> float:
    """Clamp into the step and take the left limit at its right end."""
    return min(max(t, lo), hi - 1e-9 * (hi - lo))


def solve_ode_power(
    scenario: MarketScenario,
    mort: MortalityCurve,
    contract: InsuranceContract,
    kappa: float,
    grid: TimeGrid,
    boxes: Boxes | None = None,
    generator: Callable[[float, float], float] | None = None,
) -> BsdeSolution:
    """Y' = -h1(t, Y, 0, 0), Y(T) = 0, by RK4 backward in time.

    ``generator`` replaces h1 (used to test the integrator in isolation).
    """
    gen = generator or PowerOdeGenerator(scenario, mort, contract, kappa, boxes)
    N, dt = grid.steps, grid.dt
    nodes = grid.nodes
    Y = np.zeros(N + 1)
    for i in range(N - 1, -1, -1):
        lo, hi = nodes[i], nodes[i + 1]
        y = Y[i + 1]
        k1 = gen(_stage_time(hi, lo, hi), y)
        k2 = gen(_stage_time(hi - dt / 2, lo, hi), y + dt / 2 * k1)
        k3 = gen(_stage_time(hi - dt / 2, lo, hi), y + dt / 2 * k2)
        k4 = gen(_stage_time(lo, lo, hi), y + dt * k3)
        Y[i] = y + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    flags = ("exponent_saturated",) if getattr(gen, "saturated", False) else ()
    n_atoms = scenario.jumps.n_atoms if scenario is not None else 0
    return BsdeSolution(grid, "deterministic", Y, np.zeros((N + 1, 3)), np.zeros((N + 1, n_atoms)), flags=flags)


def solve_ode_power_backward_euler(
    scenario, mort, contract, kappa: float, grid: TimeGrid, boxes: Boxes | None = None,
    generator: Callable[[float, float], float] | None = None,
) -> np.ndarray:
    """Implicit Euler reference: Y_i = Y_{i+1} + dt h1(t_i, Y_i), one root solve per step."""
    gen = generator or PowerOdeGenerator(scenario, mort, contract, kappa, boxes)
    N, dt = grid.steps, grid.dt
    nodes = grid.nodes
    Y = np.zeros(N + 1)
    for i in range(N - 1, -1, -1):
        t = _stage_time(nodes[i], nodes[i], nodes[i + 1])
        y_next = Y[i + 1]

        def resid(y):
            return y - y_next - dt * gen(t, y)

        guess = y_next + dt * gen(t, y_next)
        width = 1e-3 + 10 * abs(guess - y_next)
        lo, hi = guess - width, guess + width
        while resid(lo) * resid(hi) > 0:
            width *= 4
            lo, hi = guess - width, guess + width
        Y[i] = brentq(resid, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=200)
    return Y


def optimal_power_strategy(
    scenario: MarketScenario, mort: MortalityCurve, contract: InsuranceContract,
    kappa: float, boxes: Boxes, solution: BsdeSolution,
) -> StrategyRule:
    """Fractional feedback (pi*, xi*, zeta*) from a deterministic solution; wealth-independent."""
    if solution.mode != "deterministic":
        raise ValueError("the power strategy builder needs a deterministic solution")
    grid = solution.grid
    gen = PowerOdeGenerator(scenario, mort, contract, kappa, boxes)
    controls = []
    for i, t in enumerate(grid.nodes):
        act = Actuarial.at(t, mort, contract, scenario)
        tt = _stage_time(t, t, grid.nodes[min(i + 1, grid.steps)]) if i < grid.steps else t
        _, pi = gen.portfolio(tt)
        part = power_scalar_part(act, kappa, boxes, solution.Y[i])
        controls.append(Controls(pi, np.asarray(part.consumption), np.asarray(part.premium)))

    def rule(i, t, x, comp):
        return controls[i]

    return StrategyRule("fractional", rule, boxes)


# --------------------------------------------------------------------------- exponential: Picard FBSDE


class ExponentialControlMap:
    """Optimal absolute controls at node i from (x, y, z, upsilon)."""

    def __init__(self, ctx: _NodeContext, delta: float, boxes: Boxes | None):
        self.ctx, self.delta, self.boxes = ctx, delta, boxes

    def __call__(self, i: int, x: np.ndarray, comp: CompanionState, start=None) -> Controls:
        lower, upper = _box_arrays(self.boxes)
        sol, _ = solve_exponential_portfolio(
            self.ctx.locs[i], self.delta, comp.z, comp.upsilon, lower, upper, start
        )
        c, p = self.scalars(i, x, comp.y)
        return Controls(sol.x, c, p)

    def scalars(self, i: int, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        part = exponential_scalar_part(self.ctx.acts[i], self.delta, self.boxes, x, y)
        return part.consumption, part.premium


def _forward_trapezoid(
    ctx: _NodeContext, control: ExponentialControlMap, fits: FeedbackFits, drivers: DriverPaths, x_start: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Forward wealth under the feedback controls.

    The wealth-coupled part r x - c - p of the drift is drift-implicit
    trapezoidal (fixed point on x_{i+1}); the portfolio drift and the noise
    use the left node.  Returns wealth (paths, N+1) and the portfolio used on
    each step (paths, N, 3).
    """
    grid = ctx.grid
    dt, N = grid.dt, grid.steps
    n = drivers.n_paths
    X = np.empty((n, N + 1))
    portfolios = np.empty((n, N, 3))
    X[:, 0] = x_start
    x = x_start.astype(float)
    start = None
    for i in range(N):
        loc = ctx.locs[i]
        comp = fits.at(i, x)
        u = control(i, x, comp, start)
        start = u.portfolio
        portfolios[:, i] = u.portfolio
        v = exposures(loc, u.portfolio)
        explicit = excess_drift(loc, u.portfolio) * dt + np.einsum("ki,ki->k", v, drivers.wealth_noise(i))
        if loc.n_atoms:
            g = jump_exposures(loc, u.portfolio)
            explicit = explicit + np.einsum("ka,ka->k", g, drivers.compensated_counts(i))
        left = loc.r * x - u.consumption - u.premium
        anchor = x + 0.5 * dt * left + explicit
        nxt = ctx.locs[i + 1]
        nxt_i = i + 1

        def drift_half(y):
            c, p = control.scalars(nxt_i, y, fits.y_at(nxt_i, y))
            return nxt.r * y - c - p

        y, _ = _secant_fixed_point(anchor, 0.5 * dt, drift_half, x + left * dt + explicit)
        x = y
        X[:, i + 1] = x
    return X, portfolios


@dataclass(frozen=True)
class FbsdeResult:
    solution: BsdeSolution
    wealth: WealthPath


def _dispersed_start(x0: float, spread: float, n: int) -> np.ndarray:
    if spread == 0.0:
        return np.full(n, float(x0))
    q = (np.arange(n) + 0.5) / n * 2.0 - 1.0
    return x0 * (1.0 + spread * q)


def solve_fbsde_exponential(
    scenario: MarketScenario,
    mort: MortalityCurve,
    contract: InsuranceContract,
    delta: float,
    grid: TimeGrid,
    n_paths: int,
    x0: float,
    boxes: Boxes | None,
    regression: RegressionSpec = RegressionSpec(),
    picard: PicardSettings = PicardSettings(),
    seed: int = 0,
    drivers: DriverPaths | None = None,
    generator: NodeGenerator | None = None,
    workers: int = 1,
) -> FbsdeResult:
    """Damped Picard iteration between forward wealth and the regression backward pass.

    Each sweep simulates wealth under the controls implied by the current
    feedback fits, runs the backward pass on those paths and blends the new
    fits in with weight ``damping``.  Stops when successive per-path Y differ
    by less than ``tolerance`` everywhere.  With ``initial_spread > 0`` the
    sweeps start from wealth spread around x0 (so the fits see wealth
    variation even without noise); a final sweep from x0 itself produces the
    returned paths.
    """
    if not x0 > 0:
        raise ValueError("initial wealth must be positive")
    n_basis = len(basis_exponents(1, regression.degree))
    if n_paths < 10 * n_basis:
        raise ValueError(f"need at least {10 * n_basis} paths for a degree-{regression.degree} basis")
    if drivers is None:
        drivers = simulate_drivers(grid, scenario.jumps, seed, n_paths, workers)
    ctx = _NodeContext(scenario, mort, contract, grid)
    gen = generator or ExponentialNodeGenerator(ctx, delta, boxes)
    control = ExponentialControlMap(ctx, delta, boxes)
    fits = FeedbackFits.zero(grid.steps, scenario.jumps.n_atoms)
    start = _dispersed_start(x0, picard.initial_spread, drivers.n_paths)

    trace: list[float] = []
    prev_y = None
    converged = False
    for _ in range(picard.max_iterations):
        X, used = _forward_trapezoid(ctx, control, fits, drivers, start)
        if isinstance(gen, ExponentialNodeGenerator):
            gen.starts = used
        back = solve_bsde_regression(drivers, X, gen, regression)
        fits = fits.blend(back.fits, picard.damping)
        if prev_y is not None:
            trace.append(float(np.max(np.abs(back.solution.Y - prev_y))))
            if trace[-1] < picard.tolerance:
                converged = True
                break
        prev_y = back.solution.Y

    if picard.initial_spread > 0:
        X, used = _forward_trapezoid(ctx, control, fits, drivers, np.full(drivers.n_paths, float(x0)))
        if isinstance(gen, ExponentialNodeGenerator):
            gen.starts = used
        back = solve_bsde_regression(drivers, X, gen, regression)
    flags = list(back.solution.flags)
    if not converged:
        flags.append("picard_not_converged")
    if getattr(gen, "saturated", False):
        flags.append("exponent_saturated")
    sol = BsdeSolution(
        grid, "per-path", back.solution.Y, back.solution.Z, back.solution.upsilon,
        converged=converged, flags=tuple(flags), trace=tuple(trace), feedback=fits,
    )
    bankrupt = np.any(X < 0, axis=1)
    return FbsdeResult(sol, WealthPath(grid, "absolute", X, bankrupt))


def optimal_exponential_strategy(
    scenario: MarketScenario, mort: MortalityCurve, contract: InsuranceContract,
    delta: float, boxes: Boxes, solution: BsdeSolution,
) -> StrategyRule:
    """Absolute-mode feedback from the solution's fitted maps (usable on any drivers)."""
    if solution.feedback is None:
        raise ValueError("solution carries no feedback fits")
    ctx = _NodeContext(scenario, mort, contract, solution.grid)
    control = ExponentialControlMap(ctx, delta, boxes)
    fits = solution.feedback

    def rule(i, t, x, comp):
        return control(i, x, comp if comp is not None else fits.at(i, x))

    return StrategyRule("absolute", rule, boxes)
