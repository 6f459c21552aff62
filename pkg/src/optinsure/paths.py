"""Monte Carlo drivers, market assets and controlled wealth on a uniform grid.

Randomness comes from counter-based Philox substreams keyed by
``(seed, path block, driver tag)``, so a path's draws do not depend on the
number of paths requested, the worker count or the order blocks are run in.

Geometric processes use a multiplicative Milstein step for the diffusion,
``1 + m dt + s.dW + ((s.dW)^2 - |s|^2 dt) / 2``, followed by jump factors
``prod (1 + gamma_z)^{n_z}`` at step end; jump compensators sit in ``m``.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Literal, Sequence

import numpy as np

from .market import JumpMeasure, LocalMarket, MarketScenario, bond_loading_coefficients, local_market

BLOCK_SIZE = 4096
_TAG_BROWNIAN = 0
_TAG_POISSON = 1
_BOX_TOL = 1e-12

Mode = Literal["absolute", "fractional"]


@dataclass(frozen=True, slots=True)
class TimeGrid:
    horizon: float
    steps: int

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ValueError("grid needs at least one step")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(self.steps + 1) * self.dt

    def refined(self, factor: int) -> "TimeGrid":
        return TimeGrid(self.horizon, self.steps * factor)


@dataclass(frozen=True, slots=True)
class DriverPaths:
    """Brownian increments (paths, steps, 4) ordered (W_r, W_n, W_I, W_S)
    and Poisson counts (paths, steps, atoms)."""

    grid: TimeGrid
    brownian: np.ndarray
    counts: np.ndarray
    weights: np.ndarray
    seed: int | None = None

    @property
    def n_paths(self) -> int:
        return self.brownian.shape[0]

    @property
    def n_atoms(self) -> int:
        return self.counts.shape[2]

    @property
    def dW_r(self) -> np.ndarray:
        return self.brownian[:, :, 0]

    @property
    def dW_n(self) -> np.ndarray:
        return self.brownian[:, :, 1]

    @property
    def dW_I(self) -> np.ndarray:
        return self.brownian[:, :, 2]

    @property
    def dW_S(self) -> np.ndarray:
        return self.brownian[:, :, 3]

    def wealth_noise(self, i: int) -> np.ndarray:
        """Increments on (W_r, W_I, W_S) for step i, shape (paths, 3)."""
        return self.brownian[:, i][:, [0, 2, 3]]

    def compensated_counts(self, i: int) -> np.ndarray:
        return self.counts[:, i] - self.weights * self.grid.dt

    def subset(self, paths: slice) -> "DriverPaths":
        return DriverPaths(self.grid, self.brownian[paths], self.counts[paths], self.weights, self.seed)

    def coarsen(self, factor: int) -> "DriverPaths":
        """Aggregate consecutive steps; the coarse path is the same realisation."""
        n, steps, _ = self.brownian.shape
        if steps % factor:
            raise ValueError("factor must divide the number of steps")
        coarse = TimeGrid(self.grid.horizon, steps // factor)
        bw = self.brownian.reshape(n, coarse.steps, factor, 4).sum(axis=2)
        ct = self.counts.reshape(n, coarse.steps, factor, self.n_atoms).sum(axis=2)
        return DriverPaths(coarse, bw, ct, self.weights, self.seed)


def _block_generator(seed: int, block: int, tag: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(block, tag))
    return np.random.Generator(np.random.Philox(ss))


def _blocks(n_paths: int) -> list[slice]:
    return [slice(s, min(s + BLOCK_SIZE, n_paths)) for s in range(0, n_paths, BLOCK_SIZE)]


def _run_blocks(fn: Callable[[int, slice], None], n_paths: int, workers: int) -> None:
    blocks = list(enumerate(_blocks(n_paths)))
    if workers <= 1 or len(blocks) == 1:
        for b, sl in blocks:
            fn(b, sl)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for fut in [pool.submit(fn, b, sl) for b, sl in blocks]:
            fut.result()


def simulate_drivers(
    grid: TimeGrid, jumps: JumpMeasure, seed: int, n_paths: int, workers: int = 1
) -> DriverPaths:
    if n_paths < 1:
        raise ValueError("n_paths must be at least 1")
    n_atoms = jumps.n_atoms
    weights = jumps.weights
    brownian = np.empty((n_paths, grid.steps, 4))
    counts = np.zeros((n_paths, grid.steps, n_atoms), dtype=np.int64)
    sqdt = np.sqrt(grid.dt)
    lam = weights * grid.dt

    def fill(block: int, sl: slice) -> None:
        m = sl.stop - sl.start
        rng = _block_generator(seed, block, _TAG_BROWNIAN)
        brownian[sl] = rng.standard_normal((m, grid.steps, 4)) * sqdt
        if n_atoms:
            rng_j = _block_generator(seed, block, _TAG_POISSON)
            counts[sl] = rng_j.poisson(lam, size=(m, grid.steps, n_atoms))

    _run_blocks(fill, n_paths, workers)
    return DriverPaths(grid, brownian, counts, weights, seed)


def _geometric_factor(drift: float, dt: float, loadings: Sequence[float], increments: Sequence[np.ndarray]):
    """Milstein factor for dP/P = drift dt + sum_j loading_j dW_j (independent W_j)."""
    noise = 0.0
    var = 0.0
    for s, dw in zip(loadings, increments):
        if s != 0.0:
            noise = noise + s * dw
            var += s * s
    return 1.0 + drift * dt + noise + 0.5 * (noise * noise - var * dt)


def _jump_factor(loadings: np.ndarray, counts: np.ndarray):
    """prod_z (1 + loading_z)^{n_z} for counts of shape (paths, atoms)."""
    if counts.shape[1] == 0:
        return 1.0
    return np.prod(np.power(1.0 + loadings, counts), axis=1)


@dataclass(frozen=True, slots=True)
class MarketPaths:
    """Per-path, per-node asset values.

    ``indexed_bond`` and ``indexed_account`` are simulated from their own
    SDEs; the ``*_product`` properties rebuild them as CPI times real asset.
    """

    grid: TimeGrid
    index: np.ndarray
    real_bond: np.ndarray
    nominal_bond: np.ndarray
    indexed_bond: np.ndarray
    real_account: np.ndarray
    nominal_account: np.ndarray
    indexed_account: np.ndarray
    share: np.ndarray

    @property
    def indexed_bond_product(self) -> np.ndarray:
        return self.index * self.real_bond

    @property
    def indexed_account_product(self) -> np.ndarray:
        return self.index * self.real_account

    def all_prices(self) -> dict[str, np.ndarray]:
        return {
            "index": self.index, "real_bond": self.real_bond, "nominal_bond": self.nominal_bond,
            "indexed_bond": self.indexed_bond, "real_account": self.real_account,
            "nominal_account": self.nominal_account, "indexed_account": self.indexed_account,
            "share": self.share,
        }


def simulate_market(scenario: MarketScenario, drivers: DriverPaths, workers: int = 1) -> MarketPaths:
    grid = drivers.grid
    if abs(grid.horizon - scenario.horizon) > 1e-12 * scenario.horizon:
        raise ValueError("driver grid horizon differs from the scenario horizon")
    dt, steps, n = grid.dt, grid.steps, drivers.n_paths
    w = drivers.weights
    nodes = grid.nodes
    locs = [local_market(scenario, t) for t in nodes[:-1]]
    nominal = [
        bond_loading_coefficients(scenario.nominal_curve, scenario.jumps, t, scenario.bond_maturity)
        for t in nodes[:-1]
    ]
    # exact money-account growth per step
    real_growth = np.exp([scenario.real_curve.spot_rate_integral(a, b) for a, b in zip(nodes, nodes[1:])])
    nom_growth = np.exp([scenario.nominal_curve.spot_rate_integral(a, b) for a, b in zip(nodes, nodes[1:])])

    out = {k: np.empty((n, steps + 1)) for k in ("I", "Pr", "Pn", "Prs", "Br", "Bn", "Brs", "S")}
    P0r = np.exp(-scenario.real_curve.initial_curve.integral(0.0, scenario.bond_maturity))
    P0n = np.exp(-scenario.nominal_curve.initial_curve.integral(0.0, scenario.bond_maturity))
    I0 = scenario.inflation.initial_index

    def comp(load: np.ndarray) -> float:
        return float(np.dot(load, w)) if len(w) else 0.0

    def run(_b: int, sl: slice) -> None:
        m = sl.stop - sl.start
        bw = drivers.brownian[sl]
        ct = drivers.counts[sl]
        I = np.full(m, I0)
        Pr = np.full(m, P0r)
        Pn = np.full(m, P0n)
        Prs = np.full(m, I0 * P0r)
        Br = np.ones(m)
        Bn = np.ones(m)
        Brs = np.full(m, I0)
        S = np.full(m, scenario.risky.initial_price)
        vals = dict(I=I, Pr=Pr, Pn=Pn, Prs=Prs, Br=Br, Bn=Bn, Brs=Brs, S=S)
        for key, arr in vals.items():
            out[key][sl, 0] = arr
        for i in range(steps):
            loc, nb = locs[i], nominal[i]
            dWr, dWn, dWI, dWS = bw[:, i, 0], bw[:, i, 1], bw[:, i, 2], bw[:, i, 3]
            cnt = ct[:, i]
            I = I * _geometric_factor(loc.mu_I - comp(loc.gamma_I), dt, [loc.sigma_I], [dWI]) * _jump_factor(loc.gamma_I, cnt)
            Pr = Pr * _geometric_factor(loc.bond.a - comp(loc.bond.c), dt, [loc.b], [dWr]) * _jump_factor(loc.bond.c, cnt)
            Pn = Pn * _geometric_factor(nb.a - comp(nb.c), dt, [nb.b], [dWn]) * _jump_factor(nb.c, cnt)
            ct_tilde = loc.real_bond.C_tilde
            Prs = Prs * _geometric_factor(
                loc.real_bond.A_tilde - comp(ct_tilde), dt, [loc.b, loc.sigma_I], [dWr, dWI]
            ) * _jump_factor(ct_tilde, cnt)
            Br = Br * real_growth[i]
            Bn = Bn * nom_growth[i]
            Brs = Brs * _geometric_factor(
                loc.r + loc.mu_I - comp(loc.gamma_I), dt, [loc.sigma_I], [dWI]
            ) * _jump_factor(loc.gamma_I, cnt)
            S = S * _geometric_factor(loc.mu_S - comp(loc.gamma_S), dt, [loc.sigma_S], [dWS]) * _jump_factor(loc.gamma_S, cnt)
            for key, arr in (("I", I), ("Pr", Pr), ("Pn", Pn), ("Prs", Prs), ("Br", Br),
                             ("Bn", Bn), ("Brs", Brs), ("S", S)):
                out[key][sl, i + 1] = arr

    _run_blocks(run, n, workers)
    for key, arr in out.items():
        if not np.all(arr > 0):
            raise ValueError(f"nonpositive simulated state in {key}; was validation bypassed?")
    return MarketPaths(
        grid, out["I"], out["Pr"], out["Pn"], out["Prs"], out["Br"], out["Bn"], out["Brs"], out["S"]
    )


# --------------------------------------------------------------------------- strategies


@dataclass(frozen=True, slots=True)
class Boxes:
    """Compact control sets: consumption, premium, and a 3-d portfolio box."""

    consumption: tuple[float, float]
    premium: tuple[float, float]
    portfolio: tuple[tuple[float, float], tuple[float, float], tuple[float, float]]

    def __post_init__(self) -> None:
        pairs = [self.consumption, self.premium, *self.portfolio]
        if len(self.portfolio) != 3:
            raise ValueError("portfolio box needs three intervals")
        for lo, hi in pairs:
            if not (np.isfinite(lo) and np.isfinite(hi) and lo <= hi):
                raise ValueError(f"box interval must be finite with lo <= hi, got ({lo}, {hi})")
        object.__setattr__(self, "consumption", (float(self.consumption[0]), float(self.consumption[1])))
        object.__setattr__(self, "premium", (float(self.premium[0]), float(self.premium[1])))
        object.__setattr__(self, "portfolio", tuple((float(a), float(b)) for a, b in self.portfolio))

    @classmethod
    def uniform(cls, consumption, premium, portfolio_bound: float) -> "Boxes":
        p = (-portfolio_bound, portfolio_bound)
        return cls(tuple(consumption), tuple(premium), (p, p, p))

    @property
    def lower(self) -> np.ndarray:
        return np.array([lo for lo, _ in self.portfolio])

    @property
    def upper(self) -> np.ndarray:
        return np.array([hi for _, hi in self.portfolio])


@dataclass(frozen=True, slots=True)
class Controls:
    """Controls at one node; arrays broadcast against the path axis.

    ``portfolio`` is (paths, 3) or (3,); the scalars are (paths,) or ().
    Amounts in absolute mode, wealth fractions in fractional mode.
    """

    portfolio: np.ndarray
    consumption: np.ndarray
    premium: np.ndarray


@dataclass(frozen=True, slots=True)
class CompanionState:
    """Backward-solution values on the current node, one row per path."""

    y: np.ndarray
    z: np.ndarray
    upsilon: np.ndarray


Rule = Callable[[int, float, np.ndarray, "CompanionState | None"], Controls]


@dataclass(frozen=True, slots=True)
class StrategyRule:
    """Feedback strategy ``(node, t, wealth, companion) -> Controls`` inside boxes."""

    mode: Mode
    rule: Rule
    boxes: Boxes
    needs_companion: bool = False

    def __post_init__(self) -> None:
        if self.mode not in ("absolute", "fractional"):
            raise ValueError(f"unknown strategy mode {self.mode!r}")

    def controls(self, i: int, t: float, x: np.ndarray, companion: CompanionState | None = None) -> Controls:
        u = self.rule(i, t, x, companion)
        u = Controls(np.asarray(u.portfolio, float), np.asarray(u.consumption, float), np.asarray(u.premium, float))
        bx = self.boxes
        if (
            np.any(u.portfolio < bx.lower - _BOX_TOL) or np.any(u.portfolio > bx.upper + _BOX_TOL)
            or np.any(u.consumption < bx.consumption[0] - _BOX_TOL)
            or np.any(u.consumption > bx.consumption[1] + _BOX_TOL)
            or np.any(u.premium < bx.premium[0] - _BOX_TOL)
            or np.any(u.premium > bx.premium[1] + _BOX_TOL)
        ):
            raise ValueError(f"strategy output outside the control boxes at node {i}")
        return u

    @classmethod
    def constant(cls, mode: Mode, portfolio, consumption: float, premium: float, boxes: Boxes) -> "StrategyRule":
        u = Controls(np.asarray(portfolio, float), np.asarray(consumption, float), np.asarray(premium, float))
        return cls(mode, lambda i, t, x, comp: u, boxes)


@dataclass(frozen=True, slots=True)
class WealthPath:
    grid: TimeGrid
    mode: Mode
    wealth: np.ndarray
    bankrupt: np.ndarray

    @property
    def n_paths(self) -> int:
        return self.wealth.shape[0]

    @property
    def flagged_fraction(self) -> float:
        return float(np.mean(self.bankrupt))


def exposures(loc: LocalMarket, portfolio: np.ndarray) -> np.ndarray:
    """Brownian exposures on (W_r, W_I, W_S), written elementwise for bit-stable results."""
    p = np.asarray(portfolio, float)
    p1, p2, p3 = p[..., 0], p[..., 1], p[..., 2]
    return np.stack([p1 * loc.b, (p1 + p2) * loc.sigma_I, p3 * loc.sigma_S], axis=-1)


def jump_exposures(loc: LocalMarket, portfolio: np.ndarray) -> np.ndarray:
    """<portfolio, gamma_hat(z)> per atom, shape (..., atoms)."""
    p = np.asarray(portfolio, float)
    G = loc.jump_loadings
    if G.shape[0] == 0:
        return np.zeros(p.shape[:-1] + (0,))
    return p[..., 0:1] * G[:, 0] + p[..., 1:2] * G[:, 1] + p[..., 2:3] * G[:, 2]


def excess_drift(loc: LocalMarket, portfolio: np.ndarray) -> np.ndarray:
    mu = loc.excess_return
    p = np.asarray(portfolio, float)
    return p[..., 0] * mu[0] + p[..., 1] * mu[1] + p[..., 2] * mu[2]


def _sum_last(a: np.ndarray) -> np.ndarray:
    out = np.zeros(a.shape[:-1])
    for k in range(a.shape[-1]):
        out = out + a[..., k]
    return out


def _companion_at(companion, i: int, sl: slice):
    if companion is None:
        return None
    return companion.state_at(i, sl)


def simulate_wealth(
    scenario: MarketScenario,
    strategy: StrategyRule,
    drivers: DriverPaths,
    x0: float,
    companion=None,
    workers: int = 1,
) -> WealthPath:
    """Euler scheme for the controlled wealth.

    Absolute mode has additive noise and uses plain Euler; bankrupt paths are
    frozen at their first negative value.  Fractional mode uses the
    multiplicative Milstein step so it stays positive.
    """
    if not x0 > 0:
        raise ValueError("initial wealth must be positive")
    if strategy.needs_companion and companion is None:
        raise ValueError("this strategy needs a companion backward solution")
    grid = drivers.grid
    dt, steps, n = grid.dt, grid.steps, drivers.n_paths
    nodes = grid.nodes
    locs = [local_market(scenario, t) for t in nodes[:-1]]
    wealth = np.empty((n, steps + 1))
    bankrupt = np.zeros(n, dtype=bool)

    def run(_b: int, sl: slice) -> None:
        m = sl.stop - sl.start
        x = np.full(m, float(x0))
        dead = np.zeros(m, dtype=bool)
        wealth[sl, 0] = x
        for i in range(steps):
            loc = locs[i]
            u = strategy.controls(i, nodes[i], x, _companion_at(companion, i, sl))
            dw = drivers.brownian[sl, i][:, [0, 2, 3]]
            cnt = drivers.counts[sl, i]
            v = exposures(loc, u.portfolio)
            g = jump_exposures(loc, u.portfolio)
            noise = _sum_last(v * dw)
            if strategy.mode == "absolute":
                jumps = _sum_last(g * (cnt - loc.weights * dt)) if loc.n_atoms else 0.0
                drift = loc.r * x + excess_drift(loc, u.portfolio) - u.consumption - u.premium
                new = x + drift * dt + noise + jumps
                new = np.where(dead, x, new)
                dead = dead | (new < 0)
            else:
                if loc.n_atoms and np.any(1.0 + g <= 0):
                    raise ValueError(f"fractional strategy violates 1 + <pi, gamma_hat> > 0 at node {i}")
                comp = _sum_last(g * loc.weights) if loc.n_atoms else 0.0
                mu = loc.r + excess_drift(loc, u.portfolio) - u.consumption - u.premium - comp
                var = _sum_last(v * v)
                factor = 1.0 + mu * dt + noise + 0.5 * (noise * noise - var * dt)
                if loc.n_atoms:
                    factor = factor * np.prod(np.power(1.0 + g, cnt), axis=-1)
                new = x * factor
            wealth[sl, i + 1] = new
            x = new
        bankrupt[sl] = dead

    _run_blocks(run, n, workers)
    return WealthPath(grid, strategy.mode, wealth, bankrupt)


def simulate_wealth_power_logform(
    scenario: MarketScenario,
    strategy: StrategyRule,
    drivers: DriverPaths,
    x0: float,
    workers: int = 1,
) -> WealthPath:
    """Fractional wealth through its explicit exponential: X = x0 * exp(B)."""
    if strategy.mode != "fractional":
        raise ValueError("log-form wealth needs a fractional strategy")
    if not x0 > 0:
        raise ValueError("initial wealth must be positive")
    grid = drivers.grid
    dt, steps, n = grid.dt, grid.steps, drivers.n_paths
    nodes = grid.nodes
    locs = [local_market(scenario, t) for t in nodes[:-1]]
    wealth = np.empty((n, steps + 1))

    def run(_b: int, sl: slice) -> None:
        m = sl.stop - sl.start
        log_growth = np.zeros(m)
        x = np.full(m, float(x0))
        wealth[sl, 0] = x
        for i in range(steps):
            loc = locs[i]
            u = strategy.controls(i, nodes[i], x)
            dw = drivers.brownian[sl, i][:, [0, 2, 3]]
            cnt = drivers.counts[sl, i]
            v = exposures(loc, u.portfolio)
            g = jump_exposures(loc, u.portfolio)
            drift = loc.r + excess_drift(loc, u.portfolio) - u.consumption - u.premium - 0.5 * _sum_last(v * v)
            step = drift * dt + _sum_last(v * dw)
            if loc.n_atoms:
                if np.any(1.0 + g <= 0):
                    raise ValueError(f"log of nonpositive jump factor at node {i}")
                step = step - _sum_last(g * loc.weights) * dt + _sum_last(cnt * np.log1p(g))
            log_growth = log_growth + step
            x = x0 * np.exp(log_growth)
            wealth[sl, i + 1] = x

    _run_blocks(run, n, workers)
    return WealthPath(grid, "fractional", wealth, np.zeros(n, dtype=bool))


def stochastic_exponential(
    continuous: np.ndarray,
    quadratic_variation: np.ndarray,
    jump_sizes: np.ndarray | None = None,
    jump_counts: np.ndarray | None = None,
    compensator: np.ndarray | float = 0.0,
) -> np.ndarray:
    """Doleans-Dade exponential of M from its per-step pieces.

    Args:
        continuous: increments of the continuous martingale part, (paths, steps).
        quadratic_variation: its quadratic-variation increments, same shape.
        jump_sizes: jump size per atom, broadcastable to (paths, steps, atoms).
        jump_counts: number of jumps per atom and step.
        compensator: per-step compensator of the jump part, subtracted from M.

    Returns:
        (paths, steps + 1) path starting at 1.
    """
    cont = np.asarray(continuous, float)
    log_inc = cont - 0.5 * np.asarray(quadratic_variation, float) - compensator
    if jump_sizes is not None and jump_counts is not None:
        sizes = np.broadcast_to(np.asarray(jump_sizes, float), np.shape(jump_counts))
        counts = np.asarray(jump_counts)
        if np.any(sizes[counts > 0] <= -1.0):
            raise ValueError("stochastic exponential needs jumps > -1")
        log_inc = log_inc + _sum_last(counts * np.log1p(np.where(counts > 0, sizes, 0.0)))
    path = np.exp(np.concatenate([np.zeros(cont.shape[:-1] + (1,)), np.cumsum(log_inc, axis=-1)], axis=-1))
    return path
