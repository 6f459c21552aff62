"""Command-line runner: simulate, solve, value and verify a configured scenario.

Exit codes: 0 success, 1 verification failed or unexpected error,
2 invalid configuration, 3 backward solver did not converge.

Outputs go to ``--output`` together with ``config.ini``, the effective
configuration after overrides.  Re-running with ``--config <output>/config.ini``
and the same command reproduces every CSV byte for byte.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bsde import (
    BsdeSolution,
    optimal_exponential_strategy,
    optimal_power_strategy,
    solve_fbsde_exponential,
    solve_ode_power,
)
from .config import ConfigError, ScenarioConfig, dump_config, load_config
from .csvio import Manifest, write_csv
from .evaluation import value_consistency, verify
from .paths import DriverPaths, StrategyRule, simulate_drivers, simulate_market, simulate_wealth
from .paths import simulate_wealth_power_logform

COMMANDS = ("simulate", "solve", "value", "verify")
EXIT_OK, EXIT_FAILED, EXIT_INVALID, EXIT_NOT_CONVERGED = 0, 1, 2, 3
DEFAULT_DUMP_PATHS = 20

# second entropy word for the drivers used to fit the exponential FBSDE, so
# that evaluation runs on paths independent of the fit
_TRAINING_STREAM = 1


@dataclass
class RunOutputs:
    files: dict[str, Path] = field(default_factory=dict)
    exit_code: int = EXIT_OK
    messages: list[str] = field(default_factory=list)


@dataclass(frozen=True)
class SolvedScenario:
    solution: BsdeSolution
    strategy: StrategyRule

    @property
    def converged(self) -> bool:
        return self.solution.converged


def training_seed(seed: int) -> int:
    ss = np.random.SeedSequence([seed, _TRAINING_STREAM])
    return int(ss.generate_state(1, np.uint64)[0])


def solve_scenario(cfg: ScenarioConfig, workers: int = 1) -> SolvedScenario:
    m, grid = cfg.market, cfg.grid
    if cfg.utility.kind == "power":
        sol = solve_ode_power(m, cfg.mortality, cfg.contract, cfg.utility.kappa, grid, cfg.boxes)
        return SolvedScenario(sol, optimal_power_strategy(m, cfg.mortality, cfg.contract, cfg.utility.kappa,
                                                          cfg.boxes, sol))
    sv = cfg.solver
    res = solve_fbsde_exponential(
        m, cfg.mortality, cfg.contract, cfg.utility.delta, grid, sv.paths, cfg.initial_wealth, cfg.boxes,
        sv.regression, sv.picard, seed=training_seed(sv.seed), workers=workers,
    )
    strategy = optimal_exponential_strategy(m, cfg.mortality, cfg.contract, cfg.utility.delta, cfg.boxes,
                                            res.solution)
    return SolvedScenario(res.solution, strategy)


def evaluation_drivers(cfg: ScenarioConfig, workers: int = 1) -> DriverPaths:
    return simulate_drivers(cfg.grid, cfg.market.jumps, cfg.solver.seed, cfg.solver.paths, workers)


def _manifest(command: str, cfg: ScenarioConfig) -> Manifest:
    sv = cfg.solver
    return Manifest(command, cfg.digest(), sv.seed, sv.paths, sv.steps)


def _solution_files(out: Path, man: Manifest, cfg: ScenarioConfig, solved: SolvedScenario) -> dict[str, Path]:
    sol = solved.solution
    summary = sol.node_summary()
    cols = ["node", "t", *summary]
    rows = [[i, t, *(summary[k][i] for k in summary)] for i, t in enumerate(sol.grid.nodes)]
    files = {"solution": write_csv(out / "solution.csv", man, cols, rows)}
    if cfg.utility.kind == "power":
        ctl_rows = []
        for i, t in enumerate(sol.grid.nodes):
            u = solved.strategy.controls(i, t, np.ones(1))
            ctl_rows.append([i, t, *np.ravel(u.portfolio), float(u.consumption), float(u.premium)])
        files["controls"] = write_csv(
            out / "controls.csv", man, ["node", "t", "pi_bond", "pi_index", "pi_stock", "xi", "zeta"], ctl_rows
        )
    else:
        files["picard_trace"] = write_csv(
            out / "picard_trace.csv", man, ["iteration", "max_abs_change"],
            [[k + 1, v] for k, v in enumerate(sol.trace)],
        )
    return files


def _simulate_files(out: Path, man: Manifest, cfg: ScenarioConfig, solved: SolvedScenario,
                    drivers: DriverPaths, workers: int, dump_paths: int) -> dict[str, Path]:
    market = simulate_market(cfg.market, drivers, workers)
    if cfg.utility.kind == "power":
        wealth = simulate_wealth_power_logform(cfg.market, solved.strategy, drivers, cfg.initial_wealth, workers)
    else:
        wealth = simulate_wealth(cfg.market, solved.strategy, drivers, cfg.initial_wealth, workers=workers)
    prices = market.all_prices()
    series = {**prices, "wealth": wealth.wealth}
    cols = ["node", "t"] + [f"{k}_mean" for k in series] + ["wealth_sd", "flagged_fraction"]
    rows = []
    for i, t in enumerate(drivers.grid.nodes):
        rows.append([i, t, *(series[k][:, i].mean() for k in series), wealth.wealth[:, i].std(ddof=1),
                     wealth.flagged_fraction])
    files = {"market_summary": write_csv(out / "market_summary.csv", man, cols, rows)}
    k = min(dump_paths, drivers.n_paths)
    path_cols = ["path", "node", "t", "index", "share", "indexed_bond", "indexed_account", "wealth"]
    path_rows = (
        [p, i, t, market.index[p, i], market.share[p, i], market.indexed_bond[p, i],
         market.indexed_account[p, i], wealth.wealth[p, i]]
        for p in range(k) for i, t in enumerate(drivers.grid.nodes)
    )
    files["paths"] = write_csv(out / "paths.csv", man, path_cols, path_rows)
    return files


def run(
    command: str, config_path: str | Path, overrides: dict | None = None, output: str | Path = "optinsure-output",
    workers: int = 1, dump_paths: int = DEFAULT_DUMP_PATHS,
) -> RunOutputs:
    result = RunOutputs()
    if command not in COMMANDS:
        result.exit_code = EXIT_INVALID
        result.messages.append(f"unknown command {command!r}; choose one of {', '.join(COMMANDS)}")
        return result
    try:
        cfg = load_config(config_path).with_overrides(**(overrides or {}))
    except ConfigError as exc:
        result.exit_code = EXIT_INVALID
        result.messages.extend(exc.diagnostics)
        return result

    out = Path(output)
    out.mkdir(parents=True, exist_ok=True)
    man = _manifest(command, cfg)
    cfg_path = out / "config.ini"
    cfg_path.write_text("\n".join(man.lines()) + "\n\n" + dump_config(cfg))
    result.files["config"] = cfg_path

    solved = solve_scenario(cfg, workers)
    if not solved.converged:
        result.exit_code = EXIT_NOT_CONVERGED
        result.messages.append(
            f"backward solver did not converge after {len(solved.solution.trace) + 1} sweeps "
            f"(last change {solved.solution.trace[-1] if solved.solution.trace else float('nan'):.3g})"
        )
    if command == "solve":
        result.files.update(_solution_files(out, man, cfg, solved))
        result.messages.append(f"Y(0) = {solved.solution.y0:.17g}")
        return result

    drivers = evaluation_drivers(cfg, workers)
    if command == "simulate":
        result.files.update(_simulate_files(out, man, cfg, solved, drivers, workers, dump_paths))
        return result

    if command == "value":
        entry, est = value_consistency(cfg.market, cfg.mortality, cfg.contract, cfg.utility, solved.solution,
                                       solved.strategy, cfg.initial_wealth, drivers, workers)
        cols = ["utility", "parameter", "initial_wealth", "v_formula", "j_mc", "standard_error",
                "discrepancy_se", "n_paths", "flagged_fraction"]
        row = [cfg.utility.kind, cfg.utility.parameter, cfg.initial_wealth, entry.v_formula, entry.j_mc,
               entry.standard_error, entry.discrepancy_se, est.n_paths, est.flagged_fraction]
        result.files["value"] = write_csv(out / "value.csv", man, cols, [row])
        result.messages.append(
            f"V = {entry.v_formula:.10g}, J = {entry.j_mc:.10g} +- {entry.standard_error:.3g} "
            f"({entry.discrepancy_se:.2f} SE)"
        )
        return result

    report = verify(cfg.market, cfg.mortality, cfg.contract, cfg.utility, solved.solution, solved.strategy,
                    cfg.boxes, cfg.initial_wealth, drivers, cfg.verify.random_strategies,
                    cfg.verify.strategy_seed, workers)
    cols = ["check", "strategy", "value", "reference", "standard_error", "se_units", "passed"]
    result.files["verification"] = write_csv(out / "verification.csv", man, cols, report.rows())
    result.messages.append(report.summary())
    if not report.passed and result.exit_code == EXIT_OK:
        result.exit_code = EXIT_FAILED
    return result


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="optinsure", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="scenario INI file")
        p.add_argument("--seed", type=int, help="override solver.seed (unsigned 64-bit)")
        p.add_argument("--paths", type=int, help="override solver.paths")
        p.add_argument("--steps", type=int, help="override solver.steps")
        p.add_argument("--output", default="optinsure-output", help="output directory")
        p.add_argument("--workers", type=int, default=1, help="threads for path simulation")
        if name == "simulate":
            p.add_argument("--dump-paths", type=int, default=DEFAULT_DUMP_PATHS,
                           help="number of individual paths written to paths.csv")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {k: getattr(args, k) for k in ("seed", "paths", "steps")}
    try:
        res = run(args.command, args.config, overrides, args.output, max(args.workers, 1),
                  getattr(args, "dump_paths", DEFAULT_DUMP_PATHS))
    except Exception as exc:  # noqa: BLE001 - top-level reporting
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILED
    stream = sys.stdout if res.exit_code == EXIT_OK else sys.stderr
    for msg in res.messages:
        print(msg, file=stream)
    for name, path in res.files.items():
        print(f"wrote {name}: {path}")
    return res.exit_code


if __name__ == "__main__":
    sys.exit(main())
