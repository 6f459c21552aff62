"""Scenario configuration files: parsing, validation and canonical serialization.

Files are INI-style (``configparser``) with fixed sections.  Units: rates and
intensities per year, times and maturities in years.

Value syntax
------------
* number: ``0.03``
* step function of time: ``0.03`` or ``0:0.03, 5:0.04`` (``start:value`` pairs)
* surface over (time, maturity): a maturity profile ``0:-0.02, 2:0`` applies at
  every time; time-varying surfaces list rows as ``0 @ 0:-0.02, 2:0 ; 5 @ 0:-0.01, 2:0``
  (all rows share the maturity starts).  ``<key>_axis = relative`` (default)
  reads maturities as time to maturity, ``absolute`` as calendar maturity.
* per-atom lists (jump loadings) separate atoms with ``|``.

Unknown sections or keys are rejected; every diagnostic names the file line.
"""

from __future__ import annotations

import configparser
import hashlib
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

from .bsde import PicardSettings, RegressionSpec
from .generator import UtilitySpec
from .market import (
    HjmCurve,
    InflationModel,
    JumpMeasure,
    MarketScenario,
    RiskyAssetModel,
    validate_scenario,
)
from .mortality import InsuranceContract, MortalityCurve
from .paths import Boxes, TimeGrid
from .tables import StepFunction, Surface


class ConfigError(ValueError):
    """Malformed or invalid configuration; ``diagnostics`` holds one line per problem."""

    def __init__(self, diagnostics: list[str]):
        self.diagnostics = tuple(diagnostics)
        super().__init__("\n".join(diagnostics))


@dataclass(frozen=True)
class SolverSettings:
    steps: int = 100
    paths: int = 100_000
    seed: int = 0
    regression: RegressionSpec = field(default_factory=RegressionSpec)
    picard: PicardSettings = field(default_factory=PicardSettings)


@dataclass(frozen=True)
class VerifySettings:
    random_strategies: int = 20
    strategy_seed: int = 0


@dataclass(frozen=True)
class ScenarioConfig:
    market: MarketScenario
    mortality: MortalityCurve
    contract: InsuranceContract
    utility: UtilitySpec
    initial_wealth: float
    boxes: Boxes
    solver: SolverSettings = field(default_factory=SolverSettings)
    verify: VerifySettings = field(default_factory=VerifySettings)

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid(self.market.horizon, self.solver.steps)

    def with_overrides(
        self, seed: int | None = None, paths: int | None = None, steps: int | None = None
    ) -> "ScenarioConfig":
        solver = self.solver
        if seed is not None:
            solver = replace(solver, seed=int(seed))
        if paths is not None:
            solver = replace(solver, paths=int(paths))
        if steps is not None:
            solver = replace(solver, steps=int(steps))
        out = replace(self, solver=solver)
        errors = _solver_errors(out.solver)
        if errors:
            raise ConfigError(errors)
        return out

    def digest(self) -> str:
        return hashlib.sha256(dump_config(self).encode()).hexdigest()


# --------------------------------------------------------------------------- value syntax


def _num(text: str) -> float:
    v = float(text.strip())
    if not math.isfinite(v):
        raise ValueError(f"non-finite number {text.strip()!r}")
    return v


def _pairs(text: str) -> list[tuple[float, float]]:
    text = text.strip()
    if ":" not in text:
        return [(0.0, _num(text))]
    out = []
    for item in text.split(","):
        if ":" not in item:
            raise ValueError(f"expected start:value, got {item.strip()!r}")
        a, b = item.split(":", 1)
        out.append((_num(a), _num(b)))
    return out


def parse_step(text: str) -> StepFunction:
    return StepFunction.pieces(_pairs(text))


def parse_surface(text: str, relative: bool = True) -> Surface:
    if "@" not in text:
        pairs = _pairs(text)
        return Surface.maturity_profile([p[0] for p in pairs], [p[1] for p in pairs], relative)
    times, mats, rows = [], None, []
    for row in text.split(";"):
        if "@" not in row:
            raise ValueError(f"surface row needs 'time @ profile', got {row.strip()!r}")
        t, prof = row.split("@", 1)
        pairs = _pairs(prof)
        m = tuple(p[0] for p in pairs)
        if mats is None:
            mats = m
        elif m != mats:
            raise ValueError("all surface rows must share the same maturity starts")
        times.append(_num(t))
        rows.append(tuple(p[1] for p in pairs))
    return Surface(tuple(times), mats, tuple(rows), relative)


def parse_list(text: str) -> tuple[float, ...]:
    text = text.strip()
    return tuple(_num(v) for v in text.split(",")) if text else ()


def _atoms(text: str, parse) -> tuple:
    text = text.strip()
    return tuple(parse(part) for part in text.split("|")) if text else ()


def fmt_num(v: float) -> str:
    return repr(float(v))


def fmt_step(f: StepFunction) -> str:
    if len(f.starts) == 1:
        return fmt_num(f.values[0])
    return ", ".join(f"{fmt_num(s)}:{fmt_num(v)}" for s, v in zip(f.starts, f.values))


def _profile(starts, values) -> str:
    return ", ".join(f"{fmt_num(s)}:{fmt_num(v)}" for s, v in zip(starts, values))


def fmt_surface(s: Surface) -> str:
    if len(s.time_starts) == 1:
        return _profile(s.maturity_starts, s.values[0])
    return " ; ".join(f"{fmt_num(t)} @ {_profile(s.maturity_starts, row)}" for t, row in zip(s.time_starts, s.values))


# --------------------------------------------------------------------------- schema

# key -> (kind, default text or None when required)
_CURVE = {
    "initial": ("step", "0.0"),
    "alpha": ("surface", "0.0"),
    "alpha_axis": ("axis", "relative"),
    "sigma": ("surface", "0.0"),
    "sigma_axis": ("axis", "relative"),
    "gamma": ("surfaces", ""),
    "gamma_axis": ("axis", "relative"),
}
_ASSET = {
    "initial": ("num", "1.0"),
    "mu": ("step", "0.0"),
    "sigma": ("step", "0.0"),
    "gamma": ("steps", ""),
}
SCHEMA: dict[str, dict[str, tuple[str, str | None]]] = {
    "market": {"bond_maturity": ("num", None)},
    "real_curve": _CURVE,
    "nominal_curve": _CURVE,
    "inflation": _ASSET,
    "risky": _ASSET,
    "jumps": {"marks": ("list", ""), "intensities": ("list", "")},
    "mortality": {"hazard": ("step", None)},
    "insurance": {"premium_ratio": ("step", None)},
    "utility": {"kind": ("word", None), "parameter": ("num", None)},
    "objective": {"discount": ("step", None), "horizon": ("num", None), "initial_wealth": ("num", None)},
    "solver": {
        "steps": ("int", "100"),
        "paths": ("int", "100000"),
        "seed": ("int", "0"),
        "regression_degree": ("int", "2"),
        "regression_ridge": ("num", "1e-08"),
        "picard_damping": ("num", "1.0"),
        "picard_max_iterations": ("int", "50"),
        "picard_tolerance": ("num", "1e-06"),
        "picard_initial_spread": ("num", "0.2"),
    },
    "boxes": {
        "consumption": ("list", None),
        "premium": ("list", None),
        "portfolio_bond": ("list", None),
        "portfolio_index": ("list", None),
        "portfolio_stock": ("list", None),
    },
    "verify": {"random_strategies": ("int", "20"), "strategy_seed": ("int", "0")},
}
_OPTIONAL_SECTIONS = {"nominal_curve", "inflation", "risky", "jumps", "solver", "verify"}


class _LineTracker:
    """Remember the file line of every section header and key."""

    def __init__(self, text: str):
        self.lines: dict[tuple[str, str | None], int] = {}
        section = None
        for no, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line[0] in "#;":
                continue
            if line.startswith("[") and line.endswith("]"):
                section = line[1:-1].strip()
                self.lines.setdefault((section, None), no)
            elif section is not None and ("=" in line or ":" in line) and not raw[:1].isspace():
                cut = min(i for i in (line.find("="), line.find(":")) if i >= 0)
                self.lines.setdefault((section, line[:cut].strip().lower()), no)

    def where(self, section: str, key: str | None = None) -> str:
        no = self.lines.get((section, key)) or self.lines.get((section, None))
        return f"line {no}" if no else "end of file"


def _int(text: str) -> int:
    v = int(text.strip())
    return v


_PARSERS = {
    "num": _num,
    "int": _int,
    "step": parse_step,
    "steps": lambda t: _atoms(t, parse_step),
    "surface": lambda t: t,  # needs its axis; resolved later
    "surfaces": lambda t: t,
    "list": parse_list,
    "word": lambda t: t.strip().lower(),
    "axis": lambda t: t.strip().lower(),
}


def _solver_errors(s: SolverSettings) -> list[str]:
    out = []
    if s.steps < 1:
        out.append("solver.steps must be >= 1")
    if s.paths < 2:
        out.append("solver.paths must be >= 2")
    if not 0 <= s.seed < 2**64:
        out.append("solver.seed must be an unsigned 64-bit integer")
    return out


def load_config(path: str | Path) -> ScenarioConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError([f"{p}: cannot read configuration: {exc}"]) from exc
    return parse_config(text, source=str(p))


def parse_config(text: str, source: str = "<config>") -> ScenarioConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",), strict=True)
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError([f"{source}: {exc}".replace("\n", " ")]) from exc
    lines = _LineTracker(text)
    errors: list[str] = []
    raw: dict[str, dict[str, object]] = {}

    for section in parser.sections():
        if section not in SCHEMA:
            errors.append(f"{source} {lines.where(section)}: unknown section [{section}]")
    for section, keys in SCHEMA.items():
        if not parser.has_section(section):
            if section not in _OPTIONAL_SECTIONS:
                errors.append(f"{source}: missing section [{section}]")
                continue
        present = dict(parser.items(section)) if parser.has_section(section) else {}
        for key in present:
            if key not in keys:
                errors.append(f"{source} {lines.where(section, key)}: unknown key '{key}' in [{section}]")
        values: dict[str, object] = {}
        for key, (kind, default) in keys.items():
            if key in present:
                txt = present[key]
            elif default is not None:
                txt = default
            else:
                if parser.has_section(section):
                    errors.append(f"{source} {lines.where(section)}: missing key '{key}' in [{section}]")
                continue
            try:
                values[key] = _PARSERS[kind](txt)
                if kind == "axis" and values[key] not in ("relative", "absolute"):
                    raise ValueError("axis must be 'relative' or 'absolute'")
            except ValueError as exc:
                errors.append(f"{source} {lines.where(section, key)}: [{section}] {key}: {exc}")
        raw[section] = values
    if errors:
        raise ConfigError(errors)

    def at(section: str, key: str) -> str:
        return f"{source} {lines.where(section, key)}"

    def curve(section: str) -> HjmCurve:
        v = raw[section]
        try:
            surf = {}
            for key in ("alpha", "sigma"):
                surf[key] = parse_surface(v[key], v[f"{key}_axis"] == "relative")
            gamma = _atoms(v["gamma"], lambda t: parse_surface(t, v["gamma_axis"] == "relative"))
        except ValueError as exc:
            raise ConfigError([f"{at(section, 'sigma')}: [{section}] {exc}"]) from exc
        return HjmCurve(v["initial"], surf["alpha"], surf["sigma"], gamma)

    def build(label: str, section: str, key: str, fn):
        try:
            return fn()
        except ValueError as exc:
            errors.append(f"{at(section, key)}: {label}: {exc}")
            return None

    real, nominal = curve("real_curve"), curve("nominal_curve")
    inf, rk, jm, obj = raw["inflation"], raw["risky"], raw["jumps"], raw["objective"]
    jumps = build("jumps", "jumps", "marks", lambda: JumpMeasure(jm["marks"], jm["intensities"]))
    market = None
    if jumps is not None:
        market = build(
            "market", "market", "bond_maturity",
            lambda: MarketScenario(
                real_curve=real, nominal_curve=nominal,
                inflation=InflationModel(inf["initial"], inf["mu"], inf["sigma"], inf["gamma"]),
                risky=RiskyAssetModel(rk["initial"], rk["mu"], rk["sigma"], rk["gamma"]),
                jumps=jumps, discount=obj["discount"], horizon=obj["horizon"],
                bond_maturity=raw["market"]["bond_maturity"],
            ),
        )
    mort = build("mortality", "mortality", "hazard", lambda: MortalityCurve(raw["mortality"]["hazard"], obj["horizon"]))
    contract = build(
        "insurance", "insurance", "premium_ratio", lambda: InsuranceContract(raw["insurance"]["premium_ratio"])
    )
    ut = raw["utility"]
    utility = build("utility", "utility", "kind", lambda: UtilitySpec(ut["kind"], ut["parameter"]))
    bx = raw["boxes"]

    def boxes() -> Boxes:
        for key in SCHEMA["boxes"]:
            if len(bx[key]) != 2:
                raise ValueError(f"{key} needs 'lower, upper'")
        return Boxes(tuple(bx["consumption"]), tuple(bx["premium"]),
                     (tuple(bx["portfolio_bond"]), tuple(bx["portfolio_index"]), tuple(bx["portfolio_stock"])))

    box = build("boxes", "boxes", "consumption", boxes)
    sv = raw["solver"]
    regression = build("solver", "solver", "regression_degree",
                       lambda: RegressionSpec(sv["regression_degree"], sv["regression_ridge"]))
    picard = build("solver", "solver", "picard_damping", lambda: PicardSettings(
        sv["picard_damping"], sv["picard_max_iterations"], sv["picard_tolerance"], sv["picard_initial_spread"]))
    solver = SolverSettings(sv["steps"], sv["paths"], sv["seed"], regression, picard)
    for msg in _solver_errors(solver):
        errors.append(f"{at('solver', msg.split('.')[1].split()[0])}: {msg}")
    vf = raw["verify"]
    if vf["random_strategies"] < 0:
        errors.append(f"{at('verify', 'random_strategies')}: verify.random_strategies must be >= 0")
    x0 = obj["initial_wealth"]
    if utility is not None and utility.kind == "power" and not x0 > 0:
        errors.append(f"{at('objective', 'initial_wealth')}: power utility needs initial_wealth > 0")

    if market is not None:
        report = validate_scenario(market)
        for v in report.violations:
            section = _violation_section(v)
            errors.append(f"{source} {lines.where(section)}: constraint violated: {v}")
    if errors:
        raise ConfigError(errors)
    return ScenarioConfig(market, mort, contract, utility, x0, box, solver,
                          VerifySettings(vf["random_strategies"], vf["strategy_seed"]))


def _violation_section(message: str) -> str:
    for prefix, section in (
        ("gamma_S", "risky"), ("gamma_I", "inflation"), ("risky", "risky"), ("inflation", "inflation"),
        ("real_curve", "real_curve"), ("c_r", "real_curve"), ("C_tilde", "real_curve"),
        ("nominal_curve", "nominal_curve"), ("c_n", "nominal_curve"), ("discount", "objective"),
    ):
        if message.startswith(prefix):
            return section
    return "market"


# --------------------------------------------------------------------------- serialization


def _axis(s: Surface) -> str:
    return "relative" if s.relative else "absolute"


def _curve_items(c: HjmCurve) -> dict[str, str]:
    out = {
        "initial": fmt_step(c.initial_curve),
        "alpha": fmt_surface(c.alpha), "alpha_axis": _axis(c.alpha),
        "sigma": fmt_surface(c.sigma), "sigma_axis": _axis(c.sigma),
    }
    if c.gamma:
        axes = {g.relative for g in c.gamma}
        if len(axes) != 1:
            raise ValueError("all gamma surfaces of a curve must share one maturity axis")
        out["gamma"] = " | ".join(fmt_surface(g) for g in c.gamma)
        out["gamma_axis"] = _axis(c.gamma[0])
    return out


def _asset_items(initial: float, mu, sigma, gamma) -> dict[str, str]:
    out = {"initial": fmt_num(initial), "mu": fmt_step(mu), "sigma": fmt_step(sigma)}
    if gamma:
        out["gamma"] = " | ".join(fmt_step(g) for g in gamma)
    return out


def config_sections(cfg: ScenarioConfig) -> dict[str, dict[str, str]]:
    m = cfg.market
    sv = cfg.solver
    bx = cfg.boxes
    pair = lambda ab: f"{fmt_num(ab[0])}, {fmt_num(ab[1])}"  # noqa: E731
    return {
        "market": {"bond_maturity": fmt_num(m.bond_maturity)},
        "real_curve": _curve_items(m.real_curve),
        "nominal_curve": _curve_items(m.nominal_curve),
        "inflation": _asset_items(m.inflation.initial_index, m.inflation.mu, m.inflation.sigma, m.inflation.gamma),
        "risky": _asset_items(m.risky.initial_price, m.risky.mu, m.risky.sigma, m.risky.gamma),
        "jumps": {"marks": ", ".join(map(fmt_num, m.jumps.marks)),
                  "intensities": ", ".join(map(fmt_num, m.jumps.intensities))},
        "mortality": {"hazard": fmt_step(cfg.mortality.hazard)},
        "insurance": {"premium_ratio": fmt_step(cfg.contract.premium_ratio)},
        "utility": {"kind": cfg.utility.kind, "parameter": fmt_num(cfg.utility.parameter)},
        "objective": {"discount": fmt_step(m.discount), "horizon": fmt_num(m.horizon),
                      "initial_wealth": fmt_num(cfg.initial_wealth)},
        "solver": {
            "steps": str(sv.steps), "paths": str(sv.paths), "seed": str(sv.seed),
            "regression_degree": str(sv.regression.degree), "regression_ridge": fmt_num(sv.regression.ridge),
            "picard_damping": fmt_num(sv.picard.damping), "picard_max_iterations": str(sv.picard.max_iterations),
            "picard_tolerance": fmt_num(sv.picard.tolerance),
            "picard_initial_spread": fmt_num(sv.picard.initial_spread),
        },
        "boxes": {"consumption": pair(bx.consumption), "premium": pair(bx.premium),
                  "portfolio_bond": pair(bx.portfolio[0]), "portfolio_index": pair(bx.portfolio[1]),
                  "portfolio_stock": pair(bx.portfolio[2])},
        "verify": {"random_strategies": str(cfg.verify.random_strategies),
                   "strategy_seed": str(cfg.verify.strategy_seed)},
    }


def dump_config(cfg: ScenarioConfig) -> str:
    """Canonical text: every key written, floats via repr so parsing is exact."""
    blocks = []
    for section, items in config_sections(cfg).items():
        body = "\n".join(f"{k} = {v}" for k, v in items.items())
        blocks.append(f"[{section}]\n{body}\n")
    return "\n".join(blocks)
