from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import pytest

from optinsure.market import constant_scenario
from optinsure.mortality import InsuranceContract, MortalityCurve
from optinsure.paths import Boxes
from optinsure.tables import StepFunction

SCENARIOS = Path(__file__).resolve().parents[1] / "src" / "optinsure" / "scenarios"

# criterion number -> list of (part, passed, detail); filled by test_acceptance
ACCEPTANCE: dict[int, list[tuple[str, bool, str]]] = defaultdict(list)


def fixture_market(**overrides):
    """Constant-coefficient test market: b_r = 0.04, phi = (0.02, 2, 0.25) without jumps."""
    kw = dict(r=0.03, sigma_r=-0.02, sigma_r_span=2.0, bond_maturity=12.0, mu_I=0.02, sigma_I=0.01,
              mu_S=0.08, sigma_S=0.2, discount=0.03)
    kw.update(overrides)
    return constant_scenario(**kw)


@pytest.fixture(scope="session")
def power_fixture():
    market = fixture_market()
    mort = MortalityCurve(StepFunction.constant(0.01), 10.0)
    contract = InsuranceContract(StepFunction.constant(0.02))
    boxes = Boxes((0.001, 2.0), (-0.0199, 0.5), ((-2.0, 2.0),) * 3)
    return market, mort, contract, boxes


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[number]
        ok = all(p for _, p, _ in parts)
        detail = "; ".join(f"{name}: {'pass' if p else 'FAIL'} ({d})" for name, p, d in parts)
        terminalreporter.write_line(f"CRITERION {number}: {'PASS' if ok else 'FAIL'} - {detail}")
