"""Force of mortality, survival and death density, insurance legacy."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .tables import StepFunction

_EDGE = 1e-12


@dataclass(frozen=True, slots=True)
class MortalityCurve:
    """Piecewise-constant hazard rate on [0, horizon]."""

    hazard: StepFunction
    horizon: float

    def __post_init__(self) -> None:
        if min(self.hazard.values) < 0:
            raise ValueError("force of mortality must be nonnegative")
        if not all(math.isfinite(v) for v in self.hazard.values):
            raise ValueError("force of mortality must be bounded")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")

    def _check(self, t: float) -> None:
        if t < -_EDGE or t > self.horizon * (1 + _EDGE) + _EDGE:
            raise ValueError(f"t={t} outside [0, {self.horizon}]")

    def cumulative_hazard(self, t: float) -> float:
        self._check(t)
        return self.hazard.cumulative(min(max(t, 0.0), self.horizon))


@dataclass(frozen=True, slots=True)
class InsuranceContract:
    """Premium-insurance ratio: premium rate p buys a death benefit p / eta."""

    premium_ratio: StepFunction

    def __post_init__(self) -> None:
        if min(self.premium_ratio.values) <= 0:
            raise ValueError("premium-insurance ratio must be positive")
        if not all(math.isfinite(v) for v in self.premium_ratio.values):
            raise ValueError("premium-insurance ratio must be bounded")


def survival_probability(mort: MortalityCurve, t: float) -> float:
    return math.exp(-mort.cumulative_hazard(t))


def death_density(mort: MortalityCurve, t: float) -> float:
    mort._check(t)
    return mort.hazard(t) * survival_probability(mort, t)


def legacy(x, p, contract: InsuranceContract, t: float):
    """Wealth left to beneficiaries on death: x + p / eta(t)."""
    eta = contract.premium_ratio(t)
    if eta <= 0:
        raise ValueError("premium-insurance ratio must be positive")
    return x + p / eta
