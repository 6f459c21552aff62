"""Piecewise-constant coefficient tables with exact integrals.

Every deterministic coefficient in the market and mortality model is stored as
either a :class:`StepFunction` of time or a :class:`Surface` over
(calendar time, maturity).  Integrals are sums over pieces, so there is no
quadrature tolerance anywhere downstream.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


def _as_starts(starts: Iterable[float]) -> tuple[float, ...]:
    out = tuple(float(s) for s in starts)
    if not out:
        raise ValueError("a table needs at least one piece")
    if out[0] != 0.0:
        raise ValueError(f"first piece must start at 0, got {out[0]}")
    if any(b <= a for a, b in zip(out, out[1:])):
        raise ValueError(f"piece starts must be strictly increasing: {out}")
    return out


@dataclass(frozen=True, slots=True)
class StepFunction:
    """Right-continuous step function on [0, inf).

    ``values[k]`` applies on ``[starts[k], starts[k+1])``; the last value
    extends to infinity.
    """

    starts: tuple[float, ...]
    values: tuple[float, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "starts", _as_starts(self.starts))
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        if len(self.values) != len(self.starts):
            raise ValueError("starts and values must have equal length")

    @classmethod
    def constant(cls, value: float) -> "StepFunction":
        return cls((0.0,), (float(value),))

    @classmethod
    def pieces(cls, pairs: Sequence[tuple[float, float]]) -> "StepFunction":
        """Build from ``(start, value)`` pairs."""
        return cls(tuple(p[0] for p in pairs), tuple(p[1] for p in pairs))

    @property
    def is_constant(self) -> bool:
        return len(set(self.values)) == 1

    def __call__(self, t):
        idx = np.searchsorted(self.starts, t, side="right") - 1
        idx = np.clip(idx, 0, len(self.values) - 1)
        vals = np.asarray(self.values)[idx]
        return float(vals) if np.ndim(vals) == 0 else vals

    def cumulative(self, t: float) -> float:
        """Exact integral over [0, t]."""
        if t < 0:
            raise ValueError("cumulative integral needs t >= 0")
        total = 0.0
        for k, start in enumerate(self.starts):
            if start >= t:
                break
            end = self.starts[k + 1] if k + 1 < len(self.starts) else np.inf
            total += self.values[k] * (min(end, t) - start)
        return total

    def integral(self, a: float, b: float) -> float:
        """Exact integral over [a, b] (signed)."""
        return self.cumulative(b) - self.cumulative(a)

    def bound(self) -> float:
        return max(abs(v) for v in self.values)

    def scaled(self, factor: float) -> "StepFunction":
        return StepFunction(self.starts, tuple(factor * v for v in self.values))


@dataclass(frozen=True, slots=True)
class Surface:
    """Piecewise-constant table over (calendar time t, maturity s).

    With ``relative=True`` the maturity axis is time-to-maturity ``s - t``,
    which is the natural way to write stationary volatility term structures.
    """

    time_starts: tuple[float, ...]
    maturity_starts: tuple[float, ...]
    values: tuple[tuple[float, ...], ...]
    relative: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "time_starts", _as_starts(self.time_starts))
        object.__setattr__(self, "maturity_starts", _as_starts(self.maturity_starts))
        rows = tuple(tuple(float(v) for v in row) for row in self.values)
        if len(rows) != len(self.time_starts) or any(
            len(row) != len(self.maturity_starts) for row in rows
        ):
            raise ValueError("surface values must be a time x maturity grid")
        object.__setattr__(self, "values", rows)

    @classmethod
    def constant(cls, value: float, relative: bool = False) -> "Surface":
        return cls((0.0,), (0.0,), ((float(value),),), relative)

    @classmethod
    def maturity_profile(
        cls, maturity_starts: Sequence[float], values: Sequence[float], relative: bool = True
    ) -> "Surface":
        """Time-homogeneous surface varying only along the maturity axis."""
        return cls((0.0,), tuple(maturity_starts), (tuple(values),), relative)

    def _row(self, t: float) -> tuple[float, ...]:
        k = int(np.searchsorted(self.time_starts, t, side="right") - 1)
        return self.values[max(k, 0)]

    def _col(self, m: float) -> int:
        return max(int(np.searchsorted(self.maturity_starts, m, side="right") - 1), 0)

    def __call__(self, t: float, s: float) -> float:
        m = s - t if self.relative else s
        return self._row(t)[self._col(m)]

    def bound(self) -> float:
        return max(abs(v) for row in self.values for v in row)

    def maturity_integral(self, t: float, a: float, b: float) -> float:
        """Exact integral of ``s -> f(t, s)`` over [a, b]."""
        if b < a:
            raise ValueError("maturity integral needs a <= b")
        shift = t if self.relative else 0.0
        row = self._row(t)
        lo, hi = a - shift, b - shift
        total = 0.0
        starts = self.maturity_starts
        for k, start in enumerate(starts):
            end = starts[k + 1] if k + 1 < len(starts) else np.inf
            left = max(start, lo) if k > 0 else lo
            right = min(end, hi)
            if right > left:
                total += row[k] * (right - left)
        return total

    def time_breaks(self, maturity: float, upto: float) -> list[float]:
        """Calendar times in (0, upto) where ``t -> f(t, maturity)`` can jump."""
        pts = [s for s in self.time_starts if 0.0 < s < upto]
        if self.relative:
            pts += [maturity - m for m in self.maturity_starts if 0.0 < maturity - m < upto]
        return pts

    def diagonal_integral(self, maturity: float, upto: float) -> float:
        """Exact integral of ``t -> f(t, maturity)`` over [0, upto]."""
        knots = sorted({0.0, upto, *self.time_breaks(maturity, upto)})
        total = 0.0
        for left, right in zip(knots, knots[1:]):
            total += self(0.5 * (left + right), maturity) * (right - left)
        return total

    def maturity_breaks(self, upto: float) -> list[float]:
        """Points u in (0, upto) where ``u -> int_0^u f(t, u) dt`` changes slope or jumps."""
        pts = [s for s in self.time_starts if 0.0 < s < upto]
        if self.relative:
            pts += [ts + m for ts in self.time_starts for m in self.maturity_starts]
        else:
            pts += list(self.maturity_starts)
        return sorted({p for p in pts if 0.0 < p < upto})
