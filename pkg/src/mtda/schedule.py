"""Exponential hand-over from domain adaptation to distillation."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

from .errors import ConfigurationError

GRANULARITIES = ("epoch", "batch")


def growth_rate(s: float, f: float, n_epochs: int) -> float:
    """``ln(f / s) / n_epochs``."""
    if not (s > 0 and f > 0):
        raise ValueError("s and f must be positive")
    if int(n_epochs) != n_epochs or n_epochs < 1:
        raise ValueError("n_epochs must be a positive integer")
    return math.log(f / s) / n_epochs


def beta(s: float, g: float, e: float, f: Optional[float] = None) -> float:
    """``s * exp(g * e)``, capped at ``max(s, f)`` when ``f`` is known."""
    if e < 0:
        raise ValueError("epoch must be nonnegative")
    if e == 0:
        return float(s)
    value = s * math.exp(g * e)
    if f is not None:
        value = min(value, max(s, f))
    return value


@dataclass(frozen=True)
class BetaSchedule:
    s: float = 0.1
    f: float = 0.8
    n_epochs: int = 100
    granularity: str = "epoch"

    def __post_init__(self):
        if not (0 < self.s <= 1) or not (0 < self.f <= 1):
            raise ConfigurationError(f"s and f must lie in (0, 1], got s={self.s}, f={self.f}")
        if int(self.n_epochs) != self.n_epochs or self.n_epochs < 1:
            raise ConfigurationError("n_epochs must be a positive integer")
        if self.granularity not in GRANULARITIES:
            raise ConfigurationError(f"beta granularity must be one of {GRANULARITIES}")

    @property
    def g(self) -> float:
        return growth_rate(self.s, self.f, self.n_epochs)

    def at(self, epoch: int, batch_index: int = 0, epoch_length: int = 1) -> float:
        """Value used for ``batch_index`` of ``epoch``; batch mode interpolates the epoch."""
        e = float(epoch)
        if self.granularity == "batch" and batch_index:
            e += batch_index / epoch_length
        return beta(self.s, self.g, e, self.f)
