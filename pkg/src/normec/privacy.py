"""Gaussian noise calibration and the DP parameter schedule.

The calibration follows the closed-form Gaussian-mechanism rule
``sigma^2 = Phi^2 * c * (B/n)^2 * K * log(1/delta) / eps^2`` with full
participation (``B = n``).  ``c`` is an order constant, not the output of a
privacy accountant; pick it from an accountant if certified guarantees are
needed.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from normec.problems import Problem


class PrivacyWarning(UserWarning):
    """A budget outside the usual (eps <= 10, delta < 1/n) regime."""


@dataclass(frozen=True)
class DpBudget:
    eps: float
    delta: float
    K: int
    n: int
    c: float = 1.0
    sensitivity: float = 1.0

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if not 0.0 < self.delta < 1.0:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")
        if self.K < 1 or self.n < 1:
            raise ValueError(f"K and n must be positive, got K={self.K}, n={self.n}")
        if not self.c > 0:
            raise ValueError(f"c must be positive, got {self.c}")
        if not self.sensitivity > 0:
            raise ValueError(f"sensitivity must be positive, got {self.sensitivity}")
        if self.eps > 10:
            warnings.warn(f"eps={self.eps} is above the usual range (<= 10)", PrivacyWarning, stacklevel=3)
        if self.delta >= 1.0 / self.n:
            warnings.warn(f"delta={self.delta} is not below 1/n={1.0 / self.n:.3g}", PrivacyWarning, stacklevel=3)

    @property
    def batch(self) -> int:
        # Partial participation is not simulated.
        return self.n


def calibrate_sigma(budget: DpBudget) -> float:
    """Noise standard deviation for ``budget`` under full participation."""
    ratio = budget.batch / budget.n
    return budget.sensitivity * math.sqrt(budget.c * ratio**2 * budget.K * math.log(1.0 / budget.delta)) / budget.eps


def experiment_sigma(beta: float, K: int, eps: float, delta: float) -> float:
    """Noise level ``beta * sqrt(K log(1/delta)) / eps`` for image-scale presets.

    It is treated as a standard deviation with sensitivity ``beta``.
    """
    return beta * math.sqrt(K * math.log(1.0 / delta)) / eps


def utility_scale(problem: Problem, x0, R: float, alpha: float) -> float:
    """``sqrt(L_max (alpha + R) (f(x0) - f_inf) / R)``."""
    if not R > 0:
        raise ValueError(f"R must be positive, got {R}")
    gap = problem.loss(x0) - problem.f_inf
    value = problem.L_max * (alpha + R) * gap / R
    if not math.isfinite(value) or value < 0:
        raise ValueError(
            f"cannot form the utility scale from f(x0) - f_inf = {gap!r}; "
            "the problem needs a certified finite lower bound f_inf"
        )
    return math.sqrt(value)


def corollary2_schedule(problem: Problem, budget: DpBudget, R: float, alpha: float, d: int | None = None, x0=None) -> tuple[float, float]:
    """Return ``(beta, gamma)`` for a private run of ``budget.K`` rounds.

    ``beta0 = Delta * (n eps^2 / (d log(1/delta)))^(1/4)``, reduced below ``alpha``
    when necessary; ``beta = beta0 / (K+1)`` and
    ``gamma = beta0 R / ((alpha + R) L_max (K+1))``.
    """
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    d = problem.d if d is None else d
    x0 = np.zeros(problem.d) if x0 is None else np.asarray(x0, dtype=np.float64)
    scale = utility_scale(problem, x0, R, alpha)
    beta0 = scale * (budget.n * budget.eps**2 / (d * math.log(1.0 / budget.delta))) ** 0.25
    beta0 = min(beta0, math.nextafter(alpha, 0.0))
    denom = budget.K + 1
    return beta0 / denom, beta0 * R / ((alpha + R) * problem.L_max * denom)
