"""Diversity, consistency and preference rewards under a dynamic weight schedule.

The three weights evolve with the dialogue round ``t``:

    lambda_div(t)  = exp(-alpha t)
    lambda_cons(t) = 1 - exp(-beta t)
    lambda_mi(t)   = exp(-gamma t) / 2

``t`` is accepted as a real number so the value function ``V(t)`` can be
differentiated in closed form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from vca.core_math import as_vec, cosine_similarity, cosine_similarity_grad
from vca.errors import ConfigError, NumericError


@dataclass(frozen=True)
class RewardSchedule:
    alpha: float = 0.15
    beta: float = 0.1
    gamma: float = 0.075

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ConfigError(f"{name} must be > 0, got {v}")


@dataclass(frozen=True)
class RewardBreakdown:
    r_div: float
    r_cons: float
    r_mi: float
    lambda_div: float
    lambda_cons: float
    lambda_mi: float
    total: float
    t: float

    @property
    def weights(self) -> tuple[float, float, float]:
        return (self.lambda_div, self.lambda_cons, self.lambda_mi)


def _feature_rows(features: Sequence) -> np.ndarray:
    rows = [as_vec(x, name="feature") for x in features]
    if len({r.shape[0] for r in rows}) > 1:
        raise ValueError("features must share one length")
    return np.array(rows, dtype=np.float64)


def diversity_reward(features: Sequence) -> float:
    """Mean of ``1 - cos`` over ordered pairs ``i != j``."""
    n = len(features)
    if n < 2:
        raise ValueError(f"diversity needs at least 2 samples, got {n}")
    f = _feature_rows(features)
    acc = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            acc += 2.0 * (1.0 - cosine_similarity(f[i], f[j]))
    return acc / (n * (n - 1))


def consistency_reward(features: Sequence) -> float:
    """Sum of cosine similarities between consecutive entries."""
    n = len(features)
    if n < 2:
        raise ValueError(f"consistency needs at least 2 entries, got {n}")
    f = _feature_rows(features)
    return float(sum(cosine_similarity(f[t], f[t + 1]) for t in range(n - 1)))


def diversity_reward_grad(features: Sequence) -> np.ndarray:
    """Gradient of ``diversity_reward`` with respect to every feature (one row each)."""
    n = len(features)
    f = np.array([as_vec(x) for x in features], dtype=np.float64)
    g = np.zeros_like(f)
    for i in range(n):
        for j in range(n):
            if i != j:
                # each unordered pair appears twice, once per ordering
                g[i] -= 2.0 * cosine_similarity_grad(f[i], f[j])
    return g / (n * (n - 1))


def consistency_reward_grad(features: Sequence) -> np.ndarray:
    f = np.array([as_vec(x) for x in features], dtype=np.float64)
    g = np.zeros_like(f)
    for t in range(len(f) - 1):
        g[t] += cosine_similarity_grad(f[t], f[t + 1])
        g[t + 1] += cosine_similarity_grad(f[t + 1], f[t])
    return g


def _check_t(t: float) -> float:
    t = float(t)
    if not np.isfinite(t) or t < 0:
        raise ValueError(f"round index t must be finite and >= 0, got {t}")
    return t


def weights_at(s: RewardSchedule, t: float) -> tuple[float, float, float]:
    t = _check_t(t)
    return (
        math.exp(-s.alpha * t),
        -math.expm1(-s.beta * t),
        0.5 * math.exp(-s.gamma * t),
    )


def total_reward(s: RewardSchedule, t: float, r_div: float, r_cons: float, r_mi: float) -> RewardBreakdown:
    for name, v in (("r_div", r_div), ("r_cons", r_cons), ("r_mi", r_mi)):
        if not np.isfinite(v):
            raise NumericError(f"{name} is not finite: {v}")
    ld, lc, lm = weights_at(s, t)
    total = ld * r_div + lc * r_cons + lm * r_mi
    return RewardBreakdown(float(r_div), float(r_cons), float(r_mi), ld, lc, lm, float(total), float(t))


def value_derivative(s: RewardSchedule, t: float, r_div: float, r_cons: float, r_mi: float) -> float:
    """dV/dt with the component rewards held constant in ``t``."""
    t = _check_t(t)
    return (
        -s.alpha * math.exp(-s.alpha * t) * r_div
        + s.beta * math.exp(-s.beta * t) * r_cons
        - 0.5 * s.gamma * math.exp(-s.gamma * t) * r_mi
    )


def value_second_derivative(s: RewardSchedule, t: float, r_div: float, r_cons: float, r_mi: float) -> float:
    t = _check_t(t)
    return (
        s.alpha**2 * math.exp(-s.alpha * t) * r_div
        - s.beta**2 * math.exp(-s.beta * t) * r_cons
        + 0.5 * s.gamma**2 * math.exp(-s.gamma * t) * r_mi
    )
