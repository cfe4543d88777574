"""Split-conformal primitives: finite-sample quantiles, p-values and the
exact distribution of realized coverage."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import stats

# guards floor/ceil against products like 0.29 * 100 = 28.999999999999996
_ROUND_EPS = 1e-9


@dataclass(frozen=True)
class ScoreSet:
    """Nonconformity scores of one calibration cell (class and coordinate)."""

    scores: tuple[float, ...]
    class_label: Optional[int] = None
    coordinate_index: Optional[int] = None

    def __post_init__(self):
        arr = np.asarray(self.scores, dtype=float).ravel()
        if not np.all(np.isfinite(arr)):
            raise ValueError("scores must be finite")
        object.__setattr__(self, "scores", tuple(arr.tolist()))

    def __len__(self) -> int:
        return len(self.scores)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.scores, dtype=float)


def _scores(s) -> np.ndarray:
    if isinstance(s, ScoreSet):
        return s.as_array()
    return np.asarray(s, dtype=float).ravel()


def _miscoverage_count(n: int, alpha: float) -> int:
    return int(math.floor((n + 1) * alpha + _ROUND_EPS))


def conformal_rank(n: int, alpha: float) -> int:
    """Order-statistic index ``ceil((n + 1)(1 - alpha))`` (1-based)."""
    return n + 1 - _miscoverage_count(n, alpha)


def conformal_quantile(s, alpha: float) -> float:
    """k-th smallest score with k = ceil((n+1)(1-alpha)); +inf when k > n."""
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"alpha must be in [0, 1), got {alpha}")
    scores = _scores(s)
    n = scores.size
    k = conformal_rank(n, alpha)
    if n == 0 or k > n:
        return math.inf
    k = max(k, 1)
    return float(np.partition(scores, k - 1)[k - 1])


def conformal_quantile_columns(scores, alpha: float) -> np.ndarray:
    """Column-wise :func:`conformal_quantile` of an ``(n, m)`` score matrix."""
    scores = np.asarray(scores, dtype=float)
    if scores.ndim == 1:
        scores = scores[:, None]
    n, m = scores.shape
    k = conformal_rank(n, alpha)
    if n == 0 or k > n:
        return np.full(m, math.inf)
    k = max(k, 1)
    return np.partition(scores, k - 1, axis=0)[k - 1].astype(float)


def conformal_pvalue(s, candidate_score: float) -> float:
    scores = _scores(s)
    return (1.0 + np.count_nonzero(scores >= candidate_score)) / (scores.size + 1.0)


@dataclass(frozen=True)
class CoverageDistribution:
    """Law of the coverage attained by one calibration draw,
    Beta(n + 1 - l, l) with l = floor((n + 1) alpha)."""

    n: int
    alpha: float
    a: float
    b: float

    @property
    def degenerate(self) -> bool:
        # l = 0: the conformal quantile is +inf and coverage is 1 surely
        return self.b == 0

    @property
    def mean(self) -> float:
        return self.a / (self.a + self.b)

    def ppf(self, q):
        if self.degenerate:
            return np.ones_like(np.asarray(q, dtype=float))[()]
        return stats.beta.ppf(q, self.a, self.b)

    def cdf(self, x):
        if self.degenerate:
            return (np.asarray(x, dtype=float) >= 1.0).astype(float)[()]
        return stats.beta.cdf(x, self.a, self.b)

    def bounds(self, lower: float = 0.01, upper: float = 0.99) -> tuple[float, float]:
        return float(self.ppf(lower)), float(self.ppf(upper))

    def frozen(self):
        if self.degenerate:
            raise ValueError("degenerate coverage distribution has no Beta law")
        return stats.beta(self.a, self.b)


def coverage_distribution(n: int, alpha: float) -> CoverageDistribution:
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    l = _miscoverage_count(n, alpha)
    return CoverageDistribution(n=n, alpha=alpha, a=float(n + 1 - l), b=float(l))
