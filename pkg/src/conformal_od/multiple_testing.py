"""Corrections for calibrating m box coordinates jointly.

Max-rank replaces each coordinate's scores by their within-coordinate ranks,
keeps the largest rank of every sample and calibrates once on those maxima.
Because it lives in rank space it is unaffected by the scale of each
coordinate and adapts to dependence between coordinates, which makes it
tighter than Bonferroni when coordinates are positively correlated.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.stats import rankdata

from .conformal import conformal_quantile, conformal_quantile_columns


def bonferroni_alpha(alpha_box: float, m: int) -> float:
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    return alpha_box / m


def rank_matrix(scores) -> np.ndarray:
    """Within-column ranks (1 = smallest); ties get the largest rank of their group."""
    scores = np.asarray(scores, dtype=float)
    if scores.ndim == 1:
        scores = scores[:, None]
    if scores.shape[0] == 0:
        return np.empty(scores.shape, dtype=np.int64)
    return rankdata(scores, method="max", axis=0).astype(np.int64)


def max_rank_threshold(scores, alpha_box: float) -> float:
    """Conformal quantile of the per-sample maximum rank (an integer or +inf)."""
    ranks = rank_matrix(scores)
    if ranks.shape[0] == 0:
        return math.inf
    return conformal_quantile(ranks.max(axis=1), alpha_box)


def max_rank_quantiles(scores, alpha_box: float) -> np.ndarray:
    """Per-coordinate quantiles: the r-th smallest score of each column,
    where r is the max-rank threshold."""
    scores = np.asarray(scores, dtype=float)
    if scores.ndim == 1:
        scores = scores[:, None]
    r = max_rank_threshold(scores, alpha_box)
    if math.isinf(r):
        return np.full(scores.shape[1], math.inf)
    r = int(r)
    return np.partition(scores, r - 1, axis=0)[r - 1].astype(float)


def bonferroni_quantiles(scores, alpha_box: float) -> np.ndarray:
    scores = np.asarray(scores, dtype=float)
    if scores.ndim == 1:
        scores = scores[:, None]
    return conformal_quantile_columns(scores, bonferroni_alpha(alpha_box, scores.shape[1]))


def max_score_quantile(scores, alpha_box: float) -> float:
    """Single quantile of the per-sample maximum score, shared by all coordinates."""
    scores = np.asarray(scores, dtype=float)
    if scores.ndim == 1:
        scores = scores[:, None]
    if scores.shape[0] == 0:
        return math.inf
    return conformal_quantile(scores.max(axis=1), alpha_box)


def joint_coverage_check(test_scores, quantiles) -> bool:
    """True iff every coordinate's test score is within its quantile."""
    return bool(np.all(np.asarray(test_scores) <= np.asarray(quantiles)))
