"""Class label prediction sets.

Sets are handled in bulk as boolean masks of shape ``(n, K)``; the
single-object helpers wrap those in :class:`LabelSet`.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .conformal import conformal_quantile
from .validation import check_alpha, check_probs

PROB_FLOOR = 1e-12
ECE_BINS = 15


class LabelMethod(str, Enum):
    CLASSTHR = "classthr"
    TOP = "top"
    NAIVE = "naive"
    FULL = "full"
    ORACLE = "oracle"


@dataclass(frozen=True)
class LabelSet:
    labels: frozenset
    method: LabelMethod

    def __len__(self) -> int:
        return len(self.labels)

    def __contains__(self, label) -> bool:
        return label in self.labels


@dataclass(frozen=True)
class LabelQuantiles:
    quantiles: tuple[float, ...]
    alpha_label: float
    counts: tuple[int, ...] = ()

    @property
    def n_classes(self) -> int:
        return len(self.quantiles)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.quantiles, dtype=float)


def label_scores(probs, labels) -> np.ndarray:
    """Nonconformity ``1 - p_y`` of the true label."""
    probs = np.asarray(probs, dtype=float)
    labels = np.asarray(labels, dtype=int)
    return 1.0 - probs[np.arange(len(labels)), labels]


def calibrate_label_quantiles(probs, labels, alpha_label: float, n_classes: int) -> np.ndarray:
    """Per-class conformal quantile of ``1 - p_y`` over samples whose true class is y."""
    probs = np.asarray(probs, dtype=float)
    labels = np.asarray(labels, dtype=int)
    scores = label_scores(probs, labels) if len(labels) else np.empty(0)
    q = np.full(n_classes, math.inf)
    for y in range(n_classes):
        s = scores[labels == y]
        if s.size == 0:
            continue
        q[y] = conformal_quantile(s, alpha_label)
    return q


def calibrate_labels(samples, alpha_label: float, n_classes: Optional[int] = None) -> LabelQuantiles:
    """Calibrate ClassThr quantiles from matched samples."""
    check_alpha(alpha_label, "alpha_label", allow_zero=True)
    samples = list(samples)
    if n_classes is None:
        n_classes = max((len(s.prediction.probs) for s in samples), default=0)
    probs = np.array([s.prediction.probs for s in samples], dtype=float).reshape(-1, n_classes)
    labels = np.array([s.truth.label for s in samples], dtype=int)
    q = calibrate_label_quantiles(probs, labels, alpha_label, n_classes)
    counts = np.bincount(labels, minlength=n_classes)[:n_classes]
    empty = [y for y in range(n_classes) if counts[y] == 0]
    if empty:
        warnings.warn(f"classes without calibration samples (always included): {empty}")
    return LabelQuantiles(tuple(q.tolist()), alpha_label, tuple(int(c) for c in counts))


def classthr_mask(probs, quantiles) -> np.ndarray:
    """Include y when ``1 - p_y <= q_y``; empty rows fall back to the top class."""
    probs = np.asarray(probs, dtype=float)
    q = np.asarray(quantiles, dtype=float)
    mask = (1.0 - probs) <= q[None, :]
    empty = ~mask.any(axis=1)
    if empty.any():
        rows = np.flatnonzero(empty)
        mask[rows, np.argmax(probs[rows], axis=1)] = True
    return mask


def top_mask(probs) -> np.ndarray:
    probs = np.asarray(probs, dtype=float)
    mask = np.zeros(probs.shape, dtype=bool)
    mask[np.arange(probs.shape[0]), np.argmax(probs, axis=1)] = True
    return mask


def naive_mask(probs, alpha_label: float) -> np.ndarray:
    """Labels by descending probability until mass ``1 - alpha`` is reached.

    The label crossing the threshold is included, and so is every label
    tied with it.
    """
    probs = np.asarray(probs, dtype=float)
    target = 1.0 - alpha_label
    sorted_desc = -np.sort(-probs, axis=1)
    cum = np.cumsum(sorted_desc, axis=1)
    reached = cum >= target - 1e-12
    # rows that never reach the target (float round-off) take every label
    cut = np.where(reached.any(axis=1), reached.argmax(axis=1), probs.shape[1] - 1)
    threshold = sorted_desc[np.arange(probs.shape[0]), cut]
    return probs >= threshold[:, None]


def full_mask(n: int, n_classes: int) -> np.ndarray:
    return np.ones((n, n_classes), dtype=bool)


def oracle_mask(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    mask = np.zeros((labels.size, n_classes), dtype=bool)
    mask[np.arange(labels.size), labels] = True
    return mask


def _to_set(mask_row, method) -> LabelSet:
    return LabelSet(frozenset(int(i) for i in np.flatnonzero(mask_row)), LabelMethod(method))


def predict_label_set_classthr(probs, q) -> LabelSet:
    quantiles = q.as_array() if isinstance(q, LabelQuantiles) else np.asarray(q, dtype=float)
    p = check_probs(np.asarray(probs, dtype=float)[None, :])
    if p.shape[1] != quantiles.size:
        raise ValueError(f"{p.shape[1]} probabilities but {quantiles.size} class quantiles")
    return _to_set(classthr_mask(p, quantiles)[0], LabelMethod.CLASSTHR)


def predict_label_set_top(probs) -> LabelSet:
    p = check_probs(np.asarray(probs, dtype=float)[None, :])
    return _to_set(top_mask(p)[0], LabelMethod.TOP)


def predict_label_set_naive(probs, alpha_label: float) -> LabelSet:
    check_alpha(alpha_label, "alpha_label")
    p = check_probs(np.asarray(probs, dtype=float)[None, :])
    return _to_set(naive_mask(p, alpha_label)[0], LabelMethod.NAIVE)


def predict_label_set_full(n_classes: int) -> LabelSet:
    if n_classes < 1:
        raise ValueError("n_classes must be >= 1")
    return LabelSet(frozenset(range(n_classes)), LabelMethod.FULL)


def temperature_scale(probs, T: float, logits: bool = False) -> np.ndarray:
    """Softmax of ``log p / T`` (or ``logits / T``), row-wise."""
    if not T > 0:
        raise ValueError(f"temperature must be positive, got {T}")
    x = np.asarray(probs, dtype=float)
    z = x if logits else np.log(np.maximum(x, PROB_FLOOR))
    z = z / T
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def expected_calibration_error(probs, labels, n_bins: int = ECE_BINS) -> float:
    """Top-class ECE over equal-width confidence bins ``(i/B, (i+1)/B]``."""
    probs = np.asarray(probs, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise ValueError("expected_calibration_error needs a non-empty (n, K) array")
    conf = probs.max(axis=1)
    correct = (probs.argmax(axis=1) == labels).astype(float)
    bins = np.clip(np.ceil(conf * n_bins).astype(int) - 1, 0, n_bins - 1)
    n = conf.size
    ece = 0.0
    for b in np.unique(bins):
        sel = bins == b
        ece += sel.sum() / n * abs(correct[sel].mean() - conf[sel].mean())
    return float(ece)


def set_sizes(mask) -> np.ndarray:
    return np.asarray(mask).sum(axis=1)


class ClassThresholdClassifier(BaseEstimator):
    """Class-conditional conformal label sets (ClassThr) with a sklearn API.

    ``fit`` takes predicted class probabilities and true labels of held-out
    calibration objects; ``predict`` returns a boolean ``(n, K)`` set mask.

    Parameters
    ----------
    alpha_label : float
        Per-class miscoverage. ``0`` yields the full label set.
    n_classes : int, optional
        Number of classes; inferred from the probability width when omitted.
    """

    def __init__(self, alpha_label: float = 0.01, n_classes: Optional[int] = None):
        self.alpha_label = alpha_label
        self.n_classes = n_classes

    def fit(self, probs, labels):
        check_alpha(self.alpha_label, "alpha_label", allow_zero=True)
        probs = check_probs(probs)
        k = self.n_classes or probs.shape[1]
        labels = np.asarray(labels, dtype=int)
        self.quantiles_ = calibrate_label_quantiles(probs, labels, self.alpha_label, k)
        self.class_counts_ = np.bincount(labels, minlength=k)[:k]
        self.n_classes_ = k
        return self

    def predict(self, probs) -> np.ndarray:
        check_is_fitted(self, "quantiles_")
        return classthr_mask(check_probs(probs), self.quantiles_)

    def predict_sets(self, probs) -> list[LabelSet]:
        return [_to_set(row, LabelMethod.CLASSTHR) for row in self.predict(probs)]


def masks_to_sets(mask, method) -> list[LabelSet]:
    return [_to_set(row, method) for row in np.asarray(mask)]


def sets_to_mask(sets: Iterable, n_classes: int) -> np.ndarray:
    sets = list(sets)
    mask = np.zeros((len(sets), n_classes), dtype=bool)
    for i, s in enumerate(sets):
        labels = s.labels if isinstance(s, LabelSet) else s
        mask[i, list(labels)] = True
    return mask
