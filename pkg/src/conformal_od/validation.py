"""Input validation shared by the estimators."""

from __future__ import annotations

import numpy as np

PROB_SUM_TOL = 1e-6


def check_alpha(alpha, name: str = "alpha", allow_zero: bool = False) -> float:
    try:
        alpha = float(alpha)
    except (TypeError, ValueError):
        raise ValueError(f"{name} must be a number, got {alpha!r}") from None
    lo_ok = alpha >= 0.0 if allow_zero else alpha > 0.0
    if not (lo_ok and alpha < 1.0):
        interval = "[0, 1)" if allow_zero else "(0, 1)"
        raise ValueError(f"{name} must be in {interval}, got {alpha}")
    return alpha


def check_probs(probs, tol: float = PROB_SUM_TOL) -> np.ndarray:
    """Validate an ``(n, K)`` matrix of class probabilities."""
    probs = np.asarray(probs, dtype=float)
    if probs.ndim == 1:
        probs = probs[None, :]
    if probs.ndim != 2:
        raise ValueError(f"probs must be 2-D, got shape {probs.shape}")
    if probs.shape[0] and (np.any(probs < -tol) or np.any(probs > 1 + tol)):
        raise ValueError("probabilities must lie in [0, 1]")
    if probs.shape[0] and np.any(np.abs(probs.sum(axis=1) - 1.0) > tol):
        raise ValueError("probability rows must sum to 1")
    return probs


def check_coords(x, name: str, n: int | None = None, m: int | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {x.shape}")
    if n is not None and x.shape[0] != n:
        raise ValueError(f"{name} has {x.shape[0]} rows, expected {n}")
    if m is not None and x.shape[1] != m:
        raise ValueError(f"{name} has {x.shape[1]} columns, expected {m}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")
    return x


def check_labels(labels, n: int, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ValueError(f"labels must have shape ({n},), got {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        if not np.all(np.mod(labels, 1) == 0):
            raise ValueError("labels must be integer class ids")
    labels = labels.astype(int)
    if n and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must be in [0, {n_classes - 1}]")
    return labels
