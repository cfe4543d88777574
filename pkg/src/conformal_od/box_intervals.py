"""Nonconformity scores and interval constructors for box coordinates.

Two-sided methods score each coordinate separately:

* ``std``  absolute residual ``|c_hat - c|``
* ``ens``  residual normalized by the ensemble spread ``sigma``
* ``cqr``  violation of a predicted quantile band ``[q_lo, q_hi]``

One-sided methods build an outer box from signed corner residuals
``(x0_hat - x0, y0_hat - y0, x1 - x1_hat, y1 - y1_hat)``, optionally
divided by the predicted width/height (``mult``) or by ``sigma``.

All batch functions work on ``(n, m)`` arrays; quantiles may be ``+inf``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence

import numpy as np

SIGMA_FLOOR = 1e-6


class Sidedness(str, Enum):
    TWO_SIDED = "two_sided"
    ONE_SIDED_OUTER = "one_sided_outer"


class BoxMethod(str, Enum):
    STD = "std"
    ENS = "ens"
    CQR = "cqr"
    ADDBONF = "addbonf"
    ADDMAX = "addmax"
    MULTBONF = "multbonf"
    MULTMAX = "multmax"
    BOXSTD1S = "boxstd1s"
    BOXENS1S = "boxens1s"
    BOXMULT = "boxmult"

    @property
    def sidedness(self) -> Sidedness:
        if self in (BoxMethod.STD, BoxMethod.ENS, BoxMethod.CQR):
            return Sidedness.TWO_SIDED
        return Sidedness.ONE_SIDED_OUTER

    @property
    def needs_sigma(self) -> bool:
        return self in (BoxMethod.ENS, BoxMethod.BOXENS1S)

    @property
    def needs_quantile_band(self) -> bool:
        return self is BoxMethod.CQR

    @property
    def fixed_correction(self) -> Optional[str]:
        """Correction implied by the method name, if any."""
        if self in (BoxMethod.ADDBONF, BoxMethod.MULTBONF):
            return "bonferroni"
        if self in (BoxMethod.ADDMAX, BoxMethod.MULTMAX):
            return "maxscore"
        return None

    @property
    def scale_kind(self) -> Optional[str]:
        # how one-sided residuals are normalized
        if self in (BoxMethod.MULTBONF, BoxMethod.MULTMAX, BoxMethod.BOXMULT):
            return "size"
        if self is BoxMethod.BOXENS1S:
            return "sigma"
        if self.sidedness is Sidedness.ONE_SIDED_OUTER:
            return "none"
        return None


@dataclass(frozen=True)
class BoxPrediction:
    coords: tuple[float, ...]
    sigma: Optional[tuple[float, ...]] = None
    q_lo: Optional[tuple[float, ...]] = None
    q_hi: Optional[tuple[float, ...]] = None
    confidence: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "coords", tuple(float(c) for c in self.coords))
        if self.sigma is not None:
            sigma = np.maximum(np.asarray(self.sigma, dtype=float), SIGMA_FLOOR)
            object.__setattr__(self, "sigma", tuple(sigma.tolist()))
        if (self.q_lo is None) != (self.q_hi is None):
            raise ValueError("q_lo and q_hi must be given together")
        if self.q_lo is not None:
            lo, hi = repair_crossings(self.q_lo, self.q_hi)
            object.__setattr__(self, "q_lo", tuple(lo.ravel().tolist()))
            object.__setattr__(self, "q_hi", tuple(hi.ravel().tolist()))

    @classmethod
    def from_record(cls, rec) -> "BoxPrediction":
        return cls(rec.box, rec.sigma, rec.q_lo, rec.q_hi, rec.confidence)


@dataclass(frozen=True)
class BoxInterval:
    lo: tuple[float, ...]
    hi: tuple[float, ...]
    sidedness: Sidedness = Sidedness.TWO_SIDED

    def __post_init__(self):
        if any(a > b for a, b in zip(self.lo, self.hi)):
            raise ValueError("interval needs lo <= hi per coordinate")

    @property
    def widths(self) -> np.ndarray:
        return np.asarray(self.hi) - np.asarray(self.lo)

    def contains(self, coords) -> bool:
        c = np.asarray(coords, dtype=float)
        return bool(np.all((np.asarray(self.lo) <= c) & (c <= np.asarray(self.hi))))

    def outer_box(self) -> np.ndarray:
        return outer_boxes(np.asarray(self.lo)[None], np.asarray(self.hi)[None])[0]


def repair_crossings(q_lo, q_hi):
    """Swap crossed quantile-band entries (``q_lo > q_hi``)."""
    q_lo = np.atleast_2d(np.asarray(q_lo, dtype=float))
    q_hi = np.atleast_2d(np.asarray(q_hi, dtype=float))
    crossed = q_lo > q_hi
    if crossed.any():
        warnings.warn(
            f"{int(crossed.sum())} crossed quantile-band entries repaired by swapping"
        )
        return np.minimum(q_lo, q_hi), np.maximum(q_lo, q_hi)
    return q_lo, q_hi


def _require(arr, name, method):
    if arr is None:
        raise ValueError(f"box method {method.value!r} requires {name}")
    return np.asarray(arr, dtype=float)


def _as_method(method) -> BoxMethod:
    try:
        return BoxMethod(method)
    except ValueError:
        choices = ", ".join(m.value for m in BoxMethod)
        raise ValueError(f"unknown box method {method!r}; choose from {choices}") from None


# -- scores -------------------------------------------------------------


def std_scores(pred, truth) -> np.ndarray:
    return np.abs(np.asarray(pred, dtype=float) - np.asarray(truth, dtype=float))


def ens_scores(pred, truth, sigma) -> np.ndarray:
    return std_scores(pred, truth) / np.maximum(np.asarray(sigma, dtype=float), SIGMA_FLOOR)


def cqr_scores(q_lo, q_hi, truth) -> np.ndarray:
    truth = np.asarray(truth, dtype=float)
    return np.maximum(np.asarray(q_lo, dtype=float) - truth, truth - np.asarray(q_hi, dtype=float))


def signed_corner_residuals(pred, truth) -> np.ndarray:
    """``(x0_hat - x0, y0_hat - y0, x1 - x1_hat, y1 - y1_hat)``; positive = truth outside."""
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape[-1] != 4:
        raise ValueError("one-sided scores need corner boxes (x0, y0, x1, y1)")
    sign = np.array([1.0, 1.0, -1.0, -1.0])
    return sign * (pred - truth)


def size_scale(pred) -> np.ndarray:
    """Predicted ``(w, h, w, h)`` per box."""
    pred = np.asarray(pred, dtype=float)
    w = pred[..., 2] - pred[..., 0]
    h = pred[..., 3] - pred[..., 1]
    if np.any(w <= 0) or np.any(h <= 0):
        raise ValueError("multiplicative scores need predicted boxes with positive width and height")
    return np.stack([w, h, w, h], axis=-1)


def _one_sided_scale(method: BoxMethod, pred, sigma):
    kind = method.scale_kind
    if kind == "size":
        return size_scale(pred)
    if kind == "sigma":
        return np.maximum(_require(sigma, "sigma", method), SIGMA_FLOOR)
    return np.ones_like(np.asarray(pred, dtype=float))


def box_scores(method, pred, truth, sigma=None, q_lo=None, q_hi=None) -> np.ndarray:
    """Per-coordinate nonconformity scores for any box method."""
    method = _as_method(method)
    if method is BoxMethod.STD:
        return std_scores(pred, truth)
    if method is BoxMethod.ENS:
        return ens_scores(pred, truth, _require(sigma, "sigma", method))
    if method is BoxMethod.CQR:
        lo, hi = repair_crossings(_require(q_lo, "q_lo", method), _require(q_hi, "q_hi", method))
        return cqr_scores(lo.reshape(np.shape(truth)), hi.reshape(np.shape(truth)), truth)
    return signed_corner_residuals(pred, truth) / _one_sided_scale(method, pred, sigma)


def score_box_std(pred: BoxPrediction, truth) -> np.ndarray:
    return std_scores(pred.coords, truth)


def score_box_ens(pred: BoxPrediction, truth) -> np.ndarray:
    return box_scores(BoxMethod.ENS, pred.coords, truth, sigma=pred.sigma)


def score_box_cqr(pred: BoxPrediction, truth) -> np.ndarray:
    return box_scores(BoxMethod.CQR, pred.coords, truth, q_lo=pred.q_lo, q_hi=pred.q_hi)


def score_one_sided(pred: BoxPrediction, truth, variant) -> np.ndarray:
    variant = _as_method(variant)
    if variant.sidedness is not Sidedness.ONE_SIDED_OUTER:
        raise ValueError(f"{variant.value!r} is not a one-sided variant")
    return box_scores(variant, pred.coords, truth, sigma=pred.sigma)


# -- intervals ------------------------------------------------------------


def interval_bounds(method, pred, quantiles, sigma=None, q_lo=None, q_hi=None, image_size=None):
    """Lower/upper bounds ``(n, m)`` for the given per-sample quantiles.

    ``image_size`` is an optional ``(n, 2)`` array of (width, height); where
    a quantile is infinite the corresponding bounds clamp to the image.
    """
    method = _as_method(method)
    pred = np.atleast_2d(np.asarray(pred, dtype=float))
    q = np.broadcast_to(np.asarray(quantiles, dtype=float), pred.shape)
    with np.errstate(invalid="ignore"):
        if method is BoxMethod.STD:
            lo, hi = pred - q, pred + q
        elif method is BoxMethod.ENS:
            s = np.maximum(np.atleast_2d(_require(sigma, "sigma", method)), SIGMA_FLOOR)
            lo, hi = pred - s * q, pred + s * q
        elif method is BoxMethod.CQR:
            band_lo, band_hi = repair_crossings(
                _require(q_lo, "q_lo", method), _require(q_hi, "q_hi", method)
            )
            lo, hi = band_lo - q, band_hi + q
            # a negative quantile can shrink the band past its midpoint
            mid = 0.5 * (band_lo + band_hi)
            empty = lo > hi
            lo, hi = np.where(empty, mid, lo), np.where(empty, mid, hi)
        else:
            scale = _one_sided_scale(method, pred, sigma)
            outer = pred - np.array([1.0, 1.0, -1.0, -1.0]) * scale * q
            is_lower = np.array([True, True, False, False])
            lo = np.where(is_lower, outer, -np.inf)
            hi = np.where(is_lower, np.inf, outer)
    lo, hi = np.array(lo, dtype=float), np.array(hi, dtype=float)
    if image_size is not None and pred.shape[1] == 4:
        lo, hi = _clamp_unbounded(lo, hi, q, np.atleast_2d(image_size), method.sidedness)
    return lo, hi


def _clamp_unbounded(lo, hi, q, image_size, sidedness):
    size = np.asarray(image_size, dtype=float)
    extent = np.stack([size[:, 0], size[:, 1], size[:, 0], size[:, 1]], axis=1)
    known = np.isfinite(extent)
    inf_q = np.isinf(q) & known
    if sidedness is Sidedness.TWO_SIDED:
        lo = np.where(inf_q, 0.0, lo)
        hi = np.where(inf_q, extent, hi)
    else:
        is_lower = np.array([True, True, False, False])
        lo = np.where(inf_q & is_lower, 0.0, lo)
        hi = np.where(inf_q & ~is_lower, extent, hi)
    return lo, hi


def build_interval(pred: BoxPrediction, quantiles, method, image_size=None) -> BoxInterval:
    method = _as_method(method)
    lo, hi = interval_bounds(
        method,
        np.asarray(pred.coords)[None],
        np.asarray(quantiles, dtype=float)[None],
        sigma=None if pred.sigma is None else np.asarray(pred.sigma)[None],
        q_lo=None if pred.q_lo is None else np.asarray(pred.q_lo)[None],
        q_hi=None if pred.q_hi is None else np.asarray(pred.q_hi)[None],
        image_size=None if image_size is None else np.asarray(image_size, dtype=float)[None],
    )
    return BoxInterval(tuple(lo[0].tolist()), tuple(hi[0].tolist()), method.sidedness)


def build_one_sided_interval(pred: BoxPrediction, quantiles, variant, image_size=None) -> BoxInterval:
    """Outer box; a scalar quantile (max-score variants) is shared by all coordinates."""
    variant = _as_method(variant)
    if variant.sidedness is not Sidedness.ONE_SIDED_OUTER:
        raise ValueError(f"{variant.value!r} is not a one-sided variant")
    q = np.broadcast_to(np.asarray(quantiles, dtype=float), (len(pred.coords),))
    return build_interval(pred, q, variant, image_size)


def outer_boxes(lo, hi) -> np.ndarray:
    """Enclosing box ``(lo_x0, lo_y0, hi_x1, hi_y1)`` of corner intervals."""
    lo = np.atleast_2d(lo)
    hi = np.atleast_2d(hi)
    return np.stack([lo[:, 0], lo[:, 1], hi[:, 2], hi[:, 3]], axis=1)


def centered_bounds(lo, hi, pred):
    """Two-sided bounds spanning from the predicted box center to the outer box."""
    pred = np.atleast_2d(np.asarray(pred, dtype=float))
    outer = outer_boxes(lo, hi)
    cx = 0.5 * (pred[:, 0] + pred[:, 2])
    cy = 0.5 * (pred[:, 1] + pred[:, 3])
    center = np.stack([cx, cy, cx, cy], axis=1)
    return np.minimum(outer, center), np.maximum(outer, center)


def one_sided_to_two_sided(interval: BoxInterval, pred: BoxPrediction) -> BoxInterval:
    lo, hi = centered_bounds(np.asarray(interval.lo)[None], np.asarray(interval.hi)[None], pred.coords)
    return BoxInterval(tuple(lo[0].tolist()), tuple(hi[0].tolist()), Sidedness.TWO_SIDED)


# -- ensembles --------------------------------------------------------------


def fuse_members(coords, confidences):
    """Confidence-weighted fusion of ensemble members.

    ``coords`` is ``(T, ..., m)`` and ``confidences`` ``(T, ...)``. Returns
    the weighted mean coordinates, the population standard deviation of the
    members around their unweighted mean (floored), and the mean confidence.
    """
    coords = np.asarray(coords, dtype=float)
    w = np.asarray(confidences, dtype=float)
    if coords.shape[0] < 1:
        raise ValueError("need at least one ensemble member")
    if np.any(w < 0):
        raise ValueError("member confidences must be non-negative")
    total = w.sum(axis=0)
    if np.any(total == 0):
        warnings.warn("all member confidences are zero; using equal weights")
        w = np.where(total == 0, 1.0, w)
        total = w.sum(axis=0)
    # offsets from the first member keep identical members exact
    anchor = coords[0]
    fused = anchor + (w[..., None] * (coords - anchor)).sum(axis=0) / total[..., None]
    sigma = np.maximum(coords.std(axis=0), SIGMA_FLOOR)
    return fused, sigma, np.asarray(confidences, dtype=float).mean(axis=0)


def fuse_ensemble(members: Sequence[BoxPrediction]) -> BoxPrediction:
    if not members:
        raise ValueError("need at least one ensemble member")
    coords = np.array([m.coords for m in members], dtype=float)
    conf = np.array([m.confidence for m in members], dtype=float)
    fused, sigma, mean_conf = fuse_members(coords, conf)
    return BoxPrediction(tuple(fused.tolist()), sigma=tuple(sigma.tolist()), confidence=float(mean_conf))
