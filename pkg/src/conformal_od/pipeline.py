"""Two-step conformal detector: label sets first, then box intervals.

Calibration partitions matched objects by their *true* class; at test time
the box quantile of each coordinate is the maximum over the classes in the
object's label set, so misclassified objects still receive a valid interval
whenever their true class is in the set.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .box_intervals import (
    BoxInterval,
    BoxMethod,
    Sidedness,
    box_scores,
    interval_bounds,
    repair_crossings,
    _as_method,
)
from .label_sets import (
    LabelMethod,
    LabelSet,
    calibrate_label_quantiles,
    classthr_mask,
    full_mask,
    naive_mask,
    oracle_mask,
    top_mask,
)
from .multiple_testing import bonferroni_quantiles, max_rank_quantiles, max_score_quantile
from .records import DetectionRecord, MatchedSample
from .validation import check_alpha, check_coords, check_labels, check_probs

MODEL_FORMAT = "conformal-od-calibration"
MODEL_VERSION = 1


class Correction(str, Enum):
    MAXRANK = "maxrank"
    BONFERRONI = "bonferroni"
    MAXSCORE = "maxscore"


@dataclass(frozen=True)
class MiscoverageConfig:
    alpha_label: float = 0.01
    alpha_box: float = 0.1

    def __post_init__(self):
        check_alpha(self.alpha_label, "alpha_label", allow_zero=True)
        check_alpha(self.alpha_box, "alpha_box")


def sequential_guarantee(config: MiscoverageConfig | float, alpha_box: Optional[float] = None) -> float:
    """Nominal joint coverage floor ``(1 - alpha_label)(1 - alpha_box)``."""
    if not isinstance(config, MiscoverageConfig):
        config = MiscoverageConfig(float(config), float(alpha_box))
    return (1.0 - config.alpha_label) * (1.0 - config.alpha_box)


# -- batches ----------------------------------------------------------------


@dataclass
class DetectionBatch:
    """Column-oriented view of ``n`` detections.

    ``boxes`` is ``(n, m)``, ``probs`` ``(n, K)``; ``sigma``, ``q_lo`` and
    ``q_hi`` are optional ``(n, m)`` arrays and ``image_size`` an optional
    ``(n, 2)`` array of (width, height) with NaN where unknown.
    """

    boxes: np.ndarray
    probs: np.ndarray
    confidence: Optional[np.ndarray] = None
    sigma: Optional[np.ndarray] = None
    q_lo: Optional[np.ndarray] = None
    q_hi: Optional[np.ndarray] = None
    image_size: Optional[np.ndarray] = None
    image_ids: Optional[list] = None

    def __post_init__(self):
        self.boxes = check_coords(self.boxes, "boxes")
        n, m = self.boxes.shape
        self.probs = check_probs(self.probs)
        if self.probs.shape[0] != n:
            raise ValueError(f"probs has {self.probs.shape[0]} rows, boxes has {n}")
        if self.confidence is not None:
            self.confidence = np.asarray(self.confidence, dtype=float).reshape(n)
        if self.sigma is not None:
            self.sigma = check_coords(self.sigma, "sigma", n, m)
        if (self.q_lo is None) != (self.q_hi is None):
            raise ValueError("q_lo and q_hi must be given together")
        if self.q_lo is not None:
            lo = check_coords(self.q_lo, "q_lo", n, m)
            hi = check_coords(self.q_hi, "q_hi", n, m)
            self.q_lo, self.q_hi = repair_crossings(lo, hi)
        if self.image_size is not None:
            self.image_size = np.asarray(self.image_size, dtype=float).reshape(n, 2)

    def __len__(self) -> int:
        return self.boxes.shape[0]

    @property
    def n_coords(self) -> int:
        return self.boxes.shape[1]

    @property
    def n_classes(self) -> int:
        return self.probs.shape[1]

    def subset(self, idx) -> "DetectionBatch":
        def take(a):
            return None if a is None else a[idx]

        ids = None
        if self.image_ids is not None:
            ids = list(np.asarray(self.image_ids, dtype=object)[idx])
        return DetectionBatch(
            self.boxes[idx], self.probs[idx], take(self.confidence), take(self.sigma),
            take(self.q_lo), take(self.q_hi), take(self.image_size), ids,
        )

    @classmethod
    def from_records(cls, records: Sequence[DetectionRecord]) -> "DetectionBatch":
        records = list(records)
        if not records:
            raise ValueError("no detections")

        def optional(name):
            vals = [getattr(r, name) for r in records]
            present = [v is not None for v in vals]
            if not any(present):
                return None
            if not all(present):
                raise ValueError(f"field {name!r} is present on some detections but not all")
            return np.array(vals, dtype=float)

        size = np.array(
            [
                (np.nan, np.nan) if r.image_size is None else r.image_size
                for r in records
            ],
            dtype=float,
        )
        return cls(
            boxes=np.array([r.box for r in records], dtype=float),
            probs=np.array([r.probs for r in records], dtype=float),
            confidence=np.array([r.confidence for r in records], dtype=float),
            sigma=optional("sigma"),
            q_lo=optional("q_lo"),
            q_hi=optional("q_hi"),
            image_size=None if np.isnan(size).all() else size,
            image_ids=[r.image_id for r in records],
        )


@dataclass
class GroundTruthBatch:
    boxes: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.boxes = check_coords(self.boxes, "truth boxes")
        self.labels = np.asarray(self.labels, dtype=int).reshape(-1)
        if self.labels.shape[0] != self.boxes.shape[0]:
            raise ValueError("truth boxes and labels differ in length")

    def __len__(self) -> int:
        return self.labels.shape[0]

    def subset(self, idx) -> "GroundTruthBatch":
        return GroundTruthBatch(self.boxes[idx], self.labels[idx])


def batches_from_samples(samples: Sequence[MatchedSample]):
    samples = list(samples)
    X = DetectionBatch.from_records([s.prediction for s in samples])
    y = GroundTruthBatch(
        np.array([s.truth.box for s in samples], dtype=float),
        np.array([s.truth.label for s in samples], dtype=int),
    )
    return X, y


# -- calibration model ------------------------------------------------------------


@dataclass
class CalibrationModel:
    """Every quantile needed at prediction time, plus the settings that made them."""

    label_quantiles: np.ndarray
    box_quantiles: np.ndarray
    class_counts: np.ndarray
    box_method: BoxMethod
    correction: Correction
    label_method: LabelMethod
    config: MiscoverageConfig
    min_class_count: int = 2
    version: int = field(default=MODEL_VERSION)

    @property
    def n_classes(self) -> int:
        return self.box_quantiles.shape[0]

    @property
    def n_coords(self) -> int:
        return self.box_quantiles.shape[1]

    def to_dict(self) -> dict:
        def enc(x):
            return [("inf" if math.isinf(v) else float(v)) for v in np.ravel(x)]

        return {
            "format": MODEL_FORMAT,
            "version": self.version,
            "box_method": self.box_method.value,
            "correction": self.correction.value,
            "label_method": self.label_method.value,
            "alpha_label": self.config.alpha_label,
            "alpha_box": self.config.alpha_box,
            "min_class_count": self.min_class_count,
            "n_classes": self.n_classes,
            "n_coords": self.n_coords,
            "class_counts": [int(c) for c in self.class_counts],
            "label_quantiles": enc(self.label_quantiles),
            "box_quantiles": [enc(row) for row in self.box_quantiles],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationModel":
        if d.get("format") != MODEL_FORMAT:
            raise ValueError(f"not a calibration model document (format={d.get('format')!r})")
        if d.get("version") != MODEL_VERSION:
            raise ValueError(
                f"unsupported model version {d.get('version')!r}; this build reads version {MODEL_VERSION}"
            )

        def dec(xs):
            return np.array([math.inf if v == "inf" else float(v) for v in xs], dtype=float)

        box_q = np.array([dec(row) for row in d["box_quantiles"]], dtype=float)
        box_q = box_q.reshape(int(d["n_classes"]), int(d["n_coords"]))
        return cls(
            label_quantiles=dec(d["label_quantiles"]),
            box_quantiles=box_q,
            class_counts=np.array(d["class_counts"], dtype=int),
            box_method=BoxMethod(d["box_method"]),
            correction=Correction(d["correction"]),
            label_method=LabelMethod(d["label_method"]),
            config=MiscoverageConfig(float(d["alpha_label"]), float(d["alpha_box"])),
            min_class_count=int(d["min_class_count"]),
        )


def resolve_correction(box_method, correction=None) -> Correction:
    method = _as_method(box_method)
    fixed = method.fixed_correction
    if correction is None:
        return Correction(fixed or Correction.MAXRANK.value)
    try:
        correction = Correction(correction)
    except ValueError:
        choices = ", ".join(c.value for c in Correction)
        raise ValueError(f"unknown correction {correction!r}; choose from {choices}") from None
    if fixed is not None and correction.value != fixed:
        raise ValueError(f"box method {method.value!r} always uses the {fixed!r} correction")
    if correction is Correction.MAXSCORE and method.sidedness is Sidedness.TWO_SIDED:
        raise ValueError("the max-score correction is defined for one-sided methods only")
    return correction


def _check_fields(method: BoxMethod, X: DetectionBatch) -> None:
    if method.needs_sigma and X.sigma is None:
        raise ValueError(f"box method {method.value!r} needs sigma on every detection")
    if method.needs_quantile_band and X.q_lo is None:
        raise ValueError(f"box method {method.value!r} needs q_lo/q_hi on every detection")
    if method.sidedness is Sidedness.ONE_SIDED_OUTER and X.n_coords != 4:
        raise ValueError(f"box method {method.value!r} needs 4 corner coordinates")


def correct_class_scores(scores, alpha_box: float, correction: Correction) -> np.ndarray:
    """Per-coordinate quantiles of one class's ``(n, m)`` score matrix."""
    if correction is Correction.MAXRANK:
        return max_rank_quantiles(scores, alpha_box)
    if correction is Correction.BONFERRONI:
        return bonferroni_quantiles(scores, alpha_box)
    return np.full(scores.shape[1], max_score_quantile(scores, alpha_box))


def calibrate_batch(
    X: DetectionBatch,
    y: GroundTruthBatch,
    config: MiscoverageConfig,
    box_method="std",
    correction=None,
    label_method="classthr",
    min_class_count: int = 2,
    n_classes: Optional[int] = None,
) -> CalibrationModel:
    method = _as_method(box_method)
    correction = resolve_correction(method, correction)
    label_method = LabelMethod(label_method)
    _check_fields(method, X)
    k = n_classes or X.n_classes
    if X.n_classes != k:
        raise ValueError(f"detections carry {X.n_classes} class probabilities, expected {k}")
    labels = check_labels(y.labels, len(X), k)
    truth = check_coords(y.boxes, "truth boxes", len(X), X.n_coords)

    label_q = calibrate_label_quantiles(X.probs, labels, config.alpha_label, k)
    scores = box_scores(method, X.boxes, truth, X.sigma, X.q_lo, X.q_hi)
    counts = np.bincount(labels, minlength=k)[:k]
    box_q = np.full((k, X.n_coords), math.inf)
    sparse = []
    for c in range(k):
        if counts[c] < min_class_count:
            sparse.append(c)
            continue
        box_q[c] = correct_class_scores(scores[labels == c], config.alpha_box, correction)
    if sparse:
        warnings.warn(
            f"classes with fewer than {min_class_count} calibration samples get unbounded "
            f"box intervals: {sparse}"
        )
    return CalibrationModel(
        label_quantiles=label_q,
        box_quantiles=box_q,
        class_counts=counts,
        box_method=method,
        correction=correction,
        label_method=label_method,
        config=config,
        min_class_count=min_class_count,
    )


def calibrate(
    samples: Sequence[MatchedSample],
    config: MiscoverageConfig = MiscoverageConfig(),
    box_method="std",
    correction=None,
    label_method="classthr",
    min_class_count: int = 2,
    n_classes: Optional[int] = None,
) -> CalibrationModel:
    X, y = batches_from_samples(samples)
    return calibrate_batch(X, y, config, box_method, correction, label_method, min_class_count, n_classes)


# -- prediction ------------------------------------------------------------------


@dataclass
class TwoStepPrediction:
    """Batch output: ``label_mask`` ``(n, K)``, quantiles and bounds ``(n, m)``."""

    label_mask: np.ndarray
    selected_quantiles: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    sidedness: Sidedness

    def __len__(self) -> int:
        return self.lo.shape[0]

    def set_sizes(self) -> np.ndarray:
        return self.label_mask.sum(axis=1)

    def label_covered(self, labels) -> np.ndarray:
        labels = np.asarray(labels, dtype=int)
        return self.label_mask[np.arange(labels.size), labels]

    def box_covered(self, truth_boxes) -> np.ndarray:
        t = np.asarray(truth_boxes, dtype=float)
        return np.all((self.lo <= t) & (t <= self.hi), axis=1)

    def subset(self, idx) -> "TwoStepPrediction":
        return TwoStepPrediction(
            self.label_mask[idx], self.selected_quantiles[idx], self.lo[idx], self.hi[idx], self.sidedness
        )


@dataclass(frozen=True)
class TwoStepOutput:
    label_set: LabelSet
    interval: BoxInterval
    selected_quantiles: tuple[float, ...]
    label_covered: Optional[bool] = None
    box_covered: Optional[bool] = None


def label_set_mask(model: CalibrationModel, probs, labels=None, method=None) -> np.ndarray:
    method = LabelMethod(method or model.label_method)
    if method is LabelMethod.CLASSTHR:
        return classthr_mask(probs, model.label_quantiles)
    if method is LabelMethod.TOP:
        return top_mask(probs)
    if method is LabelMethod.NAIVE:
        return naive_mask(probs, model.config.alpha_label)
    if method is LabelMethod.FULL:
        return full_mask(len(probs), model.n_classes)
    if labels is None:
        raise ValueError("the oracle label method needs the true labels at prediction time")
    return oracle_mask(labels, model.n_classes)


def select_quantiles(mask, box_quantiles) -> np.ndarray:
    """Per-coordinate maximum of the class quantiles over each label set."""
    q = np.asarray(box_quantiles, dtype=float)
    picked = np.where(np.asarray(mask)[:, :, None], q[None, :, :], -np.inf)
    return picked.max(axis=1)


def predict_batch(model: CalibrationModel, X: DetectionBatch, labels=None, label_method=None) -> TwoStepPrediction:
    _check_fields(model.box_method, X)
    if X.n_classes != model.n_classes or X.n_coords != model.n_coords:
        raise ValueError(
            f"detections have {X.n_classes} classes / {X.n_coords} coordinates, model expects "
            f"{model.n_classes} / {model.n_coords}"
        )
    if labels is not None:
        labels = check_labels(labels, len(X), model.n_classes)
    mask = label_set_mask(model, X.probs, labels, label_method)
    q = select_quantiles(mask, model.box_quantiles)
    lo, hi = interval_bounds(
        model.box_method, X.boxes, q, X.sigma, X.q_lo, X.q_hi, X.image_size
    )
    return TwoStepPrediction(mask, q, lo, hi, model.box_method.sidedness)


def predict(record: DetectionRecord, model: CalibrationModel, truth=None) -> TwoStepOutput:
    """Two-step output for one detection; ``truth`` (a GroundTruthObject)
    enables the oracle label method and the coverage diagnostics."""
    X = DetectionBatch.from_records([record])
    labels = None if truth is None else [truth.label]
    out = predict_batch(model, X, labels)
    mask = out.label_mask[0]
    method = model.label_method
    label_set = LabelSet(frozenset(int(i) for i in np.flatnonzero(mask)), method)
    interval = BoxInterval(tuple(out.lo[0].tolist()), tuple(out.hi[0].tolist()), out.sidedness)
    label_cov = box_cov = None
    if truth is not None:
        label_cov = truth.label in label_set.labels
        box_cov = interval.contains(truth.box)
    return TwoStepOutput(label_set, interval, tuple(out.selected_quantiles[0].tolist()), label_cov, box_cov)


class TwoStepConformalDetector(BaseEstimator):
    """Conformal label sets and box intervals for a fixed object detector.

    The detector itself is never refit: ``fit`` consumes its outputs on
    held-out objects matched to ground truth and stores the per-class
    quantiles in ``model_``.

    Parameters
    ----------
    alpha_label : float
        Per-class label miscoverage. ``0`` makes every ClassThr set full.
    alpha_box : float
        Per-class miscoverage of the whole box (all coordinates jointly).
    box_method : str
        One of ``std``, ``ens``, ``cqr`` (two-sided) or ``addbonf``,
        ``addmax``, ``multbonf``, ``multmax``, ``boxstd1s``, ``boxens1s``,
        ``boxmult`` (one-sided outer boxes).
    correction : str, optional
        ``maxrank`` (default), ``bonferroni``, or ``maxscore`` (one-sided
        only). Baselines named after a correction always use it.
    label_method : str
        ``classthr``, ``top``, ``naive``, ``full`` or ``oracle``.
    min_class_count : int
        Classes with fewer calibration objects get unbounded intervals.
    n_classes : int, optional
        Number of classes, inferred from the probability width otherwise.

    Attributes
    ----------
    model_ : CalibrationModel
    """

    def __init__(
        self,
        alpha_label: float = 0.01,
        alpha_box: float = 0.1,
        box_method: str = "std",
        correction: Optional[str] = None,
        label_method: str = "classthr",
        min_class_count: int = 2,
        n_classes: Optional[int] = None,
    ):
        self.alpha_label = alpha_label
        self.alpha_box = alpha_box
        self.box_method = box_method
        self.correction = correction
        self.label_method = label_method
        self.min_class_count = min_class_count
        self.n_classes = n_classes

    def fit(self, X: DetectionBatch, y: GroundTruthBatch):
        config = MiscoverageConfig(self.alpha_label, self.alpha_box)
        self.model_ = calibrate_batch(
            X, y, config, self.box_method, self.correction, self.label_method,
            self.min_class_count, self.n_classes,
        )
        return self

    def fit_samples(self, samples: Sequence[MatchedSample]):
        return self.fit(*batches_from_samples(samples))

    @classmethod
    def from_model(cls, model: CalibrationModel) -> "TwoStepConformalDetector":
        est = cls(
            alpha_label=model.config.alpha_label,
            alpha_box=model.config.alpha_box,
            box_method=model.box_method.value,
            correction=model.correction.value,
            label_method=model.label_method.value,
            min_class_count=model.min_class_count,
            n_classes=model.n_classes,
        )
        est.model_ = model
        return est

    def predict(self, X: DetectionBatch, labels=None) -> TwoStepPrediction:
        check_is_fitted(self, "model_")
        return predict_batch(self.model_, X, labels)

    def predict_one(self, record: DetectionRecord, truth=None) -> TwoStepOutput:
        check_is_fitted(self, "model_")
        return predict(record, self.model_, truth)

    def score(self, X: DetectionBatch, y: GroundTruthBatch) -> float:
        """Empirical joint coverage (true label in set and box covered)."""
        out = self.predict(X, y.labels)
        return float(np.mean(out.label_covered(y.labels) & out.box_covered(y.boxes)))
