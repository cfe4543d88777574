"""Per-object records exchanged between ingestion, matching and calibration.

Class ids are zero-based integers ``0..K-1`` indexing the probability
vector of a detection.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

PROB_TOL = 1e-6


def _as_tuple(values) -> Optional[tuple[float, ...]]:
    if values is None:
        return None
    return tuple(float(v) for v in values)


@dataclass(frozen=True)
class DetectionRecord:
    """One predicted object as exported by a detector."""

    image_id: str
    box: tuple[float, ...]
    probs: tuple[float, ...]
    confidence: float = 1.0
    sigma: Optional[tuple[float, ...]] = None
    q_lo: Optional[tuple[float, ...]] = None
    q_hi: Optional[tuple[float, ...]] = None
    image_width: Optional[float] = None
    image_height: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "image_id", str(self.image_id))
        object.__setattr__(self, "box", _as_tuple(self.box))
        object.__setattr__(self, "probs", _as_tuple(self.probs))
        object.__setattr__(self, "confidence", float(self.confidence))
        for name in ("sigma", "q_lo", "q_hi"):
            object.__setattr__(self, name, _as_tuple(getattr(self, name)))
        validate_detection(self)

    @property
    def n_classes(self) -> int:
        return len(self.probs)

    @property
    def predicted_label(self) -> int:
        return int(np.argmax(self.probs))

    @property
    def image_size(self) -> Optional[tuple[float, float]]:
        if self.image_width is None or self.image_height is None:
            return None
        return (float(self.image_width), float(self.image_height))


@dataclass(frozen=True)
class GroundTruthObject:
    image_id: str
    box: tuple[float, ...]
    label: int

    def __post_init__(self):
        object.__setattr__(self, "image_id", str(self.image_id))
        object.__setattr__(self, "box", _as_tuple(self.box))
        object.__setattr__(self, "label", int(self.label))
        if self.label < 0:
            raise ValueError(f"label must be a non-negative class id, got {self.label}")
        _check_box(self.box, "box")


@dataclass(frozen=True)
class MatchedSample:
    """A detection paired with the ground-truth object it localizes."""

    image_id: str
    prediction: DetectionRecord
    truth: GroundTruthObject
    iou: float
    truth_index: int = field(default=-1, compare=False)
    prediction_index: int = field(default=-1, compare=False)


def _check_box(box: Sequence[float], name: str) -> None:
    if len(box) == 0:
        raise ValueError(f"{name} is empty")
    if not all(np.isfinite(box)):
        raise ValueError(f"{name} has non-finite coordinates: {box}")
    if len(box) == 4 and not (box[0] <= box[2] and box[1] <= box[3]):
        raise ValueError(f"{name} violates x0 <= x1 and y0 <= y1: {box}")


def validate_detection(rec: DetectionRecord) -> None:
    _check_box(rec.box, "box")
    probs = np.asarray(rec.probs)
    if probs.size == 0:
        raise ValueError("probs is empty")
    if np.any(probs < -PROB_TOL) or np.any(probs > 1 + PROB_TOL):
        raise ValueError("probs must lie in [0, 1]")
    if abs(probs.sum() - 1.0) > PROB_TOL:
        raise ValueError(f"probs sum to {probs.sum():.8f}, expected 1")
    m = len(rec.box)
    for name in ("sigma", "q_lo", "q_hi"):
        v = getattr(rec, name)
        if v is not None and len(v) != m:
            raise ValueError(f"{name} has {len(v)} entries, box has {m}")
    if (rec.q_lo is None) != (rec.q_hi is None):
        raise ValueError("q_lo and q_hi must be given together")
    if rec.sigma is not None and any(s < 0 for s in rec.sigma):
        raise ValueError("sigma must be non-negative")
    for name in ("image_width", "image_height"):
        v = getattr(rec, name)
        if v is not None and not v > 0:
            raise ValueError(f"{name} must be positive")
