"""Axis-aligned boxes in corner parameterization ``(x0, y0, x1, y1)``."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

SMALL_AREA = 32.0**2
LARGE_AREA = 96.0**2


class SizeStratum(str, Enum):
    SMALL = "small"
    MEDIUM = "medium"
    LARGE = "large"


@dataclass(frozen=True)
class Box:
    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not (self.x0 <= self.x1 and self.y0 <= self.y1):
            raise ValueError(
                f"invalid box ({self.x0}, {self.y0}, {self.x1}, {self.y1}): "
                "need x0 <= x1 and y0 <= y1"
            )

    @classmethod
    def from_array(cls, coords) -> "Box":
        x0, y0, x1, y1 = (float(c) for c in coords)
        return cls(x0, y0, x1, y1)

    def to_array(self) -> np.ndarray:
        return np.array([self.x0, self.y0, self.x1, self.y1], dtype=float)

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))


def area(b: Box) -> float:
    return (b.x1 - b.x0) * (b.y1 - b.y0)


def iou(a: Box, b: Box) -> float:
    """Intersection over union; 0 when the union is degenerate."""
    iw = min(a.x1, b.x1) - max(a.x0, b.x0)
    ih = min(a.y1, b.y1) - max(a.y0, b.y0)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = area(a) + area(b) - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def stratum(b: Box) -> SizeStratum:
    return stratum_of_area(area(b))


def stratum_of_area(a: float) -> SizeStratum:
    if a <= SMALL_AREA:
        return SizeStratum.SMALL
    if a <= LARGE_AREA:
        return SizeStratum.MEDIUM
    return SizeStratum.LARGE


def box_areas(boxes) -> np.ndarray:
    """Areas of an ``(n, 4)`` array of corner boxes."""
    boxes = np.asarray(boxes, dtype=float)
    return (boxes[..., 2] - boxes[..., 0]) * (boxes[..., 3] - boxes[..., 1])


def strata_codes(boxes) -> np.ndarray:
    """Integer stratum per box: 0 small, 1 medium, 2 large."""
    a = box_areas(boxes)
    return np.where(a <= SMALL_AREA, 0, np.where(a <= LARGE_AREA, 1, 2))


STRATA = (SizeStratum.SMALL, SizeStratum.MEDIUM, SizeStratum.LARGE)


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU between ``(n, 4)`` and ``(p, 4)`` box arrays."""
    a = np.asarray(a, dtype=float).reshape(-1, 4)
    b = np.asarray(b, dtype=float).reshape(-1, 4)
    ix0 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy0 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix1 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy1 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(ix1 - ix0, 0, None) * np.clip(iy1 - iy0, 0, None)
    union = box_areas(a)[:, None] + box_areas(b)[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out
