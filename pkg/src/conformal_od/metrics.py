"""Coverage, efficiency and calibration metrics for two-step outputs."""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .box_intervals import BoxInterval, Sidedness, centered_bounds, outer_boxes
from .geometry import STRATA, box_areas, strata_codes


def empirical_coverage(outcomes) -> Optional[float]:
    """Fraction of covered outcomes; ``None`` for an empty cell."""
    outcomes = np.asarray(list(outcomes) if not isinstance(outcomes, np.ndarray) else outcomes, dtype=bool)
    if outcomes.size == 0:
        return None
    return float(outcomes.mean())


def mean_set_size(sets) -> float:
    sizes = [len(s) for s in sets] if not isinstance(sets, np.ndarray) else np.asarray(sets).sum(axis=1)
    if len(sizes) == 0:
        raise ValueError("no label sets")
    return float(np.mean(sizes))


def interval_widths(lo, hi) -> np.ndarray:
    return np.asarray(hi, dtype=float) - np.asarray(lo, dtype=float)


def mpiw(intervals=None, *, lo=None, hi=None) -> float:
    """Mean width over samples and coordinates; samples with any unbounded
    coordinate are left out (see :func:`unbounded_count`)."""
    if intervals is not None:
        lo = np.array([iv.lo for iv in intervals], dtype=float)
        hi = np.array([iv.hi for iv in intervals], dtype=float)
    w = interval_widths(lo, hi)
    if w.ndim == 1:
        w = w[None]
    finite = np.all(np.isfinite(w), axis=1)
    if not finite.any():
        return math.nan
    return float(w[finite].mean())


def unbounded_count(lo, hi) -> int:
    w = interval_widths(lo, hi)
    return int((~np.all(np.isfinite(np.atleast_2d(w)), axis=1)).sum())


def stretch(intervals=None, preds=None, *, lo=None, hi=None) -> float:
    """Mean square-root area ratio of the outer interval box to the predicted box."""
    if intervals is not None:
        lo = np.array([iv.lo for iv in intervals], dtype=float)
        hi = np.array([iv.hi for iv in intervals], dtype=float)
    pred = np.atleast_2d(np.asarray(preds, dtype=float))
    outer_area = box_areas(outer_boxes(lo, hi))
    pred_area = box_areas(pred)
    zero = pred_area <= 0
    if zero.any():
        warnings.warn(f"{int(zero.sum())} predicted boxes with zero area excluded from stretch")
    keep = ~zero & np.isfinite(outer_area)
    if not keep.any():
        return math.nan
    return float(np.mean(np.sqrt(outer_area[keep] / pred_area[keep])))


def pinball_loss(y, q_pred, tau: float):
    """Quantile loss of ``q_pred`` as an estimate of the tau-quantile of ``y``."""
    diff = np.asarray(y, dtype=float) - np.asarray(q_pred, dtype=float)
    loss = np.where(diff > 0, tau * diff, (tau - 1.0) * diff)
    return loss[()] if loss.ndim == 0 else loss


def _cell(outcomes) -> tuple[Optional[float], int]:
    outcomes = np.asarray(outcomes, dtype=bool)
    return empirical_coverage(outcomes), int(outcomes.size)


@dataclass
class EvaluationReport:
    """Coverage and efficiency of one evaluated batch.

    ``cells`` maps a cell name (``all``, ``class=<y>``, ``size=<stratum>``,
    ``classified=correct|incorrect``) to a dict with ``n``,
    ``box_coverage``, ``label_coverage`` and ``joint_coverage``.
    """

    n: int
    cells: dict
    mean_set_size: float
    mpiw: float
    stretch: float
    unbounded: int
    config: dict = field(default_factory=dict)

    @property
    def coverage(self) -> Optional[float]:
        return self.cells["all"]["box_coverage"]

    @property
    def label_coverage(self) -> Optional[float]:
        return self.cells["all"]["label_coverage"]

    @property
    def joint_coverage(self) -> Optional[float]:
        return self.cells["all"]["joint_coverage"]

    def rows(self) -> list[dict]:
        out = []
        for name, cell in self.cells.items():
            out.append({"cell": name, **cell})
        return out

    def to_csv(self) -> str:
        """Long format: ``metric,cell,n,value``; empty cells have no value."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "cell", "n", "value"])
        for metric in ("box_coverage", "label_coverage", "joint_coverage"):
            for name, cell in self.cells.items():
                w.writerow([metric, name, cell["n"], _fmt(cell[metric])])
        for metric, value in (
            ("mean_set_size", self.mean_set_size),
            ("mpiw", self.mpiw),
            ("stretch", self.stretch),
            ("unbounded", self.unbounded),
        ):
            w.writerow([metric, "all", self.n, _fmt(value)])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "cells": self.cells,
            "mean_set_size": self.mean_set_size,
            "mpiw": self.mpiw,
            "stretch": self.stretch,
            "unbounded": self.unbounded,
            "config": self.config,
        }


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def stratified_report(
    label_mask,
    lo,
    hi,
    pred_boxes,
    truth_boxes,
    labels,
    probs=None,
    sidedness: Sidedness = Sidedness.TWO_SIDED,
    n_classes: Optional[int] = None,
    config: Optional[dict] = None,
) -> EvaluationReport:
    """Fill every report cell. Size strata use the true box; one-sided
    intervals are converted to center-anchored two-sided ones for MPIW."""
    label_mask = np.asarray(label_mask, dtype=bool)
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    truth = np.asarray(truth_boxes, dtype=float)
    pred = np.asarray(pred_boxes, dtype=float)
    labels = np.asarray(labels, dtype=int)
    n = labels.size
    if n == 0:
        raise ValueError("nothing to evaluate")
    k = n_classes or label_mask.shape[1]

    label_cov = label_mask[np.arange(n), labels]
    box_cov = np.all((lo <= truth) & (truth <= hi), axis=1)
    joint = label_cov & box_cov

    def cell(sel):
        return {
            "n": int(sel.sum()),
            "box_coverage": empirical_coverage(box_cov[sel]),
            "label_coverage": empirical_coverage(label_cov[sel]),
            "joint_coverage": empirical_coverage(joint[sel]),
        }

    cells = {"all": cell(np.ones(n, dtype=bool))}
    for y in range(k):
        cells[f"class={y}"] = cell(labels == y)
    if truth.shape[1] == 4:
        codes = strata_codes(truth)
        for i, s in enumerate(STRATA):
            cells[f"size={s.value}"] = cell(codes == i)
    if probs is not None:
        correct = np.asarray(probs).argmax(axis=1) == labels
        cells["classified=correct"] = cell(correct)
        cells["classified=incorrect"] = cell(~correct)

    if sidedness is Sidedness.ONE_SIDED_OUTER:
        w_lo, w_hi = centered_bounds(lo, hi, pred)
    else:
        w_lo, w_hi = lo, hi
    st = stretch(lo=lo, hi=hi, preds=pred) if pred.shape[1] == 4 else math.nan
    return EvaluationReport(
        n=n,
        cells=cells,
        mean_set_size=float(label_mask.sum(axis=1).mean()),
        mpiw=mpiw(lo=w_lo, hi=w_hi),
        stretch=st,
        unbounded=unbounded_count(w_lo, w_hi),
        config=dict(config or {}),
    )
