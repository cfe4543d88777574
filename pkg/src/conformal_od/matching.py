"""Pair detections with ground truth per image by maximum-IoU assignment."""

from __future__ import annotations

import warnings
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import iou_matrix
from .records import DetectionRecord, GroundTruthObject, MatchedSample

IOU_THRESHOLD = 0.5


def assign_max_iou(ious: np.ndarray, threshold: float = IOU_THRESHOLD):
    """Solve the rectangular assignment maximizing total IoU of matched pairs.

    Pairs below ``threshold`` contribute nothing to the objective and are
    dropped from the result. Returns ``(pred_idx, truth_idx)`` ordered by
    truth index.
    """
    ious = np.asarray(ious, dtype=float)
    if ious.size == 0:
        return np.empty(0, dtype=int), np.empty(0, dtype=int)
    gain = np.where(ious >= threshold, ious, 0.0)
    # truths x preds so ties resolve toward lower truth indices
    t_idx, p_idx = linear_sum_assignment(gain.T, maximize=True)
    keep = ious[p_idx, t_idx] >= threshold
    t_idx, p_idx = t_idx[keep], p_idx[keep]
    order = np.argsort(t_idx, kind="stable")
    return p_idx[order], t_idx[order]


def match_image(
    preds: Sequence[DetectionRecord],
    truths: Sequence[GroundTruthObject],
    threshold: float = IOU_THRESHOLD,
) -> list[MatchedSample]:
    if not preds or not truths:
        return []
    image_ids = {p.image_id for p in preds} | {t.image_id for t in truths}
    if len(image_ids) != 1:
        raise ValueError(f"match_image expects one image, got {sorted(image_ids)}")
    ious = iou_matrix([p.box for p in preds], [t.box for t in truths])
    p_idx, t_idx = assign_max_iou(ious, threshold)
    return [
        MatchedSample(
            image_id=truths[t].image_id,
            prediction=preds[p],
            truth=truths[t],
            iou=float(ious[p, t]),
            truth_index=int(t),
            prediction_index=int(p),
        )
        for p, t in zip(p_idx, t_idx)
    ]


def group_by_image(records) -> dict[str, list]:
    out: dict[str, list] = {}
    for r in records:
        out.setdefault(r.image_id, []).append(r)
    return out


def match_dataset(
    preds_by_image: Mapping[str, Sequence[DetectionRecord]],
    truths_by_image: Mapping[str, Sequence[GroundTruthObject]],
    threshold: float = IOU_THRESHOLD,
) -> list[MatchedSample]:
    """Match every image; output ordered by (image_id, truth index)."""
    only_preds = set(preds_by_image) - set(truths_by_image)
    only_truths = set(truths_by_image) - set(preds_by_image)
    if only_preds:
        warnings.warn(f"{len(only_preds)} image(s) have detections but no ground truth")
    if only_truths:
        warnings.warn(f"{len(only_truths)} image(s) have ground truth but no detections")
    samples: list[MatchedSample] = []
    for image_id in sorted(set(preds_by_image) & set(truths_by_image)):
        samples.extend(
            match_image(preds_by_image[image_id], truths_by_image[image_id], threshold)
        )
    return samples


def match_arrays(pred_image, pred_boxes, truth_image, truth_boxes, threshold: float = IOU_THRESHOLD):
    """Array form of :func:`match_dataset`.

    ``pred_image``/``truth_image`` are integer image indices. Returns the
    matched ``(pred_idx, truth_idx, iou)`` ordered by (image, truth index).
    """
    pred_image = np.asarray(pred_image)
    truth_image = np.asarray(truth_image)
    pred_boxes = np.asarray(pred_boxes, dtype=float)
    truth_boxes = np.asarray(truth_boxes, dtype=float)
    p_order = np.argsort(pred_image, kind="stable")
    t_order = np.argsort(truth_image, kind="stable")
    images = np.intersect1d(pred_image, truth_image)
    p_start = np.searchsorted(pred_image[p_order], images, side="left")
    p_stop = np.searchsorted(pred_image[p_order], images, side="right")
    t_start = np.searchsorted(truth_image[t_order], images, side="left")
    t_stop = np.searchsorted(truth_image[t_order], images, side="right")
    out_p, out_t, out_iou = [], [], []
    for ps, pe, ts, te in zip(p_start, p_stop, t_start, t_stop):
        p_ids = p_order[ps:pe]
        t_ids = t_order[ts:te]
        ious = iou_matrix(pred_boxes[p_ids], truth_boxes[t_ids])
        pi, ti = assign_max_iou(ious, threshold)
        out_p.append(p_ids[pi])
        out_t.append(t_ids[ti])
        out_iou.append(ious[pi, ti])
    if not out_p:
        return np.empty(0, dtype=int), np.empty(0, dtype=int), np.empty(0)
    return np.concatenate(out_p), np.concatenate(out_t), np.concatenate(out_iou)
