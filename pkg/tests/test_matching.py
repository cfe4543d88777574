import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conformal_od.matching import assign_max_iou, match_arrays, match_dataset, match_image
from conformal_od.records import DetectionRecord, GroundTruthObject
from oracles import brute_force_matching


def det(img, box, probs=(1.0,)):
    return DetectionRecord(img, box, probs)


def gt(img, box, label=0):
    return GroundTruthObject(img, box, label)


def test_perfect_singleton():
    out = match_image([det("a", (0, 0, 2, 2))], [gt("a", (0, 0, 2, 2))])
    assert len(out) == 1 and out[0].iou == 1.0


def test_threshold_rejection():
    assert match_image([det("a", (0, 0, 1, 1))], [gt("a", (10, 10, 11, 11))]) == []


def test_cross_iou_example():
    ious = np.array([[0.9, 0.6], [0.7, 0.55]])
    p, t = assign_max_iou(ious)
    assert list(zip(p, t)) == [(0, 0), (1, 1)]
    assert ious[p, t].sum() == pytest.approx(1.45)
    assert brute_force_matching(ious) == pytest.approx(1.45)


def test_exact_threshold_kept():
    p, t = assign_max_iou(np.array([[0.5]]))
    assert list(p) == [0]


def test_sub_threshold_pair_does_not_block_valid_ones():
    # raw-IoU assignment would pick (0,1)+(1,0) = 0.4+0.4 < 0.9 and then lose both
    ious = np.array([[0.9, 0.4], [0.4, 0.0]])
    p, t = assign_max_iou(ious)
    assert list(zip(p, t)) == [(0, 0)]


def test_tie_prefers_lower_truth_index():
    p, t = assign_max_iou(np.array([[0.8, 0.8]]))
    assert list(t) == [0]


def test_empty_inputs():
    assert match_image([], [gt("a", (0, 0, 1, 1))]) == []
    assert match_dataset({}, {}) == []


def test_two_images_and_ordering():
    preds = {"b": [det("b", (0, 0, 2, 2))], "a": [det("a", (0, 0, 3, 3))]}
    truths = {"a": [gt("a", (0, 0, 3, 3))], "b": [gt("b", (0, 0, 2, 2))]}
    out = match_dataset(preds, truths)
    assert [s.image_id for s in out] == ["a", "b"]


def test_unpaired_images_warn():
    with pytest.warns(UserWarning, match="no ground truth"):
        match_dataset({"a": [det("a", (0, 0, 1, 1))]}, {})


def test_mixed_images_rejected():
    with pytest.raises(ValueError):
        match_image([det("a", (0, 0, 1, 1))], [gt("b", (0, 0, 1, 1))])


def test_match_arrays_equals_per_image_records():
    rng = np.random.default_rng(3)
    img = rng.integers(0, 20, 80)
    xy = rng.uniform(0, 50, (80, 2))
    truth = np.concatenate([xy, xy + rng.uniform(5, 20, (80, 2))], axis=1)
    pred = truth + rng.normal(0, 2, truth.shape)
    pred = np.concatenate([np.minimum(pred[:, :2], pred[:, 2:]), np.maximum(pred[:, :2], pred[:, 2:])], axis=1)
    mp, mt, _ = match_arrays(img, pred, img, truth)
    preds, truths = {}, {}
    for i in range(80):
        preds.setdefault(f"{img[i]:03d}", []).append(det(f"{img[i]:03d}", pred[i]))
        truths.setdefault(f"{img[i]:03d}", []).append(gt(f"{img[i]:03d}", truth[i]))
    recs = match_dataset(preds, truths)
    assert len(recs) == len(mp)
    assert sorted(map(tuple, np.round(truth[mt], 9))) == sorted(tuple(np.round(s.truth.box, 9)) for s in recs)


small_iou = st.integers(0, 6).flatmap(
    lambda p: st.integers(0, 6).flatmap(
        lambda t: st.lists(st.floats(0, 1), min_size=p * t, max_size=p * t).map(
            lambda v: np.array(v, dtype=float).reshape(p, t)
        )
    )
)


@settings(max_examples=200, deadline=None)
@given(small_iou)
def test_optimal_one_to_one_and_thresholded(ious):
    p, t = assign_max_iou(ious)
    assert len(set(p)) == len(p) and len(set(t)) == len(t)
    assert np.all(ious[p, t] >= 0.5) if len(p) else True
    assert ious[p, t].sum() == pytest.approx(brute_force_matching(ious), abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(small_iou, st.floats(0.3, 0.6), st.floats(0.0, 0.3))
def test_raising_threshold_never_adds_pairs(ious, lo, step):
    n_lo = len(assign_max_iou(ious, lo)[0])
    n_hi = len(assign_max_iou(ious, lo + step)[0])
    assert n_hi <= n_lo
