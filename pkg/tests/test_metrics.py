import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conformal_od.box_intervals import BoxInterval, Sidedness
from conformal_od.metrics import (
    empirical_coverage,
    mean_set_size,
    mpiw,
    pinball_loss,
    stratified_report,
    stretch,
    unbounded_count,
)


def test_coverage_examples():
    assert empirical_coverage([True] * 5) == 1.0
    assert empirical_coverage([False] * 5) == 0.0
    assert empirical_coverage([True] * 9 + [False]) == 0.9
    assert empirical_coverage([]) is None


def test_set_size_examples():
    assert mean_set_size([{0}, {1}]) == 1.0
    assert mean_set_size([set(range(6))] * 3) == 6.0
    assert mean_set_size([{0}, {0, 1, 2}]) == 2.0


def test_mpiw_examples():
    assert mpiw(lo=np.zeros((3, 4)), hi=np.full((3, 4), 4.0)) == 4.0
    assert mpiw([BoxInterval((0, 0, 0, 0), (2, 2, 4, 4))]) == 3.0
    assert mpiw(lo=np.ones((2, 4)), hi=np.ones((2, 4))) == 0.0


def test_mpiw_skips_unbounded():
    lo = np.array([[0, 0, 0, 0], [0, 0, 0, -math.inf]])
    hi = np.array([[2, 2, 2, 2], [1, 1, 1, 1]])
    assert mpiw(lo=lo, hi=hi) == 2.0
    assert unbounded_count(lo, hi) == 1


def test_stretch_examples():
    pred = np.array([[0, 0, 2, 2]])
    assert stretch(lo=np.array([[-1, -1, 0, 0]]), hi=np.array([[0, 0, 3, 3]]), preds=pred) == 2.0
    assert stretch(lo=pred, hi=pred, preds=pred) == 1.0
    two = stretch(lo=np.array([[0, 0, 0, 0], [-1, -1, 0, 0]]), hi=np.array([[2, 2, 2, 2], [0, 0, 3, 3]]), preds=np.repeat(pred, 2, 0))
    assert two == 1.5


def test_stretch_zero_area_excluded():
    pred = np.array([[0, 0, 0, 2], [0, 0, 2, 2]])
    with pytest.warns(UserWarning, match="zero area"):
        assert stretch(lo=pred, hi=pred, preds=pred) == 1.0


def test_pinball_examples():
    assert pinball_loss(2.0, 2.0, 0.3) == 0.0
    assert pinball_loss(3.0, 1.0, 0.5) == 1.0
    assert pinball_loss(0.0, 1.0, 0.9) == pytest.approx(0.1)


@given(st.floats(-50, 50), st.floats(-50, 50), st.floats(0.01, 0.99))
def test_pinball_nonnegative(y, q, tau):
    loss = pinball_loss(y, q, tau)
    assert loss >= 0
    if y == q:
        assert loss == 0
    elif abs(y - q) > 1e-12:
        assert loss > 0


def _batch(n=40, seed=0, k=3):
    rng = np.random.default_rng(seed)
    xy = rng.uniform(0, 200, (n, 2))
    side = rng.choice([10.0, 50.0, 150.0], n)
    truth = np.concatenate([xy, xy + side[:, None]], axis=1)
    pred = truth + rng.normal(0, 1, truth.shape)
    labels = rng.integers(0, k, n)
    mask = rng.random((n, k)) < 0.5
    mask[np.arange(n), rng.integers(0, k, n)] = True
    probs = rng.dirichlet(np.ones(k), n)
    return mask, pred - 1.5, pred + 1.5, pred, truth, labels, probs


def test_report_partitions():
    mask, lo, hi, pred, truth, labels, probs = _batch()
    r = stratified_report(mask, lo, hi, pred, truth, labels, probs=probs)
    n = r.n
    assert sum(r.cells[f"class={y}"]["n"] for y in range(3)) == n
    assert sum(r.cells[f"size={s}"]["n"] for s in ("small", "medium", "large")) == n
    assert r.cells["classified=correct"]["n"] + r.cells["classified=incorrect"]["n"] == n
    weighted = sum(r.cells[f"class={y}"]["n"] * r.cells[f"class={y}"]["box_coverage"] for y in range(3) if r.cells[f"class={y}"]["n"])
    assert weighted / n == pytest.approx(r.coverage)
    lines = r.to_csv().splitlines()
    assert lines[0] == "metric,cell,n,value"
    assert lines[1] == f"box_coverage,all,{n},{r.coverage!r}"
    assert len(lines) == 1 + 3 * len(r.cells) + 4


def test_report_homogeneous_and_single_large():
    truth = np.array([[0, 0, 100, 100]] * 4, dtype=float)
    mask = np.ones((4, 1), dtype=bool)
    r = stratified_report(mask, truth - 1, truth + 1, truth, truth, [0] * 4, probs=np.ones((4, 1)))
    for name in ("all", "class=0", "size=large", "classified=correct"):
        assert r.cells[name]["box_coverage"] == 1.0
    assert r.cells["size=small"]["n"] == 0 and r.cells["size=small"]["box_coverage"] is None
    assert r.cells["classified=incorrect"]["n"] == 0


def test_one_sided_report_uses_center_widths():
    pred = np.array([[0, 0, 10, 10]], dtype=float)
    lo = np.array([[-1, -1, -math.inf, -math.inf]])
    hi = np.array([[math.inf, math.inf, 11, 11]])
    r = stratified_report(np.ones((1, 1), bool), lo, hi, pred, pred, [0], sidedness=Sidedness.ONE_SIDED_OUTER)
    assert r.mpiw == 6.0 and r.unbounded == 0 and r.coverage == 1.0
    assert r.stretch == pytest.approx(1.2)


@given(st.floats(-100, 100), st.floats(0.1, 10))
def test_mpiw_translation_and_scale(shift, scale):
    mask, lo, hi, *_ = _batch(seed=4)
    base = mpiw(lo=lo, hi=hi)
    assert mpiw(lo=lo + shift, hi=hi + shift) == pytest.approx(base, rel=1e-9, abs=1e-9)
    assert mpiw(lo=lo * scale, hi=hi * scale) == pytest.approx(base * scale)
