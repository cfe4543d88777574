import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from conformal_od.conformal import (
    ScoreSet,
    conformal_pvalue,
    conformal_quantile,
    conformal_quantile_columns,
    conformal_rank,
    coverage_distribution,
)
from oracles import quantile_by_sorting

scores_st = st.lists(st.floats(-100, 100, allow_nan=False), min_size=0, max_size=40)
alpha_st = st.floats(0.001, 0.999)


def test_quantile_examples():
    assert conformal_quantile(range(1, 10), 0.1) == 9
    assert conformal_quantile([0.1, 0.2, 0.3, 0.4], 0.1) == math.inf
    assert conformal_quantile([5, 1, 3, 2, 4], 0.5) == 3
    assert conformal_quantile([], 0.3) == math.inf
    assert conformal_quantile(ScoreSet((1.0, 2.0, 3.0)), 0.5) == 2.0


def test_rank_has_no_rounding_slip():
    # (n+1)(1-alpha) is 900.9 in exact arithmetic, 0.9*1001 is not exact in floats
    assert conformal_rank(1000, 0.1) == 901
    assert conformal_rank(9, 0.1) == 9
    assert conformal_rank(99, 0.05) == 95


def test_pvalue_examples():
    assert conformal_pvalue([1, 2, 3], 4) == 0.25
    assert conformal_pvalue([1, 2, 3], 0) == 1.0
    assert conformal_pvalue([1, 2, 3], 2) == 0.75


def test_beta_parameters():
    d = coverage_distribution(1000, 0.1)
    assert (d.a, d.b) == (901, 100)
    assert d.mean == pytest.approx(901 / 1001)
    lo, hi = d.bounds()
    # the spread quoted for n = 1000 is about two points either side of 0.9
    assert 0.87 < lo < 0.9 < hi < 0.93
    d9 = coverage_distribution(9, 0.1)
    assert (d9.a, d9.b) == (9, 1) and d9.mean == pytest.approx(0.9)


def test_beta_quantiles_match_scipy():
    d = coverage_distribution(500, 0.05)
    assert d.ppf(0.3) == pytest.approx(stats.beta.ppf(0.3, d.a, d.b))


def test_degenerate_distribution():
    d = coverage_distribution(5, 0.1)
    assert d.degenerate
    assert d.bounds() == (1.0, 1.0)
    with pytest.raises(ValueError):
        d.frozen()


def test_bad_arguments():
    with pytest.raises(ValueError):
        conformal_quantile([1.0], 1.0)
    with pytest.raises(ValueError):
        coverage_distribution(0, 0.1)
    with pytest.raises(ValueError):
        ScoreSet((1.0, math.inf))


@given(scores_st, alpha_st)
def test_quantile_matches_sorting_oracle(s, alpha):
    assert conformal_quantile(s, alpha) == quantile_by_sorting(s, alpha)


@given(scores_st, alpha_st, alpha_st)
def test_quantile_monotone_in_alpha(s, a1, a2):
    a1, a2 = sorted((a1, a2))
    assert conformal_quantile(s, a1) >= conformal_quantile(s, a2)


@given(st.lists(st.floats(-100, 100), min_size=1, max_size=30), alpha_st, st.floats(0, 50))
def test_adding_large_score_never_lowers_quantile(s, alpha, extra):
    q = conformal_quantile(s, alpha)
    if math.isfinite(q):
        assert conformal_quantile(s + [q + extra], alpha) >= q


@given(st.lists(st.floats(-1, 1), min_size=1, max_size=30, unique=True), alpha_st, st.floats(-1.5, 1.5))
def test_pvalue_quantile_duality(s, alpha, test):
    if test in s:
        return
    assert (test <= conformal_quantile(s, alpha)) == (conformal_pvalue(s, test) > alpha)


def test_columns_match_scalar():
    rng = np.random.default_rng(1)
    m = rng.normal(size=(37, 5))
    q = conformal_quantile_columns(m, 0.2)
    assert np.array_equal(q, [conformal_quantile(m[:, k], 0.2) for k in range(5)])


def test_monte_carlo_validity_and_pvalue():
    rng = np.random.default_rng(7)
    n, trials, alpha = 19, 20000, 0.1
    cal = rng.exponential(size=(trials, n))
    test = rng.exponential(size=trials)
    q = conformal_quantile_columns(cal.T, alpha)
    cover = (test <= q).mean()
    # exact coverage is 18/20 = 0.9; 5 standard errors of slack
    assert cover >= 0.9 - 5 * math.sqrt(0.09 / trials)
    pv = (1 + (cal >= test[:, None]).sum(axis=1)) / (n + 1)
    for t in (0.05, 0.1, 0.3):
        assert (pv <= t).mean() <= t + 5 * math.sqrt(t * (1 - t) / trials)
