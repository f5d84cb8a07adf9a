import itertools
import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from mtl_forge.evalstats import (ModelScores, midranks, paired_t_test, pearson, pearson_matrix, rmse,
                                 select_and_run, shapiro_wilk, signed_rank_null_counts,
                                 skill_score, t_sf_two_sided, wilcoxon_signed_rank)


# --- point metrics ---------------------------------------------------------------------------

def test_rmse_examples():
    assert rmse([1, 2, 3], [1, 2, 3]) == 0.0
    assert rmse(np.full(7, 2.5), np.zeros(7)) == 2.5
    assert rmse([0, 0], [3, 4]) == pytest.approx(math.sqrt(12.5), abs=1e-15)
    with pytest.raises(ValueError):
        rmse([1, 2], [1])


def test_skill_score_examples():
    base = ModelScores("BASELINE", [0.0912, 0.05])
    assert skill_score(ModelScores("m", base.rmse), base) == 0.0
    single = skill_score(ModelScores("m", [0.0738]), ModelScores("b", [0.0912]))
    assert single == pytest.approx(1 - 0.0738 / 0.0912, abs=1e-15)
    assert single == pytest.approx(0.19079, abs=1e-5)
    with pytest.raises(ZeroDivisionError):
        skill_score(ModelScores("m", [1.0]), ModelScores("b", [0.0]))


@given(st.lists(st.floats(0.01, 10), min_size=1, max_size=30), st.floats(0.1, 3))
def test_skill_score_uniform_scaling(base, factor):
    b = ModelScores("b", base)
    assert skill_score(ModelScores("m", b.rmse * factor), b) == pytest.approx(1 - factor, abs=1e-12)


def test_pearson_examples():
    x = np.array([1.0, 2.0, 3.0, 5.0])
    assert pearson(x, 2 * x + 1) == pytest.approx(1.0, abs=1e-15)
    assert pearson(x, -x) == pytest.approx(-1.0, abs=1e-15)
    assert pearson([1, 2, 3], [1, 3, 2]) == pytest.approx(0.5, abs=1e-15)
    with pytest.raises(ValueError):
        pearson([1, 1, 1], [1, 2, 3])


def test_pearson_matrix_matches_numpy():
    rng = np.random.default_rng(0)
    series = [rng.standard_normal(50) for _ in range(4)]
    m = pearson_matrix(series)
    assert np.allclose(m, np.corrcoef(series), atol=1e-13)
    assert np.allclose(np.diag(m), 1.0) and np.allclose(m, m.T)


# --- Wilcoxon --------------------------------------------------------------------------------

def brute_force_wilcoxon_p(d):
    """Two-sided exact p by enumerating every sign pattern of the ranked magnitudes."""
    d = d[d != 0]
    ranks = stats.rankdata(np.abs(d))
    observed = ranks[d > 0].sum()
    lower = upper = 0
    for signs in itertools.product((0, 1), repeat=d.size):
        w = float(np.dot(signs, ranks))
        lower += w <= observed + 1e-9
        upper += w >= observed - 1e-9
    return min(1.0, 2 * min(lower, upper) / 2 ** d.size)


def test_wilcoxon_six_positive():
    res = wilcoxon_signed_rank(np.ones(6), np.zeros(6))
    assert res.statistic == 0.0
    assert res.p_value == pytest.approx(2 / 2 ** 6, abs=1e-15)


def test_wilcoxon_antisymmetric_centre():
    d = np.array([1.0, -1, 2, -2, 3, -3])
    res = wilcoxon_signed_rank(d, np.zeros(6))
    assert res.p_value == 1.0


@pytest.mark.parametrize("k", range(6, 13))
@pytest.mark.parametrize("seed", range(3))
def test_wilcoxon_exact_matches_enumeration(k, seed):
    rng = np.random.default_rng(seed * 100 + k)
    d = rng.standard_normal(k) + 0.3
    if seed == 2:
        d = np.round(d, 1)  # ties in magnitude and possible zeros
    if np.count_nonzero(d) < 6:
        pytest.skip("too few non-zero differences")
    res = wilcoxon_signed_rank(d, np.zeros(k))
    assert abs(res.p_value - brute_force_wilcoxon_p(d)) < 1e-12


def test_wilcoxon_null_counts_sum():
    counts = signed_rank_null_counts([2, 4, 6, 8])
    assert sum(counts) == 16
    assert list(counts) == list(counts[::-1])


def test_midranks_ties():
    assert np.array_equal(midranks(np.array([3.0, 1.0, 3.0, 2.0])), [3.5, 1, 3.5, 2])


def test_wilcoxon_errors():
    with pytest.raises(ValueError):
        wilcoxon_signed_rank(np.ones(8), np.ones(8))
    with pytest.raises(ValueError):
        wilcoxon_signed_rank(np.ones(3), np.zeros(4))


def test_wilcoxon_normal_approximation_matches_scipy():
    rng = np.random.default_rng(3)
    for _ in range(20):
        a, b = rng.standard_normal(23), rng.standard_normal(23)
        ref = stats.wilcoxon(a, b, correction=True, method="approx")
        res = wilcoxon_signed_rank(a, b)
        assert res.statistic == ref.statistic
        assert res.p_value == pytest.approx(ref.pvalue, rel=1e-10)


def test_wilcoxon_k23_calibration():
    rng = np.random.default_rng(2024)
    d = rng.standard_normal((10_000, 23))
    zero = np.zeros(23)
    rate = np.mean([wilcoxon_signed_rank(row, zero).p_value < 0.01 for row in d])
    assert abs(rate - 0.01) <= 0.005


# --- Shapiro-Wilk ----------------------------------------------------------------------------

def canned_samples():
    rng = np.random.default_rng(11)
    out = []
    for i in range(20):
        n = [3, 5, 8, 11, 12, 15, 20, 23, 30, 50][i % 10]
        draw = [rng.standard_normal, rng.standard_exponential, lambda k: rng.uniform(size=k)][i % 3]
        out.append(draw(n))
    return out


@pytest.mark.parametrize("i", range(20))
def test_shapiro_wilk_matches_reference(i):
    x = canned_samples()[i]
    w, p = shapiro_wilk(x)
    ref = stats.shapiro(x)
    assert abs(w - ref.statistic) < 1e-3
    assert abs(p - ref.pvalue) < 1e-3


def test_shapiro_wilk_normal_quantiles():
    x = stats.norm.ppf((np.arange(1, 21) - 0.375) / 20.25)
    assert shapiro_wilk(x)[0] > 0.98


def test_shapiro_wilk_bimodal_rejects():
    assert shapiro_wilk(np.r_[np.full(10, -1.0), np.full(10, 1.0)])[1] < 0.01


@given(st.floats(0.01, 100), st.floats(-100, 100))
@settings(max_examples=30)
def test_shapiro_wilk_affine_invariant(a, b):
    x = canned_samples()[4]
    assert shapiro_wilk(a * x + b)[0] == pytest.approx(shapiro_wilk(x)[0], abs=1e-10)


def test_shapiro_wilk_errors():
    with pytest.raises(ValueError):
        shapiro_wilk([1.0, 2.0])
    with pytest.raises(ValueError):
        shapiro_wilk(np.ones(10))


# --- paired t-test ---------------------------------------------------------------------------

def mp_two_sided(t, df):
    mpmath.mp.dps = 40
    x = mpmath.mpf(df) / (df + mpmath.mpf(t) ** 2)
    return float(mpmath.betainc(mpmath.mpf(df) / 2, mpmath.mpf(1) / 2, 0, x, regularized=True))


@pytest.mark.parametrize("df", range(1, 31))
def test_t_tail_matches_incomplete_beta_oracle(df):
    for t in (0.0, 0.3, 1.0, 2.2, 4.2426, 9.0, 30.0):
        assert abs(t_sf_two_sided(t, df) - mp_two_sided(t, df)) < 1e-10


def test_t_test_example():
    res = paired_t_test(np.arange(1.0, 6.0), np.zeros(5))
    assert res.statistic == pytest.approx(3 / (math.sqrt(2.5) / math.sqrt(5)), abs=1e-12)
    assert res.statistic == pytest.approx(4.2426, abs=1e-4)
    assert res.p_value == pytest.approx(0.0132, abs=1e-4)
    assert res.p_value == pytest.approx(stats.ttest_rel(np.arange(1.0, 6.0), np.zeros(5)).pvalue,
                                        abs=1e-12)


def test_t_test_centred_and_degenerate():
    d = np.array([-2.0, -1, 0, 1, 2])
    res = paired_t_test(d, np.zeros(5))
    assert res.statistic == 0.0 and res.p_value == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(ValueError):
        paired_t_test(np.ones(3), np.zeros(3))


# --- protocol selection ---------------------------------------------------------------------

def _pair(d):
    base = np.full(len(d), 5.0)
    return ModelScores("m", base + d), ModelScores("BASELINE", base)


def test_select_many_tasks_uses_wilcoxon():
    res = select_and_run(*_pair(np.random.default_rng(0).normal(0.1, 0.2, 23)))
    assert res.test == "wilcoxon" and not res.fallback and res.normality_p is None


def test_select_few_tasks_normal_uses_t():
    d = stats.norm.ppf((np.arange(1, 16) - 0.375) / 15.25) * 0.1 + 0.05
    res = select_and_run(*_pair(d))
    assert res.test == "t_test" and res.normality_p > 0.01 and not res.fallback


def test_select_few_tasks_bimodal_falls_back():
    d = np.r_[np.full(7, -1.0), np.full(8, 1.0)] + np.linspace(0, 1e-3, 15)
    res = select_and_run(*_pair(d))
    assert res.test == "wilcoxon" and res.fallback and res.normality_p < 0.01


def test_select_too_few_tasks():
    with pytest.raises(ValueError):
        select_and_run(*_pair(np.ones(4)))
