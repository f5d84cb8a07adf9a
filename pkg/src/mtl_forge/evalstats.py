"""Forecast metrics and the paired significance-testing protocol.

Per-task RMSE vectors are compared against the single-task baseline with a
mean skill score and a two-sided paired test at alpha = 0.01: Wilcoxon
signed-rank for more than 20 tasks, otherwise a paired t-test after a
Shapiro-Wilk normality check on the differences.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import special

ALPHA = 0.01
EXACT_WILCOXON_MAX = 20


@dataclass
class ModelScores:
    name: str
    rmse: np.ndarray

    def __post_init__(self):
        self.rmse = np.asarray(self.rmse, dtype=np.float64)
        if self.rmse.ndim != 1 or (self.rmse < 0).any():
            raise ValueError(f"{self.name}: RMSE must be a non-negative vector")


@dataclass
class SignificanceResult:
    test: str
    statistic: float
    p_value: float
    normality_p: float | None = None
    fallback: bool = False

    @property
    def significant(self) -> bool:
        return self.p_value < ALPHA


def rmse(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    target = np.asarray(target, dtype=np.float64).ravel()
    if pred.shape != target.shape:
        raise ValueError(f"length mismatch: {pred.size} vs {target.size}")
    if pred.size == 0:
        raise ValueError("rmse of an empty vector")
    return float(np.sqrt(np.mean((pred - target) ** 2)))


def skill_score(ref: ModelScores, baseline: ModelScores) -> float:
    """Mean over tasks of ``1 - rmse_ref / rmse_baseline``."""
    if ref.rmse.shape != baseline.rmse.shape:
        raise ValueError("models disagree on the number of tasks")
    if (baseline.rmse <= 0).any():
        raise ZeroDivisionError(f"{baseline.name}: zero baseline RMSE")
    return float(np.mean(1.0 - ref.rmse / baseline.rmse))


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.size < 2:
        raise ValueError("pearson needs two equal-length vectors of length >= 2")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise ValueError("pearson undefined for zero variance")
    return float(np.clip((dx @ dy) / math.sqrt(sxx * syy), -1.0, 1.0))


def pearson_matrix(series: Sequence[np.ndarray]) -> np.ndarray:
    k = len(series)
    out = np.eye(k)
    for i in range(k):
        for j in range(i + 1, k):
            out[i, j] = out[j, i] = pearson(series[i], series[j])
    return out


# --- Wilcoxon signed-rank ---------------------------------------------------------

def midranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    values = np.asarray(values)
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values))
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def signed_rank_null_counts(doubled_ranks: Sequence[int]) -> np.ndarray:
    """Number of sign patterns giving each value of 2*W+ (index = 2*W+)."""
    total = int(sum(doubled_ranks))
    counts = np.zeros(total + 1, dtype=object)
    counts[0] = 1
    top = 0
    for r in doubled_ranks:
        r = int(r)
        counts[r:top + r + 1] = counts[r:top + r + 1] + counts[:top + 1].copy()
        top += r
    return counts


def _clean_differences(a, b) -> np.ndarray:
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    if d.ndim != 1:
        raise ValueError("paired samples must be 1-d")
    return d[d != 0]


def wilcoxon_signed_rank(a, b, min_n: int = 6) -> SignificanceResult:
    """Two-sided Wilcoxon signed-rank test on ``a - b``.

    Zero differences are dropped and tied magnitudes get mid-ranks. Up to 20
    non-zero differences use the exact permutation distribution of W+;
    beyond that a tie- and continuity-corrected normal approximation. The
    reported statistic is ``min(W+, W-)``.
    """
    if np.shape(a) != np.shape(b):
        raise ValueError("paired samples differ in length")
    d = _clean_differences(a, b)
    n = d.size
    if n == 0:
        raise ValueError("all paired differences are zero")
    if n < min_n:
        raise ValueError(f"need at least {min_n} non-zero differences, got {n}")
    ranks = midranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    stat = min(w_plus, w_minus)
    if n <= EXACT_WILCOXON_MAX:
        doubled = np.rint(2 * ranks).astype(np.int64)
        counts = signed_rank_null_counts(doubled)
        k = int(round(2 * w_plus))
        total = 2 ** n
        lower = sum(counts[:k + 1])
        upper = sum(counts[k:])
        p = min(1.0, 2 * min(lower, upper) / total)
        return SignificanceResult("wilcoxon", stat, float(p))
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(np.abs(d), return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float((tie_counts ** 3 - tie_counts).sum()) / 48.0
    dev = w_plus - mean
    z = (abs(dev) - 0.5) / math.sqrt(var) if abs(dev) >= 0.5 else 0.0
    p = min(1.0, 2.0 * special.ndtr(-z))
    return SignificanceResult("wilcoxon", stat, float(p))


# --- Shapiro-Wilk (Royston's AS R94 approximation) -----------------------------------

def _poly(coeffs: Sequence[float], x: float) -> float:
    """Evaluate ``c0 + c1*x + c2*x^2 + ...``."""
    out = 0.0
    for c in reversed(coeffs):
        out = out * x + c
    return out


_C1 = (0.0, 0.221157, -0.147981, -2.07119, 4.434685, -2.706056)
_C2 = (0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633)
_C3 = (0.544, -0.39978, 0.025054, -6.714e-4)
_C4 = (1.3822, -0.77857, 0.062767, -0.0020322)
_C5 = (-1.5861, -0.31082, -0.083751, 0.0038915)
_C6 = (-0.4803, -0.082676, 0.0030302)
_G = (-2.273, 0.459)


def shapiro_wilk_coefficients(n: int) -> np.ndarray:
    """Antisymmetric weights applied to the sorted sample."""
    if n < 3:
        raise ValueError("Shapiro-Wilk needs at least 3 observations")
    half = n // 2
    if n == 3:
        upper = np.array([math.sqrt(0.5)])
    else:
        i = np.arange(1, half + 1)
        m = -special.ndtri((i - 0.375) / (n + 0.25))   # positive, largest first
        summ2 = 2.0 * float(m @ m)
        ssumm2 = math.sqrt(summ2)
        rsn = 1.0 / math.sqrt(n)
        a1 = _poly(_C1, rsn) + m[0] / ssumm2
        upper = m.copy()
        if n > 5:
            a2 = m[1] / ssumm2 + _poly(_C2, rsn)
            fac = math.sqrt((summ2 - 2 * m[0] ** 2 - 2 * m[1] ** 2)
                            / (1 - 2 * a1 ** 2 - 2 * a2 ** 2))
            upper[2:] = m[2:] / fac
            upper[1] = a2
        else:
            fac = math.sqrt((summ2 - 2 * m[0] ** 2) / (1 - 2 * a1 ** 2))
            upper[1:] = m[1:] / fac
        upper[0] = a1
    a = np.zeros(n)
    a[n - half:] = upper[::-1]
    a[:half] = -upper
    return a


def shapiro_wilk(d) -> tuple[float, float]:
    """W statistic and p-value for the normality of ``d`` (3 <= n <= 5000)."""
    x = np.sort(np.asarray(d, dtype=np.float64).ravel())
    n = x.size
    if not 3 <= n <= 5000:
        raise ValueError(f"Shapiro-Wilk needs 3 <= n <= 5000, got {n}")
    centred = x - x.mean()
    ssq = float(centred @ centred)
    if ssq <= 0 or x[-1] - x[0] <= 0:
        raise ValueError("Shapiro-Wilk undefined for zero variance")
    a = shapiro_wilk_coefficients(n)
    w = min(1.0, float(a @ centred) ** 2 / ssq)
    if n == 3:
        p = 6.0 / math.pi * (math.asin(math.sqrt(w)) - math.asin(math.sqrt(0.75)))
        return w, float(min(1.0, max(0.0, p)))
    y = math.log(1.0 - w) if w < 1.0 else -math.inf
    if n <= 11:
        gamma = _poly(_G, n)
        if y >= gamma:
            return w, 1e-99
        y = -math.log(gamma - y)
        mu = _poly(_C3, n)
        sigma = math.exp(_poly(_C4, n))
    else:
        ln = math.log(n)
        mu = _poly(_C5, ln)
        sigma = math.exp(_poly(_C6, ln))
    p = float(special.ndtr(-(y - mu) / sigma))
    return w, p


# --- paired t-test ------------------------------------------------------------------

def t_sf_two_sided(t: float, df: int) -> float:
    """Two-sided tail probability of Student's t via the regularised incomplete beta."""
    return float(special.betainc(df / 2.0, 0.5, df / (df + t * t)))


def paired_t_test(a, b) -> SignificanceResult:
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    if d.ndim != 1 or d.size < 2:
        raise ValueError("paired t-test needs at least 2 pairs")
    sd = float(np.std(d, ddof=1))
    if sd == 0:
        raise ValueError("paired differences have zero variance")
    t = float(d.mean() / (sd / math.sqrt(d.size)))
    return SignificanceResult("t_test", t, t_sf_two_sided(t, d.size - 1))


def select_and_run(model: ModelScores, baseline: ModelScores) -> SignificanceResult:
    """Pick the test by task count; non-normal differences fall back to Wilcoxon."""
    if model.rmse.shape != baseline.rmse.shape:
        raise ValueError("models disagree on the number of tasks")
    k = model.rmse.size
    if k < 6:
        raise ValueError(f"significance protocol needs at least 6 tasks, got {k}")
    if k > EXACT_WILCOXON_MAX:
        return wilcoxon_signed_rank(model.rmse, baseline.rmse)
    _, norm_p = shapiro_wilk(model.rmse - baseline.rmse)
    if norm_p < ALPHA:
        res = wilcoxon_signed_rank(model.rmse, baseline.rmse)
        res.normality_p = norm_p
        res.fallback = True
        return res
    res = paired_t_test(model.rmse, baseline.rmse)
    res.normality_p = norm_p
    return res
