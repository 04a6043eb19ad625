"""Welch's t-test, Bonferroni gating and classification metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

_EPS = 1e-16
_TINY = 1e-300


@dataclass(frozen=True)
class TTestOutcome:
    t_statistic: float
    degrees_of_freedom: float
    p_value: float
    degenerate: bool = False


@dataclass
class MetricsReport:
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    confusion_matrix: np.ndarray  # rows = true class, columns = predicted
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray

    def as_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "precision": self.macro_precision,
            "recall": self.macro_recall,
            "f1": self.macro_f1,
        }


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for I_x(a, b), modified Lentz's method."""
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _TINY:
        d = _TINY
    d = 1.0 / d
    h = d
    for m in range(1, 10_000):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _TINY:
            d = _TINY
        c = 1.0 + aa / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _TINY:
            d = _TINY
        c = 1.0 + aa / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    """I_x(a, b) for a, b > 0 and x in [0, 1]."""
    if a <= 0 or b <= 0:
        raise ValueError("a and b must be positive")
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(log_front)
    # the continued fraction converges fast for x < (a+1)/(a+b+2)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_sf_two_sided(t: float, df: float) -> float:
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    if df <= 0:
        raise ValueError("degrees of freedom must be positive")
    if t == 0.0:
        return 1.0
    if math.isinf(t):
        return 0.0
    x = df / (df + t * t)
    return min(1.0, max(0.0, regularized_incomplete_beta(df / 2.0, 0.5, x)))


def student_t_cdf(t: float, df: float) -> float:
    if t == 0.0:
        return 0.5
    tail = 0.5 * student_t_sf_two_sided(t, df)
    return 1.0 - tail if t > 0 else tail


def welch_ttest_two_sided(a: Sequence[float], b: Sequence[float]) -> TTestOutcome:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ValueError(f"each sample needs at least 2 values (got {a.size} and {b.size})")
    na, nb = a.size, b.size
    # fsum keeps the statistic independent of element order
    ma, mb = math.fsum(a) / na, math.fsum(b) / nb
    va = math.fsum((a - ma) ** 2) / (na - 1)
    vb = math.fsum((b - mb) ** 2) / (nb - 1)
    sa, sb = va / na, vb / nb
    se2 = sa + sb
    if se2 == 0.0:
        df = float(na + nb - 2)
        if ma == mb:
            return TTestOutcome(0.0, df, 1.0, degenerate=True)
        return TTestOutcome(math.copysign(math.inf, ma - mb), df, 0.0, degenerate=True)
    t = (ma - mb) / math.sqrt(se2)
    # scaled by the larger term so squaring cannot underflow
    big = max(sa, sb)
    ra, rb = sa / big, sb / big
    df = (ra + rb) ** 2 / (ra * ra / (na - 1) + rb * rb / (nb - 1))
    return TTestOutcome(t, df, student_t_sf_two_sided(t, df))


def one_sample_ttest_two_sided(a: Sequence[float], mu: float) -> TTestOutcome:
    """Two-sided test of mean(a) == mu, same degenerate rules as the Welch test."""
    a = np.asarray(a, dtype=np.float64)
    if a.size < 2:
        raise ValueError("sample needs at least 2 values")
    n = a.size
    m = math.fsum(a) / n
    var = math.fsum((a - m) ** 2) / (n - 1)
    df = float(n - 1)
    if var == 0.0:
        if m == mu:
            return TTestOutcome(0.0, df, 1.0, degenerate=True)
        return TTestOutcome(math.copysign(math.inf, m - mu), df, 0.0, degenerate=True)
    t = (m - mu) / math.sqrt(var / n)
    return TTestOutcome(t, df, student_t_sf_two_sided(t, df))


def bonferroni_significant(p: float, alpha: float, m: int) -> bool:
    if m < 1:
        raise ValueError("m must be a positive integer")
    return p < alpha / m


def classification_metrics(predictions: Sequence[int], labels: Sequence[int], class_count: int) -> MetricsReport:
    pred = np.asarray(predictions, dtype=int)
    true = np.asarray(labels, dtype=int)
    if pred.shape != true.shape:
        raise ValueError(f"{pred.size} predictions but {true.size} labels")
    if pred.size == 0:
        raise ValueError("no predictions to score")
    for name, arr in (("prediction", pred), ("label", true)):
        if arr.min() < 0 or arr.max() >= class_count:
            raise ValueError(f"{name} index outside 0..{class_count - 1}")
    cm = np.zeros((class_count, class_count), dtype=np.int64)
    np.add.at(cm, (true, pred), 1)
    tp = np.diag(cm).astype(float)
    predicted = cm.sum(axis=0).astype(float)
    actual = cm.sum(axis=1).astype(float)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(predicted > 0, tp / predicted, 0.0)
        recall = np.where(actual > 0, tp / actual, 0.0)
        denom = precision + recall
        f1 = np.where(denom > 0, 2 * precision * recall / denom, 0.0)
    return MetricsReport(
        accuracy=float(tp.sum() / cm.sum()),
        # correctly rounded means, independent of summation order
        macro_precision=math.fsum(precision) / class_count,
        macro_recall=math.fsum(recall) / class_count,
        macro_f1=math.fsum(f1) / class_count,
        confusion_matrix=cm,
        precision=precision,
        recall=recall,
        f1=f1,
    )
