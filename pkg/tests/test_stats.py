import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import metrics_brute, student_t_cdf_quad, two_sided_p_quad, welch_quad
from tcavlab.stats import (
    bonferroni_significant,
    classification_metrics,
    one_sample_ttest_two_sided,
    regularized_incomplete_beta,
    student_t_cdf,
    student_t_sf_two_sided,
    welch_ttest_two_sided,
)


@pytest.mark.parametrize("df", [1, 2, 5, 10, 30, 100])
def test_t_cdf_matches_quadrature(df):
    for t in np.linspace(-6, 6, 25):
        assert abs(student_t_cdf(float(t), df) - student_t_cdf_quad(float(t), df)) <= 1e-6


def test_t_cdf_non_integer_df():
    for df in (1.5, 4.37, 17.2):
        for t in (-3.1, -0.4, 0.9, 2.5):
            assert abs(student_t_cdf(t, df) - student_t_cdf_quad(t, df)) <= 1e-6


def test_incomplete_beta_edges_and_symmetry():
    assert regularized_incomplete_beta(2.0, 3.0, 0.0) == 0.0
    assert regularized_incomplete_beta(2.0, 3.0, 1.0) == 1.0
    # I_x(1, 1) = x; I_x(a, b) = 1 - I_{1-x}(b, a)
    assert abs(regularized_incomplete_beta(1.0, 1.0, 0.3) - 0.3) < 1e-14
    v = regularized_incomplete_beta(2.5, 0.5, 0.7)
    assert abs(v - (1 - regularized_incomplete_beta(0.5, 2.5, 0.3))) < 1e-13


def test_welch_example_matches_quadrature():
    a, b = (0.9, 0.8, 0.95, 0.85), (0.5, 0.45, 0.55, 0.5)
    res = welch_ttest_two_sided(a, b)
    t, df, p = welch_quad(a, b)
    assert abs(res.t_statistic - t) < 1e-9 and abs(res.degrees_of_freedom - df) < 1e-9
    assert abs(res.p_value - p) <= 1e-6
    # frozen oracle output
    assert abs(res.p_value - 1.7274749405049583e-04) <= 1e-6


def test_welch_identical_samples():
    res = welch_ttest_two_sided([0.1, 0.4, 0.3], [0.1, 0.4, 0.3])
    assert res.t_statistic == 0.0 and res.p_value == 1.0


def test_welch_degenerate_cases():
    eq = welch_ttest_two_sided([0.5, 0.5], [0.5, 0.5, 0.5])
    assert (eq.t_statistic, eq.p_value, eq.degenerate) == (0.0, 1.0, True)
    ne = welch_ttest_two_sided([1.0, 1.0, 1.0], [0.0, 0.0])
    assert ne.p_value == 0.0 and ne.degenerate and ne.t_statistic == math.inf
    with pytest.raises(ValueError):
        welch_ttest_two_sided([1.0], [0.0, 1.0])


finite = st.floats(0.0, 1.0, allow_nan=False)


@settings(max_examples=200, deadline=None)
@given(st.lists(finite, min_size=2, max_size=15), st.lists(finite, min_size=2, max_size=15))
def test_welch_swap_symmetry_exact(a, b):
    x, y = welch_ttest_two_sided(a, b), welch_ttest_two_sided(b, a)
    assert x.p_value == y.p_value
    assert x.t_statistic == -y.t_statistic
    assert 0.0 <= x.p_value <= 1.0


@settings(max_examples=100, deadline=None)
@given(st.lists(finite, min_size=2, max_size=12).filter(lambda v: len(set(v)) > 1))
def test_welch_self_comparison(a):
    res = welch_ttest_two_sided(a, list(a))
    assert res.t_statistic == 0.0 and res.p_value == 1.0


@settings(max_examples=100, deadline=None)
@given(st.lists(finite, min_size=2, max_size=12), st.lists(finite, min_size=2, max_size=12), st.randoms())
def test_welch_order_invariant(a, b, rnd):
    a2, b2 = list(a), list(b)
    rnd.shuffle(a2)
    rnd.shuffle(b2)
    x, y = welch_ttest_two_sided(a, b), welch_ttest_two_sided(a2, b2)
    assert x.p_value == y.p_value and x.t_statistic == y.t_statistic


def test_welch_grid_against_quadrature():
    rng = np.random.default_rng(0)
    for _ in range(20):
        a = rng.random(int(rng.integers(2, 12)))
        b = rng.random(int(rng.integers(2, 12))) * 0.5 + 0.2
        _, _, p = welch_quad(a, b)
        assert abs(welch_ttest_two_sided(a, b).p_value - p) <= 1e-6


def test_one_sample_against_quadrature():
    a = [0.7, 0.65, 0.9, 0.55, 0.8]
    res = one_sample_ttest_two_sided(a, 0.5)
    m = sum(a) / 5
    sd = math.sqrt(sum((v - m) ** 2 for v in a) / 4)
    t = (m - 0.5) / (sd / math.sqrt(5))
    assert abs(res.t_statistic - t) < 1e-12
    assert abs(res.p_value - two_sided_p_quad(t, 4)) <= 1e-6
    assert one_sample_ttest_two_sided([1.0, 1.0], 0.5).p_value == 0.0


def test_t_tail_limits():
    assert student_t_sf_two_sided(0.0, 3) == 1.0
    assert student_t_sf_two_sided(math.inf, 3) == 0.0
    assert student_t_cdf(0.0, 7) == 0.5


def test_bonferroni():
    assert bonferroni_significant(0.02, 0.05, 2) is True
    assert bonferroni_significant(0.025, 0.05, 2) is False
    assert bonferroni_significant(0.5, 0.05, 1) is False
    with pytest.raises(ValueError):
        bonferroni_significant(0.01, 0.05, 0)


def test_metrics_all_correct():
    labels = [0, 1, 2, 2, 1, 0, 3]
    r = classification_metrics(labels, labels, 4)
    assert (r.accuracy, r.macro_precision, r.macro_recall, r.macro_f1) == (1.0, 1.0, 1.0, 1.0)


def test_metrics_all_class_zero():
    r = classification_metrics([0, 0, 0, 0], [0, 0, 1, 1], 2)
    assert r.accuracy == 0.5 and r.macro_precision == 0.25 and r.macro_recall == 0.5
    assert list(r.precision) == [0.5, 0.0] and list(r.recall) == [1.0, 0.0]


def _assert_matches_oracle(pred, labels, n):
    r = classification_metrics(pred, labels, n)
    o = metrics_brute(list(pred), list(labels), n)
    assert r.confusion_matrix.tolist() == o["confusion"]
    assert r.accuracy == o["accuracy"]
    assert list(r.precision) == o["precision"]
    assert list(r.recall) == o["recall"]
    assert list(r.f1) == o["f1"]
    assert (r.macro_precision, r.macro_recall, r.macro_f1) == (o["macro_precision"], o["macro_recall"], o["macro_f1"])


def test_metrics_three_class_random():
    rng = np.random.default_rng(1)
    _assert_matches_oracle(rng.integers(0, 3, 50).tolist(), rng.integers(0, 3, 50).tolist(), 3)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 10).flatmap(lambda n: st.tuples(st.just(n), st.lists(st.tuples(st.integers(0, n - 1), st.integers(0, n - 1)), min_size=1, max_size=60))))
def test_metrics_property(case):
    n, pairs = case
    pred, labels = zip(*pairs)
    _assert_matches_oracle(pred, labels, n)


def test_metrics_errors():
    with pytest.raises(ValueError):
        classification_metrics([0, 1], [0], 2)
    with pytest.raises(ValueError):
        classification_metrics([], [], 2)
    with pytest.raises(ValueError):
        classification_metrics([0, 2], [0, 1], 2)


def test_t_cdf_absolute_error_below_1e_10():
    worst = 0.0
    for df in (0.5, 1, 3, 10, 100, 1000):
        for t in np.linspace(-40, 40, 41):
            worst = max(worst, abs(student_t_cdf(float(t), df) - student_t_cdf_quad(float(t), df, dps=40)))
    assert worst <= 1e-10
