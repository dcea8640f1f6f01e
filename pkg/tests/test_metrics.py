import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from fuse_ser.losses import DegenerateStatisticsError
from fuse_ser.metrics import (
    ConfusionMatrix, betainc, ccc, confusion_delta, format_mean_std, pcc, residual_fit, residuals, summarize,
    t_two_sided_p, ttest_independent, uar,
)

import oracles


def test_uar_examples():
    assert uar(np.diag([3, 4, 5])) == 1.0
    assert uar([[8, 2], [5, 5]]) == pytest.approx(0.65, abs=1e-15)
    rng = np.random.default_rng(0)
    y = np.repeat(np.arange(4), 2500)
    assert uar(ConfusionMatrix.from_labels(y, rng.integers(0, 4, y.size), 4)) == pytest.approx(0.25, abs=0.02)
    with pytest.raises(ValueError, match=r"\[1\]"):
        uar([[1, 0], [0, 0]])


@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=8, max_size=60), st.integers(0, 3))
def test_uar_invariant_to_duplicating_a_class(pairs, dup):
    cm = ConfusionMatrix.from_labels([t for t, _ in pairs], [p for _, p in pairs], 4)
    if (cm.support == 0).any():
        return
    extra = [(t, p) for t, p in pairs if t == dup]
    cm2 = ConfusionMatrix.from_labels(
        [t for t, _ in pairs + extra], [p for _, p in pairs + extra], 4
    )
    assert uar(cm2) == pytest.approx(uar(cm), abs=1e-12)


def test_pcc_examples():
    assert pcc([1, 2, 3], [1, 3, 2]) == pytest.approx(0.5, abs=1e-15)
    x = [0.3, 1.2, -4.0, 2.2]
    assert pcc(x, [2 * v + 3 for v in x]) == pytest.approx(1.0, abs=1e-15)
    assert pcc(x, [-v for v in x]) == pytest.approx(-1.0, abs=1e-15)
    with pytest.raises(DegenerateStatisticsError):
        pcc([1, 1, 1], [1, 2, 3])


def test_confusion_delta():
    base = np.array([[100, 110], [3, 4]])
    model = np.array([[184, 26], [0, 7]])
    d = confusion_delta(ConfusionMatrix(model), ConfusionMatrix(base))
    assert d.percent[0, 0] == pytest.approx(84.0)
    assert d.render()[0][0] == "+84%"
    same = confusion_delta(ConfusionMatrix(base), ConfusionMatrix(base))
    assert np.all(same.percent == 0)
    d = confusion_delta(ConfusionMatrix(np.array([[5, 0], [3, 4]])), ConfusionMatrix(np.array([[5, 0], [0, 7]])))
    assert not d.defined[1, 0] and d.render()[1][0] == "n/a"


def test_confusion_delta_needs_same_supports():
    with pytest.raises(ValueError, match="support"):
        confusion_delta(ConfusionMatrix(np.array([[2, 0], [0, 1]])), ConfusionMatrix(np.array([[1, 0], [0, 1]])))


def test_ttest_examples():
    r = ttest_independent([1, 2, 3], [1, 2, 3])
    assert r.t == 0 and r.p == 1.0 and not r.significant
    r = ttest_independent([1, 2, 3], [11, 12, 13])
    assert r.p < 0.001 and r.significant
    r = ttest_independent([0.5, 0.6, 0.55, 0.52, 0.58], [0.70, 0.72, 0.68, 0.71, 0.69])
    assert r.df == 8 and abs(r.t) > 2.306 and r.significant


def test_ttest_zero_variance():
    r = ttest_independent([1, 1], [1, 1])
    assert r.p == 1.0 and r.zero_variance
    r = ttest_independent([1, 1], [2, 2])
    assert r.p == 0.0 and r.significant and r.zero_variance
    with pytest.raises(ValueError):
        ttest_independent([1], [1, 2])


@given(
    st.lists(st.floats(-5, 5), min_size=2, max_size=10),
    st.lists(st.floats(-5, 5), min_size=2, max_size=10),
)
@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_welch_matches_scipy(a, b):
    if np.var(a) + np.var(b) < 1e-6:
        return
    got = ttest_independent(a, b, equal_var=False)
    want = stats.ttest_ind(a, b, equal_var=False)
    assert got.p == pytest.approx(want.pvalue, abs=1e-6)


@given(st.floats(0.1, 50), st.floats(0.1, 50), st.floats(0, 1))
def test_betainc_matches_scipy(a, b, x):
    from scipy.special import betainc as ref
    assert betainc(a, b, x) == pytest.approx(ref(a, b, x), abs=1e-10)


def test_t_tail_known_value():
    # two-sided 5% critical value at df = 8
    assert t_two_sided_p(2.306004135, 8) == pytest.approx(0.05, abs=1e-8)
    assert t_two_sided_p(math.inf, 3) == 0.0


def test_residual_fit_examples():
    y = [1.0, 2.0, 3.0, 4.0, 5.0]
    assert residual_fit(residuals(y, y)) == (0.0, 0.0)
    slope, intercept = residual_fit(y_true=y, y_pred=[3.0] * 5)
    assert slope == pytest.approx(1.0) and intercept == pytest.approx(-3.0)
    rng = np.random.default_rng(0)
    yt = rng.uniform(1, 7, 2000)
    yp = yt - (0.3 * yt - 0.5 + rng.normal(0, 1e-4, yt.size))
    slope, intercept = residual_fit(y_true=yt, y_pred=yp)
    assert abs(slope - 0.3) < 1e-3 and abs(intercept + 0.5) < 1e-3
    with pytest.raises(DegenerateStatisticsError):
        residual_fit(y_true=[2, 2, 2], y_pred=[1, 2, 3])


def test_residual_record_identity():
    (r,) = residuals([4.25], [1.5])
    assert r.e == 4.25 - 1.5


def test_summarize():
    s = summarize([0.4, 0.6])
    assert s["mean"] == pytest.approx(0.5) and s["std"] == pytest.approx(math.sqrt(0.02), abs=1e-12)
    assert summarize([0.7])["single_run"] and summarize([0.7])["std"] == 0.0
    assert format_mean_std(summarize([0.5, 0.6]), percent=True) == "55.0 (7.1)"


def random_metric_cases(n, seed=0):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        size = int(rng.integers(3, 40))
        x = rng.normal(rng.uniform(-3, 3), rng.uniform(0.1, 3), size)
        y = rng.uniform(-1, 1) * x + rng.normal(rng.uniform(-2, 2), rng.uniform(0.1, 2), size)
        yield rng, x, y


def test_metric_oracles_small_sample():
    # the acceptance suite runs 1000 cases each; a quick slice here
    for rng, x, y in random_metric_cases(100, seed=1):
        assert ccc(x, y) == pytest.approx(oracles.ccc(list(x), list(y)), abs=1e-9)
        assert pcc(x, y) == pytest.approx(oracles.pcc(list(x), list(y)), abs=1e-9)
        slope, intercept = residual_fit(y_true=y, y_pred=x)
        o_slope, o_int = oracles.ols(list(y), list(y - x))
        assert slope == pytest.approx(o_slope, abs=1e-9) and intercept == pytest.approx(o_int, abs=1e-9)
        t, p = oracles.student_t_p(list(x), list(y))
        got = ttest_independent(x, y)
        assert got.t == pytest.approx(t, rel=1e-9) and got.p == pytest.approx(p, abs=1e-6)
