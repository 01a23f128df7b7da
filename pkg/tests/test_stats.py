import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats as sps

from iclcontrast.errors import DegenerateLabelError, DomainError, EmptyInputError, ShapeError
from iclcontrast.stats import (
    ate_macro,
    ate_micro,
    bootstrap_ci,
    f1_score,
    metrics,
    roc_auc,
    t_test,
)


def brute_force_auc(scores, labels) -> float:
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p, n in itertools.product(pos, neg):
        total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def test_bootstrap_constant_vector():
    r = bootstrap_ci(np.full(30, 2.5))
    assert r.lo == r.hi == r.point == 2.5
    assert r.n_resamples == 1000 and r.seed == 1987


def test_bootstrap_deterministic_and_ordered():
    x = np.random.default_rng(0).normal(size=40)
    a, b = bootstrap_ci(x, "median"), bootstrap_ci(x, "median")
    assert a == b
    assert a.lo <= a.point <= a.hi


def test_bootstrap_matches_loop_oracle():
    x = np.random.default_rng(1).exponential(size=25)
    rng = np.random.default_rng(1987)
    idx = rng.integers(0, x.size, size=(1000, x.size))
    means = np.array([x[row].mean() for row in idx])
    lo, hi = np.percentile(means, [2.5, 97.5])
    r = bootstrap_ci(x)
    assert abs(r.lo - lo) <= 1e-12 and abs(r.hi - hi) <= 1e-12


def test_bootstrap_errors():
    with pytest.raises(EmptyInputError):
        bootstrap_ci([])
    with pytest.raises(DomainError):
        bootstrap_ci([1.0, 2.0], n=0)


def test_bootstrap_width_shrinks_with_sample_size():
    widths = []
    for size in (10, 100, 1000):
        w = []
        for seed in range(20):
            x = np.random.default_rng(seed).normal(size=size)
            r = bootstrap_ci(x, n=300, seed=seed)
            w.append(r.hi - r.lo)
        widths.append(np.mean(w))
    assert widths[0] > widths[1] > widths[2]


def test_t_test_examples():
    a = np.array([1.0, 2.0, 3.5, 4.0])
    assert t_test(a, a) == (0.0, 1.0)
    rng = np.random.default_rng(2)
    x, y = rng.normal(0, 1, 30), rng.normal(10, 1, 30)
    t, p = t_test(x, y)
    assert p < 1e-10
    t2, p2 = t_test(y, x)
    assert t2 == -t and p2 == p
    with pytest.raises(DomainError):
        t_test([1.0], [1.0, 2.0])


def test_t_test_matches_scipy_welch():
    rng = np.random.default_rng(3)
    x, y = rng.normal(0, 1, 17), rng.normal(0.4, 2.5, 31)
    t, p = t_test(x, y)
    ref = sps.ttest_ind(x, y, equal_var=False)
    assert t == pytest.approx(ref.statistic, rel=1e-12)
    assert p == pytest.approx(ref.pvalue, rel=1e-9)


def test_metric_examples():
    y = np.array([1, 0, 1, 1, 0])
    assert metrics(y, y, "accuracy") == metrics(y, y, "f1") == metrics(y, y, "auc") == 1.0
    assert roc_auc([0.9, 0.8, 0.3, 0.1], [1, 1, 0, 0]) == 1.0
    with pytest.raises(DegenerateLabelError):
        f1_score([1, 0], [0, 0])
    with pytest.raises(DegenerateLabelError):
        roc_auc([0.1, 0.2], [1, 1])
    with pytest.raises(ShapeError):
        metrics([1, 0], [1], "accuracy")


def test_f1_hand_counts():
    preds = [1, 1, 0, 0, 1, 0]
    labels = [1, 0, 1, 0, 1, 1]
    # tp=2, fp=1, fn=2
    assert f1_score(preds, labels) == 4 / 7


def test_auc_random_instance_matches_brute_force():
    rng = np.random.default_rng(1987)
    s = rng.normal(size=200).round(1)
    y = rng.integers(0, 2, 200)
    assert abs(roc_auc(s, y) - brute_force_auc(s, y)) <= 1e-12


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 1)), min_size=2, max_size=60))
def test_auc_property_matches_brute_force(rows):
    s, y = zip(*rows)
    if len(set(y)) < 2:
        return
    assert roc_auc(s, y) == brute_force_auc(s, y)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=50), st.randoms())
def test_f1_permutation_invariant(rows, rnd):
    p, y = map(list, zip(*rows))
    if not any(y):
        return
    order = list(range(len(p)))
    rnd.shuffle(order)
    assert f1_score(p, y) == f1_score([p[i] for i in order], [y[i] for i in order])


def test_ate_macro_examples():
    assert ate_macro(0.5, 0.5).value == 0.0
    assert ate_macro(52.5, 59.7, scale=100).value == -7.2
    assert ate_macro(84.6, 83.5, scale=100).value == 1.1
    with pytest.raises(DomainError):
        ate_macro(1.2, 0.3)


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1))
def test_ate_macro_antisymmetric(a, b):
    assert ate_macro(a, a).value == 0.0
    assert ate_macro(a, b).value == -ate_macro(b, a).value


def test_ate_micro():
    rng = np.random.default_rng(4)
    d = rng.normal(size=12)
    assert np.array_equal(ate_micro(d, d).value, np.zeros(12))
    r = ate_micro(d + 0.5, d)
    assert np.allclose(r.value, 0.5, atol=1e-15)
    e = rng.normal(size=12)
    r = ate_micro(e, d)
    assert np.array_equal(r.value, e - d)
    assert r.mean == float(np.mean(e - d))
    with pytest.raises(ShapeError):
        ate_micro(d, d[:3])
