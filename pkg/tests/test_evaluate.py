import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from macs.evaluate import evaluate, fragment_metrics, subject_ensemble, youden_threshold


def test_all_correct():
    r = fragment_metrics([0, 1, 1, 0], [0, 1, 1, 0])
    assert r.accuracy == 1.0 and r.f1 == 1.0 and (r.tp, r.tn) == (2, 2)


def test_all_positive_half_true():
    r = fragment_metrics([1, 1, 1, 1], [1, 0, 1, 0])
    assert r.precision == 0.5 and r.recall == 1.0
    assert r.f1 == pytest.approx(2 / 3)


def test_f1_undefined_flagged():
    r = fragment_metrics([0, 0], [0, 0])
    assert r.f1 == 0.0 and "f1_undefined" in r.flags


def test_metrics_input_checks():
    with pytest.raises(ValueError):
        fragment_metrics([], [])
    with pytest.raises(ValueError):
        fragment_metrics([0, 1], [0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=40))
def test_metric_ranges(pairs):
    pred, true = zip(*pairs)
    r = fragment_metrics(pred, true)
    for v in (r.accuracy, r.precision, r.recall, r.f1):
        assert 0.0 <= v <= 1.0
    if r.precision + r.recall > 0:
        assert r.f1 == pytest.approx(2 * r.precision * r.recall / (r.precision + r.recall))
    assert r.tp + r.fp + r.tn + r.fn == len(pairs)


def test_perfect_separation():
    ens = subject_ensemble([0.9, 0.9, 0.1, 0.1], [0, 1, 2, 3], [1, 1, 0, 0])
    assert 0.1 < ens.threshold <= 0.9
    np.testing.assert_array_equal(ens.predictions, ens.labels)


def test_four_score_threshold():
    t, j = youden_threshold([0.2, 0.4, 0.6, 0.8], [0, 0, 1, 1])
    assert 0.4 < t <= 0.6 and j == 1.0
    ens = subject_ensemble([0.2, 0.4, 0.6, 0.8], [0, 1, 2, 3], [0, 0, 1, 1])
    assert (ens.predictions == ens.labels).all()


def test_one_fragment_per_subject_equals_fragment_rule():
    rng = np.random.default_rng(0)
    p = rng.random(10)
    y = np.array([0, 1] * 5)
    ens = subject_ensemble(p, np.arange(10), y)
    np.testing.assert_array_equal(ens.predictions, (p >= ens.threshold).astype(int))


def test_single_class_fallback():
    ens = subject_ensemble([0.7, 0.2], [0, 1], [1, 1])
    assert ens.threshold == 0.5 and ens.flags


def test_ensemble_averages_per_subject():
    ens = subject_ensemble(np.array([[0.8, 0.2], [0.4, 0.6], [0.1, 0.9]]), [5, 5, 6], [0, 0, 1])
    np.testing.assert_allclose(ens.scores, [0.4, 0.9])
    np.testing.assert_array_equal(ens.subjects, [5, 6])


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_duplicating_fragments_changes_nothing(seed):
    rng = np.random.default_rng(seed)
    sid = np.repeat(np.arange(6), 3)
    y = np.repeat([0, 1, 0, 1, 0, 1], 3)
    p = rng.random(len(sid))
    a = subject_ensemble(p, sid, y)
    b = subject_ensemble(np.concatenate([p, p]), np.concatenate([sid, sid]), np.concatenate([y, y]))
    np.testing.assert_allclose(a.scores, b.scores)
    assert a.threshold == pytest.approx(b.threshold, abs=1e-12)
    np.testing.assert_array_equal(a.predictions, b.predictions)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(2, 12))
def test_observed_scores_suffice(seed, n):
    rng = np.random.default_rng(seed)
    scores = np.round(rng.random(n), 2)
    labels = np.array([0, 1] + list(rng.integers(0, 2, n - 2)))
    _, j = youden_threshold(scores, labels)
    grid = np.concatenate([np.linspace(-0.01, 1.01, 2041), [np.inf]])
    pos, neg = (labels == 1).sum(), (labels == 0).sum()
    best = max(((scores >= t) & (labels == 1)).sum() / pos + ((scores < t) & (labels == 0)).sum() / neg - 1
               for t in grid)
    assert j == pytest.approx(best, abs=1e-12)


def test_evaluate_report():
    probs = np.array([[0.9, 0.1], [0.2, 0.8], [0.6, 0.4], [0.3, 0.7]])
    rep = evaluate(probs, [0, 0, 1, 1], [0, 0, 1, 1])
    assert rep["fragment"]["accuracy"] == 0.5
    assert rep["subject"]["accuracy"] == 1.0
