import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from macs.stratifier import (StratifierConfig, cosine, diagnostics, knn_labels, stratify)
from oracles import reference_stratify


def test_cosine_basics():
    v = np.array([1.0, 2.0, -3.0])
    assert cosine(v, v) == pytest.approx(1.0)
    assert cosine(v, -v) == pytest.approx(-1.0)
    assert cosine([1, 0], [0, 1]) == 0.0
    assert cosine([0, 0], [0, 1]) == 0.0


def test_all_zero_labels():
    z = np.random.default_rng(0).normal(size=(10, 3))
    vote = knn_labels(z, np.zeros(10, int), 3)
    np.testing.assert_array_equal(vote.ybar, 0)
    np.testing.assert_array_equal(vote.p[:, 0], 1.0)


def clusters(n=10, seed=0):
    rng = np.random.default_rng(seed)
    a = np.array([1.0, 0.0, 0.0]) + 0.05 * rng.normal(size=(n, 3))
    b = np.array([0.0, 1.0, 0.0]) + 0.05 * rng.normal(size=(n, 3))
    return np.vstack([a, b]), np.repeat([0, 1], n)


def test_separated_clusters_vote_their_label():
    z, y = clusters()
    np.testing.assert_array_equal(knn_labels(z, y, 3).ybar, y)


def test_k1_is_nearest_neighbour():
    rng = np.random.default_rng(1)
    z = rng.normal(size=(12, 4))
    y = rng.integers(0, 2, 12)
    vote = knn_labels(z, y, 1)
    unit = z / np.linalg.norm(z, axis=1, keepdims=True)
    sim = unit @ unit.T
    np.fill_diagonal(sim, -np.inf)
    np.testing.assert_array_equal(vote.ybar, y[sim.argmax(axis=1)])


def test_clean_clusters_all_trusted():
    z, y = clusters()
    part = stratify(z, y, StratifierConfig(k=3), 0)
    assert part.counts() == (10, 10)
    assert len(part.distrusted) == 0


def test_flipped_members_are_distrusted():
    z, y = clusters()
    noisy = y.copy()
    noisy[[0, 1, 12]] = 1 - noisy[[0, 1, 12]]
    part = stratify(z, noisy, StratifierConfig(k=5), 0)
    assert {0, 1, 12} <= set(part.distrusted.tolist())
    n0, n1 = part.counts()
    assert n0 == n1
    d = diagnostics(part, y)
    assert d["precision"] == 1.0


def test_warmup_distrusts_everything():
    z, y = clusters()
    probs = np.tile([0.3, 0.7], (len(y), 1))
    part = stratify(z, y, StratifierConfig(k=3, warmup_epochs=1), 0, probs)
    assert len(part.trusted) == 0
    assert all(np.isclose(a.sum(), 1.0) for a in part.aux.values())
    assert len(part.aux) == len(y)


def test_pairs_share_labels():
    z, y = clusters(4)
    part = stratify(z, y, StratifierConfig(k=2), 0)
    for i, j in part.pairs():
        assert i < j and y[i] == y[j]
    assert len(part.pairs()) == 2 * math.comb(4, 2)


def test_k_must_fit():
    with pytest.raises(ValueError):
        knn_labels(np.ones((3, 2)), np.array([0, 1, 0]), 3)
    with pytest.raises(ValueError):
        StratifierConfig(k=0)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(4, 64), dim=st.integers(1, 5),
       coarse=st.booleans())
def test_matches_exhaustive_reference(seed, n, dim, coarse):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(n, dim))
    if coarse:
        # integer grid points create many exact similarity ties
        z = np.round(z)
    y = rng.integers(0, 2, n)
    k = int(rng.integers(1, n))
    part = stratify(z, y, StratifierConfig(k=k), 0)
    assert part.trusted.tolist() == reference_stratify(z.tolist(), y.tolist(), k)
    n0, n1 = part.counts()
    assert n0 == n1
