import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from scene_rag.ann import HNSWIndex


def _unit(rng, n, d):
    X = rng.normal(size=(n, d)).astype(np.float32)
    return X / np.linalg.norm(X, axis=1, keepdims=True)


def _brute(X, Q, k):
    sims = Q @ X.T
    return np.argsort(-sims, axis=1, kind="stable")[:, :k]


def test_defaults_and_params():
    idx = HNSWIndex()
    assert idx.get_params() == {"M": 16, "ef_construction": 200, "ef_search": 800, "random_state": 0}
    assert clone(idx.set_params(M=8)).M == 8


def test_not_fitted():
    with pytest.raises(NotFittedError):
        HNSWIndex().kneighbors(np.ones((1, 3)))


@pytest.mark.parametrize("params", [{"M": 1}, {"ef_construction": 0}, {"ef_search": 0}])
def test_bad_params(params):
    with pytest.raises(ValueError):
        HNSWIndex(**params).fit(np.ones((3, 2)))


def test_small_set_is_exhaustive():
    rng = np.random.default_rng(0)
    X = _unit(rng, 50, 8)
    d, i = HNSWIndex(M=4, ef_construction=50, ef_search=60).fit(X).kneighbors(X[:5], n_neighbors=50)
    assert all(sorted(row) == list(range(50)) for row in i)
    assert np.all(np.diff(d, axis=1) >= 0)
    assert i[:, 0].tolist() == [0, 1, 2, 3, 4]


def test_recall_on_moderate_set():
    rng = np.random.default_rng(1)
    X = _unit(rng, 2000, 32)
    Q = _unit(rng, 50, 32)
    _, got = HNSWIndex(M=12, ef_construction=100, ef_search=100).fit(X).kneighbors(Q, 10)
    truth = _brute(X, Q, 10)
    recall = np.mean([len(set(a) & set(b)) / 10 for a, b in zip(got, truth)])
    assert recall >= 0.95


def test_padding_when_fewer_points_than_k():
    d, i = HNSWIndex().fit(np.eye(3)).kneighbors([[1, 0, 0]], n_neighbors=5)
    assert i[0, 0] == 0 and sorted(i[0, :3].tolist()) == [0, 1, 2]
    assert i[0, 3:].tolist() == [-1, -1] and np.isinf(d[0, 3:]).all()


def test_empty_fit_returns_padding():
    d, i = HNSWIndex().fit(np.zeros((0, 4))).kneighbors(np.ones((1, 4)), 2)
    assert i.tolist() == [[-1, -1]]


def test_same_seed_same_graph():
    rng = np.random.default_rng(2)
    X = _unit(rng, 800, 16)
    Q = _unit(rng, 10, 16)
    a = HNSWIndex(M=6, random_state=3).fit(X).kneighbors(Q, 5)
    b = HNSWIndex(M=6, random_state=3).fit(X).kneighbors(Q, 5)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_partial_fit_equals_fit():
    rng = np.random.default_rng(4)
    X = _unit(rng, 600, 16)
    Q = _unit(rng, 10, 16)
    whole = HNSWIndex(M=6).fit(X)
    parts = HNSWIndex(M=6).partial_fit(X[:250]).partial_fit(X[250:])
    assert np.array_equal(whole.kneighbors(Q, 5)[1], parts.kneighbors(Q, 5)[1])


def test_partial_fit_feature_mismatch():
    idx = HNSWIndex().fit(np.ones((2, 3)))
    with pytest.raises(ValueError):
        idx.partial_fit(np.ones((2, 4)))


def test_zero_vectors_tolerated():
    X = np.vstack([np.zeros(4), np.eye(4)])
    d, i = HNSWIndex(M=2).fit(X).kneighbors([[0, 1, 0, 0]], 1)
    assert i[0, 0] == 2 and d[0, 0] == pytest.approx(0.0, abs=1e-6)


def test_many_levels_with_small_m():
    # M=2 gives the tallest hierarchy and the sparsest layer 0 (4 links)
    rng = np.random.default_rng(5)
    X = _unit(rng, 3000, 8)
    idx = HNSWIndex(M=2, ef_construction=20, ef_search=50).fit(X)
    found = idx.kneighbors(X[:200], 1)[1][:, 0]
    assert (found == np.arange(200)).mean() >= 0.8
