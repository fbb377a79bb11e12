import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import minimize

from pssmorph import analysis as A
from pssmorph.descriptor import DistanceConfig

from . import oracles


# ---------------------------------------------------------------------------
# agreement metrics


def _random_pairs(n_pairs, seed):
    rng = np.random.default_rng(seed)
    for _ in range(n_pairs):
        n = int(rng.integers(2, 40))
        ka, kb = int(rng.integers(1, 7)), int(rng.integers(1, 7))
        yield rng.integers(0, ka, n), rng.integers(0, kb, n)


def test_ari_ri_match_pair_enumeration():
    for a, b in _random_pairs(50, 0):
        assert A.adjusted_rand_index(a, b) == pytest.approx(oracles.ari_pairs(a, b), abs=1e-12)
        assert A.rand_index(a, b) == pytest.approx(oracles.rand_pairs(a, b), abs=1e-12)


def test_mi_ami_match_term_by_term():
    for a, b in _random_pairs(50, 1):
        a, b = a.tolist(), b.tolist()
        assert A.mutual_info(a, b) == pytest.approx(oracles.mutual_info(a, b), abs=1e-12)
        if len(set(a)) == len(set(b)) in (1, len(a)):
            continue  # both trivial: defined as 1
        assert A.adjusted_mutual_info(a, b) == pytest.approx(oracles.ami_max(a, b), abs=1e-9)


def test_metric_hand_values():
    a = [0, 0, 1, 1]
    assert A.adjusted_rand_index(a, [5, 5, 2, 2]) == 1.0
    assert A.adjusted_mutual_info(a, [5, 5, 2, 2]) == pytest.approx(1.0, abs=1e-12)
    # known value: ARI of [0,0,1,1] vs [0,0,1,2] is 4/7
    assert A.adjusted_rand_index(a, [0, 0, 1, 2]) == pytest.approx(4 / 7, abs=1e-12)
    assert A.rand_index(a, [0, 1, 0, 1]) == pytest.approx(2 / 6, abs=1e-12)
    assert A.mutual_info([0, 1] * 3, [0] * 6) == 0.0
    assert A.mutual_info(a, a) == pytest.approx(np.log(2), abs=1e-15)
    with pytest.raises(ValueError):
        A.partition_metrics([0, 1], [0, 1, 2])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 4), min_size=2, max_size=30), st.integers(0, 10**6))
def test_metrics_label_permutation_and_symmetry(a, seed):
    rng = np.random.default_rng(seed)
    a = np.array(a)
    b = rng.integers(0, 3, len(a))
    perm = rng.permutation(10)
    for f in (A.adjusted_rand_index, A.adjusted_mutual_info, A.rand_index, A.mutual_info):
        assert f(a, b) == pytest.approx(f(perm[a], b), abs=1e-12)
        assert f(a, b) == pytest.approx(f(b, a), abs=1e-12)
    assert A.adjusted_rand_index(a, a) == 1.0
    assert A.adjusted_rand_index(a, b) <= 1.0 + 1e-12


def test_ari_near_zero_on_average_for_random():
    rng = np.random.default_rng(7)
    vals = [A.adjusted_rand_index(rng.integers(0, 3, 60), rng.integers(0, 3, 60)) for _ in range(300)]
    assert abs(np.mean(vals)) < 0.01


def test_partition_report():
    r = A.partition_metrics([0, 0, 1, 1, 2], [1, 1, 0, 0, 0])
    np.testing.assert_array_equal(r.table, [[2, 0], [0, 2], [0, 1]])
    assert r.raw_ri == pytest.approx(oracles.rand_pairs([0, 0, 1, 1, 2], [1, 1, 0, 0, 0]))


def test_relabel():
    np.testing.assert_array_equal(A.relabel([7, 7, 3, 9, 3]), [0, 0, 1, 2, 1])
    np.testing.assert_array_equal(A.relabel(np.array(["b", "a", "b"])), [0, 1, 0])


# ---------------------------------------------------------------------------
# distances and clustering


def test_augment_depth_reproduces_squared_distance():
    rng = np.random.default_rng(0)
    X, y = rng.normal(size=(10, 5)), rng.uniform(0, 1e6, 10)
    cfg = DistanceConfig()
    Z = A.augment_depth(X, y, cfg)
    d2 = ((Z[:, None] - Z[None]) ** 2).sum(-1)
    ref = ((X[:, None] - X[None]) ** 2).sum(-1) + cfg.lam * ((y[:, None] - y[None]) / cfg.depth_scale) ** 2
    np.testing.assert_allclose(d2, ref, rtol=1e-12, atol=1e-12)


def test_pairwise_distances():
    rng = np.random.default_rng(1)
    X, y = rng.normal(size=(8, 3)), rng.uniform(0, 1e6, 8)
    cfg = DistanceConfig(lam=0.5)
    D = A.pairwise_distances(X, y, cfg)
    for i in range(8):
        for j in range(8):
            ref = np.sqrt(((X[i] - X[j]) ** 2).sum()) + 0.5 * abs(y[i] - y[j]) / cfg.depth_scale
            assert D[i, j] == pytest.approx(ref, abs=1e-12)
    np.testing.assert_array_equal(A.pairwise_distances(X), A.pairwise_distances(X, y, DistanceConfig(lam=0.0)))


def _blobs(n_per, dim, k, sep, seed):
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(k, dim)) * sep
    X = np.concatenate([c + rng.normal(size=(n_per, dim)) for c in centers])
    return X, np.repeat(np.arange(k), n_per)


def test_kmeans_cluster_blobs_and_errors():
    X, y = _blobs(30, 10, 3, 5.0, 0)
    lab = A.kmeans_cluster(X, 3, seed=0)
    assert A.adjusted_rand_index(lab, y) == 1.0
    assert lab[0] == 0  # relabelled by first appearance
    with pytest.raises(ValueError):
        A.kmeans_cluster(X[:2], 3)


def test_kmeans_depth_only_separation():
    X = np.zeros((20, 4))
    y = np.r_[np.zeros(10), np.full(10, 1e6)]
    lab = A.kmeans_cluster(X + np.random.default_rng(0).normal(0, 1e-3, X.shape), 2, depths=y)
    np.testing.assert_array_equal(lab, np.r_[np.zeros(10), np.ones(10)])


def test_knn_graph_blobs_50d():
    X, y = _blobs(40, 50, 3, 2.0, 2)
    lab = A.knn_graph_cluster(X, k_neighbors=23)
    assert A.adjusted_rand_index(lab, y) >= 0.95
    np.testing.assert_array_equal(lab, A.knn_graph_cluster(X, k_neighbors=23))
    with pytest.raises(ValueError):
        A.knn_graph_cluster(X[:23], k_neighbors=23)
    assert np.all(A.knn_graph_cluster(np.zeros((30, 3)), k_neighbors=5) == 0)


def _modularity(W, lab):
    two_m = W.sum()
    k = W.sum(1)
    q = 0.0
    for i in range(len(W)):
        for j in range(len(W)):
            if lab[i] == lab[j]:
                q += W[i, j] - k[i] * k[j] / two_m
    return q / two_m


def test_louvain_two_cliques():
    W = np.zeros((8, 8))
    for g in (range(4), range(4, 8)):
        for i in g:
            for j in g:
                if i != j:
                    W[i, j] = 1.0
    W[3, 4] = W[4, 3] = 1.0
    lab = A.louvain(W)
    np.testing.assert_array_equal(lab, [0, 0, 0, 0, 1, 1, 1, 1])
    best = max(_modularity(W, p) for p in oracles.all_partitions(range(8)))
    assert _modularity(W, lab) == pytest.approx(best, abs=1e-12)


@pytest.mark.parametrize("seed", range(4))
def test_louvain_near_exhaustive_optimum(seed):
    rng = np.random.default_rng(seed)
    n = 8
    W = np.triu(rng.random((n, n)) * (rng.random((n, n)) < 0.5), 1)
    W = W + W.T
    lab = A.louvain(W)
    best = max(_modularity(W, p) for p in oracles.all_partitions(range(n)))
    q = _modularity(W, lab)
    assert q <= best + 1e-12
    assert q >= 0.9 * best - 1e-12
    assert np.all(A.louvain(np.zeros((3, 3))) == [0, 1, 2])


# ---------------------------------------------------------------------------
# SVM


def _dual_qp(K, y, C):
    """Reference soft-margin dual by SLSQP."""
    n = len(y)
    Q = (y[:, None] * y[None]) * K
    res = minimize(lambda a: 0.5 * a @ Q @ a - a.sum(), np.zeros(n), jac=lambda a: Q @ a - 1,
                   bounds=[(0, C)] * n, constraints=[{"type": "eq", "fun": lambda a: a @ y,
                                                      "jac": lambda a: y}],
                   method="SLSQP", options={"ftol": 1e-14, "maxiter": 1000})
    return res.x, res.fun


@pytest.mark.parametrize("seed", range(3))
def test_smo_matches_reference_qp(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(20, 2))
    y = np.where(X[:, 0] + 0.5 * rng.normal(size=20) > 0, 1.0, -1.0)
    K = A.rbf_kernel(X, X, 0.5)
    alpha, _ = A._smo(K, y, 1.0, 1e-8, 100000)
    Q = (y[:, None] * y[None]) * K
    obj = 0.5 * alpha @ Q @ alpha - alpha.sum()
    _, ref = _dual_qp(K, y, 1.0)
    assert obj <= ref + 1e-6 * max(1.0, abs(ref))
    assert abs(alpha @ y) < 1e-10
    assert np.all(alpha >= 0) and np.all(alpha <= 1.0 + 1e-12)


def test_rbf_kernel():
    A_ = np.array([[0.0, 0.0], [1.0, 1.0]])
    K = A.rbf_kernel(A_, A_, 0.5)
    np.testing.assert_allclose(K, [[1, np.exp(-1)], [np.exp(-1), 1]], atol=1e-15)


def test_svm_xor_cross_validation():
    rng = np.random.default_rng(0)
    X = rng.uniform(-1, 1, size=(200, 2))
    X = X[np.abs(X).min(axis=1) > 0.1]
    y = (np.sign(X[:, 0]) * np.sign(X[:, 1]) > 0).astype(int)
    pred, acc, fold = A.cross_validate(X, y, folds=10, seed=0,
                                       fit=lambda a, b: A.svm_train(a, b, C=10.0, gamma=2.0))
    assert acc >= 0.95
    assert len(pred) == len(y)


def test_svm_multiclass_and_precomputed():
    X, y = _blobs(20, 3, 3, 6.0, 4)
    m = A.svm_train(X, y)
    assert np.mean(A.svm_predict(m, X) == y) == 1.0
    g = m.gamma
    mp = A.svm_train(A.rbf_kernel(X, X, g), y, kernel="precomputed")
    np.testing.assert_array_equal(A.svm_predict(mp, A.rbf_kernel(X, X, g)), A.svm_predict(m, X))
    with pytest.raises(ValueError):
        A.svm_train(X, np.zeros(len(X)))
    with pytest.raises(ValueError):
        A.svm_train(X, y, kernel="poly")
    with pytest.raises(ValueError):
        A.svm_train(X[:5], y)


def test_stratified_folds():
    y = np.repeat([0, 1, 2], [30, 20, 10])
    f = A.stratified_folds(y, 10, seed=0)
    for c in range(3):
        counts = np.bincount(f[y == c], minlength=10)
        assert counts.max() - counts.min() <= 1
    assert np.bincount(f).max() - np.bincount(f).min() <= 1
    np.testing.assert_array_equal(f, A.stratified_folds(y, 10, seed=0))
    with pytest.warns(RuntimeWarning):
        A.stratified_folds(np.r_[np.zeros(20), [1]], 5)
    with pytest.raises(ValueError):
        A.stratified_folds(y, 1)
    with pytest.raises(ValueError):
        A.stratified_folds(y[:3], 5)
