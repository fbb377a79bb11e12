"""Clustering, SVM classification and partition agreement scores."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .descriptor import DistanceConfig
from .kmeans import kmeans

__all__ = [
    "MetricReport",
    "relabel",
    "augment_depth",
    "pairwise_distances",
    "kmeans_cluster",
    "knn_graph_cluster",
    "louvain",
    "rbf_kernel",
    "SVMModel",
    "svm_train",
    "svm_predict",
    "cross_validate",
    "stratified_folds",
    "contingency",
    "adjusted_rand_index",
    "adjusted_mutual_info",
    "rand_index",
    "mutual_info",
    "partition_metrics",
]


def relabel(labels) -> np.ndarray:
    """Contiguous labels from 0 in order of first appearance."""
    _, first, inv = np.unique(np.asarray(labels), return_index=True, return_inverse=True)
    rank = np.empty(len(first), dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(len(first))
    return rank[inv.ravel()]


# ---------------------------------------------------------------------------
# distances
# ---------------------------------------------------------------------------


def augment_depth(X, depths, config: DistanceConfig = DistanceConfig()):
    """Append ``sqrt(lam) * depth / depth_scale`` as an extra column.

    Squared Euclidean distance on the result is ``|f1-f2|^2 + lam * dy^2``.
    """
    X = np.asarray(X, dtype=np.float64)
    col = np.sqrt(config.lam) * np.asarray(depths, dtype=np.float64) / config.depth_scale
    return np.column_stack([X, col])


def pairwise_distances(X, depths=None, config: DistanceConfig = DistanceConfig()):
    """Euclidean distances plus ``lam * |dy|`` when depths are given."""
    X = np.asarray(X, dtype=np.float64)
    diff = X[:, None, :] - X[None, :, :]
    D = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    if depths is not None:
        y = np.asarray(depths, dtype=np.float64) / config.depth_scale
        D = D + config.lam * np.abs(y[:, None] - y[None, :])
    return D


# ---------------------------------------------------------------------------
# clustering
# ---------------------------------------------------------------------------


def kmeans_cluster(X, k, seed=0, distance: DistanceConfig = DistanceConfig(), depths=None):
    X = np.asarray(X, dtype=np.float64)
    if k > len(X):
        raise ValueError(f"k={k} exceeds the number of rows ({len(X)})")
    if depths is not None:
        X = augment_depth(X, depths, distance)
    return relabel(kmeans(X, k, seed=seed).labels)


def _knn_sets(D, k):
    n = len(D)
    nbrs = []
    for i in range(n):
        order = np.argsort(D[i], kind="stable")
        order = order[order != i][:k]
        nbrs.append(order)
    return nbrs


def louvain(W, max_levels=100):
    """Louvain modularity maximisation on a symmetric weight matrix.

    Nodes are visited in index order; a node moves to the neighbouring
    community with the largest positive gain (ties to the lowest community
    id). Levels are aggregated until no node moves.
    """
    W = np.asarray(W, dtype=np.float64)
    n = len(W)
    membership = np.arange(n)
    two_m = W.sum()
    if two_m <= 0:
        return membership
    A = W.copy()
    for _ in range(max_levels):
        comm, moved = _one_level(A, two_m)
        if not moved:
            break
        comm = relabel(comm)
        membership = comm[membership]
        k = comm.max() + 1
        P = np.zeros((len(A), k))
        P[np.arange(len(A)), comm] = 1.0
        A = P.T @ A @ P
    return relabel(membership)


def _one_level(A, two_m):
    n = len(A)
    comm = np.arange(n)
    deg = A.sum(axis=1)
    tot = deg.copy()
    nbr = [np.flatnonzero(A[i]) for i in range(n)]
    moved_any = False
    improved = True
    while improved:
        improved = False
        for i in range(n):
            ci = comm[i]
            links = {}
            for j in nbr[i]:
                if j != i:
                    links[comm[j]] = links.get(comm[j], 0.0) + A[i, j]
            tot[ci] -= deg[i]
            best_c = ci
            best_gain = links.get(ci, 0.0) - tot[ci] * deg[i] / two_m
            for c in sorted(links):
                gain = links[c] - tot[c] * deg[i] / two_m
                if gain > best_gain + 1e-12 * max(1.0, abs(best_gain)):
                    best_gain, best_c = gain, c
            tot[best_c] += deg[i]
            if best_c != ci:
                comm[i] = best_c
                improved = moved_any = True
    return comm, moved_any


def knn_graph_cluster(X, k_neighbors=23, seed=0, distance: DistanceConfig = DistanceConfig(),
                      depths=None):
    """kNN graph with Jaccard edge weights, partitioned by Louvain.

    Neighbour sets include the node itself. ``seed`` is accepted for
    interface symmetry; the procedure is deterministic.
    """
    X = np.asarray(X, dtype=np.float64)
    n = len(X)
    if n <= k_neighbors:
        raise ValueError(f"need more than {k_neighbors} rows, got {n}")
    D = pairwise_distances(X, depths, distance)
    if np.all(D == 0):
        return np.zeros(n, dtype=np.int64)
    nbrs = _knn_sets(D, k_neighbors)
    sets = [set(a.tolist()) | {i} for i, a in enumerate(nbrs)]
    W = np.zeros((n, n))
    for i, a in enumerate(nbrs):
        for j in a.tolist():
            if W[i, j] == 0:
                jac = len(sets[i] & sets[j]) / len(sets[i] | sets[j])
                W[i, j] = W[j, i] = jac
    return louvain(W)


# ---------------------------------------------------------------------------
# SVM
# ---------------------------------------------------------------------------


def rbf_kernel(A, B, gamma):
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    d = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    return np.exp(-gamma * np.maximum(d, 0.0))


def _smo(K, y, C, tol, max_iter):
    """Binary soft-margin dual by SMO with maximal-violating-pair selection.

    ``y`` in {-1, +1}. Returns ``(alpha, b)`` with decision ``K @ (alpha*y) + b``.
    """
    n = len(y)
    alpha = np.zeros(n)
    grad = -np.ones(n)  # gradient of 0.5 a'Qa - e'a
    Qd = np.diag(K).copy()
    for _ in range(max_iter):
        # I_up / I_low sets
        up = ((y > 0) & (alpha < C)) | ((y < 0) & (alpha > 0))
        low = ((y > 0) & (alpha > 0)) | ((y < 0) & (alpha < C))
        v = -y * grad
        if not up.any() or not low.any():
            break
        i = int(np.flatnonzero(up)[np.argmax(v[up])])
        j = int(np.flatnonzero(low)[np.argmin(v[low])])
        if v[i] - v[j] < tol:
            break
        a = Qd[i] + Qd[j] - 2.0 * K[i, j]
        if a <= 0:
            a = 1e-12
        # step along direction y_i e_i - y_j e_j
        t = (v[i] - v[j]) / a
        ai, aj = alpha[i], alpha[j]
        # box limits for the step
        lim_i = C - ai if y[i] > 0 else ai
        lim_j = aj if y[j] > 0 else C - aj
        t = min(t, lim_i, lim_j)
        alpha[i] += y[i] * t
        alpha[j] -= y[j] * t
        grad += t * (y * (K[:, i] - K[:, j]))
    else:
        warnings.warn("SMO reached the iteration limit", RuntimeWarning, stacklevel=3)
    v = -y * grad
    free = (alpha > 1e-12) & (alpha < C - 1e-12)
    if free.any():
        b = float(v[free].mean())
    else:
        up = ((y > 0) & (alpha < C)) | ((y < 0) & (alpha > 0))
        low = ((y > 0) & (alpha > 0)) | ((y < 0) & (alpha < C))
        hi = v[up].max() if up.any() else 0.0
        lo = v[low].min() if low.any() else 0.0
        b = float(0.5 * (hi + lo))
    return alpha, b


@dataclass
class SVMModel:
    classes: np.ndarray
    pairs: list  # (class_a, class_b, row_index, alpha*y, b)
    X: np.ndarray | None
    gamma: float | None
    kernel: str

    def kernel_to_train(self, X):
        if self.kernel == "precomputed":
            return np.asarray(X, dtype=np.float64)
        return rbf_kernel(X, self.X, self.gamma)


def svm_train(X, y, C=1.0, gamma=None, seed=0, kernel="rbf", tol=1e-3,
              max_iter=100000) -> SVMModel:
    """One-vs-one RBF SVM.

    With ``kernel="precomputed"`` ``X`` is the (n, n) training kernel matrix.
    ``gamma`` defaults to ``1 / (n_features * X.var())``. ``seed`` is accepted
    for interface symmetry; SMO here is deterministic.
    """
    y = np.asarray(y)
    X = np.asarray(X, dtype=np.float64)
    if len(X) != len(y):
        raise ValueError("X and y lengths differ")
    classes = np.unique(y)
    if len(classes) < 2:
        raise ValueError("need at least two classes")
    if kernel == "precomputed":
        K = X
        Xtrain = None
    elif kernel == "rbf":
        if gamma is None:
            var = X.var()
            gamma = 1.0 / (X.shape[1] * var) if var > 0 else 1.0
        K = rbf_kernel(X, X, gamma)
        Xtrain = X
    else:
        raise ValueError(f"unknown kernel {kernel!r}")
    pairs = []
    for a in range(len(classes)):
        for b in range(a + 1, len(classes)):
            idx = np.flatnonzero((y == classes[a]) | (y == classes[b]))
            yy = np.where(y[idx] == classes[a], 1.0, -1.0)
            alpha, bias = _smo(K[np.ix_(idx, idx)], yy, C, tol, max_iter)
            sv = alpha > 0
            pairs.append((a, b, idx[sv], (alpha * yy)[sv], bias))
    return SVMModel(classes, pairs, Xtrain, gamma, kernel)


def svm_decision(model: SVMModel, X):
    """Pairwise decision values, shape (n, n_pairs); positive favours class a."""
    Kx = model.kernel_to_train(X)
    out = np.empty((len(Kx), len(model.pairs)))
    for p, (_, _, rows, coef, bias) in enumerate(model.pairs):
        out[:, p] = Kx[:, rows] @ coef + bias
    return out


def svm_predict(model: SVMModel, X):
    """Majority vote over pairwise classifiers, ties to the lowest class."""
    dec = svm_decision(model, X)
    votes = np.zeros((len(dec), len(model.classes)), dtype=np.int64)
    for p, (a, b, *_) in enumerate(model.pairs):
        win = dec[:, p] > 0
        votes[win, a] += 1
        votes[~win, b] += 1
    return model.classes[np.argmax(votes, axis=1)]


def stratified_folds(y, folds, seed=0):
    """Fold id per row; per-class shuffles dealt round-robin across folds."""
    y = np.asarray(y)
    if folds < 2:
        raise ValueError("need at least 2 folds")
    if folds > len(y):
        raise ValueError("more folds than rows")
    rng = np.random.default_rng(seed)
    classes, counts = np.unique(y, return_counts=True)
    fold = np.empty(len(y), dtype=np.int64)
    if counts.min() < folds:
        warnings.warn("a class has fewer members than folds; using unstratified folds",
                      RuntimeWarning, stacklevel=2)
        perm = rng.permutation(len(y))
        fold[perm] = np.arange(len(y)) % folds
        return fold
    offset = 0
    for c in classes:
        idx = rng.permutation(np.flatnonzero(y == c))
        fold[idx] = (offset + np.arange(len(idx))) % folds
        offset += len(idx)
    return fold


def cross_validate(X, y, folds=10, seed=0, fit=None, predict=None):
    """k-fold predictions in original row order plus mean fold accuracy.

    ``fit(X, y)`` and ``predict(model, X)`` default to the RBF SVM.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    fit = fit or (lambda A, b: svm_train(A, b))
    predict = predict or svm_predict
    fold = stratified_folds(y, folds, seed)
    pred = np.empty_like(y)
    accs = []
    for f in range(folds):
        test = fold == f
        train = ~test
        if not test.any():
            continue
        if len(np.unique(y[train])) < 2:
            pred[test] = y[train][0]
        else:
            pred[test] = predict(fit(X[train], y[train]), X[test])
        accs.append(float(np.mean(pred[test] == y[test])))
    return pred, float(np.mean(accs)), fold


# ---------------------------------------------------------------------------
# agreement metrics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MetricReport:
    ari: float
    ami: float
    raw_ri: float
    raw_mi: float
    table: np.ndarray


def contingency(a, b):
    a = relabel(a)
    b = relabel(b)
    if len(a) != len(b):
        raise ValueError("partitions have different lengths")
    t = np.zeros((a.max() + 1 if len(a) else 0, b.max() + 1 if len(b) else 0), dtype=np.int64)
    np.add.at(t, (a, b), 1)
    return t


def _comb2(x):
    x = np.asarray(x, dtype=np.float64)
    return x * (x - 1) / 2.0


def adjusted_rand_index(a, b) -> float:
    t = contingency(a, b)
    n = t.sum()
    sum_ij = _comb2(t).sum()
    sa = _comb2(t.sum(axis=1)).sum()
    sb = _comb2(t.sum(axis=0)).sum()
    total = _comb2(n)
    if total == 0:
        return 1.0
    expected = sa * sb / total
    mx = 0.5 * (sa + sb)
    if mx == expected:
        return 1.0
    return float((sum_ij - expected) / (mx - expected))


def rand_index(a, b) -> float:
    t = contingency(a, b)
    n = t.sum()
    total = _comb2(n)
    if total == 0:
        return 1.0
    sum_ij = _comb2(t).sum()
    sa = _comb2(t.sum(axis=1)).sum()
    sb = _comb2(t.sum(axis=0)).sum()
    return float((total + 2 * sum_ij - sa - sb) / total)


def _entropy(counts):
    n = counts.sum()
    p = counts[counts > 0] / n
    return float(-(p * np.log(p)).sum())


def mutual_info(a, b) -> float:
    """Mutual information in nats."""
    t = contingency(a, b).astype(np.float64)
    n = t.sum()
    ra, cb = t.sum(axis=1), t.sum(axis=0)
    nz = t > 0
    return float((t[nz] / n * np.log(n * t[nz] / np.outer(ra, cb)[nz])).sum())


def _expected_mi(ra, cb, n):
    """Expected MI under the hypergeometric (fixed-margin) model."""
    emi = 0.0
    lg_n = gammaln(n + 1)
    for a in ra:
        for b in cb:
            lo = max(1, a + b - n)
            hi = min(a, b)
            if lo > hi:
                continue
            nij = np.arange(lo, hi + 1, dtype=np.float64)
            term = nij / n * np.log(n * nij / (a * b))
            logp = (gammaln(a + 1) + gammaln(b + 1) + gammaln(n - a + 1) + gammaln(n - b + 1)
                    - lg_n - gammaln(nij + 1) - gammaln(a - nij + 1) - gammaln(b - nij + 1)
                    - gammaln(n - a - b + nij + 1))
            emi += float((term * np.exp(logp)).sum())
    return emi


def adjusted_mutual_info(a, b) -> float:
    """AMI with max-entropy normalisation."""
    t = contingency(a, b)
    n = int(t.sum())
    ra, cb = t.sum(axis=1), t.sum(axis=0)
    if (len(ra) == len(cb) == 1) or (len(ra) == len(cb) == n):
        return 1.0
    mi = mutual_info(a, b)
    emi = _expected_mi(ra, cb, n)
    norm = max(_entropy(ra), _entropy(cb))
    denom = norm - emi
    if abs(denom) < 1e-15:
        return 1.0 if abs(mi - emi) < 1e-15 else 0.0
    return float((mi - emi) / denom)


def partition_metrics(a, b) -> MetricReport:
    if len(a) != len(b):
        raise ValueError("partitions have different lengths")
    return MetricReport(
        ari=adjusted_rand_index(a, b),
        ami=adjusted_mutual_info(a, b),
        raw_ri=rand_index(a, b),
        raw_mi=mutual_info(a, b),
        table=contingency(a, b),
    )
