"""Lloyd's k-means with k-means++ seeding and restarts."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["KMeansResult", "kmeans", "assign"]


@dataclass(frozen=True)
class KMeansResult:
    centers: np.ndarray
    labels: np.ndarray
    inertia: float
    n_iter: int
    seed: int


def assign(X, centers):
    """Nearest center per row (squared Euclidean), ties to the lowest index."""
    X = np.asarray(X, dtype=np.float64)
    d = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    lab = np.argmin(d, axis=1)
    return lab, d[np.arange(len(X)), lab]


def _plusplus(X, k, rng):
    n = len(X)
    centers = np.empty((k, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        s = d2.sum()
        i = rng.choice(n, p=d2 / s) if s > 0 else rng.integers(n)
        centers[j] = X[i]
        d2 = np.minimum(d2, ((X - centers[j]) ** 2).sum(axis=1))
    return centers


def _lloyd(X, centers, max_iter):
    k = len(centers)
    labels = None
    it = 0
    for it in range(1, max_iter + 1):
        new, dist = assign(X, centers)
        # empty clusters: split the costliest cluster at its farthest member
        counts = np.bincount(new, minlength=k)
        for j in np.flatnonzero(counts == 0):
            cost = np.bincount(new, weights=dist, minlength=k)
            donor = int(np.argmax(cost))
            members = np.flatnonzero(new == donor)
            far = members[int(np.argmax(dist[members]))]
            new[far] = j
            dist[far] = 0.0
            counts = np.bincount(new, minlength=k)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for j in range(k):
            centers[j] = X[labels == j].mean(axis=0)
    labels, dist = assign(X, centers)
    return centers, labels, float(dist.sum()), it


def kmeans(X, k, seed=0, n_init=10, max_iter=300) -> KMeansResult:
    """Best-of-``n_init`` Lloyd's k-means.

    Raises
    ------
    ValueError
        If ``k`` is not in ``[1, number of distinct rows]``.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("X must be two-dimensional")
    if k < 1:
        raise ValueError("k must be >= 1")
    n_distinct = len(np.unique(X, axis=0))
    if n_distinct < k:
        raise ValueError(f"k={k} exceeds the {n_distinct} distinct rows")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        c, lab, inertia, it = _lloyd(X, _plusplus(X, k, rng), max_iter)
        if best is None or inertia < best.inertia * (1 - 1e-12):
            best = KMeansResult(c, lab, inertia, it, seed)
    return best
