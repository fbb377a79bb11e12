"""Whole-cell descriptors: codeword by radius histograms and Sholl baselines.

Every postsynaptic shape is assigned to its nearest codeword and to a radial
shell around the soma; the cell histogram counts shapes per (codeword, shell)
bin, flattened as ``codeword * n_shells + shell``.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .kmeans import kmeans

__all__ = [
    "Codebook",
    "ShollConfig",
    "CellDescriptor",
    "DistanceConfig",
    "fit_codebook",
    "assign_codeword",
    "radius_bin",
    "build_descriptor",
    "descriptor_distance",
    "descriptor_matrix",
    "sbp_feature",
    "spc_feature",
    "save_codebook",
    "load_codebook",
    "write_descriptors",
    "read_descriptors",
]

DEPTH_SCALE_NM = 25000.0


@dataclass(frozen=True)
class Codebook:
    centers: np.ndarray  # (k, L)
    n_iter: int = 0
    inertia: float = 0.0
    seed: int = 0

    @property
    def k(self):
        return len(self.centers)


def _default_edges():
    return tuple(float(e) for e in np.arange(10000.0, 130001.0, 5000.0)[:24])


@dataclass(frozen=True)
class ShollConfig:
    """Shell boundaries in nm; the last shell extends to infinity."""

    edges: tuple = field(default_factory=_default_edges)

    def __post_init__(self):
        e = np.asarray(self.edges, dtype=np.float64)
        if e.ndim != 1 or len(e) < 1:
            raise ValueError("need at least one shell edge")
        if np.any(e <= 0) or np.any(np.diff(e) <= 0):
            raise ValueError("shell edges must be positive and strictly increasing")
        object.__setattr__(self, "edges", tuple(float(x) for x in e))

    @property
    def n(self):
        return len(self.edges)


@dataclass(frozen=True)
class DistanceConfig:
    lam: float = 1.0 / 24.0
    depth_scale: float = DEPTH_SCALE_NM  # nm per depth unit

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if not self.depth_scale > 0:
            raise ValueError("depth scale must be positive")


@dataclass(frozen=True)
class CellDescriptor:
    counts: np.ndarray  # (k*n,) shape counts
    cell_id: str
    soma_center: np.ndarray
    depth: float  # nm
    surface_area: float  # nm^2
    k: int
    n: int

    @property
    def normalized(self) -> np.ndarray:
        if not self.surface_area > 0:
            raise ValueError("surface area must be positive to normalize")
        return self.counts / self.surface_area

    def histogram(self, normalize=True):
        return self.normalized if normalize else self.counts

    def spc(self) -> np.ndarray:
        """Counts per shell, summed over codewords."""
        return self.counts.reshape(self.k, self.n).sum(axis=0)


def fit_codebook(features, k, seed=0, n_init=10, max_iter=300) -> Codebook:
    res = kmeans(features, k, seed=seed, n_init=n_init, max_iter=max_iter)
    return Codebook(res.centers, n_iter=res.n_iter, inertia=res.inertia, seed=seed)


def assign_codeword(feature, codebook: Codebook):
    """Index of the nearest codeword; works on one vector or a matrix of rows."""
    f = np.asarray(feature, dtype=np.float64)
    single = f.ndim == 1
    f = np.atleast_2d(f)
    if f.shape[1] != codebook.centers.shape[1]:
        raise ValueError(
            f"feature length {f.shape[1]} does not match codebook width "
            f"{codebook.centers.shape[1]}"
        )
    d = ((f[:, None, :] - codebook.centers[None]) ** 2).sum(axis=2)
    idx = np.argmin(d, axis=1)
    return int(idx[0]) if single else idx


def radius_bin(point, soma_center, sholl: ShollConfig = ShollConfig()):
    """Shell index of ``point`` (or rows of points), clamped at both ends."""
    p = np.asarray(point, dtype=np.float64)
    r = np.linalg.norm(p - np.asarray(soma_center, dtype=np.float64), axis=-1)
    idx = np.searchsorted(np.asarray(sholl.edges), r, side="right") - 1
    idx = np.clip(idx, 0, sholl.n - 1)
    return int(idx) if np.ndim(idx) == 0 else idx


def build_descriptor(centroids, codes, codebook: Codebook, soma_center, depth, surface_area,
                     sholl: ShollConfig = ShollConfig(), cell_id="") -> CellDescriptor:
    """Histogram of shapes over (codeword, shell) bins.

    Parameters
    ----------
    centroids : (S, 3) array
        Shape centroids (nm).
    codes : (S, L) array
        Latent codes, one row per shape.
    """
    centroids = np.asarray(centroids, dtype=np.float64).reshape(-1, 3)
    codes = np.asarray(codes, dtype=np.float64).reshape(len(centroids), codebook.centers.shape[1])
    k, n = codebook.k, sholl.n
    counts = np.zeros(k * n)
    if len(centroids):
        cw = assign_codeword(codes, codebook)
        rb = radius_bin(centroids, soma_center, sholl)
        np.add.at(counts, cw * n + rb, 1.0)
    return CellDescriptor(counts=counts, cell_id=str(cell_id),
                          soma_center=np.asarray(soma_center, dtype=np.float64),
                          depth=float(depth), surface_area=float(surface_area), k=k, n=n)


def descriptor_distance(a, b, config: DistanceConfig = DistanceConfig(), use_depth=False,
                        normalize=True) -> float:
    """Euclidean histogram distance plus ``lam * |depth_a - depth_b|``.

    Depths are divided by ``config.depth_scale`` first.
    """
    fa = a.histogram(normalize) if isinstance(a, CellDescriptor) else np.asarray(a, float)
    fb = b.histogram(normalize) if isinstance(b, CellDescriptor) else np.asarray(b, float)
    if fa.shape != fb.shape:
        raise ValueError("descriptor lengths differ")
    d = float(np.linalg.norm(fa - fb))
    if use_depth:
        d += config.lam * abs(a.depth - b.depth) / config.depth_scale
    return d


def descriptor_matrix(descs, normalize=True):
    """Stack histograms and return ``(X, depths)``."""
    X = np.array([d.histogram(normalize) for d in descs])
    depths = np.array([d.depth for d in descs])
    return X, depths


def sbp_feature(skeleton, mesh_vertices, soma_center, sholl: ShollConfig = ShollConfig()):
    """Skeleton branch points (degree >= 3) per shell.

    ``skeleton`` may be one skeleton or a list; node positions are looked up
    in ``mesh_vertices``.
    """
    skels = skeleton if isinstance(skeleton, (list, tuple)) else [skeleton]
    out = np.zeros(sholl.n)
    for s in skels:
        bp = s.branch_points()
        if len(bp):
            np.add.at(out, radius_bin(np.asarray(mesh_vertices)[bp], soma_center, sholl), 1.0)
    return out


def spc_feature(centroids, soma_center, sholl: ShollConfig = ShollConfig()):
    """Shape counts per shell."""
    c = np.asarray(centroids, dtype=np.float64).reshape(-1, 3)
    out = np.zeros(sholl.n)
    if len(c):
        np.add.at(out, radius_bin(c, soma_center, sholl), 1.0)
    return out


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def _atomic_rows(path, header, rows):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        if header is not None:
            w.writerow(header)
        w.writerows(rows)
    os.replace(tmp, path)


def save_codebook(codebook: Codebook, path):
    _atomic_rows(path, None, [[repr(v) for v in row] for row in codebook.centers.tolist()])


def load_codebook(path) -> Codebook:
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    return Codebook(np.array([[float(v) for v in r] for r in rows]))


def write_descriptors(descs, path):
    """Unnormalized counts per cell; the normalized channel is counts / area."""
    if not descs:
        raise ValueError("no descriptors to write")
    q = len(descs[0].counts)
    header = ["cell_id", "depth_nm", "surface_area_nm2"] + [f"h_{i}" for i in range(q)]
    rows = [[d.cell_id, repr(d.depth), repr(d.surface_area)] + [repr(v) for v in d.counts.tolist()]
            for d in descs]
    _atomic_rows(path, header, rows)


def read_descriptors(path, n=24):
    """Inverse of :func:`write_descriptors`; ``k`` is inferred as ``Q / n``."""
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        rows = [row for row in r if row]
    q = len(header) - 3
    if q % n:
        raise ValueError(f"histogram length {q} is not a multiple of n={n}")
    out = []
    for row in rows:
        out.append(CellDescriptor(
            counts=np.array([float(v) for v in row[3:]]), cell_id=row[0],
            soma_center=np.full(3, np.nan), depth=float(row[1]),
            surface_area=float(row[2]), k=q // n, n=n))
    return out
