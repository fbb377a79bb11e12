"""Shape diameter function and SDF-driven surface segmentation."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numba
import numpy as np
from scipy.sparse import csgraph, csr_matrix

from .bvh import BVH
from .mesh import TriMesh

__all__ = [
    "SDFConfig",
    "SDFField",
    "compute_sdf",
    "segment_mesh",
    "fit_gmm_1d",
    "pairwise_costs",
    "write_sdf_debug",
]


@dataclass(frozen=True)
class SDFConfig:
    n_rays: int = 5
    cone_angle: float = np.pi / 4  # half-angle, radians
    n_clusters: int = 5
    smoothness: float = 0.3

    def __post_init__(self):
        if self.n_rays < 1:
            raise ValueError("n_rays must be >= 1")
        if not 0 < self.cone_angle < np.pi / 2:
            raise ValueError("cone_angle must lie in (0, pi/2)")
        if self.n_clusters < 1:
            raise ValueError("n_clusters must be >= 1")
        if self.smoothness < 0:
            raise ValueError("smoothness must be >= 0")


@dataclass(frozen=True)
class SDFField:
    raw: np.ndarray  # per face, nm
    normalized: np.ndarray  # per face, [0, 1]


def _cone_directions(axis, half_angle, n, rng, tangent=None):
    """``n`` directions per axis, stratified-uniform in solid angle inside the cone.

    Ray ``i`` draws its solid-angle fraction from stratum ``[i/n, (i+1)/n)``;
    azimuths follow the golden angle under a random rotation per face.
    """
    m = len(axis)
    i = np.arange(n)
    frac = (i[None, :] + rng.random((m, n))) / n
    cos_t = 1.0 - frac * (1.0 - np.cos(half_angle))
    sin_t = np.sqrt(np.maximum(0.0, 1.0 - cos_t**2))
    golden = np.pi * (3.0 - np.sqrt(5.0))
    phi = i[None, :] * golden + 2 * np.pi * rng.random((m, 1))
    # per-face orthonormal frame; a face-attached tangent keeps rays rigid-equivariant
    ref = np.where(np.abs(axis[:, :1]) < 0.9, [[1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]])
    if tangent is not None:
        t = tangent - np.einsum("ij,ij->i", tangent, axis)[:, None] * axis
        ok = np.linalg.norm(t, axis=1) > 1e-12 * np.linalg.norm(tangent, axis=1)
        ref = np.where(ok[:, None], np.cross(t, axis), ref)
    u = np.cross(axis, ref)
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    w = np.cross(axis, u)
    d = (cos_t[..., None] * axis[:, None, :]
         + (sin_t * np.cos(phi))[..., None] * u[:, None, :]
         + (sin_t * np.sin(phi))[..., None] * w[:, None, :])
    return d


@numba.njit(cache=True)
def _pct(x, n, q):
    # linear interpolation on sorted x[:n], as numpy's default percentile
    pos = q * (n - 1)
    lo = int(np.floor(pos))
    hi = min(lo + 1, n - 1)
    return x[lo] + (pos - lo) * (x[hi] - x[lo])


@numba.njit(cache=True)
def _robust_median(t):
    """Row median after dropping values above median + 1.5 IQR; NaN if no hits."""
    m, k = t.shape
    out = np.full(m, np.nan)
    buf = np.empty(k)
    for i in range(m):
        n = 0
        for j in range(k):
            if np.isfinite(t[i, j]):
                buf[n] = t[i, j]
                n += 1
        if n == 0:
            continue
        x = np.sort(buf[:n])
        q1 = _pct(x, n, 0.25)
        med = _pct(x, n, 0.5)
        q3 = _pct(x, n, 0.75)
        cut = med + 1.5 * (q3 - q1)
        c = 0
        while c < n and x[c] <= cut:
            c += 1
        out[i] = _pct(x, c, 0.5)
    return out


def compute_sdf(mesh: TriMesh, config: SDFConfig = SDFConfig(), seed: int = 0,
                bvh: BVH | None = None) -> SDFField:
    """Per-face shape diameter by casting a ray cone against the inward normal.

    Faces whose rays all miss get the median value of the other faces.
    """
    m = mesh.n_faces
    if m == 0:
        raise ValueError("mesh has no faces")
    rng = np.random.default_rng(seed)
    inward = -mesh.face_normals
    ok = np.linalg.norm(inward, axis=1) > 0
    inward = np.where(ok[:, None], inward, [[0.0, 0.0, 1.0]])
    edge = mesh.vertices[mesh.faces[:, 1]] - mesh.vertices[mesh.faces[:, 0]]
    dirs = _cone_directions(inward, config.cone_angle, config.n_rays, rng, tangent=edge)
    offset = 1e-3 * mesh.mean_edge_length
    origins = mesh.face_centroids + offset * inward
    if bvh is None:
        bvh = BVH(mesh.vertices, mesh.faces)
    o = np.repeat(origins, config.n_rays, axis=0)
    skip = np.repeat(np.arange(m), config.n_rays)
    t, _ = bvh.intersect(o, dirs.reshape(-1, 3), skip)
    t = (t + offset).reshape(m, config.n_rays)
    t[~ok] = np.inf
    raw = _robust_median(t)
    hit = np.isfinite(raw)
    fill = float(np.median(raw[hit])) if hit.any() else 0.0
    raw = np.where(hit, raw, fill)
    lg = np.log1p(raw)
    lo, hi = lg.min(), lg.max()
    norm = (lg - lo) / (hi - lo) if hi > lo else np.zeros(m)
    return SDFField(raw=raw, normalized=norm)


# ---------------------------------------------------------------------------
# segmentation
# ---------------------------------------------------------------------------


def _kmeanspp_1d(x, k, rng):
    centers = [x[rng.integers(len(x))]]
    for _ in range(1, k):
        d2 = np.min((x[:, None] - np.array(centers)[None]) ** 2, axis=1)
        s = d2.sum()
        if s <= 0:
            centers.append(x[rng.integers(len(x))])
        else:
            centers.append(x[rng.choice(len(x), p=d2 / s)])
    return np.sort(np.array(centers))


def fit_gmm_1d(x, k, seed=0, max_iter=200, tol=1e-8, min_std=0.0):
    """EM for a 1D Gaussian mixture.

    ``min_std`` floors every component's standard deviation.
    Returns ``(weights, means, variances)`` with components sorted by mean.
    """
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(seed)
    mu = _kmeanspp_1d(x, k, rng)
    # hard assignment to the seeds for the starting moments
    lab = np.argmin(np.abs(x[:, None] - mu[None]), axis=1)
    var_floor = max(1e-6 * np.var(x), 1e-10, min_std**2)
    w = np.array([np.mean(lab == j) for j in range(k)])
    var = np.array([np.var(x[lab == j]) if np.any(lab == j) else np.var(x) for j in range(k)])
    var = np.maximum(var, var_floor)
    w = np.maximum(w, 1e-3)
    w /= w.sum()
    w, mu, var = _em(x, w, mu, var, var_floor, max_iter, tol)
    order = np.argsort(mu, kind="stable")
    return w[order], mu[order], var[order]


@numba.njit(cache=True)
def _em(x, w, mu, var, var_floor, max_iter, tol):
    n = len(x)
    k = len(w)
    r = np.empty((n, k))
    prev = -np.inf
    for _ in range(max_iter):
        lw = np.log(w) - 0.5 * np.log(2 * np.pi * var)
        ll = 0.0
        for i in range(n):
            mx = -np.inf
            for j in range(k):
                d = x[i] - mu[j]
                r[i, j] = lw[j] - 0.5 * d * d / var[j]
                if r[i, j] > mx:
                    mx = r[i, j]
            s = 0.0
            for j in range(k):
                r[i, j] = np.exp(r[i, j] - mx)
                s += r[i, j]
            for j in range(k):
                r[i, j] /= s
            ll += mx + np.log(s)
        for j in range(k):
            nk = 1e-12
            sx = 0.0
            for i in range(n):
                nk += r[i, j]
                sx += r[i, j] * x[i]
            mu[j] = sx / nk
            sv = 0.0
            for i in range(n):
                d = x[i] - mu[j]
                sv += r[i, j] * d * d
            w[j] = nk / n
            var[j] = max(sv / nk, var_floor)
        if abs(ll - prev) <= tol * max(1.0, abs(ll)):
            break
        prev = ll
    return w, mu, var


def _log_joint(x, w, mu, var):
    return (np.log(w)[None] - 0.5 * np.log(2 * np.pi * var)[None]
            - 0.5 * (x[:, None] - mu[None]) ** 2 / var[None])


def posteriors(x, w, mu, var):
    logp = _log_joint(np.asarray(x, dtype=np.float64), w, mu, var)
    logp -= logp.max(axis=1, keepdims=True)
    p = np.exp(logp)
    return p / p.sum(axis=1, keepdims=True)


def pairwise_costs(mesh: TriMesh) -> tuple[np.ndarray, np.ndarray]:
    """Face adjacency and unweighted cut costs ``-log(theta / pi)`` in [0, 10].

    ``theta`` is the angle between the two face normals, so flat neighbours
    are expensive to separate and sharp creases are cheap.
    """
    adj = mesh.face_adjacency
    n = mesh.face_normals
    cosang = np.clip(np.einsum("ij,ij->i", n[adj[:, 0]], n[adj[:, 1]]), -1.0, 1.0)
    frac = np.arccos(cosang) / np.pi
    with np.errstate(divide="ignore"):
        cost = -np.log(frac)
    return adj, np.clip(cost, 0.0, 10.0)


@numba.njit(cache=True)
def _icm(labels, data, indptr, nbr, wts, max_sweeps):
    m, k = data.shape
    for _ in range(max_sweeps):
        changed = 0
        for f in range(m):
            best = labels[f]
            best_e = np.inf
            for lab in range(k):
                e = data[f, lab]
                for q in range(indptr[f], indptr[f + 1]):
                    if labels[nbr[q]] != lab:
                        e += wts[q]
                if e < best_e:
                    best_e = e
                    best = lab
            if best != labels[f]:
                labels[f] = best
                changed += 1
        if changed == 0:
            break
    return labels


_FLOW_SCALE = 1e4
_FLOW_BIG = np.iinfo(np.int32).max // 4


def _energy(labels, data, ea, eb, w):
    return float(data[np.arange(len(labels)), labels].sum() + w[labels[ea] != labels[eb]].sum())


def _expand(labels, data, ea, eb, w, alpha):
    """One alpha-expansion move by s-t min cut (Potts pairwise term).

    Nodes on the sink side of the cut switch to ``alpha``.
    """
    m = len(labels)
    s, t = m, m + 1
    keep_cost = data[np.arange(m), labels].copy()
    take_cost = data[:, alpha].copy()
    fixed = labels == alpha
    lp, lq = labels[ea], labels[eb]
    fp, fq = fixed[ea], fixed[eb]
    # one end already alpha: the other pays w for keeping its label
    sel = fp & ~fq
    np.add.at(keep_cost, eb[sel], w[sel])
    sel = fq & ~fp
    np.add.at(keep_cost, ea[sel], w[sel])
    free = ~fp & ~fq
    same = free & (lp == lq)
    diff = free & (lp != lq)
    # differing labels: E00=E01=E10=w, E11=0 -> drop constant, q gets -w on take
    np.add.at(take_cost, eb[diff], -w[diff])
    lo = np.minimum(keep_cost, take_cost)
    keep_cost -= lo
    take_cost -= lo
    keep_cost[fixed] = 0.0
    take_cost[fixed] = 0.0
    node = np.arange(m)
    nf = int(fixed.sum())
    rows = np.concatenate([ea[same], eb[same], ea[diff], np.full(m, s), node, node[fixed]])
    cols = np.concatenate([eb[same], ea[same], eb[diff], node, np.full(m, t), np.full(nf, t)])
    cap = np.concatenate([w[same], w[same], w[diff], take_cost, keep_cost, np.full(nf, np.inf)])
    cap = np.where(np.isinf(cap), _FLOW_BIG,
                   np.minimum(np.rint(cap * _FLOW_SCALE), _FLOW_BIG)).astype(np.int32)
    ok = cap > 0
    g = csr_matrix((cap[ok], (rows[ok], cols[ok])), shape=(m + 2, m + 2))
    g.sum_duplicates()
    flow = csgraph.maximum_flow(g, s, t).flow
    resid = g - flow
    resid.data = (resid.data > 0).astype(np.int8)
    resid.eliminate_zeros()
    reach = csgraph.breadth_first_order(resid, s, directed=True, return_predecessors=False)
    src_side = np.zeros(m + 2, dtype=bool)
    src_side[reach] = True
    out = labels.copy()
    out[~src_side[:m]] = alpha
    return out


def _alpha_expansion(labels, data, ea, eb, w, max_cycles):
    e = _energy(labels, data, ea, eb, w)
    for _ in range(max_cycles):
        improved = False
        for alpha in range(data.shape[1]):
            cand = _expand(labels, data, ea, eb, w, alpha)
            ec = _energy(cand, data, ea, eb, w)
            if ec < e - 1e-9 * max(1.0, abs(e)):
                labels, e, improved = cand, ec, True
        if not improved:
            break
    return labels


def _contiguous(labels):
    out = np.empty_like(labels)
    seen = {}
    for i, lab in enumerate(labels.tolist()):
        if lab not in seen:
            seen[lab] = len(seen)
        out[i] = seen[lab]
    return out


def segment_mesh(mesh: TriMesh, field: SDFField, config: SDFConfig = SDFConfig(),
                 seed: int = 0, max_sweeps: int = 50, solver: str = "expansion") -> np.ndarray:
    """Per-face segment labels, contiguous from 0 in first-appearance order.

    Parameters
    ----------
    solver : {"expansion", "icm"}
        Minimiser for the smoothed labelling energy. ``"expansion"`` runs
        alpha-expansion graph cuts; ``"icm"`` runs iterated conditional modes.
        Both start from the argmax-posterior labelling; ``max_sweeps`` caps
        expansion cycles or ICM sweeps respectively.
    """
    if solver not in ("expansion", "icm"):
        raise ValueError(f"unknown solver {solver!r}")
    x = np.asarray(field.normalized, dtype=np.float64)
    if len(x) != mesh.n_faces:
        raise ValueError("SDF field does not match the mesh")
    k = config.n_clusters
    n_distinct = len(np.unique(x))
    if n_distinct < k:
        warnings.warn(
            f"only {n_distinct} distinct SDF values; using {n_distinct} clusters",
            RuntimeWarning, stacklevel=2,
        )
        k = n_distinct
    if k <= 1:
        return np.zeros(mesh.n_faces, dtype=np.int64)
    # a homogeneous body spreads log SDF over ln(1 / cos(cone angle)), so no
    # component may be narrower than that spread (sd of a uniform of that width)
    lg = np.log1p(np.asarray(field.raw, dtype=np.float64))
    span = lg.max() - lg.min()
    min_std = -np.log(np.cos(config.cone_angle)) / np.sqrt(12.0) / span if span > 0 else 0.0
    w, mu, var = fit_gmm_1d(x, k, seed=seed, min_std=min_std)
    post = posteriors(x, w, mu, var)
    data = -np.log(np.maximum(post, 1e-10))
    labels = np.argmax(post, axis=1).astype(np.int64)
    if config.smoothness > 0:
        adj, cost = pairwise_costs(mesh)
        cost = config.smoothness * cost
        if solver == "expansion":
            labels = _alpha_expansion(labels, data, adj[:, 0], adj[:, 1], cost, max_sweeps)
            return _contiguous(labels)
        src = np.r_[adj[:, 0], adj[:, 1]]
        dst = np.r_[adj[:, 1], adj[:, 0]]
        ww = np.r_[cost, cost]
        order = np.lexsort((dst, src))
        src, dst, ww = src[order], dst[order], ww[order]
        indptr = np.searchsorted(src, np.arange(mesh.n_faces + 1))
        labels = _icm(labels, data, indptr, dst, ww, max_sweeps)
    return _contiguous(labels)


def write_sdf_debug(path, field: SDFField, labels):
    with open(path, "w") as fh:
        fh.write("face_id,sdf_raw_nm,sdf_norm,label\n")
        for i, (r, n, lab) in enumerate(zip(field.raw.tolist(), field.normalized.tolist(),
                                            np.asarray(labels).tolist())):
            fh.write(f"{i},{r!r},{n!r},{lab}\n")
