"""Axis-aligned bounding volume hierarchy for ray/triangle queries."""

from __future__ import annotations

import numba
import numpy as np

LEAF_SIZE = 4


@numba.njit(cache=True, nogil=True)
def _build(lo, hi, cent, leaf_size):
    m = len(cent)
    cap = max(1, 2 * m)
    node_lo = np.empty((cap, 3))
    node_hi = np.empty((cap, 3))
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    start = np.zeros(cap, np.int64)
    count = np.zeros(cap, np.int64)
    order = np.arange(m)

    stack_node = np.empty(cap, np.int64)
    stack_node[0] = 0
    start[0] = 0
    count[0] = m
    n_nodes = 1
    sp = 1
    while sp > 0:
        sp -= 1
        nd = stack_node[sp]
        s = start[nd]
        c = count[nd]
        for k in range(3):
            a = np.inf
            b = -np.inf
            for i in range(s, s + c):
                f = order[i]
                if lo[f, k] < a:
                    a = lo[f, k]
                if hi[f, k] > b:
                    b = hi[f, k]
            node_lo[nd, k] = a
            node_hi[nd, k] = b
        if c <= leaf_size:
            continue
        # split on the widest centroid extent at the median
        best = 0
        width = -1.0
        for k in range(3):
            a = np.inf
            b = -np.inf
            for i in range(s, s + c):
                v = cent[order[i], k]
                if v < a:
                    a = v
                if v > b:
                    b = v
            if b - a > width:
                width = b - a
                best = k
        if width <= 0.0:
            continue
        sub = order[s : s + c].copy()
        keys = np.empty(c)
        for i in range(c):
            keys[i] = cent[sub[i], best]
        idx = np.argsort(keys, kind="mergesort")
        for i in range(c):
            order[s + i] = sub[idx[i]]
        half = c // 2
        l = n_nodes
        r = n_nodes + 1
        n_nodes += 2
        left[nd] = l
        right[nd] = r
        start[l] = s
        count[l] = half
        start[r] = s + half
        count[r] = c - half
        stack_node[sp] = r
        stack_node[sp + 1] = l
        sp += 2
    return (node_lo[:n_nodes], node_hi[:n_nodes], left[:n_nodes], right[:n_nodes],
            start[:n_nodes], count[:n_nodes], order)


@numba.njit(inline="always")
def _slab(o0, o1, o2, i0, i1, i2, node_lo, node_hi, nd, tmax):
    """Entry distance into the node box, or inf if the ray misses it."""
    t0 = 0.0
    t1 = tmax
    a = (node_lo[nd, 0] - o0) * i0
    b = (node_hi[nd, 0] - o0) * i0
    if a > b:
        a, b = b, a
    t0 = max(t0, a)
    t1 = min(t1, b)
    a = (node_lo[nd, 1] - o1) * i1
    b = (node_hi[nd, 1] - o1) * i1
    if a > b:
        a, b = b, a
    t0 = max(t0, a)
    t1 = min(t1, b)
    a = (node_lo[nd, 2] - o2) * i2
    b = (node_hi[nd, 2] - o2) * i2
    if a > b:
        a, b = b, a
    t0 = max(t0, a)
    t1 = min(t1, b)
    return t0 if t0 <= t1 else np.inf


@numba.njit(cache=True, nogil=True)
def _cast(orig, dirs, skip, v0, e1, e2, node_lo, node_hi, left, right, start, count, order):
    n = len(orig)
    out = np.full(n, np.inf)
    hit_face = np.full(n, -1, np.int64)
    stack = np.empty(256, np.int64)
    stack_t = np.empty(256)
    for r in range(n):
        o0, o1, o2 = orig[r, 0], orig[r, 1], orig[r, 2]
        d0, d1, d2 = dirs[r, 0], dirs[r, 1], dirs[r, 2]
        i0 = 1.0 / d0 if d0 != 0.0 else 1e300
        i1 = 1.0 / d1 if d1 != 0.0 else 1e300
        i2 = 1.0 / d2 if d2 != 0.0 else 1e300
        best = np.inf
        bf = -1
        t_root = _slab(o0, o1, o2, i0, i1, i2, node_lo, node_hi, 0, best)
        if t_root == np.inf:
            continue
        sp = 0
        stack[0] = 0
        stack_t[0] = t_root
        sp = 1
        while sp > 0:
            sp -= 1
            nd = stack[sp]
            if stack_t[sp] >= best:
                continue
            if left[nd] < 0:
                for i in range(start[nd], start[nd] + count[nd]):
                    f = order[i]
                    if f == skip[r]:
                        continue
                    # Moller-Trumbore, two-sided
                    px = d1 * e2[f, 2] - d2 * e2[f, 1]
                    py = d2 * e2[f, 0] - d0 * e2[f, 2]
                    pz = d0 * e2[f, 1] - d1 * e2[f, 0]
                    det = e1[f, 0] * px + e1[f, 1] * py + e1[f, 2] * pz
                    if abs(det) < 1e-300:
                        continue
                    idet = 1.0 / det
                    tx = o0 - v0[f, 0]
                    ty = o1 - v0[f, 1]
                    tz = o2 - v0[f, 2]
                    u = (tx * px + ty * py + tz * pz) * idet
                    if u < 0.0 or u > 1.0:
                        continue
                    qx = ty * e1[f, 2] - tz * e1[f, 1]
                    qy = tz * e1[f, 0] - tx * e1[f, 2]
                    qz = tx * e1[f, 1] - ty * e1[f, 0]
                    v = (d0 * qx + d1 * qy + d2 * qz) * idet
                    if v < 0.0 or u + v > 1.0:
                        continue
                    t = (e2[f, 0] * qx + e2[f, 1] * qy + e2[f, 2] * qz) * idet
                    if t > 0.0 and t < best:
                        best = t
                        bf = f
            else:
                a = left[nd]
                b = right[nd]
                ta = _slab(o0, o1, o2, i0, i1, i2, node_lo, node_hi, a, best)
                tb = _slab(o0, o1, o2, i0, i1, i2, node_lo, node_hi, b, best)
                if ta > tb:
                    a, b = b, a
                    ta, tb = tb, ta
                if sp + 2 > len(stack):
                    stack = np.concatenate((stack, np.empty(len(stack), np.int64)))
                    stack_t = np.concatenate((stack_t, np.empty(len(stack_t))))
                # far child below near child so the near one pops first
                if tb < np.inf:
                    stack[sp] = b
                    stack_t[sp] = tb
                    sp += 1
                if ta < np.inf:
                    stack[sp] = a
                    stack_t[sp] = ta
                    sp += 1
        out[r] = best
        hit_face[r] = bf
    return out, hit_face


class BVH:
    """Bounding volume hierarchy over the triangles of a mesh.

    Parameters
    ----------
    vertices : (N, 3) array
    faces : (M, 3) int array
    """

    def __init__(self, vertices, faces, leaf_size=LEAF_SIZE):
        tri = np.asarray(vertices, dtype=np.float64)[np.asarray(faces)]
        self.v0 = np.ascontiguousarray(tri[:, 0])
        self.e1 = np.ascontiguousarray(tri[:, 1] - tri[:, 0])
        self.e2 = np.ascontiguousarray(tri[:, 2] - tri[:, 0])
        lo = tri.min(axis=1)
        hi = tri.max(axis=1)
        cent = tri.mean(axis=1)
        (self.node_lo, self.node_hi, self.left, self.right,
         self.start, self.count, self.order) = _build(lo, hi, cent, leaf_size)

    def __len__(self):
        return len(self.v0)

    def intersect(self, origins, directions, skip_faces=None):
        """Distance to the first hit along each ray (``inf`` on a miss).

        Returns
        -------
        t : (R,) array
        face : (R,) int array, -1 on a miss
        """
        o = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
        d = np.ascontiguousarray(directions, dtype=np.float64).reshape(-1, 3)
        if skip_faces is None:
            skip = np.full(len(o), -1, np.int64)
        else:
            skip = np.ascontiguousarray(skip_faces, dtype=np.int64).reshape(-1)
        if len(self.v0) == 0:
            return np.full(len(o), np.inf), np.full(len(o), -1, np.int64)
        return _cast(o, d, skip, self.v0, self.e1, self.e2, self.node_lo,
                     self.node_hi, self.left, self.right, self.start, self.count,
                     self.order)
