"""Farthest-point skeletons computed on the mesh graph.

The root of each component is found by bouncing between farthest vertices;
paths from the farthest uncovered vertex back to the growing skeleton are then
added until every vertex lies within the invalidation distance.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.sparse import csgraph

from ._parallel import pmap
from .mesh import Component, TriMesh, connected_components, geodesic_distances

__all__ = [
    "Skeleton",
    "find_root",
    "skeletonize",
    "distance_to_skeleton",
    "write_skeleton",
    "read_skeleton",
]

DEFAULT_THRESHOLD = 12000.0  # nm

_NO_PRED = -9999


@dataclass(frozen=True)
class Skeleton:
    """Tree of mesh vertices.

    Attributes
    ----------
    nodes : (K,) int array
        Parent-mesh vertex ids, in insertion order (root first).
    edges : (K-1, 2) int array
        Mesh vertex id pairs.
    root : int
    threshold : float
        Invalidation distance used to build the tree (nm).
    """

    nodes: np.ndarray
    edges: np.ndarray
    root: int
    threshold: float

    def __len__(self):
        return len(self.nodes)

    def degrees(self) -> dict[int, int]:
        deg = {int(n): 0 for n in self.nodes}
        for a, b in self.edges:
            deg[int(a)] += 1
            deg[int(b)] += 1
        return deg

    def branch_points(self) -> np.ndarray:
        """Nodes of degree >= 3."""
        deg = self.degrees()
        return np.array(sorted(n for n, k in deg.items() if k >= 3), dtype=np.int64)


def _dist_from(mesh, src, limit=np.inf):
    return csgraph.dijkstra(mesh.graph, directed=False, indices=src, limit=limit)


def _argmax_lowest(values, index):
    """Index (from ``index``) of the max finite value; ties to the lowest id."""
    v = values[index]
    v = np.where(np.isfinite(v), v, -np.inf)
    k = int(np.argmax(v))
    return int(index[k]), float(v[k])


def find_root(mesh: TriMesh, component: Component, seed_vertex: int | None = None) -> int:
    """Farthest-point bouncing from ``seed_vertex`` (default: lowest index).

    Stops once a bounce fails to improve the (distance, lower index) pair.
    """
    verts = component.vertices
    v = int(verts[0]) if seed_vertex is None else int(seed_vertex)
    if len(verts) == 1:
        return v
    best_d, best_v = -1.0, None
    while True:
        dist = _dist_from(mesh, v)
        u, du = _argmax_lowest(dist, verts)
        tol = 1e-12 * max(1.0, abs(best_d))
        better = du > best_d + tol or (abs(du - best_d) <= tol and u < best_v)
        if not better:
            return best_v
        best_d, best_v = du, u
        v = u


def _skeletonize_component(mesh, comp, d, seed_vertex=None):
    verts = comp.vertices
    root = find_root(mesh, comp, seed_vertex)
    dist, pred = csgraph.dijkstra(
        mesh.graph, directed=False, indices=root, return_predecessors=True
    )
    is_node = np.zeros(mesh.n_vertices, dtype=bool)
    is_node[root] = True
    nodes = [root]
    edges = []
    while True:
        far, dfar = _argmax_lowest(dist, verts)
        if dfar < d:
            break
        path = [far]
        while not is_node[path[-1]]:
            p = pred[path[-1]]
            if p < 0:
                raise RuntimeError("broken predecessor chain")
            path.append(int(p))
        new = path[:-1]
        edges.extend(zip(path[:-1], path[1:]))
        nodes.extend(new)
        is_node[new] = True
        nd, npred, _ = csgraph.dijkstra(
            mesh.graph, directed=False, indices=new, min_only=True,
            return_predecessors=True, limit=dfar,
        )
        upd = nd < dist
        dist[upd] = nd[upd]
        pred[upd] = npred[upd]
        dist[new] = 0.0
        pred[new] = _NO_PRED
    return Skeleton(
        nodes=np.array(nodes, dtype=np.int64),
        edges=np.array(edges, dtype=np.int64).reshape(-1, 2),
        root=int(root),
        threshold=float(d),
    )


def skeletonize(mesh: TriMesh, d: float = DEFAULT_THRESHOLD, threads: int = 1) -> list[Skeleton]:
    """One skeleton per connected component, largest component first."""
    if not d > 0:
        raise ValueError("threshold d must be positive")
    comps = connected_components(mesh)
    return pmap(lambda c: _skeletonize_component(mesh, c, d), comps, threads)


def distance_to_skeleton(mesh: TriMesh, skeleton) -> np.ndarray:
    """Geodesic distance from every vertex to the nearest skeleton node."""
    skels = [skeleton] if isinstance(skeleton, Skeleton) else list(skeleton)
    nodes = np.concatenate([s.nodes for s in skels]) if skels else np.zeros(0, int)
    if len(nodes) == 0:
        raise ValueError("empty skeleton")
    return geodesic_distances(mesh, nodes)


def write_skeleton(skeletons, mesh: TriMesh, edges_path, nodes_path):
    """Persist as an edge list plus a node table."""
    skels = [skeletons] if isinstance(skeletons, Skeleton) else list(skeletons)
    roots = {s.root for s in skels}
    with open(edges_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node_a", "node_b"])
        for s in skels:
            w.writerows(s.edges.tolist())
    with open(nodes_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node_id", "x_nm", "y_nm", "z_nm", "is_root"])
        for s in skels:
            for n in s.nodes.tolist():
                x, y, z = mesh.vertices[n].tolist()
                w.writerow([n, repr(x), repr(y), repr(z), int(n in roots)])


def read_skeleton(edges_path, nodes_path, threshold=DEFAULT_THRESHOLD) -> list[Skeleton]:
    with open(nodes_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    with open(edges_path, newline="") as fh:
        erows = list(csv.DictReader(fh))
    node_order = [int(r["node_id"]) for r in rows]
    roots = [int(r["node_id"]) for r in rows if r["is_root"] == "1"]
    edges = np.array([[int(r["node_a"]), int(r["node_b"])] for r in erows],
                     dtype=np.int64).reshape(-1, 2)
    # split into trees, one per root
    parent = {n: n for n in node_order}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for a, b in edges.tolist():
        parent[find(a)] = find(b)
    out = []
    for r in roots:
        g = find(r)
        nodes = np.array([n for n in node_order if find(n) == g], dtype=np.int64)
        mask = np.array([find(a) == g for a in edges[:, 0].tolist()], dtype=bool)
        out.append(Skeleton(nodes=nodes, edges=edges[mask] if len(edges) else edges,
                            root=r, threshold=threshold))
    return out
