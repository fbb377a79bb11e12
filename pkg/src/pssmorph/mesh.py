"""Triangle mesh container, file I/O and graph primitives.

Positions are in nanometers by convention. The mesh graph treats vertices as
nodes and mesh edges as undirected links weighted by Euclidean length.
"""

from __future__ import annotations

import csv
import os
import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph
from scipy.spatial import cKDTree

__all__ = [
    "MeshError",
    "MeshParseError",
    "NonTriangularFaceError",
    "EmptyMeshError",
    "EmptyRegionError",
    "UnreachableError",
    "TriMesh",
    "Component",
    "SynapseSet",
    "PointCloud",
    "load_mesh",
    "save_mesh",
    "connected_components",
    "geodesic_distances",
    "shortest_path",
    "surface_area",
    "local_region",
    "resample_points",
    "normalize_points",
    "canonical_pose",
    "read_synapses",
    "write_synapses",
]

MERGE_TOL = 1e-6


class MeshError(Exception):
    """Base class for mesh errors."""


class MeshParseError(MeshError):
    pass


class NonTriangularFaceError(MeshError):
    pass


class EmptyMeshError(MeshError):
    pass


class EmptyRegionError(MeshError):
    pass


class UnreachableError(MeshError):
    pass


def _readonly(a):
    a.setflags(write=False)
    return a


def _merge_duplicates(vertices, faces, tol):
    """Collapse vertices closer than ``tol`` onto the lowest-index member."""
    n = len(vertices)
    if n == 0:
        return vertices, faces
    pairs = cKDTree(vertices).query_pairs(tol, output_type="ndarray")
    if len(pairs) == 0:
        return vertices, faces
    g = sparse.coo_matrix(
        (np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n)
    )
    _, comp = csgraph.connected_components(g, directed=False)
    # representative = first vertex of each group, kept in original order
    first = np.full(comp.max() + 1, n, dtype=np.int64)
    np.minimum.at(first, comp, np.arange(n))
    keep = np.zeros(n, dtype=bool)
    keep[first] = True
    new_index = np.cumsum(keep) - 1
    remap = new_index[first[comp]]
    return vertices[keep], remap[faces]


class TriMesh:
    """Indexed triangle surface.

    Parameters
    ----------
    vertices : (N, 3) array_like
        Vertex positions in nm.
    faces : (M, 3) array_like of int
        Vertex index triples. Orientation is kept as given.
    extra_edges : (K, 2) array_like of int, optional
        Graph edges not implied by any face (polyline fixtures).
    merge_tol : float
        Vertices closer than this are merged. Faces that collapse are dropped.
    """

    def __init__(self, vertices, faces, extra_edges=None, *, merge_tol=MERGE_TOL):
        vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
        faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
        if len(faces) and (faces.min() < 0 or faces.max() >= len(vertices)):
            raise MeshError("face index out of range")
        if not np.all(np.isfinite(vertices)):
            raise MeshError("non-finite vertex coordinates")
        extra = None
        if extra_edges is not None:
            extra = np.asarray(extra_edges, dtype=np.int64).reshape(-1, 2)
        if merge_tol is not None and merge_tol > 0:
            n0 = len(vertices)
            if extra is not None:
                # carry extra edges through the merge as degenerate "faces"
                tri = np.concatenate([faces, np.c_[extra, extra[:, :1]]])
                vertices, tri = _merge_duplicates(vertices, tri, merge_tol)
                faces, extra = tri[: len(faces)], tri[len(faces):, :2]
            elif n0:
                vertices, faces = _merge_duplicates(vertices, faces, merge_tol)
        degenerate = (
            (faces[:, 0] == faces[:, 1])
            | (faces[:, 1] == faces[:, 2])
            | (faces[:, 0] == faces[:, 2])
        )
        faces = faces[~degenerate]

        self.vertices = _readonly(np.ascontiguousarray(vertices))
        self.faces = _readonly(np.ascontiguousarray(faces))

        e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
        if extra is not None:
            e = np.concatenate([e, extra])
        e = np.sort(e, axis=1)
        e = e[e[:, 0] != e[:, 1]]
        e = np.unique(e, axis=0) if len(e) else np.zeros((0, 2), dtype=np.int64)
        self.edges = _readonly(e)
        lengths = np.linalg.norm(vertices[e[:, 0]] - vertices[e[:, 1]], axis=1)
        self.edge_lengths = _readonly(lengths)

    def __repr__(self):
        return f"TriMesh(n_vertices={self.n_vertices}, n_faces={self.n_faces})"

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @cached_property
    def graph(self) -> sparse.csr_matrix:
        """Symmetric sparse adjacency weighted by edge length."""
        n = self.n_vertices
        e = self.edges
        w = self.edge_lengths
        g = sparse.coo_matrix(
            (np.r_[w, w], (np.r_[e[:, 0], e[:, 1]], np.r_[e[:, 1], e[:, 0]])),
            shape=(n, n),
        ).tocsr()
        g.sort_indices()
        return g

    @cached_property
    def face_areas(self) -> np.ndarray:
        return _readonly(0.5 * np.linalg.norm(self._face_cross, axis=1))

    @cached_property
    def face_normals(self) -> np.ndarray:
        """Unit normals from the stored winding; zero for degenerate faces."""
        c = self._face_cross
        nrm = np.linalg.norm(c, axis=1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            out = np.where(nrm > 0, c / nrm, 0.0)
        return _readonly(out)

    @cached_property
    def face_centroids(self) -> np.ndarray:
        return _readonly(self.vertices[self.faces].mean(axis=1))

    @cached_property
    def _face_cross(self):
        v = self.vertices[self.faces]
        return np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])

    @cached_property
    def face_adjacency(self) -> np.ndarray:
        """(K, 2) pairs of faces sharing an edge, lower face index first."""
        f = self.faces
        m = len(f)
        if m == 0:
            return np.zeros((0, 2), dtype=np.int64)
        e = np.sort(
            np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1
        )
        owner = np.tile(np.arange(m), 3)
        order = np.lexsort((owner, e[:, 1], e[:, 0]))
        e, owner = e[order], owner[order]
        same = np.all(e[1:] == e[:-1], axis=1)
        pairs = np.c_[owner[:-1][same], owner[1:][same]]
        pairs = np.sort(pairs, axis=1)
        pairs = pairs[pairs[:, 0] != pairs[:, 1]]
        return _readonly(np.unique(pairs, axis=0))

    @cached_property
    def vertex_faces(self) -> sparse.csr_matrix:
        """Sparse (n_vertices, n_faces) incidence matrix."""
        m = self.n_faces
        rows = self.faces.ravel()
        cols = np.repeat(np.arange(m), 3)
        return sparse.csr_matrix(
            (np.ones(3 * m), (rows, cols)), shape=(self.n_vertices, m)
        )

    @cached_property
    def mean_edge_length(self) -> float:
        return float(self.edge_lengths.mean()) if len(self.edge_lengths) else 0.0

    def submesh(self, face_index) -> tuple["TriMesh", np.ndarray]:
        """Mesh made of the selected faces plus the parent index of each vertex."""
        faces = self.faces[np.asarray(face_index)]
        used = np.unique(faces)
        remap = np.full(self.n_vertices, -1, dtype=np.int64)
        remap[used] = np.arange(len(used))
        sub = TriMesh(self.vertices[used], remap[faces], merge_tol=None)
        return sub, used

    def transformed(self, rotation=None, translation=None, scale=1.0) -> "TriMesh":
        v = self.vertices * scale
        if rotation is not None:
            v = v @ np.asarray(rotation).T
        if translation is not None:
            v = v + np.asarray(translation)
        return TriMesh(v, self.faces, merge_tol=None)


@dataclass(frozen=True)
class Component:
    """Connected piece of the mesh graph."""

    vertices: np.ndarray  # sorted vertex indices
    edges: np.ndarray  # (K, 2) edges among ``vertices``

    def __len__(self):
        return len(self.vertices)


@dataclass
class SynapseSet:
    ids: np.ndarray
    positions: np.ndarray
    cell_ids: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids)
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.cell_ids = np.asarray(self.cell_ids)
        if len(np.unique(self.ids)) != len(self.ids):
            raise ValueError("synapse ids must be unique")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("synapse positions must be finite")
        if not (len(self.ids) == len(self.positions) == len(self.cell_ids)):
            raise ValueError("synapse fields have different lengths")

    def __len__(self):
        return len(self.ids)

    def __iter__(self):
        for i in range(len(self)):
            yield self.ids[i], self.positions[i], self.cell_ids[i]

    def subset(self, mask) -> "SynapseSet":
        return SynapseSet(self.ids[mask], self.positions[mask], self.cell_ids[mask])

    def for_cell(self, cell_id) -> "SynapseSet":
        return self.subset(self.cell_ids.astype(str) == str(cell_id))


PointCloud = np.ndarray  # (P, 3) float64


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _parse_obj(path):
    verts, faces = [], []
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            tag = parts[0]
            try:
                if tag == "v":
                    verts.append([float(x) for x in parts[1:4]])
                elif tag == "f":
                    idx = []
                    for tok in parts[1:]:
                        i = int(tok.split("/")[0])
                        idx.append(i - 1 if i > 0 else len(verts) + i)
                    if len(idx) != 3:
                        raise NonTriangularFaceError(
                            f"non-triangular face at line {lineno} ({len(idx)} vertices)"
                        )
                    faces.append(idx)
            except (ValueError, IndexError) as exc:
                raise MeshParseError(f"{path}:{lineno}: {exc}") from exc
    if any(len(v) != 3 for v in verts):
        raise MeshParseError(f"{path}: vertex with fewer than 3 coordinates")
    return np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(
        faces, dtype=np.int64
    ).reshape(-1, 3)


def _parse_ply(path):
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"ply":
            raise MeshParseError(f"{path}: missing ply magic")
        fmt = None
        elements = []  # [name, count, [(prop, dtype) | (prop, count_dtype, item_dtype)]]
        while True:
            line = fh.readline()
            if not line:
                raise MeshParseError(f"{path}: unterminated header")
            tok = line.decode("ascii", "replace").split()
            if not tok or tok[0] in ("comment", "obj_info"):
                continue
            if tok[0] == "end_header":
                break
            if tok[0] == "format":
                fmt = tok[1]
            elif tok[0] == "element":
                elements.append([tok[1], int(tok[2]), []])
            elif tok[0] == "property":
                try:
                    if tok[1] == "list":
                        elements[-1][2].append(
                            (tok[4], _PLY_TYPES[tok[2]], _PLY_TYPES[tok[3]])
                        )
                    else:
                        elements[-1][2].append((tok[2], _PLY_TYPES[tok[1]]))
                except (KeyError, IndexError) as exc:
                    raise MeshParseError(f"{path}: bad property line {line!r}") from exc
        if fmt not in ("ascii", "binary_little_endian"):
            raise MeshParseError(f"{path}: unsupported PLY format {fmt!r}")
        body = fh.read()

    verts = np.zeros((0, 3))
    faces = np.zeros((0, 3), dtype=np.int64)
    if fmt == "ascii":
        tokens = body.split()
        pos = 0
        for name, count, props in elements:
            rows = []
            for _ in range(count):
                row = []
                for p in props:
                    if len(p) == 3:
                        k = int(tokens[pos])
                        row.append([int(t) for t in tokens[pos + 1 : pos + 1 + k]])
                        pos += 1 + k
                    else:
                        row.append(float(tokens[pos]))
                        pos += 1
                rows.append(row)
            verts, faces = _collect_ply(name, props, rows, verts, faces, path)
    else:
        offset = 0
        for name, count, props in elements:
            if all(len(p) == 2 for p in props):
                dt = np.dtype([(p[0], "<" + p[1]) for p in props])
                arr = np.frombuffer(body, dtype=dt, count=count, offset=offset)
                offset += dt.itemsize * count
                if name == "vertex":
                    verts = np.c_[arr["x"], arr["y"], arr["z"]].astype(np.float64)
                continue
            if name == "face" and len(props) == 1:
                # fast path: every face stores exactly three indices
                cdt, idt = np.dtype("<" + props[0][1]), np.dtype("<" + props[0][2])
                dt = np.dtype([("n", cdt), ("idx", idt, (3,))])
                if offset + dt.itemsize * count <= len(body):
                    arr = np.frombuffer(body, dtype=dt, count=count, offset=offset)
                    if np.all(arr["n"] == 3):
                        faces = arr["idx"].astype(np.int64)
                        offset += dt.itemsize * count
                        continue
            rows = []
            for _ in range(count):
                row = []
                for p in props:
                    if len(p) == 3:
                        cdt, idt = np.dtype("<" + p[1]), np.dtype("<" + p[2])
                        k = int(np.frombuffer(body, cdt, 1, offset)[0])
                        offset += cdt.itemsize
                        row.append(np.frombuffer(body, idt, k, offset).tolist())
                        offset += idt.itemsize * k
                    else:
                        dt = np.dtype("<" + p[1])
                        row.append(np.frombuffer(body, dt, 1, offset)[0])
                        offset += dt.itemsize
                rows.append(row)
            verts, faces = _collect_ply(name, props, rows, verts, faces, path)
    return verts, faces


def _collect_ply(name, props, rows, verts, faces, path):
    names = [p[0] for p in props]
    if name == "vertex":
        try:
            ix, iy, iz = names.index("x"), names.index("y"), names.index("z")
        except ValueError as exc:
            raise MeshParseError(f"{path}: vertex element lacks x/y/z") from exc
        verts = np.array([[r[ix], r[iy], r[iz]] for r in rows], dtype=np.float64)
    elif name == "face":
        li = next(
            (i for i, p in enumerate(props) if len(p) == 3), None
        )
        if li is None:
            raise MeshParseError(f"{path}: face element has no index list")
        out = []
        for r in rows:
            if len(r[li]) != 3:
                raise NonTriangularFaceError(
                    f"non-triangular face ({len(r[li])} vertices)"
                )
            out.append(r[li])
        faces = np.array(out, dtype=np.int64).reshape(-1, 3)
    return verts, faces


def load_mesh(path, format=None, scale=1.0) -> TriMesh:
    """Read an ASCII OBJ or ASCII/binary PLY triangle mesh.

    ``scale`` multiplies coordinates (to convert to nm).
    """
    path = Path(path)
    fmt = (format or path.suffix.lstrip(".")).lower()
    if fmt == "obj":
        verts, faces = _parse_obj(path)
    elif fmt == "ply":
        verts, faces = _parse_ply(path)
    else:
        raise MeshParseError(f"unknown mesh format {fmt!r}")
    if len(verts) == 0 or len(faces) == 0:
        raise EmptyMeshError(f"{path}: mesh has no vertices or faces")
    if faces.min() < 0 or faces.max() >= len(verts):
        raise MeshParseError(f"{path}: face index out of range")
    return TriMesh(verts * scale, faces)


def _atomic_write_bytes(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def save_mesh(mesh: TriMesh, path, format=None, binary=True):
    """Write ``mesh`` as OBJ or PLY (little-endian binary unless ``binary=False``)."""
    path = Path(path)
    fmt = (format or path.suffix.lstrip(".")).lower()
    v, f = mesh.vertices, mesh.faces
    if fmt == "obj":
        lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in v.tolist()]
        lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in f.tolist()]
        _atomic_write_bytes(path, ("\n".join(lines) + "\n").encode())
        return
    if fmt != "ply":
        raise MeshError(f"unknown mesh format {fmt!r}")
    kind = "binary_little_endian" if binary else "ascii"
    header = (
        f"ply\nformat {kind} 1.0\nelement vertex {len(v)}\n"
        "property double x\nproperty double y\nproperty double z\n"
        f"element face {len(f)}\nproperty list uchar int vertex_indices\nend_header\n"
    ).encode()
    if binary:
        frec = np.zeros(len(f), dtype=[("n", "u1"), ("idx", "<i4", (3,))])
        frec["n"] = 3
        frec["idx"] = f
        body = v.astype("<f8").tobytes() + frec.tobytes()
    else:
        body = "".join(f"{x!r} {y!r} {z!r}\n" for x, y, z in v.tolist())
        body += "".join(f"3 {a} {b} {c}\n" for a, b, c in f.tolist())
        body = body.encode()
    _atomic_write_bytes(path, header + body)


def read_synapses(path) -> SynapseSet:
    """Read ``synapse_id,x_nm,y_nm,z_nm,cell_id`` CSV."""
    ids, pos, cells = [], [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"synapse_id", "x_nm", "y_nm", "z_nm", "cell_id"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise MeshParseError(f"{path}: synapse CSV needs columns {sorted(need)}")
        for row in reader:
            ids.append(row["synapse_id"])
            pos.append([float(row["x_nm"]), float(row["y_nm"]), float(row["z_nm"])])
            cells.append(row["cell_id"])
    return SynapseSet(np.array(ids, dtype=object), np.array(pos).reshape(-1, 3),
                      np.array(cells, dtype=object))


def write_synapses(syn: SynapseSet, path):
    rows = ["synapse_id,x_nm,y_nm,z_nm,cell_id"]
    for sid, p, cid in syn:
        x, y, z = (float(c) for c in p)
        rows.append(f"{sid},{x!r},{y!r},{z!r},{cid}")
    _atomic_write_bytes(path, ("\n".join(rows) + "\n").encode())


# ---------------------------------------------------------------------------
# graph operations
# ---------------------------------------------------------------------------


def connected_components(mesh: TriMesh) -> list[Component]:
    """Components of the mesh graph, largest first (ties: lowest first vertex)."""
    if mesh.n_vertices == 0:
        return []
    n, labels = csgraph.connected_components(mesh.graph, directed=False)
    order = np.argsort(labels, kind="stable")
    bounds = np.searchsorted(labels[order], np.arange(n + 1))
    groups = [order[bounds[i] : bounds[i + 1]] for i in range(n)]
    groups.sort(key=lambda g: (-len(g), g[0]))
    e = mesh.edges
    elabel = labels[e[:, 0]] if len(e) else np.zeros(0, dtype=int)
    out = []
    for g in groups:
        out.append(Component(vertices=g, edges=e[elabel == labels[g[0]]]))
    return out


def geodesic_distances(mesh: TriMesh, sources, limit=np.inf, return_predecessors=False):
    """Multi-source shortest-path distance along mesh edges.

    Unreachable vertices get ``inf``.
    """
    src = np.unique(np.atleast_1d(np.asarray(sources, dtype=np.int64)))
    if len(src) == 0:
        raise ValueError("empty source set")
    out = csgraph.dijkstra(
        mesh.graph, directed=False, indices=src, min_only=True, limit=limit,
        return_predecessors=return_predecessors,
    )
    return out


def shortest_path(mesh: TriMesh, src: int, dst) -> np.ndarray:
    """Vertex path from ``src`` to the nearest member of ``dst``."""
    dst = np.unique(np.atleast_1d(np.asarray(dst, dtype=np.int64)))
    if len(dst) == 0:
        raise ValueError("empty destination set")
    dist, pred, _ = geodesic_distances(mesh, dst, return_predecessors=True)
    if not np.isfinite(dist[src]):
        raise UnreachableError(f"vertex {src} cannot reach the destination set")
    path = [int(src)]
    while pred[path[-1]] >= 0:
        path.append(int(pred[path[-1]]))
    return np.array(path, dtype=np.int64)


def path_length(mesh: TriMesh, path) -> float:
    p = np.asarray(path)
    if len(p) < 2:
        return 0.0
    return float(np.linalg.norm(np.diff(mesh.vertices[p], axis=0), axis=1).sum())


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------


def surface_area(mesh: TriMesh) -> float:
    return float(mesh.face_areas.sum())


def local_region(mesh: TriMesh, center, radius: float, return_faces: bool = False):
    """Faces whose three vertices lie within ``radius`` of ``center``.

    Returns the submesh and, for each submesh vertex, its parent vertex index.
    With ``return_faces`` the parent face indices are appended.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    c = np.asarray(center, dtype=np.float64).reshape(3)
    inside = np.sum((mesh.vertices - c) ** 2, axis=1) <= radius * radius
    keep = inside[mesh.faces].all(axis=1)
    if not keep.any():
        raise EmptyRegionError(
            f"no mesh face lies within {radius} nm of {c.tolist()}"
        )
    fidx = np.flatnonzero(keep)
    sub, vid = mesh.submesh(fidx)
    return (sub, vid, fidx) if return_faces else (sub, vid)


def normalize_points(points) -> np.ndarray:
    """Center at the origin and scale to unit max norm."""
    p = np.asarray(points, dtype=np.float64)
    p = p - p.mean(axis=0)
    r = np.linalg.norm(p, axis=1).max()
    if r <= 1e-12 * max(1.0, np.abs(points).max()):
        return np.zeros_like(p)
    return p / r


def canonical_pose(points) -> np.ndarray:
    """Rotate a centered cloud onto its principal axes.

    Axes are ordered by decreasing variance. The first two are oriented so the
    third moment along them is nonnegative; the third completes a right-handed
    frame, so the map is a proper rotation and norms are preserved.
    """
    p = np.asarray(points, dtype=np.float64)
    c = p - p.mean(axis=0)
    _, vec = np.linalg.eigh(c.T @ c)
    e1, e2 = vec[:, 2].copy(), vec[:, 1].copy()
    for e in (e1, e2):
        if np.sum((c @ e) ** 3) < 0:
            e *= -1.0
    R = np.stack([e1, e2, np.cross(e1, e2)])
    return c @ R.T + p.mean(axis=0)


def resample_points(mesh: TriMesh, count: int, seed: int, normalize=True,
                    align=False) -> PointCloud:
    """Area-uniform surface samples, normalized to unit max norm.

    With ``align`` the normalized cloud is also put in :func:`canonical_pose`.
    """
    if mesh.n_faces == 0:
        raise EmptyMeshError("cannot sample an empty mesh")
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    areas = mesh.face_areas
    total = areas.sum()
    p = areas / total if total > 0 else np.full(len(areas), 1.0 / len(areas))
    face = rng.choice(mesh.n_faces, size=count, p=p)
    u = rng.random(count)
    w = rng.random(count)
    su = np.sqrt(u)
    b0, b1, b2 = 1.0 - su, su * (1.0 - w), su * w
    tri = mesh.vertices[mesh.faces[face]]
    pts = b0[:, None] * tri[:, 0] + b1[:, None] * tri[:, 1] + b2[:, None] * tri[:, 2]
    out = normalize_points(pts) if normalize else pts
    return canonical_pose(out) if align else out
