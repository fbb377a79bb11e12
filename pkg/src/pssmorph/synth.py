"""Synthetic neuron meshes with ground truth.

Cells are assembled from explicit surface pieces: an icosphere soma, straight
revolved dendrite tubes, icosphere junctions at forks and revolved spines.
Pieces are joined by cutting a hole in the host surface and zipping the hole
boundary to the open ring of the attached piece, so every generated mesh is
closed and consistently oriented (outward normals).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph
from scipy.spatial import cKDTree

from .mesh import SynapseSet, TriMesh

__all__ = [
    "SynthError",
    "SynthCellSpec",
    "SynthCell",
    "CLASS_TAGS",
    "REGION_NAMES",
    "generate_cell",
    "generate_population",
    "truncate_cell",
    "write_population",
    "revolve",
    "icosphere",
    "tube_mesh",
    "capped_cylinder",
    "dumbbell",
    "y_tube",
]

CLASS_TAGS = ("spiny-mushroom", "spiny-stubby", "aspiny")
REGION_NAMES = ("soma", "shaft", "spine-neck", "spine-head")
# aspiny synapse density relative to the spiny classes (shaft synapses)
ASPINY_DENSITY_FACTOR = 1.5
SOMA, SHAFT, NECK, HEAD = range(4)

_GAP = 150.0  # axial clearance between a host sphere and an attached tube ring


class SynthError(ValueError):
    pass


# ---------------------------------------------------------------------------
# surface primitives
# ---------------------------------------------------------------------------


def _frame(axis):
    a = np.asarray(axis, dtype=np.float64)
    a = a / np.linalg.norm(a)
    e = np.eye(3)[np.argmin(np.abs(a))]
    u = np.cross(a, e)
    u /= np.linalg.norm(u)
    w = np.cross(a, u)
    return a, u, w


def revolve(origin, axis, z, r, segments, phase=0.0):
    """Surface of revolution of the profile ``(z[k], r[k])`` about ``axis``.

    Profile entries with ``r == 0`` at either end become a single apex vertex;
    other ends stay open. Faces are wound so normals point away from the axis.

    Returns
    -------
    vertices : (N, 3) array
    faces : (M, 3) int array
    rings : list of int arrays, vertex indices per profile entry
    """
    z = np.asarray(z, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    a, u, w = _frame(axis)
    o = np.asarray(origin, dtype=np.float64)
    theta = phase + 2 * np.pi * np.arange(segments) / segments
    circ = np.cos(theta)[:, None] * u + np.sin(theta)[:, None] * w
    verts, rings = [], []
    n = 0
    for k in range(len(z)):
        if r[k] == 0.0:
            if 0 < k < len(z) - 1:
                raise SynthError("zero radius allowed only at profile ends")
            verts.append((o + z[k] * a)[None])
            rings.append(np.array([n]))
            n += 1
        else:
            verts.append(o + z[k] * a + r[k] * circ)
            rings.append(np.arange(n, n + segments))
            n += segments
    faces = []
    j = np.arange(segments)
    jn = (j + 1) % segments
    for k in range(len(z) - 1):
        lo, hi = rings[k], rings[k + 1]
        if len(lo) == 1:
            faces.append(np.c_[np.full(segments, lo[0]), hi[jn], hi[j]])
        elif len(hi) == 1:
            faces.append(np.c_[lo[j], lo[jn], np.full(segments, hi[0])])
        else:
            faces.append(np.c_[lo[j], lo[jn], hi[jn]])
            faces.append(np.c_[lo[j], hi[jn], hi[j]])
    return np.concatenate(verts), np.concatenate(faces).astype(np.int64), rings


def icosphere(radius=1.0, subdivisions=3, center=(0.0, 0.0, 0.0)):
    """Subdivided icosahedron; returns ``(vertices, faces)`` with outward winding."""
    t = (1.0 + 5 ** 0.5) / 2.0
    v = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=np.float64)
    f = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    for _ in range(subdivisions):
        e = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
        uniq, inv = np.unique(e, axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        mid = v[uniq[:, 0]] + v[uniq[:, 1]]
        mid /= np.linalg.norm(mid, axis=1, keepdims=True)
        m = len(f)
        a, b, c = inv[:m] + len(v), inv[m : 2 * m] + len(v), inv[2 * m :] + len(v)
        v = np.concatenate([v, mid])
        f = np.concatenate([
            np.c_[f[:, 0], a, c], np.c_[f[:, 1], b, a],
            np.c_[f[:, 2], c, b], np.c_[a, b, c],
        ])
    tri = v[f]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    flip = np.einsum("ij,ij->i", n, tri.mean(axis=1)) < 0
    f[flip] = f[flip][:, ::-1]
    return v * radius + np.asarray(center, dtype=np.float64), f


def _subdiv_for(radius, edge):
    # icosahedron edge on the unit sphere is ~1.05; each subdivision halves it
    k = int(np.ceil(np.log2(max(1.0, 1.05 * radius / edge))))
    return int(min(max(k, 1), 6))


def _cap_profile(z0, radius, step, upward=True):
    n = max(2, int(np.ceil(0.5 * np.pi * radius / step)))
    phi = np.linspace(0.5 * np.pi, 0.0, n + 1)[1:]
    z = z0 + radius * np.cos(phi) if upward else z0 - radius * np.cos(phi)
    r = radius * np.sin(phi)
    r[-1] = 0.0
    return z, r


def tube_mesh(length, radius, segments=16, capped=True, origin=(0, 0, 0), axis=(0, 0, 1)):
    """Straight tube along ``axis`` from ``origin``; hemispherical caps if ``capped``."""
    step = 2 * np.pi * radius / segments
    nz = max(1, int(np.ceil(length / step)))
    z = np.linspace(0.0, length, nz + 1)
    r = np.full_like(z, radius)
    if capped:
        zt, rt = _cap_profile(length, radius, step)
        zb, rb = _cap_profile(0.0, radius, step, upward=False)
        z = np.concatenate([zb[::-1], z, zt])
        r = np.concatenate([rb[::-1], r, rt])
    v, f, _ = revolve(origin, axis, z, r, segments)
    return TriMesh(v, f)


def capped_cylinder(length, radius, segments=32, cap_rings=4):
    """Cylinder with flat disk caps; returns the mesh and a lateral-face mask."""
    step = length / max(1, int(np.ceil(length / (2 * np.pi * radius / segments))))
    z = np.arange(0.0, length + 0.5 * step, step)
    rc = radius * np.arange(0, cap_rings + 1) / cap_rings
    zz = np.concatenate([np.zeros(cap_rings), z, np.full(cap_rings, length)])
    rr = np.concatenate([rc[:-1], np.full(len(z), radius), rc[::-1][1:]])
    v, f, _ = revolve((0, 0, 0), (0, 0, 1), zz, rr, segments)
    mesh = TriMesh(v, f)
    n = mesh.face_normals
    lateral = np.abs(n[:, 2]) < 1e-6
    return mesh, lateral


def dumbbell(r=1000.0, segments=32):
    """Spheres of radius ``r`` and ``3r`` joined by a tube of radius ``0.3r``.

    Returns the mesh and a per-face region id (0 small sphere, 1 tube, 2 large sphere).
    """
    rt = 0.3 * r
    tube_len = 4.0 * r
    step = 2 * np.pi * rt / segments * 2
    # small sphere from bottom apex up to the tube junction
    a0 = np.arcsin(rt / r)
    phi = np.linspace(np.pi, a0, max(8, int(np.ceil((np.pi - a0) * r / step))))
    z1 = r * np.cos(phi)  # sphere centered at 0
    r1 = r * np.sin(phi)
    r1[0] = 0.0
    zj = z1[-1]
    zt = np.linspace(zj, zj + tube_len, max(4, int(np.ceil(tube_len / step))))[1:]
    a1 = np.arcsin(rt / (3 * r))
    c2 = zt[-1] + 3 * r * np.cos(a1)
    phi2 = np.linspace(np.pi - a1, 0.0, max(12, int(np.ceil((np.pi - a1) * 3 * r / step))))[1:]
    z2 = c2 + 3 * r * np.cos(phi2)
    r2 = 3 * r * np.sin(phi2)
    r2[-1] = 0.0
    z = np.concatenate([z1, zt, z2])
    rr = np.concatenate([r1, np.full(len(zt), rt), r2])
    v, f, _ = revolve((0, 0, 0), (0, 0, 1), z, rr, segments)
    mesh = TriMesh(v, f)
    cz = mesh.face_centroids[:, 2]
    region = np.where(cz < zj, 0, np.where(cz > zt[-1], 2, 1))
    return mesh, region


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------


class _Piece:
    """A host surface that can have holes cut into it."""

    def __init__(self, builder, verts, faces, label):
        self.offset = builder.add_vertices(verts, label)
        self.faces = faces + self.offset
        self.alive = np.ones(len(faces), dtype=bool)
        self.n = len(verts)
        inc = [[] for _ in range(self.n)]
        for i, tri in enumerate(faces):
            for vtx in tri:
                inc[vtx].append(i)
        self.incident = inc
        self.tree = cKDTree(verts)
        self.local_verts = verts

    def cut_hole(self, center, radius, axis):
        """Remove faces touching vertices within ``radius`` of ``center``.

        Returns the hole boundary as global vertex ids, CCW about ``axis``.
        """
        sel = set(self.tree.query_ball_point(center, radius))
        if not sel:
            sel = {int(self.tree.query(center)[1])}
        for _ in range(8):
            faces = set()
            for vtx in sel:
                faces.update(self.incident[vtx])
            faces = sorted(f for f in faces if self.alive[f])
            if len(faces) == 0 or any(not self.alive[f] for s in sel for f in self.incident[s]):
                raise SynthError("hole overlaps an existing hole")
            loop, pinch = _boundary_loop(self.faces[faces])
            if pinch is None:
                break
            sel.add(int(pinch) - self.offset)
        else:
            raise SynthError("could not cut a simple hole")
        self.alive[faces] = False
        if _loop_winding(self.local_verts[loop - self.offset], center, axis) < 0:
            raise SynthError("hole boundary has inconsistent orientation")
        return loop

    def live_faces(self):
        return self.faces[self.alive]


def _boundary_loop(faces):
    """Ordered boundary of a face patch (directed as in ``faces``)."""
    d = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    s = {(int(a), int(b)) for a, b in d}
    bnd = [(a, b) for a, b in s if (b, a) not in s]
    nxt = {}
    for a, b in bnd:
        if a in nxt:
            return None, a
        nxt[a] = b
    start = min(nxt)
    loop = [start]
    while True:
        b = nxt[loop[-1]]
        if b == start:
            break
        loop.append(b)
        if len(loop) > len(nxt):
            raise SynthError("open hole boundary")
    if len(loop) != len(nxt):
        raise SynthError("hole boundary has several loops")
    return np.array(loop, dtype=np.int64), None


def _angles(points, center, axis):
    a, u, w = _frame(axis)
    d = points - center
    return np.arctan2(d @ w, d @ u)


def _loop_winding(points, center, axis):
    ang = _angles(points, center, axis)
    inc = np.angle(np.exp(1j * (np.roll(ang, -1) - ang)))
    return inc.sum()


def _zip(A, pa, B, pb, center, axis):
    """Triangulate the band between two CCW loops (A forward, B backward)."""
    angA = _angles(pa, center, axis)
    angB = _angles(pb, center, axis)
    j0 = int(np.argmin(np.abs(np.angle(np.exp(1j * (angB - angA[0]))))))
    B = np.roll(B, -j0)
    angB = np.roll(angB, -j0)

    def unwrap(ang, first):
        inc = np.angle(np.exp(1j * np.diff(np.r_[ang, ang[0]])))
        return first + np.r_[0.0, np.cumsum(inc)]

    ua = unwrap(angA, 0.0)
    ub = unwrap(angB, float(np.angle(np.exp(1j * (angB[0] - angA[0])))))
    n, m = len(A), len(B)
    i = j = 0
    tris = []
    while i < n or j < m:
        if j == m or (i < n and ua[i + 1] <= ub[j + 1]):
            tris.append((A[i % n], A[(i + 1) % n], B[j % m]))
            i += 1
        else:
            tris.append((A[i % n], B[(j + 1) % m], B[j % m]))
            j += 1
    return np.array(tris, dtype=np.int64)


class _Builder:
    def __init__(self):
        self.verts = []
        self.labels = []
        self.spine = []
        self.n = 0
        self.pieces = []
        self.blocks = []

    def add_vertices(self, v, label, spine=-1):
        off = self.n
        self.verts.append(np.asarray(v, dtype=np.float64))
        lab = np.broadcast_to(np.asarray(label), (len(v),)).astype(np.int8)
        self.labels.append(lab)
        self.spine.append(np.full(len(v), spine, dtype=np.int64))
        self.n += len(v)
        return off

    def piece(self, verts, faces, label):
        p = _Piece(self, verts, faces, label)
        self.pieces.append(p)
        return p

    def add_faces(self, f):
        self.blocks.append(np.asarray(f, dtype=np.int64))

    def position(self, idx):
        allv = np.concatenate(self.verts)
        return allv[idx]

    def finish(self):
        v = np.concatenate(self.verts)
        lab = np.concatenate(self.labels)
        sp = np.concatenate(self.spine)
        f = np.concatenate([p.live_faces() for p in self.pieces] + self.blocks)
        used = np.unique(f)
        remap = np.full(len(v), -1, dtype=np.int64)
        remap[used] = np.arange(len(used))
        f = remap[f]
        _check_closed(f)
        return v[used], f, lab[used], sp[used], remap


def _check_closed(f):
    d = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    key = d[:, 0] * (f.max() + 1) + d[:, 1]
    rkey = d[:, 1] * (f.max() + 1) + d[:, 0]
    if len(np.unique(key)) != len(key):
        raise SynthError("generated surface is not consistently oriented")
    if not np.all(np.isin(rkey, key)):
        raise SynthError("generated surface is not closed")


# ---------------------------------------------------------------------------
# cells
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthCellSpec:
    """Parameters of one synthetic cell. Lengths in nm, density per um."""

    class_tag: str = "spiny-mushroom"
    n_dendrites: int = 4
    dendrite_length: float = 60000.0
    n_forks: int = 2
    child_length: float = 50000.0
    fork_angle: float = 0.7
    shaft_radius: float = 600.0
    spine_density: float = 0.25
    neck_radius: float = 120.0
    neck_length: float = 900.0
    head_radius: float = 450.0
    soma_radius: float = 6000.0
    segments: int = 16
    depth_nm: float = 300000.0
    taper: float = 0.2
    neck_jitter: float = 0.25
    head_jitter: float = 0.1
    seed: int = 0

    @classmethod
    def for_class(cls, class_tag, **overrides):
        base = {
            "spiny-mushroom": {},
            "spiny-stubby": dict(neck_radius=300.0, neck_length=450.0, head_radius=300.0),
            # no spines to confuse with the shaft, so aspiny dendrites taper more
            "aspiny": dict(spine_density=0.25 * ASPINY_DENSITY_FACTOR, taper=0.4),
        }
        if class_tag not in base:
            raise SynthError(f"unknown class tag {class_tag!r}")
        kw = dict(base[class_tag], class_tag=class_tag)
        kw.update(overrides)
        return cls(**kw)

    def validate(self):
        if self.class_tag not in CLASS_TAGS:
            raise SynthError(f"unknown class tag {self.class_tag!r}")
        for name in ("dendrite_length", "child_length", "fork_angle", "shaft_radius",
                     "neck_radius", "neck_length", "head_radius", "soma_radius"):
            if not getattr(self, name) > 0:
                raise SynthError(f"{name} must be positive")
        if self.spine_density < 0:
            raise SynthError("spine_density must be >= 0")
        if self.n_dendrites < 1 or not 0 <= self.n_forks <= self.n_dendrites:
            raise SynthError("need n_dendrites >= 1 and 0 <= n_forks <= n_dendrites")
        if not all(0 <= v < 0.5 for v in (self.taper, self.neck_jitter, self.head_jitter)):
            raise SynthError("taper, neck_jitter and head_jitter must be in [0, 0.5)")
        if self.segments < 6:
            raise SynthError("segments must be >= 6")
        if self.neck_radius >= self.shaft_radius or self.head_radius < self.neck_radius:
            raise SynthError("spine radii incompatible with the shaft")
        if self.shaft_radius * (1 + self.taper) >= 0.5 * self.soma_radius:
            raise SynthError("shaft radius too large for the soma")

    @property
    def spine_height(self):
        return _GAP + self.neck_length + 2 * self.head_radius


@dataclass
class SynthCell:
    mesh: TriMesh
    synapses: SynapseSet
    skeleton_segments: np.ndarray  # (K, 2, 3) ground-truth axis segments
    vertex_labels: np.ndarray  # index into REGION_NAMES
    spine_index: np.ndarray  # per vertex, -1 off spines
    synapse_spine: np.ndarray  # per synapse, spine id or -1
    soma_center: np.ndarray
    depth: float
    class_tag: str
    cell_id: str
    spec: SynthCellSpec = field(repr=False, default=None)

    def spine_vertices(self, spine_id):
        return np.flatnonzero(self.spine_index == spine_id)


def _rotate(v, axis, angle):
    a = axis / np.linalg.norm(axis)
    return (v * np.cos(angle) + np.cross(a, v) * np.sin(angle)
            + a * np.dot(a, v) * (1 - np.cos(angle)))


def _random_unit(rng):
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def _spine_profile(spec, step):
    """(z, r, is_head) profile of a spine standing on z = 0."""
    rn, ln, rh = spec.neck_radius, spec.neck_length, spec.head_radius
    base_r = 1.3 * rn if spec.class_tag == "spiny-mushroom" else rn
    nz = max(2, int(np.ceil(ln / step)))
    zn = np.linspace(_GAP, _GAP + ln, nz + 1)
    z = [np.array([_GAP * 0.3]), zn]
    r = [np.array([base_r]), np.full(len(zn), rn)]
    if rh > rn * 1.01:
        zc = zn[-1] + np.sqrt(rh * rh - rn * rn)
        phi0 = np.pi - np.arcsin(rn / rh)
        nh = max(4, int(np.ceil(phi0 * rh / step)))
        phi = np.linspace(phi0, 0.0, nh + 1)[1:]
        zh, rr = zc + rh * np.cos(phi), rh * np.sin(phi)
    else:
        zh, rr = _cap_profile(zn[-1], rn, step)
    rr[-1] = 0.0
    z.append(zh)
    r.append(rr)
    z, r = np.concatenate(z), np.concatenate(r)
    head = np.r_[np.zeros(1 + len(zn), bool), np.ones(len(zh), bool)]
    return z, r, head


def generate_cell(spec: SynthCellSpec, cell_id: str | None = None) -> SynthCell:
    """Build one synthetic neuron mesh with synapses and ground truth."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    R, rs, seg = spec.shaft_radius, spec.soma_radius, spec.segments
    step = 2 * np.pi * R / seg
    rj = 2.0 * R
    center = np.zeros(3)

    # dendrite layout, retried until tubes keep clear of each other
    for _attempt in range(200):
        dirs = []
        while len(dirs) < spec.n_dendrites:
            for _ in range(500):
                d = _random_unit(rng)
                if all(np.dot(d, e) < np.cos(np.radians(50)) for e in dirs):
                    dirs.append(d)
                    break
            else:
                raise SynthError("too many dendrites for the soma")
        fork_of = set(rng.choice(spec.n_dendrites, spec.n_forks, replace=False).tolist())
        tubes = []  # dict(start, dir, length, capped, parent junction)
        junctions = []
        for k, d in enumerate(dirs):
            s0 = center + d * (rs + _GAP)
            if k in fork_of:
                tubes.append(dict(start=s0, dir=d, length=spec.dendrite_length,
                                  capped=False, host=("soma", None)))
                jc = s0 + d * (spec.dendrite_length + rj + _GAP)
                ji = len(junctions)
                junctions.append(dict(center=jc, parent=len(tubes) - 1, children=[]))
                plane = np.cross(d, _random_unit(rng))
                plane /= np.linalg.norm(plane)
                for sgn in (1.0, -1.0):
                    cd = _rotate(d, plane, sgn * spec.fork_angle)
                    tubes.append(dict(start=jc + cd * (rj + _GAP), dir=cd,
                                      length=spec.child_length, capped=True,
                                      host=("junction", ji)))
                    junctions[ji]["children"].append(len(tubes) - 1)
            else:
                tubes.append(dict(start=s0, dir=d, length=spec.dendrite_length,
                                  capped=True, host=("soma", None)))
        if _tubes_clear(tubes, R):
            break
    else:
        raise SynthError("dendrite tubes intersect for every sampled layout")

    b = _Builder()
    soma_v, soma_f = icosphere(rs, _subdiv_for(rs, 2 * step), center)
    soma = b.piece(soma_v, soma_f, SOMA)
    junction_pieces = []
    for jn in junctions:
        jv, jf = icosphere(rj, _subdiv_for(rj, 0.6 * step), jn["center"])
        junction_pieces.append(b.piece(jv, jf, SHAFT))

    tube_info = []
    for t in tubes:
        z = np.linspace(0.0, t["length"], max(1, int(np.ceil(t["length"] / step))) + 1)
        # linear taper from (1 + taper) R at the base to (1 - taper) R at the tip
        r = R * (1.0 + spec.taper - 2.0 * spec.taper * z / t["length"])
        if t["capped"]:
            zc, rc = _cap_profile(t["length"], r[-1], step)
            z, r = np.r_[z, zc], np.r_[r, rc]
        v, f, rings = revolve(t["start"], t["dir"], z, r, seg)
        p = b.piece(v, f, SHAFT)
        n_lateral = int(np.ceil(t["length"] / step)) + 1
        tube_info.append(dict(piece=p, rings=rings, n_lateral=n_lateral, **t))

    # soma and junction attachments
    hole_r = 0.8 * R
    for ti in tube_info:
        kind, ji = ti["host"]
        host = soma if kind == "soma" else junction_pieces[ji]
        hc = soma_v.mean(0) if kind == "soma" else junctions[ji]["center"]
        hr = rs if kind == "soma" else rj
        d = ti["dir"]
        on_surface = hc + d * np.sqrt(max(hr * hr - hole_r * hole_r, 0.0))
        loop = host.cut_hole(on_surface, 1.05 * hole_r, d)
        ring = ti["piece"].offset + ti["rings"][0]
        b.add_faces(_zip(loop, b.position(loop), ring, b.position(ring), hc, d))
    for ji, jn in enumerate(junctions):
        pt = tube_info[jn["parent"]]
        d = -pt["dir"]
        jc = jn["center"]
        on_surface = jc + d * np.sqrt(rj * rj - hole_r * hole_r)
        loop = junction_pieces[ji].cut_hole(on_surface, 1.05 * hole_r, d)
        ring = pt["piece"].offset + pt["rings"][-1][::-1]
        b.add_faces(_zip(loop, b.position(loop), ring, b.position(ring), jc, d))

    # spines or shaft synapses
    usable = []
    for k, ti in enumerate(tube_info):
        lo = int(np.ceil(3000.0 / step))
        hi = ti["n_lateral"] - 1 - int(np.ceil(2000.0 / step))
        if hi > lo:
            usable.append((k, lo, hi))
    total_len = sum((hi - lo) * step for _, lo, hi in usable)
    n_syn = int(round(spec.spine_density * total_len / 1000.0))
    weights = np.array([hi - lo for _, lo, hi in usable], dtype=np.float64)
    weights /= weights.sum() if weights.sum() > 0 else 1.0

    syn_pos, syn_spine = [], []
    axis_pts, axis_owner = _axis_samples(tube_info)
    axis_tree = cKDTree(axis_pts)
    if spec.class_tag == "aspiny":
        chosen = set()
        tries = 0
        while len(syn_pos) < n_syn:
            tries += 1
            if tries > 100 * max(n_syn, 1):
                raise SynthError("cannot place shaft synapses")
            k, lo, hi = usable[rng.choice(len(usable), p=weights)]
            ti = tube_info[k]
            ring = int(rng.integers(lo, hi + 1))
            j = int(rng.integers(seg))
            gv = ti["piece"].offset + ti["rings"][ring][j]
            if gv in chosen:
                continue
            chosen.add(gv)
            p = b.position(np.array([gv]))[0]
            axp = ti["start"] + ti["dir"] * np.dot(p - ti["start"], ti["dir"])
            nrm = (p - axp) / np.linalg.norm(p - axp)
            syn_pos.append(p + 30.0 * nrm)
            syn_spine.append(-1)
    else:
        spine_seg = 16
        jit = (("neck_length", spec.neck_jitter), ("head_radius", spec.head_jitter),
               ("neck_radius", spec.head_jitter))
        heads = []
        placed = 0
        tries = 0
        while placed < n_syn:
            tries += 1
            if tries > 200 * max(n_syn, 1):
                raise SynthError(
                    f"cannot place {n_syn} spines without intersections ({placed} placed)")
            k, lo, hi = usable[rng.choice(len(usable), p=weights)]
            ti = tube_info[k]
            ring = int(rng.integers(lo, hi + 1))
            j = int(rng.integers(seg))
            # each spine draws its own dimensions around the cell's values
            sspec = replace(spec, **{name: getattr(spec, name) * rng.uniform(1 - j, 1 + j)
                                     for name, j in jit})
            z, r, is_head = _spine_profile(sspec, min(step, 2 * np.pi * sspec.head_radius / 16))
            height = z.max()
            lv = ti["rings"][ring][j]
            p = ti["piece"].local_verts[lv]
            axp = ti["start"] + ti["dir"] * np.dot(p - ti["start"], ti["dir"])
            nrm = (p - axp) / np.linalg.norm(p - axp)
            head_c = p + nrm * (height - sspec.head_radius)
            clear = 2 * spec.head_radius * (1 + spec.head_jitter) + 300.0
            if heads and np.min(np.linalg.norm(np.array(heads) - head_c, axis=1)) < clear:
                continue
            near = axis_tree.query_ball_point(head_c, R * (1 + spec.taper) + sspec.head_radius + 300.0)
            if any(axis_owner[q] != k for q in near):
                continue
            base_r = 1.3 * sspec.neck_radius if spec.class_tag == "spiny-mushroom" else sspec.neck_radius
            cut_r = max(base_r, 0.5 * step) + 0.25 * step
            try:
                loop = ti["piece"].cut_hole(p, cut_r, nrm)
            except SynthError:
                continue
            sv, sf, srings = revolve(p, nrm, z, r, spine_seg, phase=rng.uniform(0, 2 * np.pi))
            lab = np.concatenate([np.full(len(rg), HEAD if h else NECK, np.int8)
                                  for rg, h in zip(srings, is_head)])
            off = b.add_vertices(sv, lab, spine=placed)
            b.add_faces(sf + off)
            ring0 = off + srings[0]
            b.add_faces(_zip(loop, b.position(loop), ring0, b.position(ring0), p, nrm))
            apex = sv[srings[-1][0]]
            syn_pos.append(apex + 20.0 * nrm)
            syn_spine.append(placed)
            heads.append(head_c)
            placed += 1

    v, f, lab, sp, _ = b.finish()
    mesh = TriMesh(v, f, merge_tol=None)
    cid = cell_id if cell_id is not None else f"cell{spec.seed}"
    ids = np.array([f"{cid}_s{i:04d}" for i in range(len(syn_pos))], dtype=object)
    syn = SynapseSet(ids, np.array(syn_pos).reshape(-1, 3),
                     np.array([cid] * len(syn_pos), dtype=object))
    segs = [np.stack([center, t["start"]]) for t in tubes if t["host"][0] == "soma"]
    for t in tubes:
        end = t["start"] + t["dir"] * (t["length"] + ((1 - spec.taper) * R if t["capped"] else _GAP + rj))
        segs.append(np.stack([t["start"] - t["dir"] * _GAP, end]))
    return SynthCell(
        mesh=mesh, synapses=syn, skeleton_segments=np.array(segs),
        vertex_labels=lab.astype(np.int64), spine_index=sp,
        synapse_spine=np.array(syn_spine, dtype=np.int64), soma_center=center,
        depth=float(spec.depth_nm), class_tag=spec.class_tag, cell_id=cid, spec=spec,
    )


def _axis_samples(tube_info):
    pts, owner = [], []
    for k, t in enumerate(tube_info):
        s = np.arange(0.0, t["length"], 250.0)
        pts.append(t["start"] + s[:, None] * t["dir"])
        owner.append(np.full(len(s), k))
    return np.concatenate(pts), np.concatenate(owner)


def _tubes_clear(tubes, R):
    samples = []
    for t in tubes:
        s = np.arange(4000.0, t["length"] + R, 250.0)
        samples.append(t["start"] + s[:, None] * t["dir"])
    trees = [cKDTree(s) if len(s) else None for s in samples]
    for i in range(len(tubes)):
        for j in range(i + 1, len(tubes)):
            if trees[i] is None or trees[j] is None:
                continue
            d, _ = trees[j].query(samples[i])
            if np.min(d) < 2 * R + 2000.0:
                return False
    return True


def generate_population(mix, seed):
    """Generate cells for ``mix = [(spec, count), ...]`` with derived seeds.

    Continuous geometric parameters get +/-10% uniform jitter per cell.
    Returns the cells in mix order; ``cell.class_tag`` is the class label.
    """
    ss = np.random.SeedSequence(seed)
    cells = []
    idx = 0
    jitter = ("dendrite_length", "child_length", "fork_angle", "shaft_radius",
              "spine_density", "neck_radius", "neck_length", "head_radius",
              "soma_radius", "depth_nm")
    for spec, count in mix:
        for _ in range(count):
            child = ss.spawn(1)[0]
            rng = np.random.default_rng(child)
            for attempt in range(20):
                kw = {name: getattr(spec, name) * rng.uniform(0.9, 1.1) for name in jitter}
                cspec = replace(spec, seed=int(rng.integers(2**31 - 1)), **kw)
                try:
                    cell = generate_cell(cspec, cell_id=f"c{idx:04d}")
                    break
                except SynthError:
                    if attempt == 19:
                        raise
            cells.append(cell)
            idx += 1
    return cells


def _soma_piece(mesh, keep_f, soma_v):
    """Faces of ``keep_f`` connected (through kept faces) to the soma vertices."""
    f = mesh.faces[keep_f]
    if len(f) == 0:
        return keep_f & False
    rows = np.repeat(np.arange(len(f)), 3)
    inc = sparse.csr_matrix((np.ones(rows.size), (rows, f.ravel())),
                            shape=(len(f), mesh.n_vertices))
    _, lab = csgraph.connected_components(inc.T @ inc, directed=False)
    own = np.isin(lab, np.unique(lab[soma_v]))
    out = np.zeros(len(mesh.faces), bool)
    out[np.flatnonzero(keep_f)[own[f[:, 0]]]] = True
    return out


def truncate_cell(cell: SynthCell, fraction: float, seed: int, tol: float = 0.02,
                  max_tries: int = 20) -> SynthCell:
    """Clip the cell by a plane so that ``fraction`` of its surface area is lost.

    Random plane normals are tried in turn; for each, the plane offset is found
    by bisection so that the piece still attached to the soma keeps
    ``1 - fraction`` of the area. The first normal within ``tol`` is used,
    otherwise the closest one. The soma is never cut. Synapses on removed
    surface are dropped.
    """
    mesh = cell.mesh
    rng = np.random.default_rng(seed)
    total = mesh.face_areas.sum()
    soma_v = np.flatnonzero(cell.vertex_labels == SOMA)
    margin = cell.spec.soma_radius + 2000.0 if cell.spec else 0.0
    best = (np.inf, np.ones(len(mesh.faces), bool))
    if fraction > 0:
        for _ in range(max_tries):
            n = _random_unit(rng)
            vproj = (mesh.vertices - cell.soma_center) @ n
            fmax = vproj[mesh.faces].max(axis=1)

            def lost(thr):
                keep = _soma_piece(mesh, fmax < thr, soma_v)
                return 1 - mesh.face_areas[keep].sum() / total, keep

            lo, hi = margin, vproj.max() + 1.0
            res = lost(lo)
            if res[0] < fraction:  # even the deepest allowed cut removes too little
                cand = [res]
            else:
                cand = []
                for _ in range(40):
                    mid = 0.5 * (lo + hi)
                    r = lost(mid)
                    cand.append(r)
                    if r[0] > fraction:
                        lo = mid
                    else:
                        hi = mid
                    if abs(r[0] - fraction) <= 0.1 * tol:
                        break
            err, keep = min(((abs(a - fraction), k) for a, k in cand), key=lambda t: t[0])
            if err < best[0]:
                best = (err, keep)
            if best[0] <= tol:
                break
    keep_f = best[1]
    sub2, parent = mesh.submesh(np.flatnonzero(keep_f))
    # a synapse survives if the vertex it sits on survives
    tree = cKDTree(mesh.vertices)
    _, nearest = tree.query(cell.synapses.positions)
    alive = np.zeros(mesh.n_vertices, bool)
    alive[parent] = True
    smask = alive[nearest]
    return SynthCell(
        mesh=sub2, synapses=cell.synapses.subset(smask),
        skeleton_segments=cell.skeleton_segments,
        vertex_labels=cell.vertex_labels[parent], spine_index=cell.spine_index[parent],
        synapse_spine=cell.synapse_spine[smask], soma_center=cell.soma_center,
        depth=cell.depth, class_tag=cell.class_tag, cell_id=cell.cell_id, spec=cell.spec,
    )


def y_tube(arm_length=40000.0, radius=600.0, angle=0.7, segments=16, seed=0):
    """Y-shaped closed tube: one parent and two children joined by a junction."""
    R, seg = radius, segments
    step = 2 * np.pi * R / seg
    rj = 2.0 * R
    b = _Builder()
    d = np.array([0.0, 0.0, 1.0])
    z = np.linspace(0.0, arm_length, int(np.ceil(arm_length / step)) + 1)
    zc, rc = _cap_profile(0.0, R, step, upward=False)
    pz = np.r_[zc[::-1], z]
    pr = np.r_[rc[::-1], np.full(len(z), R)]
    v, f, rings = revolve((0, 0, 0), d, pz, pr, seg)
    parent = b.piece(v, f, SHAFT)
    jc = d * (arm_length + rj + _GAP)
    jv, jf = icosphere(rj, _subdiv_for(rj, 0.6 * step), jc)
    junction = b.piece(jv, jf, SHAFT)
    hole_r = 0.8 * R
    loop = junction.cut_hole(jc - d * np.sqrt(rj * rj - hole_r * hole_r), hole_r * 1.05, -d)
    ring = parent.offset + rings[-1][::-1]
    b.add_faces(_zip(loop, b.position(loop), ring, b.position(ring), jc, -d))
    segs = [np.stack([np.zeros(3), jc])]
    for sgn in (1.0, -1.0):
        cd = _rotate(d, np.array([1.0, 0.0, 0.0]), sgn * angle)
        zt, rt = _cap_profile(arm_length, R, step)
        cv, cf, crings = revolve(jc + cd * (rj + _GAP), cd, np.r_[z, zt],
                                 np.r_[np.full(len(z), R), rt], seg)
        child = b.piece(cv, cf, SHAFT)
        loop = junction.cut_hole(jc + cd * np.sqrt(rj * rj - hole_r * hole_r), hole_r * 1.05, cd)
        ring = child.offset + crings[0]
        b.add_faces(_zip(loop, b.position(loop), ring, b.position(ring), jc, cd))
        segs.append(np.stack([jc, jc + cd * (rj + _GAP + arm_length + R)]))
    v, f, _, _, _ = b.finish()
    return TriMesh(v, f, merge_tol=None), np.array(segs)


def write_population(cells, outdir):
    """Write meshes, synapses and ``ground_truth.csv`` in the pipeline formats."""
    from .mesh import save_mesh, write_synapses, SynapseSet as _S

    outdir = Path(outdir)
    (outdir / "meshes").mkdir(parents=True, exist_ok=True)
    ids, pos, cids = [], [], []
    for c in cells:
        save_mesh(c.mesh, outdir / "meshes" / f"{c.cell_id}.ply")
        ids.extend(c.synapses.ids.tolist())
        pos.append(c.synapses.positions)
        cids.extend(c.synapses.cell_ids.tolist())
    write_synapses(_S(np.array(ids, dtype=object), np.concatenate(pos) if pos else np.zeros((0, 3)),
                      np.array(cids, dtype=object)), outdir / "synapses.csv")
    with open(outdir / "ground_truth.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cell_id", "class_tag", "soma_x_nm", "soma_y_nm", "soma_z_nm", "depth_nm"])
        for c in cells:
            w.writerow([c.cell_id, c.class_tag, *map(repr, c.soma_center.tolist()), repr(c.depth)])
