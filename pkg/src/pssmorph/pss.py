"""Postsynaptic shape extraction around synapse contact points.

For each synapse a local patch of the cell surface is segmented by shape
diameter. Segments are then merged outward from the contact point along the
shortest path to the skeleton, stopping at the first segment that is thicker
than the one before it.
"""

from __future__ import annotations

import csv
import os
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse import csgraph

from ._parallel import pmap
from .mesh import (
    EmptyRegionError,
    MeshError,
    SynapseSet,
    TriMesh,
    local_region,
    save_mesh,
    shortest_path,
)
from .sdf import SDFConfig, compute_sdf, segment_mesh
from .skeleton import Skeleton, distance_to_skeleton

__all__ = [
    "PSSConfig",
    "PSSMesh",
    "PSSResult",
    "extract_pss",
    "extract_all_pss",
    "write_pss",
]


@dataclass(frozen=True)
class PSSConfig:
    radius: float = 3500.0  # nm
    sdf: SDFConfig = field(default_factory=SDFConfig)

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("region radius must be positive")


@dataclass(frozen=True)
class PSSMesh:
    """Extracted postsynaptic shape.

    Attributes
    ----------
    mesh : TriMesh
        The shape itself, nonempty and connected.
    synapse_id : str
    centroid : (3,) array
        Area-weighted mean of face centroids, parent frame (nm).
    segments : tuple of int
        Region segment labels merged into the shape, in merge order.
    vertex_ids, face_ids : int arrays
        Parent-mesh indices of the shape's vertices and faces.
    """

    mesh: TriMesh
    synapse_id: str
    centroid: np.ndarray
    segments: tuple
    vertex_ids: np.ndarray
    face_ids: np.ndarray


@dataclass(frozen=True)
class PSSResult:
    synapse_id: str
    pss: PSSMesh | None
    status: str  # "ok" or a failure reason

    @property
    def ok(self):
        return self.pss is not None


def _vertex_labels(mesh: TriMesh, face_labels):
    """Most frequent incident face label per vertex, ties to the lower label."""
    k = int(face_labels.max()) + 1
    counts = np.zeros((mesh.n_vertices, k), dtype=np.int64)
    for j in range(3):
        np.add.at(counts, (mesh.faces[:, j], face_labels), 1)
    return np.argmax(counts, axis=1)


def _segment_order(path_labels):
    seen = []
    for lab in path_labels.tolist():
        if lab not in seen:
            seen.append(lab)
    return seen


def _skeleton_nodes(skeleton):
    skels = [skeleton] if isinstance(skeleton, Skeleton) else list(skeleton)
    return np.unique(np.concatenate([s.nodes for s in skels])) if skels else np.zeros(0, int)


def extract_pss(mesh: TriMesh, skeleton, position, config: PSSConfig = PSSConfig(),
                seed: int = 0, synapse_id="", skel_dist=None) -> PSSMesh:
    """Postsynaptic shape for one synapse.

    Parameters
    ----------
    mesh : TriMesh
        Whole-cell mesh.
    skeleton : Skeleton or list of Skeleton
        Skeleton(s) of ``mesh``.
    position : (3,) array
        Synapse position (nm).
    skel_dist : (N,) array, optional
        Precomputed geodesic distance from each mesh vertex to the skeleton;
        only used when no skeleton node falls inside the region.

    Raises
    ------
    EmptyRegionError
        No mesh face lies within the region radius of the synapse.
    """
    pos = np.asarray(position, dtype=np.float64).reshape(3)
    region, vid, fid = local_region(mesh, pos, config.radius, return_faces=True)
    field_ = compute_sdf(region, config.sdf, seed=seed)
    labels = segment_mesh(region, field_, config.sdf, seed=seed)

    anchor = int(np.argmin(np.sum((region.vertices - pos) ** 2, axis=1)))
    _, comp = csgraph.connected_components(region.graph, directed=False)
    same = comp == comp[anchor]
    nodes = _skeleton_nodes(skeleton)
    target = np.flatnonzero(np.isin(vid, nodes) & same)
    if len(target) == 0:
        if skel_dist is None:
            skel_dist = distance_to_skeleton(mesh, skeleton)
        cand = np.flatnonzero(same)
        target = cand[[int(np.argmin(skel_dist[vid[cand]]))]]
    path = shortest_path(region, anchor, target)

    vlab = _vertex_labels(region, labels)
    order = _segment_order(vlab[path])
    k = int(labels.max()) + 1
    mean_sdf = np.bincount(labels, weights=field_.raw, minlength=k) / np.maximum(
        np.bincount(labels, minlength=k), 1)
    accepted = [order[0]]
    for s in order[1:]:
        if mean_sdf[s] > mean_sdf[accepted[-1]]:
            break
        accepted.append(s)

    faces = np.flatnonzero(np.isin(labels, accepted))
    sub, sub_vid = region.submesh(faces)
    _, sub_comp = csgraph.connected_components(sub.graph, directed=False)
    a_local = int(np.searchsorted(sub_vid, anchor))
    if a_local >= len(sub_vid) or sub_vid[a_local] != anchor:
        # the anchor's own segment is always accepted, so this cannot happen
        raise MeshError("anchor vertex missing from the merged segments")
    keep_face = sub_comp[sub.faces[:, 0]] == sub_comp[a_local]
    faces = faces[keep_face]
    pss_mesh, pss_vid = region.submesh(faces)
    areas = pss_mesh.face_areas
    tot = areas.sum()
    cent = (pss_mesh.face_centroids * areas[:, None]).sum(axis=0) / tot if tot > 0 \
        else pss_mesh.face_centroids.mean(axis=0)
    return PSSMesh(
        mesh=pss_mesh,
        synapse_id=str(synapse_id),
        centroid=cent,
        segments=tuple(int(s) for s in accepted),
        vertex_ids=vid[pss_vid],
        face_ids=fid[faces],
    )


def _synapse_seed(seed, synapse_id):
    key = zlib.crc32(str(synapse_id).encode())
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, key])
    return int(ss.generate_state(1)[0])


def extract_all_pss(mesh: TriMesh, skeleton, synapses: SynapseSet,
                    config: PSSConfig = PSSConfig(), seed: int = 0,
                    threads: int = 1) -> list[PSSResult]:
    """Extract every synapse's shape; failures are recorded, never raised."""
    skel_dist = distance_to_skeleton(mesh, skeleton)

    def one(i):
        sid = str(synapses.ids[i])
        try:
            p = extract_pss(mesh, skeleton, synapses.positions[i], config,
                            seed=_synapse_seed(seed, sid), synapse_id=sid,
                            skel_dist=skel_dist)
            return PSSResult(sid, p, "ok")
        except EmptyRegionError:
            return PSSResult(sid, None, "off-mesh")
        except (MeshError, ValueError) as exc:
            return PSSResult(sid, None, f"error: {exc}")

    return pmap(one, range(len(synapses)), threads)


def write_pss(results, outdir, cell_id):
    """One PLY per extracted shape plus a manifest CSV for the cell."""
    d = Path(outdir) / str(cell_id)
    d.mkdir(parents=True, exist_ok=True)
    rows = []
    for r in results:
        if r.ok:
            save_mesh(r.pss.mesh, d / f"{r.synapse_id}.ply")
            c = r.pss.centroid.tolist()
            rows.append([r.synapse_id, "ok", r.pss.mesh.n_faces, repr(c[0]), repr(c[1]), repr(c[2])])
        else:
            rows.append([r.synapse_id, r.status, 0, "", "", ""])
    tmp = d / "manifest.csv.tmp"
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["synapse_id", "status", "n_faces", "centroid_x", "centroid_y", "centroid_z"])
        w.writerows(rows)
    os.replace(tmp, d / "manifest.csv")
