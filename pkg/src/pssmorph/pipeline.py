"""In-memory pipeline stages shared by the command line and the test suite."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import analysis
from .descriptor import (
    CellDescriptor,
    Codebook,
    DistanceConfig,
    ShollConfig,
    build_descriptor,
    fit_codebook,
    sbp_feature,
    spc_feature,
)
from .encoder import AEModel, EncoderConfig, encode_many, init_model, train
from .mesh import SynapseSet, TriMesh, resample_points, surface_area
from .pss import PSSConfig, extract_all_pss
from .skeleton import DEFAULT_THRESHOLD, skeletonize

__all__ = [
    "CellShapes",
    "process_cell",
    "train_encoder",
    "encode_cells",
    "describe_cells",
    "feature_matrices",
    "cluster_scores",
]


@dataclass
class CellShapes:
    """Everything downstream stages need from one cell."""

    cell_id: str
    synapse_ids: list
    centroids: np.ndarray  # (S, 3)
    clouds: np.ndarray  # (S, P, 3)
    soma_center: np.ndarray
    depth: float
    surface_area: float
    sbp: np.ndarray  # branch points per shell
    failures: int
    codes: np.ndarray | None = None


def _cloud_seed(seed, i):
    return int(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, i]).generate_state(1)[0])


def process_cell(mesh: TriMesh, synapses: SynapseSet, soma_center, depth, cell_id="",
                 pss_config: PSSConfig = PSSConfig(), n_points=512, seed=0,
                 d=DEFAULT_THRESHOLD, sholl: ShollConfig = ShollConfig(),
                 threads=1, align=True) -> CellShapes:
    """Skeleton, postsynaptic shapes and resampled point clouds for one cell.

    With ``align`` every cloud is put in canonical pose before encoding.
    """
    skels = skeletonize(mesh, d=d, threads=threads)
    results = extract_all_pss(mesh, skels, synapses, pss_config, seed=seed, threads=threads)
    ok = [r for r in results if r.ok]
    cents = np.array([r.pss.centroid for r in ok]).reshape(-1, 3)
    clouds = np.array([resample_points(r.pss.mesh, n_points, _cloud_seed(seed, i), align=align)
                       for i, r in enumerate(ok)]).reshape(-1, n_points, 3)
    return CellShapes(
        cell_id=str(cell_id),
        synapse_ids=[r.synapse_id for r in ok],
        centroids=cents,
        clouds=clouds,
        soma_center=np.asarray(soma_center, dtype=np.float64),
        depth=float(depth),
        surface_area=surface_area(mesh),
        sbp=sbp_feature(skels, mesh.vertices, soma_center, sholl),
        failures=len(results) - len(ok),
    )


def train_encoder(cells, config: EncoderConfig, max_train=None, seed=0) -> AEModel:
    """Train on all clouds, or on a seeded subsample of ``max_train`` of them."""
    clouds = np.concatenate([c.clouds for c in cells if len(c.clouds)])
    if max_train is not None and len(clouds) > max_train:
        idx = np.sort(np.random.default_rng(seed).choice(len(clouds), max_train, replace=False))
        clouds = clouds[idx]
    return train(init_model(config), clouds, config)


def encode_cells(model: AEModel, cells, threads=1):
    for c in cells:
        c.codes = encode_many(model, c.clouds, threads=threads) if len(c.clouds) \
            else np.zeros((0, model.config.latent_dim))
    return cells


def describe_cells(cells, codebook: Codebook, sholl: ShollConfig = ShollConfig()):
    return [build_descriptor(c.centroids, c.codes, codebook, c.soma_center, c.depth,
                             c.surface_area, sholl, cell_id=c.cell_id) for c in cells]


def feature_matrices(cells, descs: list[CellDescriptor], normalize=True,
                     sholl: ShollConfig = ShollConfig()):
    """Per-feature matrices keyed ``SPSF``, ``SPC`` and ``SBP``.

    ``normalize`` divides SPSF and SPC by whole-cell surface area.
    """
    area = np.array([c.surface_area for c in cells])[:, None]
    spsf = np.array([d.counts for d in descs])
    spc = np.array([spc_feature(c.centroids, c.soma_center, sholl) for c in cells])
    sbp = np.array([c.sbp for c in cells])
    if normalize:
        spsf = spsf / area
        spc = spc / area
    return {"SPSF": spsf, "SPC": spc, "SBP": sbp}


def cluster_scores(features: dict, truth, k, seed=0, depths=None,
                   distance: DistanceConfig = DistanceConfig()):
    """k-means ARI/AMI against ``truth`` for each feature matrix."""
    out = {}
    for name, X in features.items():
        lab = analysis.kmeans_cluster(X, k, seed=seed, distance=distance, depths=depths)
        out[name] = analysis.partition_metrics(lab, truth)
    return out
