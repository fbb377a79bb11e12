"""Command line pipeline.

Every stage reads and writes artifacts inside one work directory::

    pssmorph synth        --workdir run/          # synthetic population
    pssmorph skeletonize  --workdir run/
    pssmorph extract-pss  --workdir run/
    pssmorph train-encoder --workdir run/
    pssmorph encode       --workdir run/
    pssmorph fit-codebook --workdir run/
    pssmorph describe     --workdir run/
    pssmorph cluster      --workdir run/
    pssmorph classify     --workdir run/
    pssmorph evaluate     --workdir run/
    pssmorph pipeline     --workdir run/          # all of the above

Settings come from built-in defaults, then ``--config FILE`` (``key = value``
lines, ``#`` comments), then ``--set key=value`` overrides.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__, analysis, synth
from .descriptor import (
    DistanceConfig,
    ShollConfig,
    build_descriptor,
    fit_codebook,
    load_codebook,
    read_descriptors,
    save_codebook,
    sbp_feature,
    spc_feature,
    write_descriptors,
)
from .encoder import EncoderConfig, encode_many, init_model, load_model, read_features, \
    save_model, train, write_features
from .mesh import MeshError, load_mesh, read_synapses, resample_points, surface_area
from .pss import PSSConfig, extract_all_pss, write_pss
from .sdf import SDFConfig
from .skeleton import read_skeleton, skeletonize, write_skeleton

log = logging.getLogger("pssmorph")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_DATA = 0, 2, 3, 4


class ConfigError(Exception):
    pass


class MissingPrerequisite(Exception):
    pass


# name: (type, default)
DEFAULTS = {
    "seed": (int, 0),
    "threads": (int, 1),
    "skeleton_d": (float, 12000.0),
    "pss_radius": (float, 3500.0),
    "sdf_rays": (int, 5),
    "sdf_cone": (float, float(np.pi / 4)),
    "sdf_clusters": (int, 5),
    "sdf_smoothness": (float, 0.3),
    "n_points": (int, 512),
    "latent_dim": (int, 1024),
    "point_widths": ("ints", (64, 128, 256)),
    "decoder_widths": ("ints", (256, 512)),
    "learning_rate": (float, 1e-3),
    "epochs": (int, 50),
    "batch_size": (int, 32),
    "until_plateau": (bool, False),
    "max_train": (int, 0),
    "codebook_k": (int, 20),
    "sholl_edges": ("floats", ShollConfig().edges),
    "lam": (float, 1.0 / 24.0),
    "depth_scale": (float, 25000.0),
    "use_depth": (bool, False),
    "normalize": (bool, True),
    "kmeans_k": (int, 7),
    "knn_k": (int, 23),
    "svm_C": (float, 1.0),
    "svm_gamma": (float, 0.0),  # 0 selects 1 / (n_features * var)
    "cv_folds": (int, 10),
    "synth_counts": ("ints", (15, 15, 15)),
    "synth_spine_density": (float, 0.25),
    "synth_depths": ("floats", (300000.0, 300000.0, 300000.0)),
}


def _parse_value(key, text):
    kind, _ = DEFAULTS[key]
    text = text.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind == "ints":
            return tuple(int(v) for v in text.split(",") if v.strip())
        if kind == "floats":
            return tuple(float(v) for v in text.split(",") if v.strip())
        return kind(text)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None


def load_config(path=None, overrides=()):
    cfg = {k: v for k, (_, v) in DEFAULTS.items()}
    lines = []
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        lines += [(f"{p}:{i + 1}", ln) for i, ln in enumerate(p.read_text().splitlines())]
    lines += [("--set", ov) for ov in overrides]
    for where, ln in lines:
        ln = ln.split("#", 1)[0].strip()
        if not ln:
            continue
        if "=" not in ln:
            raise ConfigError(f"{where}: expected key = value")
        key, val = (s.strip() for s in ln.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"{where}: unknown key {key!r}")
        cfg[key] = _parse_value(key, val)
    _validate(cfg)
    return cfg


def _validate(cfg):
    try:
        SDFConfig(cfg["sdf_rays"], cfg["sdf_cone"], cfg["sdf_clusters"], cfg["sdf_smoothness"])
        PSSConfig(cfg["pss_radius"])
        _encoder_config(cfg)
        ShollConfig(cfg["sholl_edges"])
        DistanceConfig(cfg["lam"], cfg["depth_scale"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    for key in ("skeleton_d", "svm_C"):
        if not cfg[key] > 0:
            raise ConfigError(f"{key} must be positive")
    for key in ("codebook_k", "kmeans_k", "knn_k", "threads"):
        if cfg[key] < 1:
            raise ConfigError(f"{key} must be >= 1")
    if cfg["cv_folds"] < 2:
        raise ConfigError("cv_folds must be >= 2")
    if len(cfg["synth_counts"]) != 3 or len(cfg["synth_depths"]) != 3:
        raise ConfigError("synth_counts and synth_depths need one value per class")


def _encoder_config(cfg):
    return EncoderConfig(
        n_points=cfg["n_points"], point_widths=cfg["point_widths"],
        latent_dim=cfg["latent_dim"], decoder_widths=cfg["decoder_widths"],
        learning_rate=cfg["learning_rate"], epochs=cfg["epochs"],
        batch_size=cfg["batch_size"], seed=cfg["seed"], until_plateau=cfg["until_plateau"],
    )


def _pss_config(cfg):
    return PSSConfig(cfg["pss_radius"], SDFConfig(cfg["sdf_rays"], cfg["sdf_cone"],
                                                  cfg["sdf_clusters"], cfg["sdf_smoothness"]))


def config_hash(cfg):
    blob = json.dumps({k: list(v) if isinstance(v, tuple) else v for k, v in sorted(cfg.items())},
                      sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


# ---------------------------------------------------------------------------
# work directory
# ---------------------------------------------------------------------------


@dataclass
class Workdir:
    root: Path

    def __post_init__(self):
        self.root = Path(self.root)

    meshes = property(lambda s: s.root / "meshes")
    synapses = property(lambda s: s.root / "synapses.csv")
    cells = property(lambda s: s.root / "ground_truth.csv")
    skeletons = property(lambda s: s.root / "skeletons")
    pss = property(lambda s: s.root / "pss")
    model = property(lambda s: s.root / "model.nsae")
    features = property(lambda s: s.root / "features.csv")
    codebook = property(lambda s: s.root / "codebook.csv")
    descriptors = property(lambda s: s.root / "descriptors.csv")
    baselines = property(lambda s: s.root / "baselines.csv")
    clusters = property(lambda s: s.root / "clusters.csv")
    predictions = property(lambda s: s.root / "predictions.csv")
    metrics = property(lambda s: s.root / "metrics.csv")
    manifest = property(lambda s: s.root / "manifest.json")

    def need(self, path, stage):
        if not Path(path).exists():
            raise MissingPrerequisite(f"{path} not found; run {stage} first")

    def mesh_paths(self):
        self.need(self.meshes, "synth (or provide meshes/)")
        paths = sorted(p for p in self.meshes.iterdir() if p.suffix.lower() in (".ply", ".obj"))
        if not paths:
            raise MissingPrerequisite(f"no meshes in {self.meshes}; run synth first")
        return paths


def _atomic_csv(path, header, rows):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    os.replace(tmp, path)


def _file_hash(path):
    h = hashlib.sha256()
    p = Path(path)
    files = sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
    for q in files:
        h.update(str(q.relative_to(p) if p.is_dir() else q.name).encode())
        h.update(q.read_bytes())
    return h.hexdigest()


def _record(wd: Workdir, stage, cfg, inputs, outputs):
    data = json.loads(wd.manifest.read_text()) if wd.manifest.exists() else {}
    data.setdefault("stages", {})[stage] = {
        "config_hash": config_hash(cfg),
        "seed": cfg["seed"],
        "tool_version": __version__,
        "inputs": {str(Path(p).relative_to(wd.root)): _file_hash(p) for p in inputs
                   if Path(p).exists()},
        "outputs": [str(Path(p).relative_to(wd.root)) for p in outputs],
    }
    tmp = wd.manifest.with_name("manifest.json.tmp")
    tmp.write_text(json.dumps(data, indent=2, sort_keys=True))
    os.replace(tmp, wd.manifest)


def _read_cells(wd: Workdir):
    wd.need(wd.cells, "synth (or provide ground_truth.csv)")
    with open(wd.cells, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = {}
    for r in rows:
        out[r["cell_id"]] = dict(
            class_tag=r.get("class_tag", ""),
            soma=np.array([float(r["soma_x_nm"]), float(r["soma_y_nm"]), float(r["soma_z_nm"])]),
            depth=float(r.get("depth_nm") or 0.0),
        )
    return out


def _skeleton_paths(wd, cell_id):
    return wd.skeletons / f"{cell_id}.edges.csv", wd.skeletons / f"{cell_id}.nodes.csv"


def _pss_rows(wd: Workdir, cell_id):
    man = wd.pss / cell_id / "manifest.csv"
    wd.need(man, "extract-pss")
    with open(man, newline="") as fh:
        return [r for r in csv.DictReader(fh) if r["status"] == "ok"]


def _cloud_seed(seed, sid):
    return int(np.random.SeedSequence([seed & 0xFFFFFFFF, zlib.crc32(sid.encode())])
               .generate_state(1)[0])


def _load_clouds(wd: Workdir, cfg):
    ids, clouds = [], []
    for mp in wd.mesh_paths():
        cid = mp.stem
        for r in _pss_rows(wd, cid):
            m = load_mesh(wd.pss / cid / f"{r['synapse_id']}.ply")
            clouds.append(resample_points(m, cfg["n_points"], _cloud_seed(cfg["seed"], r["synapse_id"]),
                                          align=True))
            ids.append(r["synapse_id"])
    return ids, np.array(clouds).reshape(-1, cfg["n_points"], 3)


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def stage_synth(wd: Workdir, cfg):
    mix = []
    for tag, count, depth in zip(synth.CLASS_TAGS, cfg["synth_counts"], cfg["synth_depths"]):
        dens = cfg["synth_spine_density"] * (synth.ASPINY_DENSITY_FACTOR if tag == "aspiny" else 1.0)
        mix.append((synth.SynthCellSpec.for_class(tag, spine_density=dens, depth_nm=depth), count))
    cells = synth.generate_population(mix, cfg["seed"])
    wd.root.mkdir(parents=True, exist_ok=True)
    synth.write_population(cells, wd.root)
    return [], [wd.meshes, wd.synapses, wd.cells]


def stage_skeletonize(wd: Workdir, cfg):
    paths = wd.mesh_paths()
    wd.skeletons.mkdir(parents=True, exist_ok=True)
    outs = []
    for mp in paths:
        mesh = load_mesh(mp)
        sk = skeletonize(mesh, d=cfg["skeleton_d"], threads=cfg["threads"])
        e, n = _skeleton_paths(wd, mp.stem)
        write_skeleton(sk, mesh, e, n)
        outs += [e, n]
    return paths, outs


def stage_extract_pss(wd: Workdir, cfg):
    paths = wd.mesh_paths()
    wd.need(wd.synapses, "synth (or provide synapses.csv)")
    syn = read_synapses(wd.synapses)
    pcfg = _pss_config(cfg)
    for mp in paths:
        e, n = _skeleton_paths(wd, mp.stem)
        wd.need(e, "skeletonize")
        mesh = load_mesh(mp)
        sk = read_skeleton(e, n, cfg["skeleton_d"])
        res = extract_all_pss(mesh, sk, syn.for_cell(mp.stem), pcfg, seed=cfg["seed"],
                              threads=cfg["threads"])
        bad = sum(not r.ok for r in res)
        if bad:
            log.warning("%s: %d of %d synapses failed", mp.stem, bad, len(res))
        write_pss(res, wd.pss, mp.stem)
    return paths + [wd.synapses, wd.skeletons], [wd.pss]


def stage_train_encoder(wd: Workdir, cfg):
    ecfg = _encoder_config(cfg)
    _, clouds = _load_clouds(wd, cfg)
    if len(clouds) == 0:
        raise ValueError("no postsynaptic shapes to train on")
    if cfg["max_train"] and len(clouds) > cfg["max_train"]:
        idx = np.sort(np.random.default_rng(cfg["seed"]).choice(len(clouds), cfg["max_train"],
                                                                 replace=False))
        clouds = clouds[idx]
    model = train(init_model(ecfg), clouds, ecfg,
                  callback=lambda ep, loss: log.info("epoch %d loss %.6g", ep, loss))
    save_model(model, wd.model)
    return [wd.pss], [wd.model]


def stage_encode(wd: Workdir, cfg):
    wd.need(wd.model, "train-encoder")
    model = load_model(wd.model)
    if model.config.n_points != cfg["n_points"]:
        raise ConfigError("n_points differs from the trained model")
    ids, clouds = _load_clouds(wd, cfg)
    codes = encode_many(model, clouds, threads=cfg["threads"])
    write_features(wd.features, ids, codes)
    return [wd.model, wd.pss], [wd.features]


def stage_fit_codebook(wd: Workdir, cfg):
    wd.need(wd.features, "encode")
    _, x = read_features(wd.features)
    cb = fit_codebook(x, cfg["codebook_k"], seed=cfg["seed"])
    save_codebook(cb, wd.codebook)
    return [wd.features], [wd.codebook]


def stage_describe(wd: Workdir, cfg):
    wd.need(wd.codebook, "fit-codebook")
    wd.need(wd.features, "encode")
    cb = load_codebook(wd.codebook)
    ids, x = read_features(wd.features)
    code_of = dict(zip(ids, x))
    cells = _read_cells(wd)
    sholl = ShollConfig(cfg["sholl_edges"])
    descs, base_rows = [], []
    for mp in wd.mesh_paths():
        cid = mp.stem
        if cid not in cells:
            raise ValueError(f"cell {cid} missing from {wd.cells.name}")
        info = cells[cid]
        rows = _pss_rows(wd, cid)
        cents = np.array([[float(r["centroid_x"]), float(r["centroid_y"]), float(r["centroid_z"])]
                          for r in rows]).reshape(-1, 3)
        codes = np.array([code_of[r["synapse_id"]] for r in rows]).reshape(len(rows), -1)
        mesh = load_mesh(mp)
        area = surface_area(mesh)
        descs.append(build_descriptor(cents, codes, cb, info["soma"], info["depth"], area,
                                      sholl, cell_id=cid))
        e, n = _skeleton_paths(wd, cid)
        wd.need(e, "skeletonize")
        sbp = sbp_feature(read_skeleton(e, n), mesh.vertices, info["soma"], sholl)
        spc = spc_feature(cents, info["soma"], sholl)
        base_rows.append([cid] + [repr(v) for v in spc.tolist()] + [repr(v) for v in sbp.tolist()])
    write_descriptors(descs, wd.descriptors)
    nb = sholl.n
    _atomic_csv(wd.baselines, ["cell_id"] + [f"spc_{i}" for i in range(nb)]
                + [f"sbp_{i}" for i in range(nb)], base_rows)
    return [wd.codebook, wd.features, wd.pss, wd.skeletons, wd.cells], \
        [wd.descriptors, wd.baselines]


def _feature_table(wd: Workdir, cfg):
    wd.need(wd.descriptors, "describe")
    wd.need(wd.baselines, "describe")
    sholl = ShollConfig(cfg["sholl_edges"])
    descs = read_descriptors(wd.descriptors, n=sholl.n)
    with open(wd.baselines, newline="") as fh:
        base = {r["cell_id"]: r for r in csv.DictReader(fh)}
    ids = [d.cell_id for d in descs]
    area = np.array([d.surface_area for d in descs])[:, None]
    spsf = np.array([d.counts for d in descs])
    spc = np.array([[float(base[c][f"spc_{i}"]) for i in range(sholl.n)] for c in ids])
    sbp = np.array([[float(base[c][f"sbp_{i}"]) for i in range(sholl.n)] for c in ids])
    if cfg["normalize"]:
        spsf, spc = spsf / area, spc / area
    depths = np.array([d.depth for d in descs]) if cfg["use_depth"] else None
    return ids, {"SPSF": spsf, "SPC": spc, "SBP": sbp}, depths


def stage_cluster(wd: Workdir, cfg):
    ids, feats, depths = _feature_table(wd, cfg)
    dist = DistanceConfig(cfg["lam"], cfg["depth_scale"])
    rows = []
    for name, X in feats.items():
        lab = analysis.kmeans_cluster(X, min(cfg["kmeans_k"], len(X)), cfg["seed"], dist, depths)
        rows += [[c, name, "kmeans", int(v)] for c, v in zip(ids, lab.tolist())]
        if len(X) > cfg["knn_k"]:
            lab = analysis.knn_graph_cluster(X, cfg["knn_k"], cfg["seed"], dist, depths)
            rows += [[c, name, "knn_graph", int(v)] for c, v in zip(ids, lab.tolist())]
        else:
            log.warning("skipping kNN-graph clustering: %d cells <= knn_k", len(X))
    _atomic_csv(wd.clusters, ["cell_id", "feature", "method", "label"], rows)
    return [wd.descriptors, wd.baselines], [wd.clusters]


def _truth(wd, ids):
    cells = _read_cells(wd)
    tags = [cells[c]["class_tag"] for c in ids]
    if any(not t for t in tags):
        raise ValueError(f"{wd.cells.name} lacks class_tag values")
    return np.array(tags)


def stage_classify(wd: Workdir, cfg):
    ids, feats, depths = _feature_table(wd, cfg)
    y = _truth(wd, ids)
    dist = DistanceConfig(cfg["lam"], cfg["depth_scale"])
    gamma = cfg["svm_gamma"] or None
    rows = []
    for name, X in feats.items():
        if depths is not None:
            X = analysis.augment_depth(X, depths, dist)
        pred, acc, _ = analysis.cross_validate(
            X, y, min(cfg["cv_folds"], len(y)), cfg["seed"],
            fit=lambda A, b: analysis.svm_train(A, b, C=cfg["svm_C"], gamma=gamma))
        log.info("%s SVM cross-validated accuracy %.3f", name, acc)
        rows += [[c, name, "svm", p] for c, p in zip(ids, pred.tolist())]
    _atomic_csv(wd.predictions, ["cell_id", "feature", "method", "label"], rows)
    return [wd.descriptors, wd.baselines, wd.cells], [wd.predictions]


def stage_evaluate(wd: Workdir, cfg):
    wd.need(wd.clusters, "cluster")
    groups = {}
    inputs = [wd.clusters, wd.cells]
    sources = [wd.clusters] + ([wd.predictions] if wd.predictions.exists() else [])
    for src in sources:
        with open(src, newline="") as fh:
            for r in csv.DictReader(fh):
                groups.setdefault((r["feature"], r["method"]), []).append((r["cell_id"], r["label"]))
    if wd.predictions.exists():
        inputs.append(wd.predictions)
    rows = []
    for (feat, method), items in groups.items():
        ids = [c for c, _ in items]
        truth = _truth(wd, ids)
        m = analysis.partition_metrics([lab for _, lab in items], truth)
        rows.append([feat, method, repr(m.ari), repr(m.ami), repr(m.raw_ri), repr(m.raw_mi)])
    _atomic_csv(wd.metrics, ["feature", "method", "ari", "ami", "raw_ri", "raw_mi"], rows)
    return inputs, [wd.metrics]


STAGES = {
    "synth": stage_synth,
    "skeletonize": stage_skeletonize,
    "extract-pss": stage_extract_pss,
    "train-encoder": stage_train_encoder,
    "encode": stage_encode,
    "fit-codebook": stage_fit_codebook,
    "describe": stage_describe,
    "cluster": stage_cluster,
    "classify": stage_classify,
    "evaluate": stage_evaluate,
}

PIPELINE = ["skeletonize", "extract-pss", "train-encoder", "encode", "fit-codebook",
            "describe", "cluster", "classify", "evaluate"]


def run_stage(stage, workdir, cfg):
    """Run one stage; raises on failure. Returns the output paths."""
    wd = Workdir(workdir)
    fn = STAGES[stage]
    inputs, outputs = fn(wd, cfg)
    _record(wd, stage, cfg, inputs, outputs)
    return outputs


def build_parser():
    p = argparse.ArgumentParser(prog="pssmorph", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="stage", required=True)
    for name in list(STAGES) + ["pipeline"]:
        s = sub.add_parser(name)
        s.add_argument("--workdir", required=True, type=Path)
        s.add_argument("--config", type=Path)
        s.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE")
        s.add_argument("--seed", type=int)
        s.add_argument("--threads", type=int)
        s.add_argument("-v", "--verbose", action="store_true")
        if name == "pipeline":
            s.add_argument("--with-synth", action="store_true",
                           help="generate a synthetic population first")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.threads is not None:
        overrides.append(f"threads={args.threads}")
    try:
        cfg = load_config(args.config, overrides)
        stages = [args.stage]
        if args.stage == "pipeline":
            stages = (["synth"] if args.with_synth else []) + PIPELINE
        for st in stages:
            log.info("stage %s", st)
            run_stage(st, args.workdir, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingPrerequisite as exc:
        print(f"missing prerequisite: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (MeshError, ValueError, KeyError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
