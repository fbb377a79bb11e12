import csv
import json

import numpy as np
import pytest

from pssmorph import cli
from pssmorph.encoder import read_features

TINY = ["synth_counts=2,2,2", "synth_spine_density=0.05", "epochs=2", "latent_dim=8",
        "point_widths=8,16", "decoder_widths=16", "n_points=64", "codebook_k=3", "kmeans_k=3",
        "knn_k=4", "cv_folds=2"]


def _args(stage, wd, extra=()):
    out = [stage, "--workdir", str(wd)]
    for s in TINY + list(extra):
        out += ["--set", s]
    return out


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    wd = tmp_path_factory.mktemp("run")
    assert cli.main(_args("pipeline", wd) + ["--with-synth"]) == cli.EXIT_OK
    return wd


def test_pipeline_outputs(workdir):
    for name in ("ground_truth.csv", "synapses.csv", "model.nsae", "features.csv", "codebook.csv",
                 "descriptors.csv", "baselines.csv", "clusters.csv", "predictions.csv",
                 "metrics.csv", "manifest.json"):
        assert (workdir / name).exists(), name
    with open(workdir / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    got = {(r["feature"], r["method"]) for r in rows}
    for feat in ("SPSF", "SPC", "SBP"):
        assert {(feat, "kmeans"), (feat, "knn_graph"), (feat, "svm")} <= got
    for r in rows:
        assert -1.0 <= float(r["ari"]) <= 1.0
    man = json.loads((workdir / "manifest.json").read_text())
    assert set(cli.PIPELINE) | {"synth"} <= set(man["stages"])
    st = man["stages"]["encode"]
    assert st["config_hash"] == cli.config_hash(cli.load_config(None, TINY))
    assert "model.nsae" in st["inputs"]


def test_stage_rerun_is_deterministic(workdir):
    ids0, f0 = read_features(workdir / "features.csv")
    before = (workdir / "descriptors.csv").read_bytes()
    assert cli.main(_args("encode", workdir)) == cli.EXIT_OK
    assert cli.main(_args("describe", workdir)) == cli.EXIT_OK
    ids1, f1 = read_features(workdir / "features.csv")
    assert list(ids0) == list(ids1)
    np.testing.assert_array_equal(f0, f1)
    assert (workdir / "descriptors.csv").read_bytes() == before


def test_encode_rejects_mismatched_points(workdir, capsys):
    assert cli.main(_args("encode", workdir, ["n_points=32"])) == cli.EXIT_CONFIG
    assert "n_points" in capsys.readouterr().err


def test_missing_prerequisite(tmp_path, capsys):
    assert cli.main(["skeletonize", "--workdir", str(tmp_path)]) == cli.EXIT_MISSING
    assert cli.main(["cluster", "--workdir", str(tmp_path)]) == cli.EXIT_MISSING
    assert "describe" in capsys.readouterr().err


def test_bad_mesh_is_data_error(tmp_path):
    (tmp_path / "meshes").mkdir()
    (tmp_path / "meshes" / "x.ply").write_text("ply\nformat ascii 1.0\nelement vertex 1\n")
    assert cli.main(["skeletonize", "--workdir", str(tmp_path)]) == cli.EXIT_DATA


def test_config_layers(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("# comment\nseed = 4\nlam = 0.5  # trailing\nsholl_edges = 1,2,3\nuse_depth = yes\n")
    cfg = cli.load_config(p, ["seed=9"])
    assert cfg["seed"] == 9 and cfg["lam"] == 0.5 and cfg["use_depth"] is True
    assert cfg["sholl_edges"] == (1.0, 2.0, 3.0)
    assert cli.load_config()["latent_dim"] == 1024
    assert cli.config_hash(cfg) != cli.config_hash(cli.load_config())


@pytest.mark.parametrize("bad", ["nokey=1", "seed", "seed=abc", "use_depth=maybe", "lam=-1",
                                 "sdf_cone=2", "cv_folds=1", "synth_counts=1,2", "threads=0"])
def test_config_errors(bad, tmp_path):
    with pytest.raises(cli.ConfigError):
        cli.load_config(None, [bad])
    assert cli.main(["cluster", "--workdir", str(tmp_path), "--set", bad]) == cli.EXIT_CONFIG


def test_missing_config_file(tmp_path):
    assert cli.main(["cluster", "--workdir", str(tmp_path), "--config",
                     str(tmp_path / "none.cfg")]) == cli.EXIT_CONFIG


def test_parser():
    with pytest.raises(SystemExit):
        cli.build_parser().parse_args(["frobnicate", "--workdir", "x"])
    a = cli.build_parser().parse_args(["pipeline", "--workdir", "x", "--seed", "3", "--with-synth"])
    assert a.seed == 3 and a.with_synth
