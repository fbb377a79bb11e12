import csv

import numpy as np
import pytest

from pssmorph import synth
from pssmorph.mesh import TriMesh, connected_components, load_mesh, read_synapses

from . import oracles


def _closed_oriented(m):
    f = m.faces
    d = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    fwd = {tuple(e) for e in d.tolist()}
    assert len(fwd) == len(d)  # each directed edge once
    assert all((b, a) in fwd for a, b in fwd)  # each has its twin


def _euler(m):
    return m.n_vertices - len(m.edges) + m.n_faces


def _volume(m):
    v = m.vertices[m.faces]
    return np.einsum("ij,ij->i", v[:, 0], np.cross(v[:, 1], v[:, 2])).sum() / 6.0


def test_icosphere_area_converges():
    errs = []
    for s in (1, 2, 3, 4):
        v, f = synth.icosphere(1000.0, s)
        a = TriMesh(v, f).face_areas.sum()
        errs.append(abs(a - oracles.sphere_area(1000.0)) / oracles.sphere_area(1000.0))
        assert np.allclose(np.linalg.norm(v, axis=1), 1000.0)
    assert errs[-1] < 0.01
    assert all(b < a for a, b in zip(errs, errs[1:]))


def test_tube_closed_and_outward():
    t = synth.tube_mesh(5000.0, 500.0)
    _closed_oriented(t)
    assert _euler(t) == 2
    assert _volume(t) > 0.9 * np.pi * 500.0 ** 2 * 5000.0
    assert len(connected_components(synth.tube_mesh(5000.0, 500.0, capped=False))) == 1


def test_dumbbell_and_y_closed():
    m, _ = synth.dumbbell()
    _closed_oriented(m)
    assert _euler(m) == 2
    y, segs = synth.y_tube(arm_length=20000.0)
    _closed_oriented(y)
    assert _euler(y) == 2 and _volume(y) > 0
    assert segs.shape == (3, 2, 3)


@pytest.fixture(scope="module", params=synth.CLASS_TAGS)
def cell(request):
    spec = synth.SynthCellSpec.for_class(request.param, seed=5, n_dendrites=2,
                                         dendrite_length=30000.0, child_length=20000.0)
    return synth.generate_cell(spec)


def test_cell_is_closed_genus_zero(cell):
    _closed_oriented(cell.mesh)
    assert _euler(cell.mesh) == 2
    assert len(connected_components(cell.mesh)) == 1
    assert _volume(cell.mesh) > 0


def test_cell_ground_truth(cell):
    m, spec = cell.mesh, cell.spec
    assert len(cell.vertex_labels) == m.n_vertices == len(cell.spine_index)
    soma = cell.vertex_labels == synth.SOMA
    r = np.linalg.norm(m.vertices[soma] - cell.soma_center, axis=1)
    assert r.max() <= spec.soma_radius * (1 + 1e-9)
    pos = cell.synapses.positions
    d = np.min(np.linalg.norm(pos[:, None] - m.vertices[None], axis=2), axis=1)
    assert d.max() < 100.0
    nearest = np.argmin(np.linalg.norm(pos[:, None] - m.vertices[None], axis=2), axis=1)
    if cell.class_tag == "aspiny":
        assert np.all(cell.synapse_spine == -1)
        assert np.all(cell.vertex_labels[nearest] == synth.SHAFT)
        assert not np.any(cell.vertex_labels == synth.HEAD)
    else:
        assert len(np.unique(cell.synapse_spine)) == len(pos)
        assert np.all(cell.vertex_labels[nearest] == synth.HEAD)
        assert np.all(cell.spine_index[nearest] == cell.synapse_spine)


def test_synapse_count_tracks_density(cell):
    spec = cell.spec
    # usable length per tube: 3 um margin at the base and 2 um at the tip
    length = (spec.n_dendrites * (spec.dendrite_length - 5000.0)
              + 2 * spec.n_forks * (spec.child_length - 5000.0))
    expect = spec.spine_density * length / 1000.0
    assert abs(len(cell.synapses) - expect) <= 0.1 * expect + 2


def test_cell_determinism():
    spec = synth.SynthCellSpec.for_class("spiny-stubby", seed=9, n_dendrites=1,
                                         dendrite_length=20000.0, n_forks=0)
    a, b = synth.generate_cell(spec), synth.generate_cell(spec)
    np.testing.assert_array_equal(a.mesh.vertices, b.mesh.vertices)
    np.testing.assert_array_equal(a.synapses.positions, b.synapses.positions)


def test_spec_validation():
    with pytest.raises(synth.SynthError):
        synth.SynthCellSpec.for_class("pyramidal")
    for bad in (dict(shaft_radius=-1.0), dict(spine_density=-0.1), dict(n_dendrites=0),
                dict(n_forks=9), dict(segments=3), dict(neck_radius=700.0),
                dict(head_radius=50.0), dict(shaft_radius=3500.0)):
        with pytest.raises(synth.SynthError):
            synth.generate_cell(synth.SynthCellSpec(**bad))


def test_class_defaults():
    m = synth.SynthCellSpec.for_class("spiny-mushroom")
    s = synth.SynthCellSpec.for_class("spiny-stubby")
    a = synth.SynthCellSpec.for_class("aspiny")
    assert s.neck_length < m.neck_length and s.neck_radius > m.neck_radius
    assert a.spine_density == synth.ASPINY_DENSITY_FACTOR * m.spine_density
    assert a.taper > m.taper
    assert synth.SynthCellSpec.for_class("aspiny", spine_density=1.0).spine_density == 1.0


@pytest.fixture(scope="module")
def population():
    mix = [(synth.SynthCellSpec.for_class(t, n_dendrites=1, n_forks=0, dendrite_length=15000.0), 2)
           for t in synth.CLASS_TAGS]
    return mix, synth.generate_population(mix, seed=3)


def test_population_jitter_and_order(population):
    mix, cells = population
    assert [c.class_tag for c in cells] == [t for t in synth.CLASS_TAGS for _ in range(2)]
    assert len({c.cell_id for c in cells}) == 6
    for c, (base, _) in zip(cells, [m for m in mix for _ in range(2)]):
        for name in ("dendrite_length", "head_radius", "depth_nm"):
            ratio = getattr(c.spec, name) / getattr(base, name)
            assert 0.9 <= ratio <= 1.1
    again = synth.generate_population(mix, seed=3)
    np.testing.assert_array_equal(again[4].mesh.vertices, cells[4].mesh.vertices)


def test_write_population(tmp_path, population):
    _, cells = population
    synth.write_population(cells, tmp_path)
    syn = read_synapses(tmp_path / "synapses.csv")
    assert len(syn) == sum(len(c.synapses) for c in cells)
    with open(tmp_path / "ground_truth.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["class_tag"] for r in rows] == [c.class_tag for c in cells]
    assert float(rows[0]["depth_nm"]) == cells[0].depth
    m = load_mesh(tmp_path / "meshes" / f"{cells[0].cell_id}.ply")
    np.testing.assert_allclose(m.vertices, cells[0].mesh.vertices)


@pytest.mark.parametrize("fraction", [0.0, 0.3])
def test_truncate_cell(fraction):
    spec = synth.SynthCellSpec.for_class("spiny-mushroom", seed=4, n_dendrites=3, n_forks=1,
                                         dendrite_length=30000.0, child_length=20000.0)
    cell = synth.generate_cell(spec)
    t = synth.truncate_cell(cell, fraction, seed=0)
    kept = t.mesh.face_areas.sum() / cell.mesh.face_areas.sum()
    if fraction == 0.0:
        assert kept == pytest.approx(1.0)
        assert len(t.synapses) == len(cell.synapses)
    else:
        assert abs((1.0 - kept) - fraction) <= 0.02
    assert len(connected_components(t.mesh)) == 1
    assert np.any(t.vertex_labels == synth.SOMA)
    assert len(t.synapses) == len(t.synapse_spine) <= len(cell.synapses)
    d = np.min(np.linalg.norm(t.synapses.positions[:, None] - t.mesh.vertices[None], axis=2), axis=1)
    assert d.max() < 100.0


def test_spine_dimensions_vary_within_cell():
    spec = synth.SynthCellSpec.for_class("spiny-mushroom", seed=5, n_dendrites=2, n_forks=0,
                                         dendrite_length=30000.0)
    c = synth.generate_cell(spec)
    ext = []
    for sp in np.unique(c.spine_index[c.spine_index >= 0]):
        v = np.flatnonzero((c.spine_index == sp) & (c.vertex_labels == synth.HEAD))
        p = c.mesh.vertices[v]
        ext.append(np.linalg.norm(p - p.mean(0), axis=1).max())
    ext = np.array(ext)
    assert ext.std() / ext.mean() > 0.02
    fixed = synth.generate_cell(synth.SynthCellSpec.for_class(
        "spiny-mushroom", seed=5, n_dendrites=2, n_forks=0, dendrite_length=30000.0, neck_jitter=0.0, head_jitter=0.0))
    ext0 = []
    for sp in np.unique(fixed.spine_index[fixed.spine_index >= 0]):
        v = np.flatnonzero((fixed.spine_index == sp) & (fixed.vertex_labels == synth.HEAD))
        p = fixed.mesh.vertices[v]
        ext0.append(np.linalg.norm(p - p.mean(0), axis=1).max())
    assert np.ptp(ext0) < 1e-6 * np.mean(ext0)


def test_dendrite_taper():
    spec = synth.SynthCellSpec.for_class("aspiny", seed=1, n_dendrites=1, n_forks=0,
                                         dendrite_length=30000.0, taper=0.2)
    c = synth.generate_cell(spec)
    a, b = c.skeleton_segments[1]
    d = (b - a) / np.linalg.norm(b - a)
    p = c.mesh.vertices[c.vertex_labels == synth.SHAFT] - a
    t = p @ d
    rad = np.linalg.norm(p - t[:, None] * d, axis=1)
    R = spec.shaft_radius
    near_base = (t > 2000) & (t < 4000)
    near_tip = (t > 24000) & (t < 26000)
    assert rad[near_base].mean() > rad[near_tip].mean()
    assert rad[near_base].max() <= 1.2 * R * (1 + 1e-9)
    assert rad[near_tip].min() >= 0.8 * R * (1 - 1e-9) * np.cos(np.pi / spec.segments)
