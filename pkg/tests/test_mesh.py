import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial import ConvexHull
from scipy.spatial.transform import Rotation

from pssmorph import mesh as M
from pssmorph import synth

from . import oracles


def cube(s=2.0):
    v = np.array([[x, y, z] for x in (0, s) for y in (0, s) for z in (0, s)], float)
    hull = ConvexHull(v)
    return M.TriMesh(v, hull.simplices)


def random_hull(seed, n=40):
    rng = np.random.default_rng(seed)
    p = rng.normal(size=(n, 3))
    p /= np.linalg.norm(p, axis=1, keepdims=True)
    p *= rng.uniform(800, 1200, size=(n, 1))
    full = M.TriMesh(p, ConvexHull(p).simplices)
    return full.submesh(np.arange(full.n_faces))[0]


def test_single_triangle_obj(tmp_path):
    p = tmp_path / "t.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n")
    m = M.load_mesh(p)
    assert (m.n_vertices, m.n_faces, len(m.edges)) == (3, 1, 3)
    assert M.surface_area(m) == pytest.approx(0.5)


def test_quad_face_rejected(tmp_path):
    p = tmp_path / "q.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
    with pytest.raises(M.NonTriangularFaceError, match="non-triangular face"):
        M.load_mesh(p)


def test_empty_and_garbage(tmp_path):
    p = tmp_path / "e.obj"
    p.write_text("# nothing\n")
    with pytest.raises(M.EmptyMeshError):
        M.load_mesh(p)
    q = tmp_path / "g.ply"
    q.write_text("not a ply\n")
    with pytest.raises(M.MeshParseError):
        M.load_mesh(q)


@pytest.mark.parametrize("fmt,binary", [("ply", True), ("ply", False), ("obj", True)])
def test_roundtrip(tmp_path, fmt, binary):
    m = random_hull(1)
    p = tmp_path / f"m.{fmt}"
    M.save_mesh(m, p, binary=binary)
    back = M.load_mesh(p)
    np.testing.assert_array_equal(back.faces, m.faces)
    np.testing.assert_array_equal(back.vertices, m.vertices)


def test_duplicate_vertices_merged(tmp_path):
    p = tmp_path / "d.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nv 1 0 0\nv 1 1 0\nf 1 2 3\nf 4 5 3\n")
    m = M.load_mesh(p)
    assert m.n_vertices == 4
    assert len(M.connected_components(m)) == 1


def test_cube_area():
    assert M.surface_area(cube(3.0)) == pytest.approx(54.0, rel=1e-12)


def test_icosphere_area():
    v, f = synth.icosphere(5000.0, 4)
    a = M.surface_area(M.TriMesh(v, f))
    assert abs(a / oracles.sphere_area(5000.0) - 1) < 0.01


def test_components():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [5, 5, 5], [6, 5, 5], [5, 6, 5]], float)
    comps = M.connected_components(M.TriMesh(v, [[0, 1, 2], [3, 4, 5]]))
    assert [len(c) for c in comps] == [3, 3]
    v, f = synth.icosphere(10.0, 2)
    assert len(M.connected_components(M.TriMesh(v, f))) == 1
    assert M.connected_components(M.TriMesh(np.zeros((0, 3)), np.zeros((0, 3), int))) == []


def test_components_largest_first():
    tube = synth.tube_mesh(10000.0, 500.0)
    v = np.r_[[[9e4, 0, 0], [9e4 + 10, 0, 0], [9e4, 10, 0]], tube.vertices]
    f = np.r_[[[0, 1, 2]], tube.faces + 3]
    comps = M.connected_components(M.TriMesh(v, f))
    assert len(comps[0]) == tube.n_vertices
    assert len(comps[1]) == 3
    assert sum(len(c) for c in comps) == 3 + tube.n_vertices


def test_geodesic_trivial():
    m = M.TriMesh([[0, 0, 0], [1, 0, 0], [3, 0, 0]], np.zeros((0, 3), int),
                  extra_edges=[[0, 1], [1, 2]])
    d = M.geodesic_distances(m, [0])
    np.testing.assert_allclose(d, [0, 1, 3])
    with pytest.raises(ValueError):
        M.geodesic_distances(m, [])
    np.testing.assert_array_equal(M.shortest_path(m, 0, [2]), [0, 1, 2])
    np.testing.assert_array_equal(M.shortest_path(m, 2, [2]), [2])


def test_tube_antipodal():
    L = 20000.0
    tube = synth.tube_mesh(L, 500.0, capped=False)
    z = tube.vertices[:, 2]
    a = int(np.argmin(z))
    ang = np.arctan2(tube.vertices[:, 1], tube.vertices[:, 0])
    far = np.flatnonzero(np.isclose(z, z.max()))
    b = far[np.argmin(np.abs(np.angle(np.exp(1j * (ang[far] - ang[a] - np.pi)))))]
    d = M.geodesic_distances(tube, [a])[b]
    ref = oracles.dijkstra(tube.n_vertices, tube.faces, tube.vertices, a)[b]
    assert d == pytest.approx(ref, rel=1e-12)
    assert L <= d <= 1.05 * np.hypot(L, np.pi * 500.0)


def test_unreachable():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [5, 5, 5], [6, 5, 5], [5, 6, 5]], float)
    m = M.TriMesh(v, [[0, 1, 2], [3, 4, 5]])
    assert np.isinf(M.geodesic_distances(m, [0])[4])
    with pytest.raises(M.UnreachableError):
        M.shortest_path(m, 0, [4])


@pytest.mark.parametrize("seed", range(10))
def test_shortest_paths_match_oracle(seed):
    m = random_hull(seed)
    rng = np.random.default_rng(seed)
    src = int(rng.integers(m.n_vertices))
    ref = oracles.dijkstra(m.n_vertices, m.faces, m.vertices, src)
    np.testing.assert_allclose(M.geodesic_distances(m, [src]), ref, rtol=0, atol=1e-9)
    dst = rng.choice(m.n_vertices, 3, replace=False)
    path = M.shortest_path(m, src, dst)
    assert path[0] == src and path[-1] in dst
    assert M.path_length(m, path) == pytest.approx(ref[dst].min(), rel=1e-9)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6))
def test_geodesic_triangle_inequality(seed):
    m = random_hull(seed, n=25)
    rng = np.random.default_rng(seed)
    a, b, c = rng.choice(m.n_vertices, 3, replace=False)
    da = M.geodesic_distances(m, [a])
    db = M.geodesic_distances(m, [b])
    assert da[c] <= da[b] + db[c] + 1e-9


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10**6))
def test_area_rigid_invariance(seed):
    m = random_hull(seed % 50)
    R = Rotation.random(random_state=seed).as_matrix()
    t = np.random.default_rng(seed).normal(size=3) * 1e5
    assert M.surface_area(m.transformed(R, t)) == pytest.approx(M.surface_area(m), rel=1e-9)


def test_local_region():
    m = random_hull(3)
    sub, vid = M.local_region(m, [0, 0, 0], 1e6)
    assert sub.n_faces == m.n_faces
    np.testing.assert_array_equal(m.vertices[vid], sub.vertices)
    with pytest.raises(M.EmptyRegionError):
        M.local_region(m, [1e7, 0, 0], 100.0)
    with pytest.raises(ValueError):
        M.local_region(m, [0, 0, 0], 0.0)


def test_local_region_contains_spine():
    cell = synth.generate_cell(synth.SynthCellSpec.for_class("spiny-mushroom", seed=5))
    for s in range(5):
        tip = cell.synapses.positions[s]
        sp = cell.synapse_spine[s]
        _, vid = M.local_region(cell.mesh, tip, 3500.0)
        assert set(cell.spine_vertices(sp).tolist()) <= set(vid.tolist())


def test_resample_basic():
    m = random_hull(4)
    p = M.resample_points(m, 512, seed=3)
    assert p.shape == (512, 3)
    np.testing.assert_array_equal(p, M.resample_points(m, 512, seed=3))
    assert np.linalg.norm(p.mean(axis=0)) <= 1e-9
    assert np.linalg.norm(p, axis=1).max() == pytest.approx(1.0, abs=1e-9)
    # raw samples lie on a face plane
    raw = M.resample_points(m, 200, seed=3, normalize=False)
    n = m.face_normals
    planar = np.abs(np.einsum("pfk,fk->pf", raw[:, None, :] - m.face_centroids[None], n))
    assert np.all(planar.min(axis=1) < 1e-6)
    with pytest.raises(M.EmptyMeshError):
        M.resample_points(M.TriMesh(np.zeros((0, 3)), np.zeros((0, 3), int)), 5, 0)


def test_resample_cube_area_weighting():
    m = cube(1.0)
    P = 60000
    p = M.resample_points(m, P, seed=11, normalize=False)
    eps = 1e-9
    counts = [np.sum(np.abs(p[:, ax] - val) < eps) for ax in range(3) for val in (0.0, 1.0)]
    assert sum(counts) == P
    sd = np.sqrt(P * (1 / 6) * (5 / 6))
    for c in counts:
        assert abs(c - P / 6) <= 3 * sd


def test_resample_degenerate():
    v = np.zeros((3, 3))
    v[:, 0] = 1.0
    out = M.normalize_points(v)
    np.testing.assert_array_equal(out, np.zeros((3, 3)))


def test_synapse_csv(tmp_path):
    s = M.SynapseSet(np.array(["a", "b"], dtype=object), [[0, 0, 0], [1.5, 2, 3]],
                     np.array(["c1", "c2"], dtype=object))
    p = tmp_path / "s.csv"
    M.write_synapses(s, p)
    back = M.read_synapses(p)
    assert list(back.ids) == ["a", "b"]
    np.testing.assert_array_equal(back.positions, s.positions)
    assert list(back.for_cell("c2").ids) == ["b"]
    with pytest.raises(ValueError):
        M.SynapseSet(["a", "a"], np.zeros((2, 3)), ["c", "c"])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_canonical_pose_rotation_invariant(seed):
    rng = np.random.default_rng(seed)
    # anisotropic and skewed so axes and signs are well defined
    p = rng.exponential(size=(300, 3)) * [3.0, 2.0, 1.0]
    p -= p.mean(axis=0)
    R = Rotation.random(random_state=seed).as_matrix()
    a, b = M.canonical_pose(p), M.canonical_pose(p @ R.T)
    np.testing.assert_allclose(a, b, atol=1e-9)
    np.testing.assert_allclose(np.linalg.norm(a, axis=1), np.linalg.norm(p, axis=1), atol=1e-12)
    # proper rotation: recover it by least squares and check det = +1
    Q, *_ = np.linalg.lstsq(p, a, rcond=None)
    assert np.linalg.det(Q) == pytest.approx(1.0, abs=1e-9)
    cov = np.cov(a.T)
    assert cov[0, 0] >= cov[1, 1] >= cov[2, 2]
    np.testing.assert_allclose(cov - np.diag(np.diag(cov)), 0.0, atol=1e-9)
    assert np.sum(a[:, 0] ** 3) >= 0 and np.sum(a[:, 1] ** 3) >= 0


def test_resample_align_keeps_unit_norm():
    m = synth.tube_mesh(3000.0, 400.0)
    p = M.resample_points(m, 256, seed=0, align=True)
    assert np.abs(p.mean(axis=0)).max() < 1e-12
    assert np.linalg.norm(p, axis=1).max() == pytest.approx(1.0, abs=1e-12)
    # the long axis of the tube becomes the first coordinate
    assert np.var(p[:, 0]) > 3 * np.var(p[:, 1])
