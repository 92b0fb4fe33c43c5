import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uvforge import shapes
from uvforge.mesh import (
    Labeling, Mesh, MeshError, ObjParseError, compute_vertex_normals, connected_components,
    extract_submesh, load_obj, normalize_mesh, read_obj, save_obj, vertex_labels,
)

from conftest import write_obj


def test_minimal_obj(tmp_path):
    m = load_obj(write_obj(tmp_path / "t.obj", "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n"))
    assert (m.n_vertices, m.n_faces) == (3, 1)
    np.testing.assert_allclose(m.normals, [[0, 0, 1]] * 3)


def test_degenerate_face_names_line(tmp_path):
    p = write_obj(tmp_path / "t.obj", "v 0 0 0\nv 1 0 0\nv 0 1 0\n# c\nf 1 2 2\n")
    with pytest.raises(ObjParseError) as ei:
        load_obj(p)
    assert ei.value.line == 5
    assert str(ei.value).split(": ")[0].endswith("t.obj:5")


def test_negative_indices_and_quads(tmp_path):
    p = write_obj(tmp_path / "q.obj", "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf -4 -3 -2 -1\n")
    m = load_obj(p)
    assert m.n_faces == 2
    assert m.faces.min() == 0 and m.faces.max() == 3
    with pytest.raises(ObjParseError):
        load_obj(p, triangulate_quads=False)


def test_bad_index_and_missing_file(tmp_path):
    with pytest.raises(ObjParseError):
        load_obj(write_obj(tmp_path / "b.obj", "v 0 0 0\nf 1 2 3\n"))
    with pytest.raises(FileNotFoundError):
        load_obj(tmp_path / "nope.obj")


def test_nonmanifold_warning_is_not_fatal(tmp_path):
    text = "v 0 0 0\nv 1 0 0\nv 0 1 0\nv 0 -1 0\nv 0 0 1\nf 1 2 3\nf 2 1 4\nf 1 2 5\n"
    data = read_obj(write_obj(tmp_path / "nm.obj", text))
    assert data.mesh.n_faces == 3
    assert any("non-manifold" in w for w in data.warnings)


def _normals_oracle(v, f):
    acc = np.zeros_like(v)
    for tri in f:
        a, b, c = v[tri]
        n = np.cross(b - a, c - a)  # length = 2 * area, direction = face normal
        for i in tri:
            acc[i] += n
    return acc / np.linalg.norm(acc, axis=1, keepdims=True)


def test_cube_normals_match_area_weighted_oracle(tmp_path):
    cube = shapes.cube()
    save_obj(cube, tmp_path / "c.obj")
    m = load_obj(tmp_path / "c.obj")
    assert (m.n_vertices, m.n_faces) == (8, 12)
    np.testing.assert_allclose(np.linalg.norm(m.normals, axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(m.normals, _normals_oracle(m.vertices, m.faces), atol=1e-12)


def test_normals_flat_square_single_triangle_and_sphere():
    v = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], float)
    m = Mesh(v, [[0, 1, 2], [0, 2, 3]])
    np.testing.assert_allclose(m.normals, [[0, 0, 1]] * 4)
    tri = Mesh([[0, 0, 0], [2, 0, 1], [0, 1, 0]], [[0, 1, 2]])
    np.testing.assert_allclose(tri.normals, np.repeat(tri.face_normals, 3, axis=0), atol=1e-12)
    s = shapes.icosphere(3)
    radial = s.vertices / np.linalg.norm(s.vertices, axis=1, keepdims=True)
    ang = np.arccos(np.clip(np.sum(radial * s.normals, axis=1), -1, 1))
    assert ang.max() < 0.05


def test_save_load_roundtrip_and_vt(tmp_path, rng):
    m = Mesh(rng.normal(size=(30, 3)) * 50, shapes.grid(4).faces[:20] % 30)
    uv = rng.random((30, 2))
    save_obj(m, tmp_path / "r.obj", uv)
    data = read_obj(tmp_path / "r.obj")
    np.testing.assert_allclose(data.mesh.vertices, m.vertices, atol=1e-6)
    np.testing.assert_allclose(data.uv, uv, atol=1e-6)
    lines = (tmp_path / "r.obj").read_text().splitlines()
    assert sum(l.startswith("vt ") for l in lines) == m.n_vertices


def test_save_cube_zero_uv(tmp_path):
    cube = shapes.cube()
    save_obj(cube, tmp_path / "z.obj", np.zeros((8, 2)))
    vts = [l for l in (tmp_path / "z.obj").read_text().splitlines() if l.startswith("vt")]
    assert vts == ["vt 0 0"] * 8


def test_save_rejects_wrong_uv_shape(tmp_path):
    with pytest.raises(ValueError):
        save_obj(shapes.cube(), tmp_path / "x.obj", np.zeros((3, 2)))


def test_dihedral_flat_and_cube():
    flat = shapes.grid(2)
    adj = flat.adjacency
    np.testing.assert_allclose(adj.dihedral, np.pi, atol=1e-6)
    cube = shapes.cube()
    adj = cube.adjacency
    fn = cube.face_normals
    across = np.abs(np.sum(fn[adj.face_a] * fn[adj.face_b], axis=1)) < 0.5
    assert across.sum() == 12
    np.testing.assert_allclose(adj.dihedral[across], np.pi / 2, atol=1e-6)
    np.testing.assert_allclose(adj.dihedral[~across], np.pi, atol=1e-6)


def test_concave_edge_above_pi():
    inv = shapes.inverted(shapes.cube())
    adj = inv.adjacency
    fn = inv.face_normals
    across = np.abs(np.sum(fn[adj.face_a] * fn[adj.face_b], axis=1)) < 0.5
    np.testing.assert_allclose(adj.dihedral[across], 1.5 * np.pi, atol=1e-6)


def test_tetrahedron_pairs_and_ring_symmetry():
    t = shapes.tetrahedron()
    assert t.adjacency.n_pairs == 6
    m = shapes.icosphere(1)
    rings = m.adjacency.vertex_one_rings
    for i, r in enumerate(rings):
        assert list(r) == sorted(r)
        for j in r:
            assert i in rings[j]
    d = m.adjacency.dihedral
    assert np.all((d > 0) & (d < 2 * np.pi))


def test_submesh_identity_and_cube_split():
    cube = shapes.cube()
    sm = extract_submesh(cube, np.zeros(12, int), 0)
    assert sm.submesh.n_faces == 12 and sm.submesh.n_vertices == 8
    np.testing.assert_array_equal(sm.submesh.vertices[sm.submesh.faces], cube.vertices[cube.faces])
    labels = np.repeat([0, 1], 6)
    covered = []
    for k in (0, 1):
        sm = extract_submesh(cube, labels, k)
        assert sm.submesh.n_faces == 6
        assert len(set(sm.vertex_back_map)) == len(sm.vertex_back_map)
        # composing the back maps recovers the parent faces exactly
        np.testing.assert_array_equal(sm.vertex_back_map[sm.submesh.faces], cube.faces[sm.face_back_map])
        covered.extend(sm.face_back_map)
    assert sorted(covered) == list(range(12))


def test_submesh_empty_label():
    with pytest.raises(MeshError):
        extract_submesh(shapes.cube(), np.zeros(12, int), 3)


def test_normalize():
    cube = shapes.cube()
    n = normalize_mesh(cube)
    assert n.bbox_diagonal == pytest.approx(1.0, abs=1e-12)
    assert np.abs(n.vertices).max() <= 0.5 + 1e-9
    np.testing.assert_allclose(normalize_mesh(n).vertices, n.vertices, atol=1e-9)
    big = cube.with_vertices(cube.vertices * 7 + 3)
    np.testing.assert_allclose(normalize_mesh(big).vertices, n.vertices, atol=1e-9)
    with pytest.raises(MeshError):
        normalize_mesh(Mesh(np.ones((3, 3)), [[0, 1, 2]]))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.01, 100))
def test_normalize_fits_unit_cube(seed, scale):
    v = np.random.default_rng(seed).normal(size=(12, 3)) * scale
    m = normalize_mesh(Mesh(v, [[0, 1, 2], [3, 4, 5]]))
    assert np.abs(m.vertices).max() <= 0.5 + 1e-9
    np.testing.assert_allclose(np.linalg.norm(m.normals, axis=1), 1.0, atol=1e-6)


def _flood_components(mesh, labels):
    # independent flood fill over faces sharing an edge
    edge_faces = {}
    for fi, f in enumerate(mesh.faces):
        for a, b in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
            edge_faces.setdefault(frozenset((a, b)), []).append(fi)
    comp = -np.ones(mesh.n_faces, int)
    c = 0
    for s in range(mesh.n_faces):
        if comp[s] >= 0:
            continue
        stack, comp[s] = [s], c
        while stack:
            f = stack.pop()
            v = mesh.faces[f]
            for a, b in ((v[0], v[1]), (v[1], v[2]), (v[2], v[0])):
                for g in edge_faces[frozenset((a, b))]:
                    if comp[g] < 0 and labels[g] == labels[f]:
                        comp[g] = c
                        stack.append(g)
        c += 1
    return comp


def _same_partition(a, b):
    return all((a[i] == a[j]) == (b[i] == b[j]) for i, j in itertools.combinations(range(len(a)), 2))


def test_connected_components():
    assert connected_components(shapes.icosphere(1), np.zeros(80, int)).max() == 0
    two = Mesh([[0, 0, 0], [1, 0, 0], [0, 1, 0], [5, 0, 0], [6, 0, 0], [5, 1, 0]], [[0, 1, 2], [3, 4, 5]])
    assert len(set(connected_components(two, [0, 0]))) == 2
    cube = shapes.cube()
    fn = cube.face_normals
    labels = np.where(np.abs(fn[:, 0]) > 0.5, 0, 1)  # the two x-facing sides are A
    comp = connected_components(cube, labels)
    assert len(set(comp[labels == 0])) == 2
    assert _same_partition(comp, _flood_components(cube, labels))


def test_components_match_flood_fill_random(rng):
    m = shapes.icosphere(1)
    for _ in range(5):
        labels = rng.integers(0, 3, m.n_faces)
        assert _same_partition(connected_components(m, labels), _flood_components(m, labels))


def test_vertex_labels_majority():
    m = shapes.grid(2)  # 8 faces
    vl = vertex_labels(m, np.zeros(m.n_faces, int))
    assert (vl == 0).all()
    lab = Labeling.from_array([5, 5, 9, 9])
    assert lab.k == 2 and list(lab.labels) == [0, 0, 1, 1]
