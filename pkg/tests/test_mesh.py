import math
import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from ppfbin.mesh import (MeshError, PointCloud, TriangleMesh, compute_vertex_normals,
                         load_mesh, make_box, make_bracket, make_icosphere, mesh_to_cloud,
                         object_diameter, save_obj, transform_mesh, voxel_subsample)
from ppfbin.transforms import Pose, random_rotations

CUBE_OBJ = """\
v 0 0 0
v 1 0 0
v 1 1 0
v 0 1 0
v 0 0 1
v 1 0 1
v 1 1 1
v 0 1 1
f 1 3 2
f 1 4 3
f 5 6 7
f 5 7 8
f 1 2 6
f 1 6 5
f 2 3 7
f 2 7 6
f 3 4 8
f 3 8 7
f 4 1 5
f 4 5 8
"""


def test_load_obj_cube(tmp_path):
    p = tmp_path / "cube.obj"
    p.write_text(CUBE_OBJ)
    m = load_mesh(p)
    assert m.vertices.shape == (8, 3)
    assert m.faces.shape == (12, 3)
    assert m.n_degenerate == 0


def test_load_obj_quad_is_split(tmp_path):
    p = tmp_path / "quad.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
    assert len(load_mesh(p).faces) == 2


def test_load_obj_drops_degenerate_face(tmp_path):
    p = tmp_path / "deg.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nv 2 0 0\nf 1 2 3\nf 1 2 4\n")
    with pytest.warns(UserWarning, match="1 degenerate"):
        m = load_mesh(p)
    assert len(m.faces) == 1
    assert m.n_degenerate == 1


def test_load_obj_negative_indices_and_slashes(tmp_path):
    p = tmp_path / "neg.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nvn 0 0 1\nf -3//1 -2//1 -1//1\n")
    m = load_mesh(p)
    np.testing.assert_array_equal(m.faces, [[0, 1, 2]])
    np.testing.assert_allclose(m.vertex_normals, [[0, 0, 1]] * 3)


@pytest.mark.filterwarnings("ignore")
@pytest.mark.parametrize("text, err", [
    ("", "no faces"),
    ("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 9\n", "out of range"),
    ("v 0 0 0\nv 1 0 0\nv 0 0 0\nf 1 2 3\n", "no non-degenerate"),
])
def test_load_obj_errors(tmp_path, text, err):
    p = tmp_path / "bad.obj"
    p.write_text(text)
    with pytest.raises(MeshError, match=err):
        load_mesh(p)


def test_load_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_mesh(tmp_path / "nope.obj")


def test_load_unknown_extension(tmp_path):
    p = tmp_path / "m.stl"
    p.write_text("solid")
    with pytest.raises(MeshError):
        load_mesh(p)


def _ply_header(fmt, n_v, n_f, extra=""):
    return (f"ply\nformat {fmt} 1.0\ncomment test\nelement vertex {n_v}\n"
            f"property float x\nproperty float y\nproperty float z\n{extra}"
            f"element face {n_f}\nproperty list uchar int vertex_indices\nend_header\n")


def test_load_ply_ascii(tmp_path):
    p = tmp_path / "q.ply"
    p.write_text(_ply_header("ascii", 4, 1) + "0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n")
    m = load_mesh(p)
    assert m.vertices.shape == (4, 3)
    assert len(m.faces) == 2


@pytest.mark.parametrize("endian, fmt", [("<", "binary_little_endian"), (">", "binary_big_endian")])
def test_load_ply_binary(tmp_path, endian, fmt):
    verts = [(0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 1)]
    body = b"".join(struct.pack(endian + "fff", *v) for v in verts)
    body += struct.pack(endian + "Biii", 3, 0, 1, 2) + struct.pack(endian + "Biii", 3, 0, 2, 3)
    p = tmp_path / "b.ply"
    p.write_bytes(_ply_header(fmt, 4, 2).encode() + body)
    m = load_mesh(p)
    np.testing.assert_allclose(m.vertices, verts)
    np.testing.assert_array_equal(m.faces, [[0, 1, 2], [0, 2, 3]])


def test_obj_roundtrip(tmp_path):
    m = make_bracket()
    save_obj(m, tmp_path / "b.obj")
    back = load_mesh(tmp_path / "b.obj")
    np.testing.assert_array_equal(back.vertices, m.vertices)
    np.testing.assert_array_equal(back.faces, m.faces)


def test_face_index_out_of_range():
    with pytest.raises(MeshError):
        TriangleMesh(np.zeros((3, 3)), [[0, 1, 3]])


# -- normals ---------------------------------------------------------------

def test_normals_flat_square():
    sq = TriangleMesh([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], [[0, 1, 2], [0, 2, 3]])
    n = compute_vertex_normals(sq).vertex_normals
    np.testing.assert_allclose(n, [[0, 0, 1]] * 4, atol=1e-12)


def test_normals_cube_corner():
    n = compute_vertex_normals(make_box(center=(0.5, 0.5, 0.5))).vertex_normals
    m = make_box(center=(0.5, 0.5, 0.5))
    corner = int(np.flatnonzero(np.all(m.vertices == 1.0, axis=1))[0])
    np.testing.assert_allclose(n[corner], np.ones(3) / math.sqrt(3), atol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(n, axis=1), 1.0, atol=1e-6)


def test_normals_isolated_vertex():
    m = TriangleMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0], [5, 5, 5]], [[0, 2, 1]])
    out = compute_vertex_normals(m)
    np.testing.assert_allclose(out.vertex_normals[3], [0, 0, 1])
    assert out.normal_fallback.tolist() == [False, False, False, True]
    np.testing.assert_allclose(out.vertex_normals[0], [0, 0, -1])


@given(st.integers(0, 2 ** 31))
def test_normals_commute_with_rigid_transform(seed):
    rng = np.random.default_rng(seed)
    pose = Pose(random_rotations(rng, 1)[0], rng.normal(size=3) * 10)
    m = make_icosphere(1)
    a = transform_mesh(compute_vertex_normals(m), pose).vertex_normals
    b = compute_vertex_normals(transform_mesh(m, pose)).vertex_normals
    np.testing.assert_allclose(a, b, atol=1e-6)


# -- voxel subsampling ------------------------------------------------------

def _cloud(points, normals=None):
    points = np.asarray(points, dtype=np.float64)
    if normals is None:
        normals = np.tile([0.0, 0.0, 1.0], (len(points), 1))
    return PointCloud(points, normals)


def test_voxel_merges_close_points():
    out = voxel_subsample(_cloud([[0.2, 0.2, 0.2], [0.3, 0.2, 0.2]]), 1.0)
    assert len(out) == 1
    np.testing.assert_allclose(out.positions[0], [0.25, 0.2, 0.2])
    assert out.sampling_resolution == 1.0


def test_voxel_keeps_separate_points():
    pts = [[0.5, 0.5, 0.5], [2.5, 0.5, 0.5]]
    out = voxel_subsample(_cloud(pts), 1.0)
    np.testing.assert_allclose(out.positions, pts)


def test_voxel_random_cube_count():
    rng = np.random.default_rng(7)
    pts = rng.uniform(0, 1, (1000, 3))
    out = voxel_subsample(_cloud(pts), 0.5)
    assert len(out) == oracles.occupied_voxels(pts, 0.5)
    assert len(out) <= 27


def test_voxel_cancelling_normals_fallback():
    xs = [0.1, 0.2, 0.25, 0.7]
    nrm = [[0, 0, 1], [0, 0, -1], [1, 0, 0], [-1, 0, 0]]
    out = voxel_subsample(_cloud([[x, 0.5, 0.5] for x in xs], nrm), 1.0)
    # normals cancel; the member nearest the centroid (x=0.3125) donates its normal
    np.testing.assert_allclose(out.normals[0], [1, 0, 0])


def test_voxel_rejects_bad_tau():
    with pytest.raises(ValueError):
        voxel_subsample(_cloud([[0, 0, 0]]), 0.0)


points_strategy = arrays(np.float64, st.tuples(st.integers(1, 200), st.just(3)),
                         elements=st.floats(-20, 20, allow_nan=False))


@given(points_strategy, st.floats(0.05, 5.0))
def test_voxel_properties(pts, tau):
    out = voxel_subsample(_cloud(pts), tau)
    cells = np.floor(out.positions / tau).astype(np.int64)
    # one point per cell, output sorted by cell
    assert len(np.unique(cells, axis=0)) == len(out)
    assert [tuple(c) for c in cells] == sorted(tuple(c) for c in cells)
    # every representative is near some input point
    d = np.linalg.norm(out.positions[:, None] - pts[None], axis=2).min(axis=1)
    assert np.all(d <= tau * math.sqrt(3) + 1e-9)
    # idempotent in count
    assert len(voxel_subsample(out, tau)) == len(out)


# -- surface sampling ---------------------------------------------------------

def test_mesh_to_cloud_square():
    sq = TriangleMesh([[0, 0, 0], [10, 0, 0], [10, 10, 0], [0, 10, 0]], [[0, 1, 2], [0, 2, 3]])
    c = mesh_to_cloud(sq, 1.0)
    assert 100 <= len(c) <= 121
    np.testing.assert_allclose(c.normals, np.tile([0, 0, 1.0], (len(c), 1)), atol=1e-12)


def test_mesh_to_cloud_small_triangle():
    tri = TriangleMesh([[0.1, 0.1, 0.1], [0.3, 0.1, 0.1], [0.1, 0.3, 0.1]], [[0, 1, 2]])
    assert len(mesh_to_cloud(tri, 1.0)) == 1


def test_mesh_to_cloud_sphere_normals():
    c = mesh_to_cloud(make_icosphere(4), 0.1)
    radial = c.positions / np.linalg.norm(c.positions, axis=1, keepdims=True)
    ang = np.degrees(np.arccos(np.clip(np.sum(radial * c.normals, axis=1), -1, 1)))
    assert ang.max() < 6.0


def test_mesh_to_cloud_density_on_slivers():
    # one long sliver pair, as in coarse CAD exports
    m = TriangleMesh([[0, 0, 0], [20, 0, 0], [20, 0.5, 0], [0, 0.5, 0]], [[0, 1, 2], [0, 2, 3]])
    c = mesh_to_cloud(m, 0.5)
    assert len(c) >= 40
    assert np.ptp(c.positions[:, 0]) > 19.0


def test_mesh_to_cloud_zero_area():
    m = TriangleMesh([[0, 0, 0], [1, 0, 0], [2, 0, 0]], [[0, 1, 2]])
    with pytest.raises(MeshError):
        mesh_to_cloud(m, 0.1)


# -- diameter ---------------------------------------------------------------

def test_diameter_cube():
    assert object_diameter(make_box()) == pytest.approx(math.sqrt(3), abs=1e-12)


def test_diameter_two_points():
    assert object_diameter(np.array([[0, 0, 0], [7, 0, 0.0]])) == 7.0


def test_diameter_random_matches_brute_force():
    pts = np.random.default_rng(3).normal(size=(100, 3))
    assert object_diameter(pts) == pytest.approx(oracles.max_pairwise(pts), rel=1e-12)


def test_diameter_large_cloud_uses_hull():
    pts = np.random.default_rng(4).normal(size=(6000, 3))
    d = np.sqrt(max(np.sum((pts[i] - pts) ** 2, axis=1).max() for i in range(len(pts))))
    assert object_diameter(pts) == pytest.approx(d, rel=1e-12)


def test_diameter_needs_two_vertices():
    with pytest.raises(MeshError):
        object_diameter(np.zeros((1, 3)))


@given(st.integers(0, 2 ** 31))
def test_diameter_rigid_invariance(seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(50, 3))
    pose = Pose(random_rotations(rng, 1)[0], rng.normal(size=3) * 100)
    assert object_diameter(pose.apply(pts)) == pytest.approx(object_diameter(pts), rel=1e-9)


def test_bracket_shape():
    m = make_bracket()
    assert object_diameter(m) == pytest.approx(5.2, rel=1e-12)
    np.testing.assert_allclose(np.linalg.norm(m.vertex_normals, axis=1), 1.0, atol=1e-6)
    # closed surface: outward normals integrate to zero
    fn = np.cross(m.triangles[:, 1] - m.triangles[:, 0], m.triangles[:, 2] - m.triangles[:, 0])
    np.testing.assert_allclose(fn.sum(axis=0), 0.0, atol=1e-9)
