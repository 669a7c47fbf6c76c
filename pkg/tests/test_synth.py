import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

import oracles
from ppfbin.mesh import TriangleMesh, make_box, object_diameter, transform_mesh
from ppfbin.synth import (BinConfig, CameraIntrinsics, DepthImage, TruncationWarning,
                          add_depth_noise, camera_extrinsic, decode_depth, default_camera,
                          encode_depth, place_objects, read_pfm, read_pgm, read_scene,
                          render_buffers, render_depth, synthesize_scene, unproject,
                          write_pfm, write_pgm, write_scene)
from ppfbin.transforms import Pose, axis_angle_matrix

CAM = CameraIntrinsics(f=200.0, width=64, height=48, d_near=10.0, d_far=200.0)
SMALL_BIN = BinConfig(n_layers=1)


def _quad(z, half=30.0, xy=(0.0, 0.0)):
    """Two camera-facing triangles forming a square at depth z."""
    x, y = xy
    a, b = [x - half, y - half, z], [x + half, y - half, z]
    c, d = [x + half, y + half, z], [x - half, y + half, z]
    return np.array([[a, c, b], [a, d, c]], dtype=np.float64)


def _soup_mesh(tris):
    tris = np.asarray(tris).reshape(-1, 3, 3)
    return TriangleMesh(tris.reshape(-1, 3), np.arange(len(tris) * 3).reshape(-1, 3))


# -- depth encoding -------------------------------------------------------------

def test_decode_endpoints_exact():
    assert decode_depth(0.0, CAM) == CAM.d_near
    assert decode_depth(1.0, CAM) == CAM.d_far


def test_encode_endpoints():
    assert encode_depth(CAM.d_near, CAM) == 0.0
    assert encode_depth(CAM.d_far, CAM) == 1.0
    assert encode_depth(1.0, CAM) == 0.0     # clamped in front of the near plane
    assert encode_depth(1e4, CAM) == 1.0


@given(st.floats(10.0, 200.0))
def test_encode_decode_roundtrip(z):
    assert decode_depth(encode_depth(z, CAM), CAM) == pytest.approx(z, rel=1e-9)


def test_camera_validation():
    with pytest.raises(ValueError):
        CameraIntrinsics(100.0, 10, 10, 5.0, 5.0)
    with pytest.raises(ValueError):
        CameraIntrinsics(100.0, 0, 10, 1.0, 5.0)
    with pytest.raises(ValueError):
        DepthImage(np.full((2, 2), 1.5), CameraIntrinsics(1.0, 2, 2, 1.0, 2.0))


def test_default_camera_covers_bin():
    cfg = BinConfig()
    cam = default_camera(cfg)
    assert (cam.width, cam.height) == (1600, 900)
    assert cam.f == pytest.approx(2400.0)
    # bin edge at floor depth lands at 90% of the half width
    assert cam.f * (cfg.bin_w / 2) / cfg.camera_height == pytest.approx(0.9 * 800)


def test_camera_extrinsic_maps_bin_centre_to_axis():
    cfg = BinConfig()
    ext = camera_extrinsic(cfg)
    np.testing.assert_allclose(ext.apply([[30, 20, 0]]), [[0, 0, 100]])
    np.testing.assert_allclose(ext.apply([[30, 20, 10]]), [[0, 0, 90]])
    assert ext.is_valid()


# -- rendering ------------------------------------------------------------------

def test_render_near_plane_gives_zero():
    depth, _ = render_depth(_soup_mesh(_quad(CAM.d_near, half=3.0)), [Pose.identity()], CAM)
    covered = depth.zbuffer < 1
    assert covered.sum() > 100
    assert np.all(depth.zbuffer[covered] == 0.0)


def test_render_far_plane_gives_one():
    buf = render_buffers(_soup_mesh(_quad(CAM.d_far, half=60.0)), [Pose.identity()], CAM)
    assert np.all(buf.zbuffer == 1.0)


def test_render_z_test_either_order():
    near = _quad(50.0, half=10.0, xy=(-3.0, 0.0))
    far = _quad(80.0, half=16.0, xy=(3.0, 0.0))
    for order in ([near, far], [far, near]):
        mesh = _soup_mesh(np.concatenate(order))
        depth, _ = render_depth(mesh, [Pose.identity()], CAM)
        z = depth.metric_depth()
        both = (np.abs(z - 50.0) < 1e-6)
        assert both.sum() > 0
        # the centre pixel is covered by both squares
        assert z[CAM.height // 2, CAM.width // 2] == pytest.approx(50.0, rel=1e-12)
        assert np.nanmax(z) == pytest.approx(80.0, rel=1e-12)


def test_render_ties_go_to_lower_object_id():
    quad = _soup_mesh(_quad(40.0, half=5.0))
    buf = render_buffers(quad, [Pose.identity(), Pose.identity()], CAM, labels=[7, 3])
    covered = buf.zbuffer < 1
    assert np.all(buf.labels[covered] == 7)


def test_render_clips_near_plane():
    tri = np.array([[[-5.0, -5.0, 5.0], [5.0, -5.0, 30.0], [0.0, 5.0, 30.0]]])
    buf = render_buffers(_soup_mesh(tri), [Pose.identity()], CAM)
    z = decode_depth(buf.zbuffer[buf.zbuffer < 1], CAM)
    assert z.size > 0
    assert z.min() >= CAM.d_near - 1e-9
    behind = np.array([[[-5.0, -5.0, 5.0], [5.0, -5.0, 5.0], [0.0, 5.0, 5.0]]])
    assert np.all(render_buffers(_soup_mesh(behind), [Pose.identity()], CAM).zbuffer == 1)


def test_render_intensity_lambertian():
    depth, inten = render_depth(_soup_mesh(_quad(50.0, half=4.0)), [Pose.identity()], CAM)
    covered = depth.valid
    assert inten[~covered].max() == 0.0
    # a camera-facing plane is lit by the cosine of the ray angle
    assert inten[covered].max() == pytest.approx(1.0, abs=1e-3)
    assert inten[covered].min() > 0.9


def test_plane_roundtrip():
    n = np.array([0.3, -0.2, -1.0])
    n /= np.linalg.norm(n)
    p0 = np.array([0.0, 0.0, 60.0])
    u = np.cross(n, [1.0, 0, 0])
    u /= np.linalg.norm(u)
    v = np.cross(n, u)
    corners = [p0 + 40 * (a * u + b * v) for a, b in ((-1, -1), (1, -1), (1, 1), (-1, 1))]
    tris = np.array([[corners[0], corners[1], corners[2]], [corners[0], corners[2], corners[3]]])
    depth, _ = render_depth(_soup_mesh(tris), [Pose.identity()], CAM)
    cloud = unproject(depth)
    assert len(cloud) > 1000
    dist = np.abs((cloud.positions - p0) @ n)
    assert dist.max() < 1e-4 * cloud.positions[:, 2].mean()
    facing = n if n[2] < 0 else -n
    ang = np.degrees(np.arccos(np.clip(cloud.normals @ facing, -1, 1)))
    assert ang.max() < 2.0


# -- unprojection -------------------------------------------------------------

def test_unproject_centre_pixel_at_near_plane():
    cam = CameraIntrinsics(100.0, 3, 3, 10.0, 200.0)
    cloud = unproject(DepthImage(np.zeros((3, 3)), cam))
    assert len(cloud) == 1
    np.testing.assert_allclose(cloud.positions[0], [0, 0, 10.0])
    np.testing.assert_allclose(cloud.normals[0], [0, 0, -1.0])


def test_unproject_empty():
    assert len(unproject(DepthImage(np.ones((CAM.height, CAM.width)), CAM))) == 0


def test_unproject_drops_border_and_hole_neighbours():
    zb = np.full((5, 5), 0.5)
    zb[2, 3] = 1.0
    cloud = unproject(DepthImage(zb, CameraIntrinsics(10.0, 5, 5, 1.0, 10.0)))
    # interior 3x3 minus the hole and its three interior 4-neighbours
    assert len(cloud) == 9 - 4


def test_unproject_depth_jump_guard():
    zb = np.full((6, 6), encode_depth(20.0, CAM))
    zb[:, 3:] = encode_depth(40.0, CAM)
    cam = CameraIntrinsics(CAM.f, 6, 6, CAM.d_near, CAM.d_far)
    assert len(unproject(DepthImage(zb, cam))) == 16
    assert len(unproject(DepthImage(zb, cam), max_depth_jump=1.0)) == 8


# -- noise --------------------------------------------------------------------

def test_noise_zero_is_identity():
    depth, _ = render_depth(_soup_mesh(_quad(50.0, half=10.0)), [Pose.identity()], CAM)
    out = add_depth_noise(depth, 0.0, seed=1)
    np.testing.assert_array_equal(out.zbuffer, depth.zbuffer)
    assert out.zbuffer is not depth.zbuffer


def test_noise_statistics():
    cam = CameraIntrinsics(300.0, 400, 300, 10.0, 200.0)
    zb = np.full((300, 400), encode_depth(100.0, cam))
    noisy = add_depth_noise(DepthImage(zb, cam), 0.26, seed=5)
    resid = decode_depth(noisy.zbuffer, cam) - 100.0
    assert resid.size >= 1e5
    assert abs(resid.std() - 0.26) < 0.05 * 0.26
    assert abs(resid.mean()) < 0.01


def test_noise_leaves_empty_pixels():
    zb = np.ones((10, 10))
    zb[3:6, 3:6] = 0.5
    cam = CameraIntrinsics(10.0, 10, 10, 1.0, 10.0)
    out = add_depth_noise(DepthImage(zb, cam), 0.3, seed=2)
    assert np.all(out.zbuffer[zb == 1] == 1)
    assert np.all(out.zbuffer[zb < 1] != 0.5)
    assert np.all((out.zbuffer >= 0) & (out.zbuffer <= 1))


def test_noise_single_pixel_reproducible():
    cam = CameraIntrinsics(1.0, 1, 1, 1.0, 10.0)
    d = DepthImage(np.array([[0.4]]), cam)
    a = add_depth_noise(d, 0.1, seed=9).zbuffer
    b = add_depth_noise(d, 0.1, seed=9).zbuffer
    assert a.tobytes() == b.tobytes()
    assert a[0, 0] != 0.4


def test_noise_rejects_negative_sigma():
    with pytest.raises(ValueError):
        add_depth_noise(DepthImage(np.ones((1, 1)), CameraIntrinsics(1.0, 1, 1, 1.0, 2.0)), -1, 0)


# -- placement ----------------------------------------------------------------

ONE_CELL = BinConfig(bin_w=10, bin_h=10, bin_d=10, drop_height=20, camera_height=50,
                     grid_nx=1, grid_ny=1, n_layers=1)


def test_cube_rests_on_floor():
    cube = make_box((2.0, 2.0, 2.0))
    poses = place_objects(cube, ONE_CELL, seed=0, rotations=[np.eye(3)])
    assert len(poses) == 1
    assert poses[0].translation[2] == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_array_equal(poses[0].rotation, np.eye(3))


def test_stacking_in_one_cell():
    cube = make_box((2.0, 2.0, 2.0))
    cfg = BinConfig(**{**ONE_CELL.__dict__, "n_layers": 2})
    p1, p2 = place_objects(cube, cfg, seed=0, rotations=[np.eye(3)] * 2, jitter=0.0)
    top_first = transform_mesh(cube, p1).vertices[:, 2].max()
    assert transform_mesh(cube, p2).vertices[:, 2].min() >= top_first - 1e-9


def test_rotation_override_keeps_random_stream(bracket):
    cfg = BinConfig(n_layers=1)
    free = place_objects(bracket, cfg, seed=4)
    forced = place_objects(bracket, cfg, seed=4, rotations=[p.rotation for p in free])
    for a, b in zip(free, forced):
        np.testing.assert_array_equal(a.translation, b.translation)


def test_full_bin_holds_350(bracket):
    poses = place_objects(bracket, BinConfig(), seed=0)
    assert len(poses) == 350


@given(st.integers(0, 2 ** 31))
def test_placement_invariants(seed):
    from ppfbin.mesh import make_bracket
    mesh = make_bracket()
    cfg = BinConfig(n_layers=2)
    d = object_diameter(mesh)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", TruncationWarning)
        poses = place_objects(mesh, cfg, seed)
    assert len(poses) <= 70
    for p in poses:
        assert p.is_valid()
        v = transform_mesh(mesh, p).vertices
        assert v[:, 2].min() >= -1e-6
        assert np.all(v[:, 0] >= -d) and np.all(v[:, 0] <= cfg.bin_w + d)
        assert np.all(v[:, 1] >= -d) and np.all(v[:, 1] <= cfg.bin_h + d)
        assert v[:, 2].max() <= cfg.drop_height + 1e-9


def test_placement_deterministic(bracket):
    a = place_objects(bracket, SMALL_BIN, seed=11)
    b = place_objects(bracket, SMALL_BIN, seed=11)
    c = place_objects(bracket, SMALL_BIN, seed=12)
    assert all(np.array_equal(x.as_matrix(), y.as_matrix()) for x, y in zip(a, b))
    assert not np.array_equal(a[0].as_matrix(), c[0].as_matrix())


def test_object_too_large():
    with pytest.raises(ValueError, match="too large"):
        place_objects(make_box((20.0, 20.0, 20.0)), BinConfig(), seed=0)


def test_truncation_warning():
    cube = make_box((4.0, 4.0, 4.0))
    cfg = BinConfig(bin_w=5, bin_h=5, bin_d=5, drop_height=10, camera_height=50,
                    grid_nx=1, grid_ny=1, n_layers=4)
    with pytest.warns(TruncationWarning, match="2 object"):
        poses = place_objects(cube, cfg, seed=0, rotations=[np.eye(3)] * 4, jitter=0.0)
    assert len(poses) == 2


def test_bin_config_validation():
    with pytest.raises(ValueError):
        BinConfig(bin_w=0)
    with pytest.raises(ValueError):
        BinConfig(n_layers=-1)


# -- whole scenes -------------------------------------------------------------

def test_empty_bin_scene(bracket):
    cfg = BinConfig(n_layers=0)
    s = synthesize_scene(bracket, cfg, default_camera(cfg, 160, 90), 0.0, seed=1)
    assert s.ground_truth == []
    assert len(s.scene_cloud) == 0


def test_single_object_points_on_surface(bracket):
    cfg = BinConfig(grid_nx=1, grid_ny=1, n_layers=1, bin_w=8, bin_h=8)
    cam = default_camera(cfg, 320, 320)
    s = synthesize_scene(bracket, cfg, cam, 0.0, seed=3)
    (oid, pose), = s.ground_truth
    pts = s.scene_cloud.positions
    assert len(pts) > 500
    footprint = pts[:, 2] / cam.f
    dist = oracles.point_triangle_distance(pts, transform_mesh(bracket, pose).triangles)
    assert np.all(dist <= 1.5 * footprint)
    # points lie on the surface itself, up to rounding
    assert dist.max() < 1e-6 * pts[:, 2].mean()


def test_scene_invariants(bracket):
    cfg = SMALL_BIN
    cam = default_camera(cfg, 400, 225)
    s = synthesize_scene(bracket, cfg, cam, 0.05, seed=8)
    p, n = s.scene_cloud.positions, s.scene_cloud.normals
    assert len(s.ground_truth) == 35
    # normals face the camera at the origin
    assert np.all(np.sum(n * -p, axis=1) > 0)
    # inside the frustum
    assert np.all((p[:, 2] >= cam.d_near) & (p[:, 2] <= cam.d_far))
    u = cam.f * p[:, 0] / p[:, 2] + cam.cx
    v = cam.f * p[:, 1] / p[:, 2] + cam.cy
    assert np.all((u > -0.5) & (u < cam.width - 0.5) & (v > -0.5) & (v < cam.height - 0.5))
    assert all(g.is_valid() for _, g in s.ground_truth)
    assert s.meta["seed"] == 8 and s.noise_sigma == 0.05


def test_scene_determinism(bracket):
    cam = default_camera(SMALL_BIN, 400, 225)
    a = synthesize_scene(bracket, SMALL_BIN, cam, 0.1, seed=2)
    b = synthesize_scene(bracket, SMALL_BIN, cam, 0.1, seed=2)
    assert a.depth.zbuffer.tobytes() == b.depth.zbuffer.tobytes()
    assert a.scene_cloud.positions.tobytes() == b.scene_cloud.positions.tobytes()


def test_floor_rendering(bracket):
    cam = default_camera(SMALL_BIN, 200, 120)
    with_floor = synthesize_scene(bracket, SMALL_BIN, cam, 0.0, seed=2, render_floor=True)
    without = synthesize_scene(bracket, SMALL_BIN, cam, 0.0, seed=2)
    assert with_floor.depth.valid.sum() > without.depth.valid.sum()
    assert with_floor.depth.metric_depth()[60, 100] <= 100.0 + 1e-9


def test_thirty_bin_dataset(bracket):
    cfg = BinConfig()
    cam = default_camera(cfg)
    for seed in range(30):
        s = synthesize_scene(bracket, cfg, cam, 0.0, seed=seed)
        assert s.depth.zbuffer.shape == (900, 1600)
        assert len(s.ground_truth) == 350
        assert len(s.scene_cloud) > 100_000


# -- files --------------------------------------------------------------------

def test_pfm_roundtrip(tmp_path, rng):
    a = rng.uniform(0, 100, (7, 5))
    write_pfm(tmp_path / "a.pfm", a)
    np.testing.assert_array_equal(read_pfm(tmp_path / "a.pfm"), a.astype(np.float32))
    head = (tmp_path / "a.pfm").read_bytes()[:14]
    assert head == b"Pf\n5 7\n-1.0\n" + head[12:]


def test_pgm_roundtrip_with_whitespace_bytes(tmp_path):
    img = np.array([[9, 10, 32], [13, 0, 255]]) / 255.0
    write_pgm(tmp_path / "i.pgm", img)
    np.testing.assert_allclose(read_pgm(tmp_path / "i.pgm"), img)


def test_scene_files_roundtrip(tmp_path, bracket):
    cam = default_camera(SMALL_BIN, 320, 180)
    s = synthesize_scene(bracket, SMALL_BIN, cam, 0.0, seed=6)
    d = write_scene(s, tmp_path / "scene", scene_id="demo")
    assert sorted(p.name for p in d.iterdir()) == ["depth.pfm", "ground_truth.json",
                                                   "intensity.pgm", "scene.json"]
    side = json.loads((d / "scene.json").read_text())
    assert side["scene_id"] == "demo"
    assert side["seed"] == 6 and "noise_seed" in side
    assert side["intrinsics"]["f"] == cam.f
    gt = json.loads((d / "ground_truth.json").read_text())
    assert set(gt[0]) == {"object_id", "rotation", "translation"}
    assert len(gt[0]["rotation"]) == 9
    back = read_scene(d)
    assert len(back.ground_truth) == len(s.ground_truth)
    np.testing.assert_allclose(back.ground_truth[4][1].as_matrix(), s.ground_truth[4][1].as_matrix())
    # depth is stored as float32 metric z
    assert np.array_equal(back.depth.valid, s.depth.valid)
    z0 = s.depth.metric_depth()[s.depth.valid]
    z1 = back.depth.metric_depth()[back.depth.valid]
    np.testing.assert_allclose(z1, z0, rtol=1e-6)
    assert len(back.scene_cloud) == len(s.scene_cloud)


def test_rotation_helper_sanity():
    r = axis_angle_matrix([0, 0, 1], math.pi / 2)
    np.testing.assert_allclose(r @ [1, 0, 0], [0, 1, 0], atol=1e-15)
