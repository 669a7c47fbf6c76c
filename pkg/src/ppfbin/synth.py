"""Synthetic bin scenes: heightmap drop placement, z-buffer rendering,
depth unprojection and depth noise."""

from __future__ import annotations

import json
import math
import re
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .mesh import PointCloud, TriangleMesh, mesh_to_cloud, object_diameter
from .transforms import Pose, random_rotations

__all__ = [
    "CameraIntrinsics", "DepthImage", "BinConfig", "SceneDataset", "RenderBuffers",
    "encode_depth", "decode_depth", "default_camera", "camera_extrinsic",
    "place_objects", "render_buffers", "render_depth", "unproject", "add_depth_noise",
    "synthesize_scene", "write_scene", "read_scene", "write_pfm", "read_pfm",
    "write_pgm", "read_pgm", "TruncationWarning",
]


class TruncationWarning(UserWarning):
    """An object was dropped because the pile reached the drop height."""


@dataclass(frozen=True)
class CameraIntrinsics:
    f: float
    width: int
    height: int
    d_near: float
    d_far: float

    def __post_init__(self):
        if not 0 < self.d_near < self.d_far:
            raise ValueError("need 0 < d_near < d_far")
        if self.width < 1 or self.height < 1:
            raise ValueError("image must be at least 1x1")
        if not self.f > 0:
            raise ValueError("focal length must be positive")

    @property
    def cx(self) -> float:
        return (self.width - 1) / 2.0

    @property
    def cy(self) -> float:
        return (self.height - 1) / 2.0


@dataclass(frozen=True)
class DepthImage:
    """Normalized z-buffer; ``zbuffer[v, u] == 1`` marks an empty pixel."""

    zbuffer: np.ndarray
    intrinsics: CameraIntrinsics

    def __post_init__(self):
        zb = np.asarray(self.zbuffer, dtype=np.float64)
        if zb.shape != (self.intrinsics.height, self.intrinsics.width):
            raise ValueError("z-buffer shape does not match intrinsics")
        if zb.size and (zb.min() < 0 or zb.max() > 1):
            raise ValueError("z-buffer values must lie in [0, 1]")
        object.__setattr__(self, "zbuffer", zb)

    @property
    def valid(self) -> np.ndarray:
        return self.zbuffer < 1.0

    def metric_depth(self) -> np.ndarray:
        """Camera-space z, NaN where empty."""
        z = decode_depth(self.zbuffer, self.intrinsics)
        return np.where(self.valid, z, np.nan)


@dataclass(frozen=True)
class BinConfig:
    bin_w: float = 60.0
    bin_h: float = 40.0
    bin_d: float = 30.0
    drop_height: float = 60.0
    camera_height: float = 100.0
    grid_nx: int = 7
    grid_ny: int = 5
    n_layers: int = 10

    def __post_init__(self):
        for name in ("bin_w", "bin_h", "bin_d", "drop_height", "camera_height"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.grid_nx < 1 or self.grid_ny < 1 or self.n_layers < 0:
            raise ValueError("grid must be at least 1x1 and n_layers >= 0")


@dataclass
class SceneDataset:
    depth: DepthImage
    intensity: np.ndarray | None
    ground_truth: list[tuple[int, Pose]]
    scene_cloud: PointCloud
    rng_seed: int
    noise_sigma: float
    meta: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# depth encoding

def encode_depth(z, cam: CameraIntrinsics) -> np.ndarray:
    """Metric camera z -> z-buffer value, clamped to [0, 1]."""
    z = np.asarray(z, dtype=np.float64)
    dn, df = cam.d_near, cam.d_far
    # same as (df / (dn - df)) * (dn / z - 1), but exact at both planes
    with np.errstate(divide="ignore", invalid="ignore"):
        b = df * (z - dn) / (z * (df - dn))
    return np.clip(np.nan_to_num(b, nan=1.0, posinf=1.0, neginf=1.0), 0.0, 1.0)


def decode_depth(b, cam: CameraIntrinsics) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    dn, df = cam.d_near, cam.d_far
    return dn * df / (df + b * (dn - df))


def default_camera(cfg: BinConfig, width: int = 1600, height: int = 900,
                   d_near: float = 10.0, d_far: float = 200.0,
                   coverage: float = 0.9) -> CameraIntrinsics:
    """Focal length chosen so the bin floor spans ``coverage`` of the image width."""
    f = coverage * (width / 2.0) * cfg.camera_height / (cfg.bin_w / 2.0)
    return CameraIntrinsics(f, width, height, d_near, d_far)


def camera_extrinsic(cfg: BinConfig) -> Pose:
    """Bin frame -> camera frame for a camera looking straight down at the bin centre.

    Camera axes: x along bin x, y along -bin y (image rows), z down.
    """
    r = np.diag([1.0, -1.0, -1.0])
    c = np.array([cfg.bin_w / 2.0, cfg.bin_h / 2.0, cfg.camera_height])
    return Pose(r, -r @ c)


# ---------------------------------------------------------------------------
# placement

def place_objects(mesh: TriangleMesh, cfg: BinConfig, seed: int, *,
                  cell_size: float | None = None, jitter: float = 0.5,
                  rotations=None) -> list[Pose]:
    """Drop ``grid_nx * grid_ny`` objects per layer onto a running heightmap.

    Each object gets a uniform random orientation and a jittered position in
    its grid cell, then is lowered until it touches the heightmap (the bin
    floor initially). Its footprint is splatted into the heightmap afterwards.
    ``rotations`` (one 3x3 per object, in drop order) overrides the sampled
    orientations; the random stream is consumed identically either way.
    Returned poses map object coordinates to the bin frame (floor at z=0).
    """
    diameter = object_diameter(mesh)
    cw, ch = cfg.bin_w / cfg.grid_nx, cfg.bin_h / cfg.grid_ny
    if diameter > 1.5 * min(cw, ch):
        raise ValueError(f"object diameter {diameter:.3g} too large for grid cell "
                         f"{cw:.3g} x {ch:.3g}")
    cell = cell_size if cell_size is not None else 0.05 * diameter
    nxh = max(1, int(math.ceil(cfg.bin_w / cell)))
    nyh = max(1, int(math.ceil(cfg.bin_h / cell)))
    heights = np.zeros((nxh, nyh))
    # vertices alone leave holes under large triangles
    footprint = np.vstack([mesh.vertices, mesh_to_cloud(mesh, cell).positions])

    rng = np.random.default_rng(seed)
    poses: list[Pose] = []
    k = 0
    n_truncated = 0
    for _layer in range(cfg.n_layers):
        for gy in range(cfg.grid_ny):
            for gx in range(cfg.grid_nx):
                r = random_rotations(rng, 1)[0]
                offset = rng.uniform(-0.5, 0.5, 2) * jitter * np.array([cw, ch])
                if rotations is not None:
                    r = np.asarray(rotations[k], dtype=np.float64)
                k += 1
                pts = footprint @ r.T
                lo, hi = pts[:, :2].min(axis=0), pts[:, :2].max(axis=0)
                centre = np.array([(gx + 0.5) * cw, (gy + 0.5) * ch]) + offset
                # bin walls
                centre = np.clip(centre, -lo, np.array([cfg.bin_w, cfg.bin_h]) - hi)
                xy = pts[:, :2] + centre
                ix = np.clip((xy[:, 0] / cell).astype(np.int64), 0, nxh - 1)
                iy = np.clip((xy[:, 1] / cell).astype(np.int64), 0, nyh - 1)
                z = float(np.max(heights[ix, iy] - pts[:, 2]))
                if z + pts[:, 2].max() > cfg.drop_height:
                    n_truncated += 1
                    continue
                np.maximum.at(heights, (ix, iy), pts[:, 2] + z)
                poses.append(Pose(r, np.array([centre[0], centre[1], z])))
    if n_truncated:
        warnings.warn(f"{n_truncated} object(s) exceeded the drop height and were skipped",
                      TruncationWarning, stacklevel=2)
    return poses


# ---------------------------------------------------------------------------
# rendering

@dataclass
class RenderBuffers:
    zbuffer: np.ndarray
    normals: np.ndarray  # camera-frame face normal per pixel
    labels: np.ndarray   # object id per pixel, -1 empty


def _clip_near(tri: np.ndarray, dn: float) -> list[np.ndarray]:
    """Clip one camera-space triangle against z >= dn; returns 0-2 triangles."""
    out = []
    n = len(tri)
    for i in range(n):
        a, b = tri[i], tri[(i + 1) % n]
        ina, inb = a[2] >= dn, b[2] >= dn
        if ina:
            out.append(a)
        if ina != inb:
            t = (dn - a[2]) / (b[2] - a[2])
            p = a + t * (b - a)
            p[2] = dn
            out.append(p)
    return [np.array([out[0], out[i], out[i + 1]]) for i in range(1, len(out) - 1)]


def _raster_batch(tris, tri_ids, cam, buf: RenderBuffers, face_n, labels,
                  max_pairs: int = 4_000_000):
    W, H = cam.width, cam.height
    dn, df = cam.d_near, cam.d_far
    z = tris[:, :, 2]
    sx = cam.f * tris[:, :, 0] / z + cam.cx
    sy = cam.f * tris[:, :, 1] / z + cam.cy
    i0 = np.clip(np.ceil(sx.min(axis=1)), 0, W).astype(np.int64)
    i1 = np.clip(np.floor(sx.max(axis=1)), -1, W - 1).astype(np.int64)
    j0 = np.clip(np.ceil(sy.min(axis=1)), 0, H).astype(np.int64)
    j1 = np.clip(np.floor(sy.max(axis=1)), -1, H - 1).astype(np.int64)
    nw = np.maximum(i1 - i0 + 1, 0)
    nh = np.maximum(j1 - j0 + 1, 0)
    counts = nw * nh
    area2 = (sx[:, 1] - sx[:, 0]) * (sy[:, 2] - sy[:, 0]) - (sy[:, 1] - sy[:, 0]) * (sx[:, 2] - sx[:, 0])
    ok = (counts > 0) & (np.abs(area2) > 1e-12)
    sel = np.flatnonzero(ok)
    if sel.size == 0:
        return
    # chunks bounded by pixel-pair count, kept in draw order
    csum = np.cumsum(counts[sel])
    start = 0
    while start < len(sel):
        base = csum[start - 1] if start else 0
        stop = max(int(np.searchsorted(csum, base + max_pairs, side="right")), start + 1)
        part = sel[start:stop]
        start = stop
        c = counts[part]
        t = np.repeat(part, c)
        local = np.arange(c.sum()) - np.repeat(np.cumsum(c) - c, c)
        px = i0[t] + local % nw[t]
        py = j0[t] + local // nw[t]
        ax, ay = sx[t, 0], sy[t, 0]
        bx, by = sx[t, 1], sy[t, 1]
        cx_, cy_ = sx[t, 2], sy[t, 2]
        a2 = area2[t]
        wa = ((bx - px) * (cy_ - py) - (by - py) * (cx_ - px)) / a2
        wb = ((cx_ - px) * (ay - py) - (cy_ - py) * (ax - px)) / a2
        wc = 1.0 - wa - wb
        inside = (wa >= 0) & (wb >= 0) & (wc >= 0)
        if not inside.any():
            continue
        t, px, py = t[inside], px[inside], py[inside]
        wa, wb, wc = wa[inside], wb[inside], wc[inside]
        # 1/z is affine in screen space for planar triangles
        inv_z = wa / z[t, 0] + wb / z[t, 1] + wc / z[t, 2]
        b = df * (1.0 - dn * inv_z) / (df - dn)
        # barycentric weights sum to 1 only up to rounding; keep the near plane at 0
        b = np.clip(np.where(np.abs(b) < 1e-12, 0.0, b), 0.0, 1.0)
        pix = py * W + px
        gid = tri_ids[t]
        order = np.lexsort((gid, b, pix))
        pix, b, t = pix[order], b[order], t[order]
        first = np.ones(len(pix), dtype=bool)
        first[1:] = pix[1:] != pix[:-1]
        pix, b, t = pix[first], b[first], t[first]
        zb = buf.zbuffer.reshape(-1)
        win = b < zb[pix]
        pix, b, t = pix[win], b[win], t[win]
        zb[pix] = b
        buf.normals.reshape(-1, 3)[pix] = face_n[t]
        buf.labels.reshape(-1)[pix] = labels[t]


def render_buffers(mesh: TriangleMesh, poses, cam: CameraIntrinsics,
                   labels=None, extra: list[tuple[np.ndarray, int]] | None = None) -> RenderBuffers:
    """Z-buffer every posed mesh instance (poses map object -> camera frame).

    Draw order is instance order, then face order; on equal depth the
    earlier primitive is kept. ``extra`` holds additional camera-frame
    triangle soups ``(tris, label)`` drawn after the instances.
    """
    buf = RenderBuffers(np.ones((cam.height, cam.width)),
                        np.zeros((cam.height, cam.width, 3)),
                        np.full((cam.height, cam.width), -1, dtype=np.int64))
    poses = list(poses)
    if labels is None:
        labels = list(range(len(poses)))
    soups = []
    if poses:
        if len(mesh.faces) == 0:
            raise ValueError("mesh has no faces")
        local = mesh.triangles
        for pose, lab in zip(poses, labels):
            soups.append((pose.apply(local.reshape(-1, 3)).reshape(-1, 3, 3), lab))
    for tris, lab in extra or []:
        soups.append((np.asarray(tris, dtype=np.float64).reshape(-1, 3, 3), lab))
    gid_base = 0
    for tris, lab in soups:
        nf = len(tris)
        e1 = tris[:, 1] - tris[:, 0]
        e2 = tris[:, 2] - tris[:, 0]
        fn = np.cross(e1, e2)
        fn /= np.maximum(np.linalg.norm(fn, axis=1, keepdims=True), 1e-300)
        behind = tris[:, :, 2] < cam.d_near
        keep = ~behind.any(axis=1)
        parts = [tris[keep]]
        ids = [gid_base + np.flatnonzero(keep)]
        fns = [fn[keep]]
        for f in np.flatnonzero(behind.any(axis=1) & ~behind.all(axis=1)):
            for piece in _clip_near(tris[f].copy(), cam.d_near):
                parts.append(piece[None])
                ids.append(np.array([gid_base + f]))
                fns.append(fn[f][None])
        all_tris = np.concatenate(parts)
        all_ids = np.concatenate(ids)
        order = np.argsort(all_ids, kind="stable")
        _raster_batch(all_tris[order], all_ids[order], cam, buf,
                      np.concatenate(fns)[order], np.full(len(all_ids), lab))
        gid_base += nf
    return buf


def _pixel_rays(cam: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    u = np.arange(cam.width) - cam.cx
    v = np.arange(cam.height) - cam.cy
    return np.meshgrid(u / cam.f, v / cam.f)


def render_depth(mesh: TriangleMesh, poses, cam: CameraIntrinsics) -> tuple[DepthImage, np.ndarray]:
    """Depth image and Lambertian intensity (light at the camera) of posed instances."""
    buf = render_buffers(mesh, poses, cam)
    return DepthImage(buf.zbuffer, cam), _shade(buf, cam)


def _shade(buf: RenderBuffers, cam: CameraIntrinsics) -> np.ndarray:
    rx, ry = _pixel_rays(cam)
    view = -np.stack([rx, ry, np.ones_like(rx)], axis=-1)
    view /= np.linalg.norm(view, axis=-1, keepdims=True)
    shade = np.clip(np.sum(buf.normals * view, axis=-1), 0.0, 1.0)
    return np.where(buf.zbuffer < 1.0, shade, 0.0)


def unproject(depth: DepthImage, max_depth_jump: float | None = None) -> PointCloud:
    """Back-project every non-empty pixel and estimate its normal.

    Normals come from central differences over the pixel grid and are
    turned to face the camera. Pixels on the image border or next to an
    empty pixel (or, with ``max_depth_jump``, next to a depth step larger
    than that) get no point.
    """
    cam = depth.intrinsics
    valid = depth.valid
    if not valid.any() or cam.width < 3 or cam.height < 3:
        return PointCloud.empty()
    z = decode_depth(depth.zbuffer, cam)
    rx, ry = _pixel_rays(cam)
    pts = np.stack([z * rx, z * ry, z], axis=-1)
    ok = np.zeros_like(valid)
    core = valid[1:-1, 1:-1] & valid[1:-1, 2:] & valid[1:-1, :-2] & valid[2:, 1:-1] & valid[:-2, 1:-1]
    if max_depth_jump is not None:
        zc = z[1:-1, 1:-1]
        for nb in (z[1:-1, 2:], z[1:-1, :-2], z[2:, 1:-1], z[:-2, 1:-1]):
            core &= np.abs(nb - zc) <= max_depth_jump
    ok[1:-1, 1:-1] = core
    tx = pts[1:-1, 2:] - pts[1:-1, :-2]
    ty = pts[2:, 1:-1] - pts[:-2, 1:-1]
    n = np.zeros_like(pts)
    n[1:-1, 1:-1] = np.cross(tx, ty)
    ln = np.linalg.norm(n, axis=-1)
    ok &= ln > 0
    p = pts[ok]
    n = n[ok] / ln[ok][:, None]
    flip = np.sum(n * p, axis=1) > 0
    n[flip] *= -1.0
    return PointCloud(p, n, 0.0)


def add_depth_noise(depth: DepthImage, sigma: float, seed: int) -> DepthImage:
    """Gaussian perturbation of the metric depth of every non-empty pixel."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return DepthImage(depth.zbuffer.copy(), depth.intrinsics)
    cam = depth.intrinsics
    noise = np.random.default_rng(seed).normal(0.0, sigma, depth.zbuffer.shape)
    valid = depth.valid
    z = decode_depth(depth.zbuffer, cam) + noise
    b = np.where(valid, encode_depth(z, cam), depth.zbuffer)
    return DepthImage(b, cam)


def _noise_seed(seed: int) -> int:
    return int(np.random.SeedSequence([int(seed), 0x6E6F6973]).generate_state(1)[0])


def synthesize_scene(mesh: TriangleMesh, cfg: BinConfig, cam: CameraIntrinsics,
                     sigma: float, seed: int, *, render_floor: bool = False,
                     max_depth_jump: float | None = None, **place_kw) -> SceneDataset:
    """Place, render, add noise and unproject one bin; poses in camera frame."""
    extrinsic = camera_extrinsic(cfg)
    bin_poses = place_objects(mesh, cfg, seed, **place_kw)
    cam_poses = [extrinsic @ p for p in bin_poses]
    extra = None
    if render_floor:
        w, h = cfg.bin_w, cfg.bin_h
        quad = np.array([[[0, 0, 0], [w, 0, 0], [w, h, 0]], [[0, 0, 0], [w, h, 0], [0, h, 0]]], float)
        extra = [(extrinsic.apply(quad.reshape(-1, 3)).reshape(-1, 3, 3), -2)]
    buf = render_buffers(mesh, cam_poses, cam, extra=extra)
    clean = DepthImage(buf.zbuffer, cam)
    intensity = _shade(buf, cam)
    noise_seed = _noise_seed(seed)
    noisy = add_depth_noise(clean, sigma, noise_seed)
    cloud = unproject(noisy, max_depth_jump=max_depth_jump)
    meta = {
        "seed": int(seed),
        "noise_seed": noise_seed,
        "noise_sigma": float(sigma),
        "bin": asdict(cfg),
        "diameter": object_diameter(mesh),
        "render_floor": bool(render_floor),
    }
    return SceneDataset(noisy, intensity, list(enumerate(cam_poses)), cloud, int(seed),
                        float(sigma), meta)


# ---------------------------------------------------------------------------
# file formats

def write_pfm(path, data: np.ndarray) -> None:
    """Single-channel little-endian PFM (rows stored bottom to top)."""
    data = np.asarray(data, dtype="<f4")
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(data[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        tag = fh.readline().strip()
        if tag != b"Pf":
            raise ValueError("only single-channel PFM supported")
        w, h = (int(x) for x in fh.readline().split())
        scale = float(fh.readline())
        dt = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(fh.read(4 * w * h), dtype=dt).reshape(h, w)
    return data[::-1].astype(np.float64)


def write_pgm(path, image: np.ndarray) -> None:
    img = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    # header: magic, width, height, maxval, then exactly one whitespace byte
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if m is None:
        raise ValueError("only binary PGM supported")
    w, h = int(m.group(1)), int(m.group(2))
    return np.frombuffer(data, dtype=np.uint8, count=w * h, offset=m.end()).reshape(h, w) / 255.0


def _pose_record(obj_id: int, pose: Pose) -> dict:
    return {"object_id": int(obj_id),
            "rotation": [float(x) for x in pose.rotation.reshape(-1)],
            "translation": [float(x) for x in pose.translation]}


def write_scene(scene: SceneDataset, directory, scene_id: str | None = None) -> Path:
    """Write depth.pfm (metric z, 0 = empty), intensity.pgm, ground_truth.json
    and scene.json into ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    cam = scene.depth.intrinsics
    z = np.where(scene.depth.valid, decode_depth(scene.depth.zbuffer, cam), 0.0)
    write_pfm(d / "depth.pfm", z)
    intensity = scene.intensity if scene.intensity is not None else np.zeros_like(z)
    write_pgm(d / "intensity.pgm", intensity)
    gt = [_pose_record(i, p) for i, p in scene.ground_truth]
    (d / "ground_truth.json").write_text(json.dumps(gt, indent=1) + "\n", encoding="utf-8")
    side = dict(scene.meta)
    side.update({
        "scene_id": scene_id if scene_id is not None else d.name,
        "intrinsics": asdict(cam),
        "principal_point": [cam.cx, cam.cy],
        "depth_encoding": {
            "file_values": "metric camera z, 0 for empty pixels",
            "zbuffer_to_z": "z = d_near*d_far / (d_far + b*(d_near - d_far))",
            "d_near": cam.d_near, "d_far": cam.d_far,
        },
        "seed": int(scene.rng_seed),
        "noise_sigma": float(scene.noise_sigma),
    })
    (d / "scene.json").write_text(json.dumps(side, indent=1, sort_keys=True) + "\n",
                                  encoding="utf-8")
    return d


def read_pose_records(records) -> list[tuple[int, Pose]]:
    return [(int(r["object_id"]), Pose(np.reshape(r["rotation"], (3, 3)), r["translation"]))
            for r in records]


def read_scene(directory, max_depth_jump: float | None = None) -> SceneDataset:
    d = Path(directory)
    side = json.loads((d / "scene.json").read_text(encoding="utf-8"))
    cam = CameraIntrinsics(**side["intrinsics"])
    z = read_pfm(d / "depth.pfm")
    b = np.where(z > 0, encode_depth(np.where(z > 0, z, 1.0), cam), 1.0)
    depth = DepthImage(b, cam)
    intensity = read_pgm(d / "intensity.pgm") if (d / "intensity.pgm").exists() else None
    gt_path = d / "ground_truth.json"
    gt = read_pose_records(json.loads(gt_path.read_text(encoding="utf-8"))) if gt_path.exists() else []
    cloud = unproject(depth, max_depth_jump=max_depth_jump)
    return SceneDataset(depth, intensity, gt, cloud, int(side.get("seed", 0)),
                        float(side.get("noise_sigma", 0.0)), side)
