"""Geometry kernel: triangle meshes, oriented point clouds, OBJ/PLY loading,
normals, uniform surface sampling and voxel-grid subsampling."""

from __future__ import annotations

import os
import struct
import warnings
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np
from scipy.spatial import ConvexHull

from .transforms import Pose

__all__ = [
    "MeshError", "TriangleMesh", "OrientedPoint", "PointCloud",
    "load_mesh", "save_obj", "compute_vertex_normals", "voxel_subsample",
    "mesh_to_cloud", "object_diameter", "transform_mesh",
    "make_box", "make_icosphere", "make_prism", "make_bracket",
]


class MeshError(ValueError):
    """Malformed or unusable mesh input."""


class OrientedPoint(NamedTuple):
    position: np.ndarray
    normal: np.ndarray


@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray
    vertex_normals: np.ndarray | None = None
    # vertices that received the +z fallback normal (no incident face)
    normal_fallback: np.ndarray | None = None
    n_degenerate: int = 0

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise MeshError("face index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        if self.vertex_normals is not None:
            n = np.asarray(self.vertex_normals, dtype=np.float64).reshape(-1, 3)
            object.__setattr__(self, "vertex_normals", n)

    @property
    def triangles(self) -> np.ndarray:
        """(F, 3, 3) corner coordinates."""
        return self.vertices[self.faces]

    def face_areas(self) -> np.ndarray:
        t = self.triangles
        return 0.5 * np.linalg.norm(np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0]), axis=1)

    def face_normals(self) -> np.ndarray:
        t = self.triangles
        n = np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0])
        ln = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.where(ln > 0, ln, 1.0)


@dataclass(frozen=True)
class PointCloud:
    """Oriented points stored as parallel (N, 3) position and normal arrays."""

    positions: np.ndarray
    normals: np.ndarray
    sampling_resolution: float = 0.0

    def __post_init__(self):
        p = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        if p.shape != n.shape:
            raise ValueError("positions and normals must have the same shape")
        object.__setattr__(self, "positions", p)
        object.__setattr__(self, "normals", n)

    def __len__(self) -> int:
        return len(self.positions)

    def __getitem__(self, i: int) -> OrientedPoint:
        return OrientedPoint(self.positions[i], self.normals[i])

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)))

    @classmethod
    def from_points(cls, points, sampling_resolution: float = 0.0) -> "PointCloud":
        points = list(points)
        if not points:
            return cls.empty()
        return cls(np.array([p.position for p in points]),
                   np.array([p.normal for p in points]), sampling_resolution)

    def subset(self, idx) -> "PointCloud":
        return PointCloud(self.positions[idx], self.normals[idx], self.sampling_resolution)

    def transformed(self, pose: Pose) -> "PointCloud":
        return PointCloud(pose.apply(self.positions), pose.apply_normals(self.normals),
                          self.sampling_resolution)


# ---------------------------------------------------------------------------
# loading / saving

def load_mesh(path: str | os.PathLike) -> TriangleMesh:
    """Read an OBJ or PLY (ascii / binary) file into a triangle mesh.

    Polygons are fan-triangulated and zero-area faces are dropped; the
    number dropped is kept in ``n_degenerate`` and reported as a warning.
    """
    path = os.fspath(path)
    ext = os.path.splitext(path)[1].lower()
    with open(path, "rb") as fh:
        data = fh.read()
    if ext == ".obj":
        vertices, faces, normals = _parse_obj(data.decode("utf-8", errors="replace"))
    elif ext == ".ply":
        vertices, faces, normals = _parse_ply(data)
    else:
        raise MeshError(f"unsupported mesh format: {ext!r}")
    return _finish_mesh(vertices, faces, normals)


def _finish_mesh(vertices, faces, normals) -> TriangleMesh:
    vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if len(faces) == 0:
        raise MeshError("mesh has no faces")
    if faces.min() < 0 or faces.max() >= len(vertices):
        raise MeshError("face index out of range")
    mesh = TriangleMesh(vertices, faces)
    area = mesh.face_areas()
    extent = np.ptp(vertices, axis=0).max() if len(vertices) else 0.0
    keep = area > 1e-14 * max(extent, 1e-300) ** 2
    n_bad = int((~keep).sum())
    if n_bad:
        warnings.warn(f"dropped {n_bad} degenerate face(s)", stacklevel=3)
    if not keep.any():
        raise MeshError("mesh has no non-degenerate faces")
    if normals is not None:
        normals = np.asarray(normals, dtype=np.float64)
        ln = np.linalg.norm(normals, axis=1, keepdims=True)
        normals = np.where(ln > 0, normals / np.where(ln > 0, ln, 1.0), [0.0, 0.0, 1.0])
    return TriangleMesh(vertices, faces[keep], normals, n_degenerate=n_bad)


def _obj_index(token: str, n: int) -> int:
    i = int(token)
    return i - 1 if i > 0 else n + i


def _parse_obj(text: str):
    vertices, normals, faces, face_nrm = [], [], [], []
    for lineno, line in enumerate(text.splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        try:
            if parts[0] == "v":
                vertices.append([float(x) for x in parts[1:4]])
                if len(vertices[-1]) != 3:
                    raise ValueError
            elif parts[0] == "vn":
                normals.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                vi, ni = [], []
                for tok in parts[1:]:
                    fields = tok.split("/")
                    vi.append(_obj_index(fields[0], len(vertices)))
                    has_n = len(fields) >= 3 and fields[2] != ""
                    ni.append(_obj_index(fields[2], len(normals)) if has_n else None)
                if len(vi) < 3:
                    raise ValueError
                for k in range(1, len(vi) - 1):
                    faces.append((vi[0], vi[k], vi[k + 1]))
                    face_nrm.append((ni[0], ni[k], ni[k + 1]))
        except (ValueError, IndexError):
            raise MeshError(f"malformed OBJ record at line {lineno}: {line!r}") from None
    vertex_normals = None
    if normals and face_nrm and all(n is not None for f in face_nrm for n in f):
        # only usable when every vertex maps to a single normal record
        mapping: dict[int, int] = {}
        consistent = True
        for fv, fn in zip(faces, face_nrm):
            for v, n in zip(fv, fn):
                if mapping.setdefault(v, n) != n:
                    consistent = False
        if consistent and len(mapping) == len(vertices):
            nrm = np.asarray(normals, dtype=np.float64)
            vertex_normals = nrm[[mapping[i] for i in range(len(vertices))]]
    return vertices, faces, vertex_normals


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _parse_ply(data: bytes):
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise MeshError("not a PLY file")
    body_start = data.index(b"\n", end) + 1
    header = data[:end].decode("ascii", errors="replace").splitlines()
    fmt = None
    elements: list[tuple[str, int, list]] = []
    for line in header:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise MeshError("PLY property before element")
            try:
                if parts[1] == "list":
                    elements[-1][2].append((parts[4], _PLY_TYPES[parts[2]], _PLY_TYPES[parts[3]]))
                else:
                    elements[-1][2].append((parts[2], _PLY_TYPES[parts[1]], None))
            except (KeyError, IndexError):
                raise MeshError(f"bad PLY property: {line!r}") from None
    if fmt not in ("ascii", "binary_little_endian", "binary_big_endian"):
        raise MeshError(f"unsupported PLY format {fmt!r}")

    tables: dict[str, dict[str, list | np.ndarray]] = {}
    if fmt == "ascii":
        tokens = data[body_start:].split()
        pos = 0
        for name, count, props in elements:
            cols: dict[str, list] = {p[0]: [] for p in props}
            for _ in range(count):
                for pname, ptype, itype in props:
                    if itype is None:
                        cols[pname].append(float(tokens[pos]))
                        pos += 1
                    else:
                        k = int(tokens[pos])
                        cols[pname].append([int(float(t)) for t in tokens[pos + 1:pos + 1 + k]])
                        pos += 1 + k
            tables[name] = cols
    else:
        bo = "<" if fmt == "binary_little_endian" else ">"
        buf = memoryview(data)[body_start:]
        pos = 0
        for name, count, props in elements:
            if all(p[2] is None for p in props):
                dt = np.dtype([(p[0], bo + p[1]) for p in props])
                arr = np.frombuffer(buf, dtype=dt, count=count, offset=pos)
                pos += dt.itemsize * count
                tables[name] = {p[0]: arr[p[0]] for p in props}
                continue
            cols = {p[0]: [] for p in props}
            for _ in range(count):
                for pname, ptype, itype in props:
                    if itype is None:
                        (val,) = struct.unpack_from(bo + np.dtype(ptype).char, buf, pos)
                        pos += np.dtype(ptype).itemsize
                        cols[pname].append(val)
                    else:
                        (k,) = struct.unpack_from(bo + np.dtype(ptype).char, buf, pos)
                        pos += np.dtype(ptype).itemsize
                        isz = np.dtype(itype).itemsize
                        vals = struct.unpack_from(bo + np.dtype(itype).char * k, buf, pos)
                        pos += isz * k
                        cols[pname].append(list(vals))
            tables[name] = cols
    try:
        vt = tables["vertex"]
        vertices = np.column_stack([np.asarray(vt[c], dtype=np.float64) for c in "xyz"])
        normals = None
        if all(c in vt for c in ("nx", "ny", "nz")):
            normals = np.column_stack([np.asarray(vt[c], dtype=np.float64)
                                       for c in ("nx", "ny", "nz")])
        ft = tables["face"]
        key = "vertex_indices" if "vertex_indices" in ft else "vertex_index"
        polys = ft[key]
    except KeyError as exc:
        raise MeshError(f"PLY missing element/property {exc}") from None
    faces = [(p[0], p[k], p[k + 1]) for p in polys for k in range(1, len(p) - 1)]
    return vertices, faces, normals


def save_obj(mesh: TriangleMesh, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="ascii") as fh:
        for v in mesh.vertices:
            fh.write(f"v {float(v[0])!r} {float(v[1])!r} {float(v[2])!r}\n")
        for f in mesh.faces + 1:
            fh.write(f"f {f[0]} {f[1]} {f[2]}\n")


# ---------------------------------------------------------------------------
# normals, sampling, subsampling

def compute_vertex_normals(mesh: TriangleMesh) -> TriangleMesh:
    """Area-weighted vertex normals following face winding.

    Vertices without an incident face get +z and are flagged in
    ``normal_fallback``.
    """
    if len(mesh.faces) == 0:
        raise MeshError("mesh has no faces")
    t = mesh.triangles
    # cross product magnitude is twice the area, so the sum is area-weighted
    fn = np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0])
    acc = np.zeros_like(mesh.vertices)
    for k in range(3):
        np.add.at(acc, mesh.faces[:, k], fn)
    ln = np.linalg.norm(acc, axis=1)
    fallback = ln <= 1e-300
    normals = acc / np.where(fallback, 1.0, ln)[:, None]
    normals[fallback] = (0.0, 0.0, 1.0)
    return replace(mesh, vertex_normals=normals, normal_fallback=fallback)


def voxel_subsample(cloud: PointCloud, tau: float) -> PointCloud:
    """Keep one point per occupied cell of an origin-anchored voxel grid.

    Each representative sits at the centroid of its cell's members and
    carries their normalized mean normal. Output is sorted by voxel index.
    """
    if not tau > 0:
        raise ValueError("tau must be positive")
    if len(cloud) == 0:
        return PointCloud(np.zeros((0, 3)), np.zeros((0, 3)), tau)
    pos, nrm = cloud.positions, cloud.normals
    cells = np.floor(pos / tau).astype(np.int64)
    _, inv, counts = np.unique(cells, axis=0, return_inverse=True, return_counts=True)
    inv = inv.reshape(-1)
    k = len(counts)
    centroid = np.column_stack([np.bincount(inv, pos[:, d], k) for d in range(3)]) / counts[:, None]
    nsum = np.column_stack([np.bincount(inv, nrm[:, d], k) for d in range(3)])
    ln = np.linalg.norm(nsum, axis=1)
    bad = ln < 1e-9
    normals = nsum / np.where(bad, 1.0, ln)[:, None]
    for c in np.flatnonzero(bad):
        members = np.flatnonzero(inv == c)
        d = np.linalg.norm(pos[members] - centroid[c], axis=1)
        normals[c] = nrm[members[np.argmin(d)]]
    return PointCloud(centroid, normals, tau)


def _subdivision_weights(k: int) -> np.ndarray:
    """Barycentric centroids of the k*k congruent sub-triangles."""
    w = []
    for i in range(k):
        for j in range(k - i):
            w.append(((3 * i + 1) / (3 * k), (3 * j + 1) / (3 * k)))
            if i + j <= k - 2:
                w.append(((3 * i + 2) / (3 * k), (3 * j + 2) / (3 * k)))
    w = np.asarray(w)
    return np.column_stack([1.0 - w.sum(axis=1), w[:, 0], w[:, 1]])


def mesh_to_cloud(mesh: TriangleMesh, tau: float) -> PointCloud:
    """Uniform oriented samples of the mesh surface, voxel-subsampled at tau.

    Every triangle is split into k*k congruent pieces with k chosen so that
    piece edges are at most tau/2, which keeps the sampling dense even for
    long sliver triangles typical of CAD exports.
    """
    if mesh.vertex_normals is None:
        mesh = compute_vertex_normals(mesh)
    area = mesh.face_areas()
    if area.sum() <= 0:
        raise MeshError("mesh has zero surface area")
    tri = mesh.triangles
    tri_n = mesh.vertex_normals[mesh.faces]
    edges = np.linalg.norm(tri - np.roll(tri, 1, axis=1), axis=2).max(axis=1)
    ks = np.maximum(1, np.ceil(edges / (0.5 * tau))).astype(np.int64)
    pts, nrms = [], []
    for k in np.unique(ks):
        sel = np.flatnonzero(ks == k)
        w = _subdivision_weights(int(k))
        pts.append(np.einsum("sc,fcd->fsd", w, tri[sel]).reshape(-1, 3))
        nrms.append(np.einsum("sc,fcd->fsd", w, tri_n[sel]).reshape(-1, 3))
    pts = np.concatenate(pts)
    nrms = np.concatenate(nrms)
    ln = np.linalg.norm(nrms, axis=1, keepdims=True)
    nrms = nrms / np.where(ln > 0, ln, 1.0)
    return voxel_subsample(PointCloud(pts, nrms), tau)


def object_diameter(mesh_or_points) -> float:
    """Largest distance between two vertices."""
    pts = mesh_or_points.vertices if isinstance(mesh_or_points, TriangleMesh) else mesh_or_points
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    if len(pts) < 2:
        raise MeshError("need at least two vertices")
    pts = np.unique(pts, axis=0)
    if len(pts) > 5000:
        try:
            pts = pts[ConvexHull(pts).vertices]
        except Exception:  # flat or degenerate input, fall back to brute force
            pass
    best = 0.0
    for s in range(0, len(pts), 1024):
        d = np.sum((pts[s:s + 1024, None, :] - pts[None, :, :]) ** 2, axis=2)
        best = max(best, float(d.max()))
    return float(np.sqrt(best))


def transform_mesh(mesh: TriangleMesh, pose: Pose) -> TriangleMesh:
    normals = None if mesh.vertex_normals is None else pose.apply_normals(mesh.vertex_normals)
    return replace(mesh, vertices=pose.apply(mesh.vertices), vertex_normals=normals)


# ---------------------------------------------------------------------------
# procedural shapes

def make_box(size=(1.0, 1.0, 1.0), center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    """Closed box with 8 shared vertices and outward winding."""
    s = np.asarray(size, dtype=np.float64) / 2.0
    c = np.asarray(center, dtype=np.float64)
    corners = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], dtype=float)
    faces = [
        (0, 1, 3), (0, 3, 2),  # -x
        (4, 6, 7), (4, 7, 5),  # +x
        (0, 4, 5), (0, 5, 1),  # -y
        (2, 3, 7), (2, 7, 6),  # +y
        (0, 2, 6), (0, 6, 4),  # -z
        (1, 5, 7), (1, 7, 3),  # +z
    ]
    return TriangleMesh(corners * s + c, np.asarray(faces))


def make_icosphere(subdivisions: int = 3, radius: float = 1.0) -> TriangleMesh:
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
             (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    verts = [np.array(v, dtype=float) / np.linalg.norm(v) for v in verts]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
             (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
             (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return TriangleMesh(np.array(verts) * radius, np.array(faces))


def _ear_clip(poly: np.ndarray) -> list[tuple[int, int, int]]:
    """Triangulate a simple counter-clockwise polygon."""
    idx = list(range(len(poly)))
    tris = []

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    guard = 0
    while len(idx) > 3 and guard < 10000:
        guard += 1
        for k in range(len(idx)):
            i0, i1, i2 = idx[k - 1], idx[k], idx[(k + 1) % len(idx)]
            a, b, c = poly[i0], poly[i1], poly[i2]
            if cross(a, b, c) <= 0:
                continue
            if any(cross(a, b, poly[j]) >= 0 and cross(b, c, poly[j]) >= 0
                   and cross(c, a, poly[j]) >= 0 for j in idx if j not in (i0, i1, i2)):
                continue
            tris.append((i0, i1, i2))
            idx.pop(k)
            break
        else:
            raise MeshError("polygon is not simple")
    tris.append(tuple(idx))
    return tris


def make_prism(polygon, thickness: float) -> TriangleMesh:
    """Extrude a counter-clockwise 2-D polygon along z, centred on z=0.

    Every planar face gets its own vertices so the vertex normals stay
    exact face normals (flat shading).
    """
    poly = np.asarray(polygon, dtype=np.float64)
    n = len(poly)
    h = thickness / 2.0
    verts, faces = [], []
    cap = _ear_clip(poly)
    base = 0
    for z, flip in ((h, False), (-h, True)):
        verts += [(x, y, z) for x, y in poly]
        for a, b, c in cap:
            faces.append((base + a, base + c, base + b) if flip else (base + a, base + b, base + c))
        base += n
    for i in range(n):
        p, q = poly[i], poly[(i + 1) % n]
        verts += [(p[0], p[1], -h), (q[0], q[1], -h), (q[0], q[1], h), (p[0], p[1], h)]
        faces += [(base, base + 1, base + 2), (base, base + 2, base + 3)]
        base += 4
    return TriangleMesh(np.asarray(verts), np.asarray(faces))


BRACKET_OUTLINE = ((0.0, 0.0), (4.0, 0.0), (4.0, 0.9), (1.6, 1.5), (1.3, 3.0), (0.0, 3.0))


def make_bracket(diameter: float = 5.2) -> TriangleMesh:
    """Asymmetric L-shaped test part, centred on its bounding box and scaled
    to the requested diameter. Has no proper rotational symmetry."""
    mesh = make_prism(BRACKET_OUTLINE, 1.0)
    v = mesh.vertices - (mesh.vertices.min(axis=0) + mesh.vertices.max(axis=0)) / 2.0
    v *= diameter / object_diameter(v)
    return compute_vertex_normals(TriangleMesh(v, mesh.faces))
