"""Point pair features, their quantization, and the hashed object model."""

from __future__ import annotations

import json
import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from typing import NamedTuple

import numpy as np

from .mesh import OrientedPoint, PointCloud

__all__ = [
    "PPF", "QuantizedKey", "DetectorParams", "PPFModel",
    "vector_angle", "compute_ppf", "ppf_arrays", "quantize", "quantize_arrays",
    "pack_keys", "unpack_key", "canonical_rotations", "local_alpha",
    "local_alpha_arrays", "build_model", "save_model", "load_model",
    "dump_model_json", "ModelFormatError",
]

MODEL_MAGIC = b"PPFM"
MODEL_VERSION = 1
_HEADER = struct.Struct("<4sIIIdddI")


class ModelFormatError(ValueError):
    pass


class PPF(NamedTuple):
    dist: float
    angle_n1_d: float
    angle_n2_d: float
    angle_n1_n2: float


class QuantizedKey(NamedTuple):
    d_bin: int
    a1_bin: int
    a2_bin: int
    a3_bin: int


@dataclass(frozen=True)
class DetectorParams:
    """Model and detection settings.

    ``DetectorParams.for_diameter(d)`` gives the standard set: 30 angle
    steps, 20 distance steps up to the object diameter, a subsampling
    resolution of 5% of the diameter, 20% reference points, clustering
    within 0.75 and 20 degrees, five hypotheses excluded at 1.1 diameters.
    """

    n_angle_steps: int = 30
    n_dist_steps: int = 20
    d_max: float = 5.2
    tau: float = 0.26
    ref_fraction: float = 0.20
    cluster_dist: float = 0.75
    cluster_angle: float = math.radians(20.0)
    n_hypotheses: int = 5
    exclusion_radius: float = 1.1 * 5.2
    n_alpha_steps: int = 30
    peak_fraction: float = 0.9
    smoothing: bool = True
    up_axis: tuple[float, float, float] = (0.0, 0.0, -1.0)
    random_reference: bool = False
    reference_seed: int = 0

    def __post_init__(self):
        for name in ("n_angle_steps", "n_dist_steps", "d_max", "tau", "ref_fraction",
                     "cluster_dist", "cluster_angle", "n_hypotheses", "exclusion_radius",
                     "n_alpha_steps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.ref_fraction > 1:
            raise ValueError("ref_fraction must be <= 1")
        if self.n_angle_steps > 255 or self.n_dist_steps > 255:
            raise ValueError("at most 255 bins per feature dimension")

    @classmethod
    def for_diameter(cls, diameter: float, **overrides) -> "DetectorParams":
        base = dict(d_max=diameter, tau=0.05 * diameter, exclusion_radius=1.1 * diameter)
        base.update(overrides)
        return cls(**base)

    def replace(self, **changes) -> "DetectorParams":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["up_axis"] = list(self.up_axis)
        return d


# ---------------------------------------------------------------------------
# features

def vector_angle(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Angle between vectors along the last axis, via atan2 (stable near 0 and pi)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.arctan2(np.linalg.norm(np.cross(a, b), axis=-1), np.sum(a * b, axis=-1))


def ppf_arrays(p1, n1, p2, n2) -> np.ndarray:
    """Vectorized features; returns (..., 4) with columns dist, a(n1,d), a(n2,d), a(n1,n2)."""
    d = np.asarray(p2, dtype=np.float64) - np.asarray(p1, dtype=np.float64)
    out = np.empty(np.broadcast(d, n1, n2).shape[:-1] + (4,))
    out[..., 0] = np.linalg.norm(d, axis=-1)
    out[..., 1] = vector_angle(n1, d)
    out[..., 2] = vector_angle(n2, d)
    out[..., 3] = vector_angle(n1, n2)
    return out


def compute_ppf(p1: OrientedPoint, p2: OrientedPoint) -> PPF:
    if np.array_equal(np.asarray(p1.position), np.asarray(p2.position)):
        raise ValueError("coincident points have no pair feature")
    return PPF(*(float(x) for x in ppf_arrays(p1.position, p1.normal, p2.position, p2.normal)))


def quantize_arrays(features: np.ndarray, params: DetectorParams) -> np.ndarray:
    f = np.asarray(features, dtype=np.float64)
    out = np.empty(f.shape, dtype=np.int64)
    out[..., 0] = np.minimum(np.floor(f[..., 0] / (params.d_max / params.n_dist_steps)),
                             params.n_dist_steps - 1)
    step = math.pi / params.n_angle_steps
    out[..., 1:] = np.minimum(np.floor(f[..., 1:] / step), params.n_angle_steps - 1)
    return out


def quantize(f: PPF, params: DetectorParams) -> QuantizedKey:
    return QuantizedKey(*(int(x) for x in quantize_arrays(np.asarray(f), params)))


def pack_keys(q: np.ndarray) -> np.ndarray:
    """(..., 4) bins -> uint32 keys, 8 bits per field: d<<24 | a1<<16 | a2<<8 | a3."""
    q = np.asarray(q, dtype=np.uint32)
    return (q[..., 0] << 24) | (q[..., 1] << 16) | (q[..., 2] << 8) | q[..., 3]


def unpack_key(key: int) -> QuantizedKey:
    key = int(key)
    return QuantizedKey((key >> 24) & 0xFF, (key >> 16) & 0xFF, (key >> 8) & 0xFF, key & 0xFF)


# ---------------------------------------------------------------------------
# local coordinates

def canonical_rotations(normals: np.ndarray) -> np.ndarray:
    """Minimal rotations taking each unit normal onto +x; (N, 3) -> (N, 3, 3)."""
    n = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
    n = n / np.linalg.norm(n, axis=1, keepdims=True)
    # axis = n x e_x = (0, n_z, -n_y); angle from cos = n_x
    c = n[:, 0]
    ky, kz = n[:, 2], -n[:, 1]
    out = np.zeros((len(n), 3, 3))
    flipped = c < -1.0 + 1e-12
    # Rodrigues with the (1 - c) / s^2 = 1 / (1 + c) simplification
    h = np.where(flipped, 0.0, 1.0 / np.where(flipped, 1.0, 1.0 + c))
    out[:, 0, 0] = c
    out[:, 0, 1] = -kz
    out[:, 0, 2] = ky
    out[:, 1, 0] = kz
    out[:, 1, 1] = c + h * ky * ky
    out[:, 1, 2] = h * ky * kz
    out[:, 2, 0] = -ky
    out[:, 2, 1] = h * ky * kz
    out[:, 2, 2] = c + h * kz * kz
    # n == -x: half turn about z
    out[flipped] = np.diag([-1.0, -1.0, 1.0])
    return out


def _wrap(angle: np.ndarray) -> np.ndarray:
    """Wrap to (-pi, pi]."""
    a = np.mod(np.asarray(angle) + np.pi, 2.0 * np.pi) - np.pi
    return np.where(a <= -np.pi, a + 2.0 * np.pi, a)


def local_alpha_arrays(ref_pos, ref_nrm, other_pos, ref_rot=None) -> np.ndarray:
    """Rotation about +x that brings the other point into the y >= 0, z = 0
    half-plane after the reference frame change; result in (-pi, pi]."""
    ref_pos = np.asarray(ref_pos, dtype=np.float64)
    other_pos = np.asarray(other_pos, dtype=np.float64)
    if ref_rot is None:
        shape = np.broadcast(ref_pos, other_pos, np.asarray(ref_nrm)).shape
        ref_rot = canonical_rotations(np.broadcast_to(ref_nrm, shape).reshape(-1, 3))
        ref_rot = ref_rot.reshape(shape[:-1] + (3, 3))
    local = np.einsum("...ij,...j->...i", ref_rot, other_pos - ref_pos)
    y, z = local[..., 1], local[..., 2]
    alpha = np.arctan2(-z, y)
    alpha = np.where(alpha <= -np.pi, np.pi, alpha)
    return np.where((y == 0.0) & (z == 0.0), 0.0, alpha) + 0.0


def local_alpha(reference: OrientedPoint, other: OrientedPoint) -> float:
    return float(local_alpha_arrays(reference.position, reference.normal, other.position))


# ---------------------------------------------------------------------------
# model

@dataclass(frozen=True)
class PPFModel:
    """Hashed pair-feature table in CSR layout.

    ``keys`` is sorted and unique; entries of ``keys[k]`` are
    ``entry_index[offsets[k]:offsets[k+1]]`` (model point) and the matching
    ``entry_alpha`` slice, in insertion order.
    """

    keys: np.ndarray
    offsets: np.ndarray
    entry_index: np.ndarray
    entry_alpha: np.ndarray
    model_cloud: PointCloud
    diameter: float
    params: DetectorParams

    @property
    def n_entries(self) -> int:
        return len(self.entry_index)

    def lookup(self, key) -> list[tuple[int, float]]:
        if not isinstance(key, (int, np.integer)):
            key = int(pack_keys(np.asarray(key)))
        k = np.searchsorted(self.keys, key)
        if k >= len(self.keys) or self.keys[k] != key:
            return []
        s, e = self.offsets[k], self.offsets[k + 1]
        return list(zip(self.entry_index[s:e].tolist(), self.entry_alpha[s:e].tolist()))

    @property
    def table(self) -> dict[QuantizedKey, list[tuple[int, float]]]:
        out = {}
        for k, key in enumerate(self.keys.tolist()):
            s, e = self.offsets[k], self.offsets[k + 1]
            out[unpack_key(key)] = list(zip(self.entry_index[s:e].tolist(),
                                            self.entry_alpha[s:e].tolist()))
        return out


def _pair_block(pos, nrm, rot, rows, params):
    """Features for reference rows against every other point, i-major order."""
    n = len(pos)
    i = np.repeat(rows, n)
    j = np.tile(np.arange(n), len(rows))
    keep = i != j
    i, j = i[keep], j[keep]
    f = ppf_arrays(pos[i], nrm[i], pos[j], nrm[j])
    keep = (f[:, 0] <= params.d_max) & (f[:, 0] > 0)
    i, j, f = i[keep], j[keep], f[keep]
    keys = pack_keys(quantize_arrays(f, params))
    alpha = local_alpha_arrays(pos[i], None, pos[j], ref_rot=rot[i])
    return keys, i.astype(np.int32), alpha


def build_model(cloud: PointCloud, params: DetectorParams, diameter: float | None = None,
                workers: int = 1, chunk: int = 64) -> PPFModel:
    """Hash every ordered pair of model points within ``d_max``."""
    n = len(cloud)
    if n < 2:
        raise ValueError("model cloud needs at least two points")
    pos, nrm = cloud.positions, cloud.normals
    rot = canonical_rotations(nrm)
    blocks = [np.arange(s, min(s + chunk, n)) for s in range(0, n, chunk)]
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            parts = list(ex.map(lambda r: _pair_block(pos, nrm, rot, r, params), blocks))
    else:
        parts = [_pair_block(pos, nrm, rot, r, params) for r in blocks]
    keys = np.concatenate([p[0] for p in parts])
    idx = np.concatenate([p[1] for p in parts])
    alpha = np.concatenate([p[2] for p in parts])
    order = np.argsort(keys, kind="stable")
    keys, idx, alpha = keys[order], idx[order], alpha[order]
    ukeys, starts = np.unique(keys, return_index=True)
    offsets = np.append(starts, len(keys)).astype(np.int64)
    if diameter is None:
        diameter = params.d_max
    return PPFModel(ukeys.astype(np.uint32), offsets, idx, alpha, cloud, float(diameter), params)


def save_model(model: PPFModel, path: str | os.PathLike) -> None:
    p = model.params
    cloud = model.model_cloud
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MODEL_MAGIC, MODEL_VERSION, p.n_angle_steps, p.n_dist_steps,
                              p.d_max, p.tau, model.diameter, len(cloud)))
        fh.write(np.ascontiguousarray(np.hstack([cloud.positions, cloud.normals]),
                                      dtype="<f8").tobytes())
        fh.write(struct.pack("<I", len(model.keys)))
        entry = np.dtype([("index", "<i4"), ("alpha", "<f8")])
        for k, key in enumerate(model.keys.tolist()):
            s, e = model.offsets[k], model.offsets[k + 1]
            fh.write(struct.pack("<II", key, e - s))
            rec = np.empty(e - s, dtype=entry)
            rec["index"] = model.entry_index[s:e]
            rec["alpha"] = model.entry_alpha[s:e]
            fh.write(rec.tobytes())


def load_model(path: str | os.PathLike, params: DetectorParams | None = None) -> PPFModel:
    """Read a model file. Quantization settings always come from the header;
    other detector settings from ``params`` or the diameter defaults."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _HEADER.size:
        raise ModelFormatError("truncated model file")
    magic, version, n_ang, n_dist, d_max, tau, diameter, n_pts = _HEADER.unpack_from(data, 0)
    if magic != MODEL_MAGIC:
        raise ModelFormatError("not a PPF model file")
    if version != MODEL_VERSION:
        raise ModelFormatError(f"model version {version} unsupported (expected {MODEL_VERSION})")
    try:
        off = _HEADER.size
        pts = np.frombuffer(data, dtype="<f8", count=6 * n_pts, offset=off).reshape(n_pts, 6)
        off += 48 * n_pts
        (n_keys,) = struct.unpack_from("<I", data, off)
        off += 4
        entry = np.dtype([("index", "<i4"), ("alpha", "<f8")])
        keys = np.empty(n_keys, dtype=np.uint32)
        counts = np.empty(n_keys, dtype=np.int64)
        chunks = []
        for k in range(n_keys):
            keys[k], counts[k] = struct.unpack_from("<II", data, off)
            off += 8
            chunks.append(np.frombuffer(data, dtype=entry, count=int(counts[k]), offset=off))
            off += entry.itemsize * int(counts[k])
    except (struct.error, ValueError):
        raise ModelFormatError("truncated or corrupt model file") from None
    if off != len(data):
        raise ModelFormatError("trailing bytes after model table")
    rec = np.concatenate(chunks) if chunks else np.empty(0, dtype=entry)
    offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    if params is None:
        params = DetectorParams.for_diameter(diameter)
    params = params.replace(n_angle_steps=n_ang, n_dist_steps=n_dist, d_max=d_max, tau=tau)
    cloud = PointCloud(pts[:, :3].copy(), pts[:, 3:].copy(), tau)
    return PPFModel(keys, offsets, rec["index"].astype(np.int32), rec["alpha"].astype(np.float64),
                    cloud, float(diameter), params)


def dump_model_json(model: PPFModel, path: str | os.PathLike) -> None:
    """Human-readable dump for debugging; not read back."""
    doc = {
        "version": MODEL_VERSION,
        "diameter": model.diameter,
        "params": model.params.to_dict(),
        "points": np.hstack([model.model_cloud.positions, model.model_cloud.normals]).tolist(),
        "table": [
            {"key": list(unpack_key(key)),
             "entries": [[int(i), float(a)] for i, a in zip(
                 model.entry_index[model.offsets[k]:model.offsets[k + 1]],
                 model.entry_alpha[model.offsets[k]:model.offsets[k + 1]])]}
            for k, key in enumerate(model.keys.tolist())
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
