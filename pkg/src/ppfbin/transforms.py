"""Rigid transforms and rotation helpers shared by the synthesis, detection and
evaluation code."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation


@dataclass(frozen=True)
class Pose:
    """Rigid transform ``x -> rotation @ x + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def __matmul__(self, other: "Pose") -> "Pose":
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def apply_normals(self, normals: np.ndarray) -> np.ndarray:
        return np.asarray(normals, dtype=np.float64) @ self.rotation.T

    def is_valid(self, tol: float = 1e-9) -> bool:
        r = self.rotation
        return (np.allclose(r @ r.T, np.eye(3), atol=tol)
                and abs(np.linalg.det(r) - 1.0) <= tol)


def rotation_angle(r: np.ndarray) -> float | np.ndarray:
    """Angle of a rotation matrix (or stack of them), in [0, pi]."""
    r = np.asarray(r, dtype=np.float64)
    tr = np.trace(r, axis1=-2, axis2=-1)
    return np.arccos(np.clip((tr - 1.0) / 2.0, -1.0, 1.0))


def axis_angle_matrix(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    return Rotation.from_rotvec(axis / np.linalg.norm(axis) * angle).as_matrix()


def rot_x(angles) -> np.ndarray:
    """Rotation(s) about +x; returns (..., 3, 3)."""
    a = np.asarray(angles, dtype=np.float64)
    c, s = np.cos(a), np.sin(a)
    out = np.zeros(a.shape + (3, 3))
    out[..., 0, 0] = 1.0
    out[..., 1, 1] = c
    out[..., 1, 2] = -s
    out[..., 2, 1] = s
    out[..., 2, 2] = c
    return out


def random_rotations(rng: np.random.Generator, n: int) -> np.ndarray:
    """Uniform samples over SO(3) from normalized Gaussian quaternions."""
    q = rng.standard_normal((n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return quat_to_matrix(q)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Quaternions as (w, x, y, z) rows -> rotation matrices."""
    q = np.asarray(q, dtype=np.float64)
    return Rotation.from_quat(q[..., [1, 2, 3, 0]]).as_matrix()


def matrix_to_quat(r: np.ndarray) -> np.ndarray:
    """Rotation matrices -> unit quaternions as (w, x, y, z), w >= 0."""
    q = Rotation.from_matrix(np.asarray(r, dtype=np.float64)).as_quat()
    q = q[..., [3, 0, 1, 2]]
    return np.where(q[..., :1] < 0, -q, q)


def weighted_quaternion_mean(quats: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Weighted mean of (w, x, y, z) quaternions, sign-aligned to the first one.

    Adequate for tight clusters; members are flipped into the hemisphere of
    ``quats[0]`` before averaging.
    """
    quats = np.asarray(quats, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    signs = np.where(quats @ quats[0] < 0, -1.0, 1.0)
    mean = (weights * signs) @ quats
    return mean / np.linalg.norm(mean)
