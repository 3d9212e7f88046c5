"""Rigid-body math: Hamilton quaternions, poses, pinhole projection, mesh measures.

Vectors are plain ``numpy`` arrays of shape ``(3,)`` (or ``(N, 3)`` for batches).
Quaternions are stored as ``(w, x, y, z)`` with the canonical sign ``w >= 0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import pdist

from .errors import BehindCameraError, InvalidArgumentError

Vec3 = np.ndarray


def _canonical(arr: np.ndarray) -> np.ndarray:
    # q and -q are the same rotation; pick the one whose first nonzero entry is positive
    for c in arr:
        if c > 0:
            return arr
        if c < 0:
            return -arr
    return arr


@dataclass(frozen=True)
class UnitQuaternion:
    w: float = 1.0
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0

    def __post_init__(self):
        arr = np.array([self.w, self.x, self.y, self.z], dtype=float)
        if not np.all(np.isfinite(arr)):
            raise InvalidArgumentError("quaternion components must be finite")
        n = np.linalg.norm(arr)
        if n == 0.0:
            raise InvalidArgumentError("zero quaternion cannot be normalized")
        arr = _canonical(arr / n)
        for name, v in zip("wxyz", arr):
            object.__setattr__(self, name, float(v))

    @classmethod
    def identity(cls) -> "UnitQuaternion":
        return cls(1.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_array(cls, arr) -> "UnitQuaternion":
        w, x, y, z = (float(c) for c in arr)
        return cls(w, x, y, z)

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z])

    def matrix(self) -> np.ndarray:
        return quat_to_matrix(self.as_array())


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """3x3 rotation matrix of a unit quaternion array ``(w, x, y, z)``."""
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product of two raw 4-vectors."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def rotate_points(q: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Rotate an ``(N, 3)`` (or ``(3,)``) array by the unit quaternion array ``q``.

    Uses ``v' = v + 2w (u x v) + 2 u x (u x v)``, the expansion of ``q v q*``.
    """
    w = q[0]
    u = np.asarray(q[1:], dtype=float)
    pts = np.asarray(pts, dtype=float)
    uv = np.cross(u, pts)
    return pts + 2.0 * w * uv + 2.0 * np.cross(u, uv)


def quat_rotate(q: UnitQuaternion, v) -> np.ndarray:
    return rotate_points(q.as_array(), np.asarray(v, dtype=float))


def quat_conjugate(q: UnitQuaternion) -> UnitQuaternion:
    return UnitQuaternion(q.w, -q.x, -q.y, -q.z)


def quat_compose(a: UnitQuaternion, b: UnitQuaternion) -> UnitQuaternion:
    """Rotation ``a * b``: applies ``b`` first, then ``a``."""
    return UnitQuaternion.from_array(quat_mul(a.as_array(), b.as_array()))


def quat_from_axis_angle(axis, angle: float) -> UnitQuaternion:
    axis = np.asarray(axis, dtype=float)
    n = np.linalg.norm(axis)
    if n == 0.0 or not np.isfinite(n):
        raise InvalidArgumentError("rotation axis must be nonzero and finite")
    axis = axis / n
    s = math.sin(angle / 2.0)
    return UnitQuaternion(math.cos(angle / 2.0), *(axis * s))


def quat_normalize(raw) -> UnitQuaternion:
    raw = np.asarray(raw, dtype=float)
    if raw.shape != (4,):
        raise InvalidArgumentError(f"expected a 4-vector, got shape {raw.shape}")
    return UnitQuaternion.from_array(raw)


def quat_angle(q: UnitQuaternion) -> float:
    """Rotation angle of ``q`` in ``[0, pi]``."""
    return quat_angle_between(UnitQuaternion.identity(), q)


def quat_angle_between(a: UnitQuaternion, b: UnitQuaternion) -> float:
    """Angle in ``[0, pi]`` of the relative rotation ``a * b^-1``."""
    rel = quat_mul(a.as_array(), quat_conjugate(b).as_array())
    # atan2 form stays accurate near 0, unlike acos(|dot|)
    s = np.linalg.norm(rel[1:])
    c = abs(rel[0])
    return float(2.0 * math.atan2(s, c))


def quat_from_matrix(R: np.ndarray) -> UnitQuaternion:
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return UnitQuaternion.from_array(q)


@dataclass(frozen=True)
class Pose:
    """Object-to-camera rigid transform ``x -> R x + t`` (meters)."""

    rotation: UnitQuaternion = field(default_factory=UnitQuaternion.identity)
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        t = np.array(self.translation, dtype=float).reshape(3)
        if not np.all(np.isfinite(t)):
            raise InvalidArgumentError("translation must be finite")
        t.setflags(write=False)
        object.__setattr__(self, "translation", t)

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return self.rotation == other.rotation and np.array_equal(self.translation, other.translation)

    def __hash__(self):
        return hash((self.rotation, tuple(self.translation)))

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    def transform(self, pts) -> np.ndarray:
        return rotate_points(self.rotation.as_array(), pts) + self.translation

    def to_dict(self) -> dict:
        return {"q": list(self.rotation.as_array()), "t": list(self.translation)}

    @classmethod
    def from_dict(cls, d: dict) -> "Pose":
        return cls(UnitQuaternion.from_array(d["q"]), np.asarray(d["t"], dtype=float))


def apply_update(pose: Pose, update: Pose) -> Pose:
    """Compose a correction: ``R* = R_upd * R``, ``t* = t + t_upd``."""
    return Pose(
        quat_compose(update.rotation, pose.rotation),
        pose.translation + update.translation,
    )


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidArgumentError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise InvalidArgumentError("image size must be at least 1x1")


def project(p, K: CameraIntrinsics) -> np.ndarray:
    """Pinhole projection of a point ``(3,)`` or batch ``(N, 3)`` to pixel ``(u, v)``.

    Pixel ``(i, j)`` has its center at integer coordinates ``u=i, v=j``.
    Results outside the image are returned unchanged.
    """
    p = np.asarray(p, dtype=float)
    z = p[..., 2]
    bad = np.flatnonzero(np.atleast_1d(z) <= 0)
    if bad.size:
        idx = int(bad[0]) if p.ndim > 1 else None
        raise BehindCameraError(f"point behind camera (z={np.atleast_1d(z)[bad[0]]:.6g})", idx)
    u = K.fx * p[..., 0] / z + K.cx
    v = K.fy * p[..., 1] / z + K.cy
    return np.stack([u, v], axis=-1)


def backproject(u, v, depth, K: CameraIntrinsics) -> np.ndarray:
    """Inverse of :func:`project` given the metric depth (camera z) of the pixel."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    depth = np.asarray(depth, dtype=float)
    if np.any(depth <= 0):
        raise InvalidArgumentError("depth must be positive")
    x = (u - K.cx) * depth / K.fx
    y = (v - K.cy) * depth / K.fy
    return np.stack(np.broadcast_arrays(x, y, depth), axis=-1)


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray  # (N, 3) float, object frame, meters
    triangles: np.ndarray  # (M, 3) int

    def __post_init__(self):
        verts = np.array(self.vertices, dtype=float).reshape(-1, 3)
        tris = np.array(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(tris) < 1:
            raise InvalidArgumentError("mesh needs at least one triangle")
        if tris.min() < 0 or tris.max() >= len(verts):
            raise InvalidArgumentError("triangle index out of range")
        if not np.all(np.isfinite(verts)):
            raise InvalidArgumentError("vertices must be finite")
        verts.setflags(write=False)
        tris.setflags(write=False)
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "triangles", tris)


def mesh_diameter(mesh: TriangleMesh) -> float:
    """Maximum pairwise vertex distance (brute force over all pairs)."""
    if len(mesh.vertices) < 2:
        raise InvalidArgumentError("diameter needs at least two vertices")
    return float(pdist(mesh.vertices).max())
