"""Contour-alignment energies and their analytic gradients.

All gradients are taken with respect to the 7 raw update parameters
``(qw, qx, qy, qz, tx, ty, tz)``. The quaternion enters every loss through
``q / |q|``, so its gradient lies in the tangent of the 4-sphere at ``q``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCameraError, InvalidArgumentError
from .geometry import CameraIntrinsics, Pose, UnitQuaternion, rotate_points
from .raster import ContourPointSet, DistanceField, sample_distance

_CONJ = np.array([1.0, -1.0, -1.0, -1.0])


@dataclass
class UpdateParams:
    """Update ``(q_delta, t_delta)``; ``raw_q`` is the unnormalized 4-vector."""

    raw_q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.raw_q = np.array(self.raw_q, dtype=float).reshape(4)
        self.t = np.array(self.t, dtype=float).reshape(3)
        if not np.any(self.raw_q):
            raise InvalidArgumentError("zero quaternion")

    @classmethod
    def identity(cls) -> "UpdateParams":
        return cls()

    @classmethod
    def from_pose(cls, pose: Pose) -> "UpdateParams":
        return cls(pose.rotation.as_array(), pose.translation)

    @property
    def q_delta(self) -> UnitQuaternion:
        return UnitQuaternion.from_array(self.raw_q)

    @property
    def unit_q(self) -> np.ndarray:
        # normalized but not sign-canonicalized, so gradients stay continuous
        return self.raw_q / np.linalg.norm(self.raw_q)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.raw_q, self.t])

    @classmethod
    def from_vector(cls, x) -> "UpdateParams":
        return cls(x[:4], x[4:])

    def to_pose(self) -> Pose:
        return Pose(self.q_delta, self.t)


@dataclass
class LossEval:
    value: float
    gradient: np.ndarray  # (7,)
    residuals: np.ndarray  # (n,) pixels
    jacobian: np.ndarray | None = None  # (n, 7) per-residual gradient rows

    @property
    def mean(self) -> float:
        return self.value / len(self.residuals) if len(self.residuals) else 0.0


def _rotation_jac_rows(q: np.ndarray, v: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Rows ``g_i^T d(q v_i q*)/dq`` for the quadratic form of the rotation.

    ``q`` is treated as a free 4-vector in ``q v q*``; the caller projects
    onto the sphere tangent. With ``q = (w, u)``:
    ``q v q* = (w^2 - u.u) v + 2 (u.v) u + 2 w (u x v)``.
    """
    w, u = q[0], q[1:]
    uv = v @ u
    gv = np.einsum("ij,ij->i", g, v)
    gu = g @ u
    dw = 2.0 * (w * gv + np.einsum("ij,ij->i", g, np.cross(u, v)))
    du = 2.0 * (uv[:, None] * g + gu[:, None] * v - gv[:, None] * u - w * np.cross(g, v))
    return np.column_stack([dw, du])


def _term(raw_q, t, field: DistanceField, pts: np.ndarray, K: CameraIntrinsics, exact_inverse=False):
    """One directional term: residuals and ``(n, 7)`` gradient rows.

    Forward:       p = q v q^-1 + t
    exact_inverse: p = q^-1 (v - t) q
    """
    norm = np.linalg.norm(raw_q)
    q = raw_q / norm
    if exact_inverse:
        qc = q * _CONJ
        base = pts - t
        p = rotate_points(qc, base)
    else:
        base = pts
        p = rotate_points(q, pts) + t
    Z = p[:, 2]
    bad = np.flatnonzero(Z <= 0)
    if bad.size:
        raise BehindCameraError(f"transformed contour point {bad[0]} is behind the camera", int(bad[0]))
    invz = 1.0 / Z
    u = K.fx * p[:, 0] * invz + K.cx
    v = K.fy * p[:, 1] * invz + K.cy
    r, gd = sample_distance(field, u, v)
    # chain through the pinhole: dr/dp
    gp = np.empty_like(p)
    gp[:, 0] = gd[:, 0] * K.fx * invz
    gp[:, 1] = gd[:, 1] * K.fy * invz
    gp[:, 2] = -(gd[:, 0] * K.fx * p[:, 0] + gd[:, 1] * K.fy * p[:, 1]) * invz * invz
    if exact_inverse:
        rows_q = _rotation_jac_rows(qc, base, gp) * _CONJ
        rows_t = -rotate_points(q, gp)  # -(R^T)^T g
    else:
        rows_q = _rotation_jac_rows(q, base, gp)
        rows_t = gp
    # d(q/|q|)/draw = (I - q q^T) / |q|
    rows_q = (rows_q - np.outer(rows_q @ q, q)) / norm
    return r, np.hstack([rows_q, rows_t])


def _as_points(points) -> np.ndarray:
    pts = points.points if isinstance(points, ContourPointSet) else np.asarray(points, dtype=float)
    if len(pts) == 0:
        raise InvalidArgumentError("contour point set is empty")
    return pts


def _pack(r: np.ndarray, rows: np.ndarray) -> LossEval:
    return LossEval(float(r.sum()), rows.sum(axis=0), r, rows)


def visual_loss(update: UpdateParams, field: DistanceField, points, K: CameraIntrinsics) -> LossEval:
    """Sum of distance-field values at the projections of the updated contour points."""
    r, rows = _term(update.raw_q, update.t, field, _as_points(points), K)
    return _pack(r, rows)


def bidirectional_loss(
    update: UpdateParams,
    field_scene: DistanceField,
    points_hyp,
    field_hyp: DistanceField,
    points_scene,
    K: CameraIntrinsics,
    exact_inverse: bool = False,
) -> LossEval:
    """Forward term plus a reverse term aligning scene points onto the hypothesis.

    By default the reverse term uses ``(q^-1, -t)`` literally, which is not the
    inverse of ``v -> q v q^-1 + t`` once both rotation and translation are
    nonzero; ``exact_inverse=True`` uses ``v -> q^-1 (v - t) q`` instead.
    Residuals are ordered forward first, then reverse.
    """
    r1, rows1 = _term(update.raw_q, update.t, field_scene, _as_points(points_hyp), K)
    if exact_inverse:
        r2, rows2 = _term(update.raw_q, update.t, field_hyp, _as_points(points_scene), K, exact_inverse=True)
    else:
        r2, rows2 = _term(update.raw_q * _CONJ, -update.t, field_hyp, _as_points(points_scene), K)
        rows2 = rows2 * np.concatenate([_CONJ, -np.ones(3)])
    return _pack(np.concatenate([r1, r2]), np.vstack([rows1, rows2]))


def regression_loss(
    update: UpdateParams, target_q: UnitQuaternion, target_t, gamma: float = 1.0
) -> tuple[float, np.ndarray]:
    """``|q* - q/|q|| + gamma * |t* - t|`` and its gradient in the raw parameters."""
    if gamma <= 0:
        raise InvalidArgumentError("gamma must be positive")
    norm = np.linalg.norm(update.raw_q)
    if norm == 0:
        raise InvalidArgumentError("zero quaternion")
    n = update.raw_q / norm
    dq = target_q.as_array() - n
    dt = np.asarray(target_t, dtype=float) - update.t
    eq = np.linalg.norm(dq)
    et = np.linalg.norm(dt)
    grad = np.zeros(7)
    if eq > 0:
        gn = -dq / eq
        grad[:4] = (gn - (gn @ n) * n) / norm
    if et > 0:
        grad[4:] = -gamma * dt / et
    return float(eq + gamma * et), grad
