"""Iterative pose refinement by direct minimization of the contour energy.

Each outer iteration renders the current hypothesis, extracts its contour
points and distance field, then runs a few line-searched descent steps on
the update ``(q, t)``. The loss transforms camera-space points as
``v -> q v q^-1 + t_cam`` (rotation about the camera centre), while the pose
update composes as ``R* = R_upd R, t* = t + t_upd``. The optimizer therefore
works with rotations about the hypothesis origin ``c`` and maps them to the
loss's parameters with ``t_cam = c + t_upd - R_upd c``; the two conventions
describe exactly the same rigid motion of the object.
"""

from __future__ import annotations

import enum
import logging
import math
import time
from dataclasses import dataclass, field, replace
import numpy as np

from .errors import (
    ContourPoseError,
    DegenerateHypothesisError,
    DegenerateSceneError,
    InvalidArgumentError,
)
from .geometry import (
    CameraIntrinsics,
    Pose,
    TriangleMesh,
    apply_update,
    mesh_diameter,
    quat_angle,
    quat_angle_between,
    quat_mul,
    rotate_points,
)
from .loss import UpdateParams, _rotation_jac_rows, bidirectional_loss, visual_loss
from .raster import (
    BACKGROUND,
    ContourPointSet,
    DepthMap,
    DistanceField,
    SilhouetteMask,
    bbox_center,
    crop_patch,
    distance_transform,
    extract_contour_pixels,
    extract_silhouette,
    render_depth,
    render_scene,
    sample_contour_points_3d,
    window_origin,
)

log = logging.getLogger(__name__)


class Termination(str, enum.Enum):
    CONVERGED = "converged"
    MAX_ITERATIONS = "max_iterations"
    DIVERGED = "diverged"
    ERROR = "error"


@dataclass(frozen=True)
class RefinementConfig:
    max_outer_iterations: int = 10
    stop_rotation: float = 1.5  # degrees
    stop_translation: float = 0.0075  # meters
    inner_steps_per_render: int = 20
    # first trial step, in quaternion-tangent units (~half a radian) and object diameters
    initial_step_scale: float = 0.02
    window_padding_fraction: float = 0.2
    use_bidirectional: bool = True
    use_exact_inverse_reverse_term: bool = False
    n_contour_points: int = 100
    max_halvings: int = 10
    step_growth: float = 1.5
    # "gauss_newton": reweighted Gauss-Newton preconditioning; "gradient": plain normalized descent
    optimizer: str = "gauss_newton"
    irls_floor: float = 0.5  # pixels
    max_step: float = 0.25  # radians / diameters per trial step
    divergence_rotation: float = 45.0  # degrees
    divergence_translation_fraction: float = 0.5  # of the diameter
    # ignore contour pixels on a known occluder's boundary, on both sides of the loss
    mask_occlusions: bool = True

    def __post_init__(self):
        positive = {
            "max_outer_iterations": self.max_outer_iterations,
            "stop_rotation": self.stop_rotation,
            "stop_translation": self.stop_translation,
            "inner_steps_per_render": self.inner_steps_per_render,
            "initial_step_scale": self.initial_step_scale,
            "n_contour_points": self.n_contour_points,
            "max_halvings": self.max_halvings,
            "divergence_rotation": self.divergence_rotation,
            "divergence_translation_fraction": self.divergence_translation_fraction,
        }
        for name, value in positive.items():
            if not value > 0:
                raise InvalidArgumentError(f"{name} must be positive, got {value}")
        if self.window_padding_fraction < 0:
            raise InvalidArgumentError("window_padding_fraction must be non-negative")
        if self.stop_rotation >= self.divergence_rotation:
            raise InvalidArgumentError("stop_rotation must be below divergence_rotation")
        if self.optimizer not in ("gauss_newton", "gradient"):
            raise InvalidArgumentError(f"unknown optimizer {self.optimizer!r}")
        if self.step_growth < 1:
            raise InvalidArgumentError("step_growth must be >= 1")


def is_converged(update_rot_deg: float, update_trans_m: float, config: RefinementConfig) -> bool:
    """Stop rule: the last update is below BOTH thresholds (strictly)."""
    return update_rot_deg < config.stop_rotation and update_trans_m < config.stop_translation


def is_diverged(rot_err_deg: float, trans_err_m: float, diameter: float, config: RefinementConfig) -> bool:
    """Divergence: rotation error above the limit OR translation error above the diameter fraction."""
    return (
        rot_err_deg > config.divergence_rotation
        or trans_err_m > config.divergence_translation_fraction * diameter
    )


@dataclass
class SceneObservation:
    """Scene side of the loss. Unpacks as ``(field, points, mask)``.

    ``occlusion`` is a full-image mask of pixels where a foreground occluder
    hides the target's surroundings; ``None`` when there is no occluder.
    """

    field: DistanceField
    points: ContourPointSet
    mask: SilhouetteMask
    occlusion: SilhouetteMask | None = None

    def __iter__(self):
        return iter((self.field, self.points, self.mask))


@dataclass
class IterationTrace:
    loss: float  # energy after this iteration's inner descent
    loss_start: float  # energy at the identity update
    rotation_deg: float  # magnitude of the applied update
    translation_m: float
    inner_steps: int


@dataclass
class RefinementResult:
    final_pose: Pose
    initial_pose: Pose
    termination: Termination
    trace: list[IterationTrace] = field(default_factory=list)
    updates: list[Pose] = field(default_factory=list)
    wall_time: float = 0.0
    error: str | None = None
    final_rotation_error_deg: float | None = None
    final_translation_error_m: float | None = None

    @property
    def iterations(self) -> int:
        return len(self.trace)

    @property
    def best_loss(self) -> float:
        return min((t.loss for t in self.trace), default=math.inf)

    def to_dict(self) -> dict:
        return {
            "final_pose": self.final_pose.to_dict(),
            "initial_pose": self.initial_pose.to_dict(),
            "termination": self.termination.value,
            "iterations": self.iterations,
            "trace": [vars(t) for t in self.trace],
            "updates": [u.to_dict() for u in self.updates],
            "wall_time": self.wall_time,
            "error": self.error,
            "final_rotation_error_deg": self.final_rotation_error_deg,
            "final_translation_error_m": self.final_translation_error_m,
        }


def build_scene_observation(
    mesh: TriangleMesh,
    gt_pose: Pose,
    K: CameraIntrinsics,
    window: int | None = None,
    occluder: tuple[TriangleMesh, Pose] | None = None,
    n_points: int = 100,
    center: tuple[float, float] | None = None,
    mask_occlusions: bool = False,
) -> SceneObservation:
    """Synthesize the scene side: distance field, contour points and visible mask.

    An occluder shares the z-buffer with the target; its pixels count as
    background for the target mask. With ``mask_occlusions`` the contour
    pixels bordering the occluder are left out of both the field and the
    points, since they trace the occluder rather than the object. With
    ``window`` the field and mask are cropped to a square centred on
    ``center`` (default: the visible bbox centre). Contour points are always
    in full-image camera space.
    """
    items = [(mesh, gt_pose)] + ([occluder] if occluder is not None else [])
    depth, labels = render_scene(items, K)
    visible = labels == 0
    if not visible.any():
        raise DegenerateSceneError("target object is not visible")
    mask = SilhouetteMask(visible)
    contour = extract_contour_pixels(mask)
    occlusion = SilhouetteMask(labels > 0) if occluder is not None else None
    if occlusion is not None and mask_occlusions:
        contour = contour[~touches_mask(contour, occlusion)]
        if len(contour) == 0:
            raise DegenerateSceneError("the whole visible contour borders the occluder")
    target_depth = DepthMap(np.where(visible, depth.values, BACKGROUND))
    points = sample_contour_points_3d(target_depth, K, n_points, pose=gt_pose, contour=contour)
    if window is None:
        field_ = distance_transform(contour, K.width, K.height)
        return SceneObservation(field_, points, mask, occlusion)
    if center is None:
        center = bbox_center(mask)
    origin = window_origin(center, window)
    field_ = distance_transform(contour, window, window, origin)
    return SceneObservation(field_, points, crop_patch(mask, center, window), occlusion)


def touches_mask(pixels: np.ndarray, mask: SilhouetteMask) -> np.ndarray:
    """True for each ``(u, v)`` pixel lying on or 4-adjacent to a set pixel of ``mask``."""
    pixels = np.asarray(pixels, dtype=int).reshape(-1, 2)
    padded = np.pad(mask.values, 1)
    u = pixels[:, 0] - mask.origin[0] + 1
    v = pixels[:, 1] - mask.origin[1] + 1
    hit = np.zeros(len(pixels), dtype=bool)
    for du, dv in ((0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)):
        uu, vv = u + du, v + dv
        inside = (uu >= 0) & (vv >= 0) & (uu < padded.shape[1]) & (vv < padded.shape[0])
        hit[inside] |= padded[vv[inside], uu[inside]]
    return hit


def _is_full_frame(field_: DistanceField, K: CameraIntrinsics) -> bool:
    return field_.origin == (0, 0) and field_.values.shape == (K.height, K.width)


def _hypothesis_side(pose, mesh, K, config, scene_field, occlusion=None):
    depth = render_depth(mesh, pose, K)
    mask = extract_silhouette(depth)
    contour = extract_contour_pixels(mask)
    if len(contour) == 0:
        raise DegenerateHypothesisError("hypothesis renders to an empty silhouette")
    sampled = contour
    if occlusion is not None and config.mask_occlusions:
        # hypothesis contour hidden behind the occluder has no scene counterpart
        kept = contour[~touches_mask(contour, occlusion)]
        if len(kept):
            sampled = kept
    points = sample_contour_points_3d(depth, K, config.n_contour_points, pose=pose, contour=sampled)
    if not config.use_bidirectional:
        return points, None
    if _is_full_frame(scene_field, K):
        return points, distance_transform(contour, K.width, K.height)
    window = scene_field.width
    origin = window_origin(bbox_center(mask), window)
    return points, distance_transform(contour, window, scene_field.height, origin)


class _Objective:
    """The configured energy as a function of a local update around the hypothesis.

    Parameters are ``(omega, s)``: ``omega`` a rotation vector about the
    hypothesis origin ``c`` (camera axes, radians) and ``s`` the translation
    in object diameters. The loss itself is evaluated in its camera-centred
    form ``(q, t_cam)`` with ``t_cam = c + diameter * s - R(q) c``.
    """

    def __init__(self, c, diameter, scene_field, scene_points, hyp_field, hyp_points, K, config):
        self.c = c
        self.diameter = diameter
        self.scene_field = scene_field
        self.scene_points = scene_points
        self.hyp_field = hyp_field
        self.hyp_points = hyp_points
        self.K = K
        self.config = config

    def __call__(self, q, tau):
        """Loss value, residuals and ``(n, 6)`` residual rows at ``(q, tau)``."""
        c = self.c
        upd = UpdateParams(q, c + tau - rotate_points(q, c))
        if self.config.use_bidirectional:
            ev = bidirectional_loss(
                upd, self.scene_field, self.hyp_points, self.hyp_field, self.scene_points, self.K,
                exact_inverse=self.config.use_exact_inverse_reverse_term,
            )
        else:
            ev = visual_loss(upd, self.scene_field, self.hyp_points, self.K)
        rows = ev.jacobian
        rows_t = rows[:, 4:]
        # t_cam depends on q through -R(q) c
        rows_q = rows[:, :4] - _rotation_jac_rows(q, np.broadcast_to(c, rows_t.shape), rows_t)
        rows_q = rows_q - np.outer(rows_q @ q, q)
        # left perturbation q <- exp(omega / 2) * q
        B = 0.5 * np.column_stack([quat_mul(e, q) for e in np.eye(4)[1:]])
        return ev.value, ev.residuals, np.hstack([rows_q @ B, rows_t * self.diameter])


def _retract(q, tau, step, diameter):
    omega = step[:3]
    angle = np.linalg.norm(omega)
    if angle > 0:
        dq = np.concatenate([[math.cos(angle / 2)], math.sin(angle / 2) * omega / angle])
        q = quat_mul(dq, q)
        q = q / np.linalg.norm(q)
    return q, tau + diameter * step[3:]


def _direction(residuals, rows, config):
    grad = rows.sum(axis=0)
    if config.optimizer == "gradient":
        gnorm = np.linalg.norm(grad)
        return -grad / gnorm if gnorm > 0 else None
    # Reweighted Gauss-Newton for a sum of (non-negative) residuals: with
    # weights 1/r the normal equations reproduce the exact gradient on the
    # right-hand side, so the result is a preconditioned descent direction.
    w = 1.0 / np.maximum(residuals, config.irls_floor)
    H = (rows * w[:, None]).T @ rows
    H[np.diag_indices(6)] += 1e-6 * np.trace(H) / 6 + 1e-12
    d = -np.linalg.solve(H, grad)
    n = np.linalg.norm(d)
    if n > config.max_step:
        d *= config.max_step / n
    return d if n > 0 else None


def refine_step(
    pose: Pose,
    scene_field: DistanceField,
    scene_points: ContourPointSet | None,
    mesh: TriangleMesh,
    K: CameraIntrinsics,
    config: RefinementConfig = RefinementConfig(),
    diameter: float | None = None,
    occlusion: SilhouetteMask | None = None,
) -> tuple[UpdateParams, list[float]]:
    """One render + descent round. Returns the update (in pose-update form)
    and the non-increasing trace of accepted loss values."""
    if diameter is None:
        diameter = mesh_diameter(mesh)
    if config.use_bidirectional and scene_points is None:
        config = replace(config, use_bidirectional=False)
    hyp_points, hyp_field = _hypothesis_side(pose, mesh, K, config, scene_field, occlusion)
    objective = _Objective(
        pose.translation, diameter, scene_field, scene_points, hyp_field, hyp_points, K, config
    )
    q = np.array([1.0, 0.0, 0.0, 0.0])
    tau = np.zeros(3)
    value, res, rows = objective(q, tau)
    trace = [value]
    gradient_mode = config.optimizer == "gradient"
    scale = config.initial_step_scale if gradient_mode else 1.0
    for _ in range(config.inner_steps_per_render):
        d = _direction(res, rows, config)
        if d is None or not np.all(np.isfinite(d)):
            break
        if not gradient_mode:
            scale = 1.0
        accepted = False
        for _ in range(config.max_halvings + 1):
            q_try, tau_try = _retract(q, tau, scale * d, diameter)
            v_try, res_try, rows_try = objective(q_try, tau_try)
            if v_try < value:
                accepted = True
                break
            scale *= 0.5
        if not accepted:
            break
        q, tau, value, res, rows = q_try, tau_try, v_try, res_try, rows_try
        trace.append(value)
        if gradient_mode:
            scale *= config.step_growth
    if q[0] < 0:
        q = -q
    return UpdateParams(q, tau), trace


def refine_iterative(
    initial: Pose,
    scene_field: DistanceField,
    scene_points: ContourPointSet | None,
    mesh: TriangleMesh,
    K: CameraIntrinsics,
    config: RefinementConfig = RefinementConfig(),
    gt_pose: Pose | None = None,
    occlusion: SilhouetteMask | None = None,
) -> RefinementResult:
    """Alternate :func:`refine_step` and pose composition until the update is
    small or the iteration budget runs out. With ``gt_pose`` the final pose
    is also checked for divergence."""
    start = time.perf_counter()
    diameter = mesh_diameter(mesh)
    result = RefinementResult(initial, initial, Termination.MAX_ITERATIONS)
    pose = initial
    for _ in range(config.max_outer_iterations):
        try:
            update, inner = refine_step(pose, scene_field, scene_points, mesh, K, config, diameter, occlusion)
        except ContourPoseError as exc:
            result.termination = Termination.ERROR
            result.error = f"{type(exc).__name__}: {exc}"
            log.debug("refinement aborted: %s", result.error)
            break
        upd_pose = update.to_pose()
        pose = apply_update(pose, upd_pose)
        rot = math.degrees(quat_angle(upd_pose.rotation))
        trans = float(np.linalg.norm(upd_pose.translation))
        result.updates.append(upd_pose)
        result.trace.append(IterationTrace(inner[-1], inner[0], rot, trans, len(inner) - 1))
        if is_converged(rot, trans, config):
            result.termination = Termination.CONVERGED
            break
    result.final_pose = pose
    if gt_pose is not None:
        rot_err = math.degrees(quat_angle_between(gt_pose.rotation, pose.rotation))
        trans_err = float(np.linalg.norm(gt_pose.translation - pose.translation))
        result.final_rotation_error_deg = rot_err
        result.final_translation_error_m = trans_err
        if result.termination != Termination.ERROR and is_diverged(rot_err, trans_err, diameter, config):
            result.termination = Termination.DIVERGED
    result.wall_time = time.perf_counter() - start
    return result
