"""Synthetic perturbation benchmark: metrics, trial orchestration, CSV/JSON export."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, fields
from io import StringIO
from pathlib import Path

import numpy as np

from .assets import cube
from .errors import ContourPoseError, InvalidArgumentError
from .geometry import (
    CameraIntrinsics,
    Pose,
    TriangleMesh,
    apply_update,
    mesh_diameter,
    quat_angle_between,
    quat_from_axis_angle,
)
from .raster import (
    SilhouetteMask,
    bbox_center,
    compute_window_size,
    extract_silhouette,
    render_depth,
    view_rotation,
)
from .refine import RefinementConfig, Termination, build_scene_observation, refine_iterative

log = logging.getLogger(__name__)

CSV_COLUMNS = [
    "object", "mode", "level", "seed",
    "init_rot_deg", "final_rot_deg", "init_trans_m", "final_trans_m",
    "tx", "ty", "tz", "vss", "add_m", "add_correct",
    "termination", "iterations", "wall_ms",
]  # fmt: skip


@dataclass(frozen=True)
class PerturbationSpec:
    rotation_magnitudes: tuple[float, ...] = tuple(float(a) for a in range(5, 50, 5))
    translation_fractions: tuple[float, ...] = tuple(round(0.1 * i, 1) for i in range(11))
    trials_per_level: int = 10
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "rotation_magnitudes", tuple(float(a) for a in self.rotation_magnitudes))
        object.__setattr__(self, "translation_fractions", tuple(float(f) for f in self.translation_fractions))
        if any(a < 0 for a in self.rotation_magnitudes):
            raise InvalidArgumentError("rotation magnitudes must be non-negative")
        if any(not 0 <= f <= 1.5 for f in self.translation_fractions):
            raise InvalidArgumentError("translation fractions must lie in [0, 1.5]")
        if self.trials_per_level < 1:
            raise InvalidArgumentError("trials_per_level must be >= 1")


@dataclass
class TrialRecord:
    object: str
    mode: str  # "rot" or "trans"
    level: float  # degrees for rot, diameter fraction for trans
    seed: int
    init_rot_deg: float
    final_rot_deg: float
    init_trans_m: float
    final_trans_m: float
    tx: float
    ty: float
    tz: float
    vss: float
    add_m: float
    add_correct: bool
    termination: str
    iterations: int
    wall_ms: float

    def trans_fractions(self, diameter: float) -> tuple[float, float]:
        """Initial and final translation error as fractions of ``diameter``."""
        return self.init_trans_m / diameter, self.final_trans_m / diameter


# -- metrics ------------------------------------------------------------------


def vss_score(mask_a: SilhouetteMask, mask_b: SilhouetteMask) -> float:
    """Silhouette IoU. Two empty masks agree vacuously and score 1."""
    a, b = np.asarray(mask_a.values, bool), np.asarray(mask_b.values, bool)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def add_error(mesh: TriangleMesh, pose_gt: Pose, pose_est: Pose) -> float:
    """Mean distance between model vertices under the two poses."""
    d = pose_gt.transform(mesh.vertices) - pose_est.transform(mesh.vertices)
    return float(np.linalg.norm(d, axis=1).mean())


def add_correct(mesh: TriangleMesh, pose_gt: Pose, pose_est: Pose, diameter: float | None = None) -> bool:
    if diameter is None:
        diameter = mesh_diameter(mesh)
    return add_error(mesh, pose_gt, pose_est) < 0.1 * diameter


def rotation_translation_errors(pose_gt: Pose, pose_est: Pose) -> tuple[float, np.ndarray, float]:
    """(rotation error in degrees, per-axis absolute translation error, total translation error)."""
    deg = math.degrees(quat_angle_between(pose_gt.rotation, pose_est.rotation))
    diff = pose_est.translation - pose_gt.translation
    return deg, np.abs(diff), float(np.linalg.norm(diff))


def render_vss(mesh: TriangleMesh, pose_gt: Pose, pose_est: Pose, K: CameraIntrinsics) -> float:
    a = extract_silhouette(render_depth(mesh, pose_gt, K))
    try:
        b = extract_silhouette(render_depth(mesh, pose_est, K))
    except ContourPoseError:
        return 0.0
    return vss_score(a, b)


# -- trial generation ---------------------------------------------------------


def _unit_vector(rng: np.random.Generator) -> np.ndarray:
    while True:
        v = rng.normal(size=3)
        n = np.linalg.norm(v)
        if n > 1e-9:
            return v / n


def perturb_pose(gt: Pose, angle: float, translation_fraction: float, diameter: float, seed) -> Pose:
    """Rotate ``gt`` by exactly ``angle`` degrees about a random axis and shift
    it by ``translation_fraction * diameter`` in a random direction.

    ``seed`` is anything ``numpy.random.default_rng`` accepts (including a Generator).
    """
    if diameter <= 0:
        raise InvalidArgumentError("diameter must be positive")
    rng = np.random.default_rng(seed)
    axis = _unit_vector(rng)
    direction = _unit_vector(rng)
    update = Pose(quat_from_axis_angle(axis, math.radians(angle)), direction * (translation_fraction * diameter))
    return apply_update(gt, update)


def sample_gt_pose(rng: np.random.Generator, min_distance: float, K: CameraIntrinsics, lateral: float = 0.1) -> Pose:
    """Random viewpoint on the upper hemisphere, distance in ``[d, 2d]``, random roll.

    The object centre projects within ``lateral`` (fraction of the image size)
    of the principal point.
    """
    az = rng.uniform(0.0, 2 * math.pi)
    el = rng.uniform(0.0, math.pi / 2)
    roll = rng.uniform(0.0, 2 * math.pi)
    dist = rng.uniform(min_distance, 2 * min_distance)
    view = np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])
    du = rng.uniform(-lateral, lateral) * K.width
    dv = rng.uniform(-lateral, lateral) * K.height
    t = np.array([du * dist / K.fx, dv * dist / K.fy, dist])
    return Pose(view_rotation(view, roll), t)


def slab_occluder(
    mesh: TriangleMesh, gt: Pose, K: CameraIntrinsics, fraction: float, side: int = 0
) -> tuple[TriangleMesh, Pose]:
    """A flat box in front of the object hiding roughly ``fraction`` of its silhouette.

    ``side`` picks the covered edge: 0 right, 1 left, 2 bottom, 3 top.
    """
    mask = extract_silhouette(render_depth(mesh, gt, K))
    vs, us = np.nonzero(mask.values)
    if us.size == 0:
        raise InvalidArgumentError("object is not visible")
    diameter = mesh_diameter(mesh)
    z = gt.translation[2] - diameter
    if z <= 0.05 * diameter:
        raise InvalidArgumentError("object too close to the camera for an occluder")
    horizontal = side in (0, 1)
    coords = us if horizontal else vs
    f, c = (K.fx, K.cx) if horizontal else (K.fy, K.cy)
    size = 6.0 * diameter
    if side in (0, 2):  # cover coordinates >= edge
        edge_px = np.quantile(coords, 1.0 - fraction) - 0.5
        offset = size / 2
    else:  # cover coordinates <= edge
        edge_px = np.quantile(coords, fraction) + 0.5
        offset = -size / 2
    center = gt.translation * (z / gt.translation[2])
    center[0 if horizontal else 1] = (edge_px - c) * z / f + offset
    box = cube(1.0)
    verts = box.vertices * np.array([size, size, 0.01 * diameter])
    return TriangleMesh(verts, box.triangles), Pose(translation=center)


def _trial_seed(base: int, mode: int, level_index: int, trial: int) -> int:
    return int(np.random.SeedSequence([base, mode, level_index, trial]).generate_state(1)[0])


def run_trial(
    mesh: TriangleMesh,
    K: CameraIntrinsics,
    config: RefinementConfig,
    *,
    object_name: str,
    mode: str,
    level: float,
    seed: int,
    fraction: float | None = None,
    min_distance: float,
    window: int,
    diameter: float,
    occlusion_fraction: float = 0.0,
) -> TrialRecord:
    """One seeded trial: sample GT, perturb, observe, refine, score."""
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    gt = sample_gt_pose(rng, min_distance, K)
    if mode == "rot":
        angle, frac = level, 0.0
    elif mode == "trans":
        angle, frac = 0.0, level
    else:  # combined: level is the angle, ``fraction`` the translation
        angle, frac = level, fraction or 0.0
    init = perturb_pose(gt, angle, frac, diameter, rng)
    init_rot, _, init_trans = rotation_translation_errors(gt, init)
    occluder = None
    final = init
    termination, iterations = Termination.ERROR.value, 0
    try:
        if occlusion_fraction > 0:
            occluder = slab_occluder(mesh, gt, K, occlusion_fraction, side=int(rng.integers(4)))
        # the window is centred on the hypothesis, as a tracker would do
        center = bbox_center(extract_silhouette(render_depth(mesh, init, K)))
        obs = build_scene_observation(
            mesh, gt, K, window, occluder=occluder, n_points=config.n_contour_points, center=center,
            mask_occlusions=config.mask_occlusions,
        )
        result = refine_iterative(
            init, obs.field, obs.points, mesh, K, config, gt_pose=gt, occlusion=obs.occlusion
        )
        final, termination, iterations = result.final_pose, result.termination.value, result.iterations
    except ContourPoseError as exc:
        log.debug("trial %s/%s/%s failed: %s", mode, level, seed, exc)
    rot, per_axis, trans = rotation_translation_errors(gt, final)
    add = add_error(mesh, gt, final)
    return TrialRecord(
        object=object_name, mode=mode, level=float(level), seed=seed,
        init_rot_deg=init_rot, final_rot_deg=rot, init_trans_m=init_trans, final_trans_m=trans,
        tx=float(per_axis[0]), ty=float(per_axis[1]), tz=float(per_axis[2]),
        vss=render_vss(mesh, gt, final, K), add_m=add, add_correct=bool(add < 0.1 * diameter),
        termination=termination, iterations=iterations,
        wall_ms=(time.perf_counter() - start) * 1000.0,
    )  # fmt: skip


def run_perturbation_benchmark(
    mesh: TriangleMesh,
    K: CameraIntrinsics,
    spec: PerturbationSpec,
    config: RefinementConfig = RefinementConfig(),
    *,
    object_name: str = "object",
    min_distance: float | None = None,
    occlusion_fraction: float = 0.0,
    progress=None,
) -> list[TrialRecord]:
    """Run every (mode, level, trial) combination; deterministic given ``spec.seed``.

    ``min_distance`` defaults to three object diameters; ground-truth poses
    are drawn between one and two times that distance. Per-trial failures
    are recorded as ``termination="error"``.
    """
    diameter = mesh_diameter(mesh)
    if min_distance is None:
        min_distance = 3.0 * diameter
    window = compute_window_size(
        mesh, K, min_distance, padding_fraction=config.window_padding_fraction, seed=spec.seed
    )
    jobs = [("rot", i, a) for i, a in enumerate(spec.rotation_magnitudes)]
    jobs += [("trans", i, f) for i, f in enumerate(spec.translation_fractions)]
    records = []
    for mode, li, level in jobs:
        for trial in range(spec.trials_per_level):
            seed = _trial_seed(spec.seed, 0 if mode == "rot" else 1, li, trial)
            records.append(
                run_trial(
                    mesh, K, config, object_name=object_name, mode=mode, level=level, seed=seed,
                    min_distance=min_distance, window=window, diameter=diameter,
                    occlusion_fraction=occlusion_fraction,
                )
            )
            if progress is not None:
                progress(records[-1])
    return records


# -- export -------------------------------------------------------------------


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def export_results(records, path=None) -> str:
    """CSV text with a header row and the fixed :data:`CSV_COLUMNS` order.

    Floats use ``repr`` (shortest exact round-trip form); ``wall_ms`` is last so
    it can be dropped when comparing runs. Writes to ``path`` when given.
    """
    buf = StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in records:
        writer.writerow([_fmt(getattr(r, c)) for c in CSV_COLUMNS])
    text = buf.getvalue()
    if path is not None:
        try:
            Path(path).write_text(text)
        except OSError as exc:
            raise OSError(f"cannot write results to {path}: {exc}") from exc
    return text


def parse_results(text: str) -> list[TrialRecord]:
    types = {f.name: f.type for f in fields(TrialRecord)}
    out = []
    for row in csv.DictReader(text.splitlines()):
        kw = {}
        for name, raw in row.items():
            t = types[name]
            if t == "bool":
                kw[name] = raw == "1"
            elif t == "int":
                kw[name] = int(raw)
            elif t == "float":
                kw[name] = float(raw)
            else:
                kw[name] = raw
        out.append(TrialRecord(**kw))
    return out


def read_results(path) -> list[TrialRecord]:
    try:
        return parse_results(Path(path).read_text())
    except OSError as exc:
        raise OSError(f"cannot read results from {path}: {exc}") from exc


def strip_wall_time(csv_text: str) -> str:
    """Drop the trailing ``wall_ms`` column (the only non-deterministic one)."""
    return "\n".join(line.rsplit(",", 1)[0] for line in csv_text.splitlines()) + "\n"


@dataclass
class LevelSummary:
    object: str
    mode: str
    level: float
    trials: int
    frac_rot_lt5: float
    frac_rot_lt10: float
    frac_rot_lt45: float
    frac_diverged: float
    frac_converged: float
    frac_error: float
    mean_vss: float
    add_rate: float
    mean_final_rot_deg: float
    mean_final_trans_m: float


def summarize(records) -> list[LevelSummary]:
    """Per (object, mode, level) recovery statistics, in first-seen order."""
    groups: dict[tuple, list[TrialRecord]] = {}
    for r in records:
        groups.setdefault((r.object, r.mode, r.level), []).append(r)
    out = []
    for (obj, mode, level), rs in groups.items():
        n = len(rs)
        rot = np.array([r.final_rot_deg for r in rs])
        term = [r.termination for r in rs]
        out.append(
            LevelSummary(
                object=obj, mode=mode, level=level, trials=n,
                frac_rot_lt5=float(np.mean(rot < 5)),
                frac_rot_lt10=float(np.mean(rot < 10)),
                frac_rot_lt45=float(np.mean(rot < 45)),
                frac_diverged=term.count(Termination.DIVERGED.value) / n,
                frac_converged=term.count(Termination.CONVERGED.value) / n,
                frac_error=term.count(Termination.ERROR.value) / n,
                mean_vss=float(np.mean([r.vss for r in rs])),
                add_rate=float(np.mean([r.add_correct for r in rs])),
                mean_final_rot_deg=float(rot.mean()),
                mean_final_trans_m=float(np.mean([r.final_trans_m for r in rs])),
            )  # fmt: skip
        )
    return out


def write_summary(summary, path) -> None:
    payload = [asdict(s) for s in summary]
    try:
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write summary to {path}: {exc}") from exc
