"""Pydantic request/response models for the HTTP service and the config file.

Poses cross every JSON boundary as ``{"q": [w, x, y, z], "t": [x, y, z]}``:
a Hamilton unit quaternion (object-to-camera rotation) plus a translation in
meters.
"""

from __future__ import annotations

import base64
from dataclasses import asdict, fields
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .assets import parse_obj, parse_primitive
from .bench import PerturbationSpec
from .geometry import CameraIntrinsics, Pose, TriangleMesh, UnitQuaternion
from .refine import RefinementConfig

_REFINE_DEFAULTS = RefinementConfig()


class PoseModel(BaseModel):
    q: list[float] = Field(default_factory=lambda: [1.0, 0.0, 0.0, 0.0], min_length=4, max_length=4)
    t: list[float] = Field(default_factory=lambda: [0.0, 0.0, 0.0], min_length=3, max_length=3)

    @model_validator(mode="after")
    def _valid(self):
        self.to_domain()  # zero / non-finite quaternions fail here
        return self

    def to_domain(self) -> Pose:
        return Pose(UnitQuaternion.from_array(self.q), self.t)

    @classmethod
    def from_domain(cls, pose: Pose) -> "PoseModel":
        d = pose.to_dict()
        return cls(q=[float(v) for v in d["q"]], t=[float(v) for v in d["t"]])


class IntrinsicsModel(BaseModel):
    fx: float = 500.0
    fy: float = 500.0
    cx: float = 320.0
    cy: float = 240.0
    width: int = 640
    height: int = 480

    @model_validator(mode="after")
    def _valid(self):
        self.to_domain()
        return self

    def to_domain(self) -> CameraIntrinsics:
        return CameraIntrinsics(**self.model_dump())


class MeshSource(BaseModel):
    """Exactly one of a primitive spec (``"name:p1,p2"``) or inline OBJ text."""

    primitive: Optional[str] = None
    obj: Optional[str] = None

    @model_validator(mode="after")
    def _one_source(self):
        if (self.primitive is None) == (self.obj is None):
            raise ValueError("give exactly one of 'primitive' or 'obj'")
        return self

    def to_mesh(self) -> TriangleMesh:
        if self.primitive is not None:
            return parse_primitive(self.primitive)
        return parse_obj(self.obj)


class RefinementModel(BaseModel):
    """Mirror of :class:`RefinementConfig` minus the window padding, which
    lives at the top level of an experiment."""

    model_config = ConfigDict(extra="forbid")

    max_outer_iterations: int = _REFINE_DEFAULTS.max_outer_iterations
    stop_rotation: float = _REFINE_DEFAULTS.stop_rotation
    stop_translation: float = _REFINE_DEFAULTS.stop_translation
    inner_steps_per_render: int = _REFINE_DEFAULTS.inner_steps_per_render
    initial_step_scale: float = _REFINE_DEFAULTS.initial_step_scale
    use_bidirectional: bool = _REFINE_DEFAULTS.use_bidirectional
    use_exact_inverse_reverse_term: bool = _REFINE_DEFAULTS.use_exact_inverse_reverse_term
    n_contour_points: int = _REFINE_DEFAULTS.n_contour_points
    max_halvings: int = _REFINE_DEFAULTS.max_halvings
    step_growth: float = _REFINE_DEFAULTS.step_growth
    optimizer: Literal["gauss_newton", "gradient"] = _REFINE_DEFAULTS.optimizer
    irls_floor: float = _REFINE_DEFAULTS.irls_floor
    max_step: float = _REFINE_DEFAULTS.max_step
    divergence_rotation: float = _REFINE_DEFAULTS.divergence_rotation
    divergence_translation_fraction: float = _REFINE_DEFAULTS.divergence_translation_fraction
    mask_occlusions: bool = _REFINE_DEFAULTS.mask_occlusions

    @model_validator(mode="after")
    def _valid(self):
        self.to_domain()
        return self

    def to_domain(self, window_padding_fraction: float = _REFINE_DEFAULTS.window_padding_fraction) -> RefinementConfig:
        return RefinementConfig(window_padding_fraction=window_padding_fraction, **self.model_dump())

    @classmethod
    def from_domain(cls, config: RefinementConfig) -> "RefinementModel":
        d = asdict(config)
        d.pop("window_padding_fraction")
        return cls(**d)


_PERTURB_DEFAULTS = PerturbationSpec()


class PerturbationModel(BaseModel):
    model_config = ConfigDict(extra="forbid")

    rotation_magnitudes: list[float] = list(_PERTURB_DEFAULTS.rotation_magnitudes)
    translation_fractions: list[float] = list(_PERTURB_DEFAULTS.translation_fractions)
    trials_per_level: int = _PERTURB_DEFAULTS.trials_per_level

    @model_validator(mode="after")
    def _valid(self):
        self.to_domain(0)
        return self

    def to_domain(self, seed: int) -> PerturbationSpec:
        return PerturbationSpec(
            tuple(self.rotation_magnitudes), tuple(self.translation_fractions), self.trials_per_level, seed
        )


# -- requests / responses -------------------------------------------------------


class RenderRequest(BaseModel):
    mesh: MeshSource
    pose: PoseModel
    intrinsics: IntrinsicsModel = IntrinsicsModel()


class RenderResponse(BaseModel):
    width: int
    height: int
    silhouette_area: int
    contour_pixels: int
    bbox: Optional[list[int]] = None  # umin, vmin, umax, vmax
    depth_pgm: str  # base64
    mask_pgm: str
    distance_pgm: Optional[str] = None  # absent when the silhouette is empty


class RefineRequest(BaseModel):
    """Refine ``initial`` against a scene given either as a GT pose (rendered
    synthetically) or as a binary PGM mask (base64)."""

    mesh: MeshSource
    initial: PoseModel
    intrinsics: IntrinsicsModel = IntrinsicsModel()
    gt: Optional[PoseModel] = None
    scene_mask_pgm: Optional[str] = None
    config: RefinementModel = RefinementModel()

    @model_validator(mode="after")
    def _one_scene(self):
        if (self.gt is None) == (self.scene_mask_pgm is None):
            raise ValueError("give exactly one of 'gt' or 'scene_mask_pgm'")
        return self

    @field_validator("scene_mask_pgm")
    @classmethod
    def _b64(cls, v):
        if v is not None:
            base64.b64decode(v, validate=True)
        return v


class IterationModel(BaseModel):
    loss: float
    loss_start: float
    rotation_deg: float
    translation_m: float
    inner_steps: int


class RefineResponse(BaseModel):
    final_pose: PoseModel
    initial_pose: PoseModel
    termination: str
    iterations: int
    bidirectional: bool
    trace: list[IterationModel]
    updates: list[PoseModel]
    wall_time: float
    error: Optional[str] = None
    final_rotation_error_deg: Optional[float] = None
    final_translation_error_m: Optional[float] = None


class NamedMesh(BaseModel):
    name: str = Field(min_length=1)
    mesh: MeshSource


class BenchRequest(BaseModel):
    meshes: list[NamedMesh] = Field(min_length=1)
    intrinsics: IntrinsicsModel = IntrinsicsModel()
    window_padding: float = Field(default=_REFINE_DEFAULTS.window_padding_fraction, ge=0)
    refinement: RefinementModel = RefinementModel()
    perturbation: PerturbationModel = PerturbationModel()
    occlusion_fraction: float = Field(default=0.0, ge=0, lt=1)
    min_distance: Optional[float] = Field(default=None, gt=0)
    seed: int = 0


class LevelSummaryModel(BaseModel):
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


class BenchResponse(BaseModel):
    csv: str
    summary: list[LevelSummaryModel]


class MetricsRequest(BaseModel):
    mesh: MeshSource
    gt: PoseModel
    estimate: PoseModel
    intrinsics: IntrinsicsModel = IntrinsicsModel()


class MetricsResponse(BaseModel):
    diameter: float
    vss: float
    add_m: float
    add_correct: bool
    rotation_deg: float
    translation_m: float
    per_axis_m: list[float]


def refinement_field_names() -> list[str]:
    return [f.name for f in fields(RefinementConfig) if f.name != "window_padding_fraction"]
