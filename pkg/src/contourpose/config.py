"""Experiment configuration: one JSON file drives a full benchmark run.

Relative paths (meshes, outputs) are resolved against the directory of the
config file. Mesh paths must exist when the config is loaded.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationInfo, field_validator, model_validator

from .assets import load_mesh_obj, parse_primitive
from .errors import InvalidArgumentError
from .geometry import TriangleMesh
from .schemas import IntrinsicsModel, PerturbationModel, RefinementModel


class MeshEntry(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str = Field(min_length=1)
    path: Optional[str] = None
    primitive: Optional[str] = None

    @model_validator(mode="after")
    def _one_source(self):
        if (self.path is None) == (self.primitive is None):
            raise ValueError(f"mesh {self.name!r}: give exactly one of 'path' or 'primitive'")
        if self.primitive is not None:
            parse_primitive(self.primitive)
        return self

    def resolve(self, base_dir: Path | None) -> Path:
        p = Path(self.path)
        return p if p.is_absolute() or base_dir is None else base_dir / p

    def load(self, base_dir: Path | None = None) -> TriangleMesh:
        if self.primitive is not None:
            return parse_primitive(self.primitive)
        return load_mesh_obj(self.resolve(base_dir))


class OutputPaths(BaseModel):
    model_config = ConfigDict(extra="forbid")

    dir: str = "results"
    csv: str = "results.csv"
    summary: str = "summary.json"


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    meshes: list[MeshEntry] = Field(min_length=1)
    intrinsics: IntrinsicsModel = IntrinsicsModel()
    window_padding: float = Field(default=0.2, ge=0)
    refinement: RefinementModel = RefinementModel()
    perturbation: PerturbationModel = PerturbationModel()
    occlusion_fraction: float = Field(default=0.0, ge=0, lt=1)
    min_distance: Optional[float] = Field(default=None, gt=0)
    output: OutputPaths = OutputPaths()
    seed: int = 0

    @field_validator("meshes")
    @classmethod
    def _paths_exist(cls, meshes, info: ValidationInfo):
        base = (info.context or {}).get("base_dir")
        names = [m.name for m in meshes]
        if len(set(names)) != len(names):
            raise ValueError("mesh names must be unique")
        for m in meshes:
            if m.path is not None and not m.resolve(base).is_file():
                raise ValueError(f"mesh {m.name!r}: file not found: {m.resolve(base)}")
        return meshes

    def output_dir(self, base_dir: Path | None = None) -> Path:
        p = Path(self.output.dir)
        return p if p.is_absolute() or base_dir is None else base_dir / p


def load_experiment_config(path) -> tuple[ExperimentConfig, Path]:
    """Parse and eagerly validate a config file; returns it with its base directory."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise InvalidArgumentError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidArgumentError(f"{path}: invalid JSON: {exc}") from None
    base = path.resolve().parent
    # pydantic.ValidationError is a ValueError; callers report it as a usage error
    return ExperimentConfig.model_validate(data, context={"base_dir": base}), base


def dump_experiment_config(config: ExperimentConfig) -> str:
    return json.dumps(config.model_dump(mode="json"), indent=2) + "\n"
