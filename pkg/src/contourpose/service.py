"""HTTP service exposing rendering, refinement, benchmarking and metrics.

Run with ``uvicorn contourpose.service:app``. Library errors map to status
codes: bad arguments and unparsable meshes give 400, other failures of the
pipeline give 422.
"""

from __future__ import annotations

import base64
import logging

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .bench import (
    add_error,
    export_results,
    render_vss,
    rotation_translation_errors,
    run_perturbation_benchmark,
    summarize,
)
from .errors import ContourPoseError, InvalidArgumentError, ObjParseError
from .geometry import mesh_diameter
from .raster import (
    SilhouetteMask,
    decode_pgm,
    distance_transform,
    encode_pgm,
    extract_contour_pixels,
    extract_silhouette,
    mask_bbox,
    render_depth,
)
from .refine import build_scene_observation, refine_iterative
from .schemas import (
    BenchRequest,
    BenchResponse,
    LevelSummaryModel,
    MetricsRequest,
    MetricsResponse,
    PoseModel,
    RefineRequest,
    RefineResponse,
    RenderRequest,
    RenderResponse,
)

log = logging.getLogger(__name__)

app = FastAPI(title="contourpose", version="0.1.0")


@app.exception_handler(ContourPoseError)
async def _library_error(request: Request, exc: ContourPoseError):
    status = 400 if isinstance(exc, (InvalidArgumentError, ObjParseError)) else 422
    return JSONResponse(status_code=status, content={"detail": f"{type(exc).__name__}: {exc}"})


def _b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


@app.get("/health")
def health():
    return {"status": "ok"}


@app.post("/render", response_model=RenderResponse)
def render(req: RenderRequest) -> RenderResponse:
    mesh = req.mesh.to_mesh()
    K = req.intrinsics.to_domain()
    depth = render_depth(mesh, req.pose.to_domain(), K)
    mask = extract_silhouette(depth)
    contour = extract_contour_pixels(mask)
    distance = _b64(encode_pgm(distance_transform(contour, K.width, K.height))) if len(contour) else None
    bbox = mask_bbox(mask)
    return RenderResponse(
        width=K.width,
        height=K.height,
        silhouette_area=mask.area,
        contour_pixels=len(contour),
        bbox=list(bbox) if bbox is not None else None,
        depth_pgm=_b64(encode_pgm(depth)),
        mask_pgm=_b64(encode_pgm(mask)),
        distance_pgm=distance,
    )


def _mask_from_pgm(b64: str, width: int, height: int) -> SilhouetteMask:
    values, _ = decode_pgm(base64.b64decode(b64))
    if values.shape != (height, width):
        raise InvalidArgumentError(f"scene mask is {values.shape[1]}x{values.shape[0]}, expected {width}x{height}")
    return SilhouetteMask(values > 0)


@app.post("/refine", response_model=RefineResponse)
def refine(req: RefineRequest) -> RefineResponse:
    mesh = req.mesh.to_mesh()
    K = req.intrinsics.to_domain()
    config = req.config.to_domain()
    initial = req.initial.to_domain()
    gt = req.gt.to_domain() if req.gt is not None else None
    if gt is not None:
        obs = build_scene_observation(mesh, gt, K, n_points=config.n_contour_points)
        field, points = obs.field, obs.points
    else:
        # a bare mask has no depth, so there are no scene points for the reverse term
        mask = _mask_from_pgm(req.scene_mask_pgm, K.width, K.height)
        field = distance_transform(extract_contour_pixels(mask), K.width, K.height)
        points = None
    result = refine_iterative(initial, field, points, mesh, K, config, gt_pose=gt)
    d = result.to_dict()
    return RefineResponse(
        final_pose=PoseModel.from_domain(result.final_pose),
        initial_pose=PoseModel.from_domain(result.initial_pose),
        termination=d["termination"],
        iterations=d["iterations"],
        bidirectional=config.use_bidirectional and points is not None,
        trace=d["trace"],
        updates=[PoseModel.from_domain(u) for u in result.updates],
        wall_time=d["wall_time"],
        error=d["error"],
        final_rotation_error_deg=d["final_rotation_error_deg"],
        final_translation_error_m=d["final_translation_error_m"],
    )


@app.post("/bench", response_model=BenchResponse)
def bench(req: BenchRequest) -> BenchResponse:
    K = req.intrinsics.to_domain()
    config = req.refinement.to_domain(req.window_padding)
    spec = req.perturbation.to_domain(req.seed)
    records = []
    for entry in req.meshes:
        log.info("benchmarking %s", entry.name)
        records += run_perturbation_benchmark(
            entry.mesh.to_mesh(), K, spec, config,
            object_name=entry.name, min_distance=req.min_distance,
            occlusion_fraction=req.occlusion_fraction,
        )  # fmt: skip
    summary = [LevelSummaryModel(**vars(s)) for s in summarize(records)]
    return BenchResponse(csv=export_results(records), summary=summary)


@app.post("/metrics", response_model=MetricsResponse)
def metrics(req: MetricsRequest) -> MetricsResponse:
    mesh = req.mesh.to_mesh()
    gt, est = req.gt.to_domain(), req.estimate.to_domain()
    diameter = mesh_diameter(mesh)
    rot, per_axis, trans = rotation_translation_errors(gt, est)
    add = add_error(mesh, gt, est)
    return MetricsResponse(
        diameter=diameter,
        vss=render_vss(mesh, gt, est, req.intrinsics.to_domain()),
        add_m=add,
        add_correct=bool(add < 0.1 * diameter),
        rotation_deg=rot,
        translation_m=trans,
        per_axis_m=[float(v) for v in np.asarray(per_axis)],
    )
