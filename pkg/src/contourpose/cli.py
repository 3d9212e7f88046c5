"""Command-line client for the contourpose service.

By default requests are served in-process; ``--url`` sends them to a running
server instead (``uvicorn contourpose.service:app``). Poses are written as
``w,x,y,z,tx,ty,tz`` (Hamilton quaternion, then translation in meters), as a
JSON object ``{"q": [...], "t": [...]}``, or as ``@file.json``.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import base64
import json
import logging
import sys
import warnings
from pathlib import Path

from pydantic import ValidationError

from .assets import parse_primitive
from .bench import perturb_pose
from .config import ExperimentConfig, load_experiment_config
from .errors import InvalidArgumentError
from .geometry import mesh_diameter
from .schemas import (
    BenchRequest,
    IntrinsicsModel,
    MeshSource,
    MetricsRequest,
    NamedMesh,
    PoseModel,
    RefinementModel,
    RefineRequest,
    RenderRequest,
)

log = logging.getLogger("contourpose")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class RuntimeFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


# -- transport -----------------------------------------------------------------


class Client:
    """POSTs JSON to the service, in-process or over HTTP."""

    def __init__(self, url: str | None = None):
        if url:
            import httpx

            self._http = httpx.Client(base_url=url, timeout=None)
        else:
            with warnings.catch_warnings():
                # starlette nags about its httpx backend on import
                warnings.simplefilter("ignore")
                from fastapi.testclient import TestClient

            from .service import app

            self._http = TestClient(app)

    def post(self, path: str, payload) -> dict:
        try:
            resp = self._http.post(path, json=payload.model_dump(mode="json"))
        except Exception as exc:  # connection refused, DNS, ...
            raise RuntimeFailure(f"request to {path} failed: {exc}") from exc
        if resp.status_code != 200:
            try:
                detail = resp.json().get("detail", resp.text)
            except ValueError:
                detail = resp.text
            raise RuntimeFailure(f"{path}: HTTP {resp.status_code}: {detail}")
        return resp.json()


# -- argument helpers ------------------------------------------------------------


def parse_pose(text: str) -> PoseModel:
    if text.startswith("@"):
        try:
            text = Path(text[1:]).read_text()
        except OSError as exc:
            raise UsageError(f"cannot read pose file: {exc}") from None
    text = text.strip()
    try:
        if text.startswith("{"):
            return PoseModel(**json.loads(text))
        vals = [float(v) for v in text.split(",")]
    except (ValueError, TypeError) as exc:
        raise UsageError(f"bad pose {text!r}: {exc}") from None
    if len(vals) != 7:
        raise UsageError(f"pose needs 7 numbers (w,x,y,z,tx,ty,tz), got {len(vals)}")
    try:
        return PoseModel(q=vals[:4], t=vals[4:])
    except ValidationError as exc:
        raise UsageError(f"bad pose {text!r}: {exc.errors()[0]['msg']}") from None


def parse_intrinsics(text: str) -> IntrinsicsModel:
    try:
        fx, fy, cx, cy, w, h = (float(v) for v in text.split(","))
        return IntrinsicsModel(fx=fx, fy=fy, cx=cx, cy=cy, width=int(w), height=int(h))
    except (ValueError, ValidationError) as exc:
        raise UsageError(f"bad intrinsics {text!r} (want fx,fy,cx,cy,width,height): {exc}") from None


def _load_config(args) -> tuple[ExperimentConfig | None, Path | None]:
    if not args.config:
        return None, None
    try:
        return load_experiment_config(args.config)
    except (InvalidArgumentError, ValidationError) as exc:
        raise UsageError(f"invalid config: {exc}") from None


def _mesh_source(args, config, base) -> MeshSource:
    if args.mesh and args.primitive:
        raise UsageError("give at most one of --mesh and --primitive")
    if args.primitive:
        try:
            parse_primitive(args.primitive)
        except InvalidArgumentError as exc:
            raise UsageError(str(exc)) from None
        return MeshSource(primitive=args.primitive)
    if args.mesh:
        try:
            return MeshSource(obj=Path(args.mesh).read_text())
        except OSError as exc:
            raise RuntimeFailure(f"cannot read mesh {args.mesh}: {exc}") from None
    if config is not None:
        return _entry_source(config.meshes[0], base)
    raise UsageError("a mesh is required: use --mesh, --primitive or --config")


def _entry_source(entry, base) -> MeshSource:
    if entry.primitive is not None:
        return MeshSource(primitive=entry.primitive)
    try:
        return MeshSource(obj=entry.resolve(base).read_text())
    except OSError as exc:
        raise RuntimeFailure(f"cannot read mesh {entry.path}: {exc}") from None


def _intrinsics(args, config) -> IntrinsicsModel:
    if args.intrinsics:
        return parse_intrinsics(args.intrinsics)
    return config.intrinsics if config is not None else IntrinsicsModel()


def _refinement(args, config) -> RefinementModel:
    model = config.refinement if config is not None else RefinementModel()
    updates = {}
    if args.max_iters is not None:
        updates["max_outer_iterations"] = args.max_iters
    if args.no_bidirectional:
        updates["use_bidirectional"] = False
    try:
        return RefinementModel(**{**model.model_dump(), **updates})
    except ValidationError as exc:
        raise UsageError(f"invalid refinement settings: {exc}") from None


def _out_dir(args, default: Path | None = None) -> Path | None:
    out = Path(args.out) if args.out else default
    if out is not None:
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise RuntimeFailure(f"cannot create output directory {out}: {exc}") from None
    return out


def _write(path: Path, data) -> None:
    try:
        if isinstance(data, bytes):
            path.write_bytes(data)
        else:
            path.write_text(data)
    except OSError as exc:
        raise RuntimeFailure(f"cannot write {path}: {exc}") from None


def _emit(payload: dict, out: Path | None, name: str) -> None:
    text = json.dumps(payload, indent=2) + "\n"
    sys.stdout.write(text)
    if out is not None:
        _write(out / name, text)


# -- subcommands ----------------------------------------------------------------


def cmd_render(args, client: Client) -> int:
    config, base = _load_config(args)
    req = RenderRequest(mesh=_mesh_source(args, config, base), pose=parse_pose(args.pose),
                        intrinsics=_intrinsics(args, config))  # fmt: skip
    resp = client.post("/render", req)
    out = _out_dir(args, Path("."))
    for key, name in (("depth_pgm", "depth.pgm"), ("mask_pgm", "mask.pgm"), ("distance_pgm", "distance.pgm")):
        if resp.get(key):
            _write(out / name, base64.b64decode(resp.pop(key)))
        else:
            resp.pop(key, None)
    _emit(resp, out, "render.json")
    return EXIT_OK


def cmd_refine(args, client: Client) -> int:
    config, base = _load_config(args)
    mesh = _mesh_source(args, config, base)
    gt = parse_pose(args.gt) if args.gt else None
    if (gt is None) == (args.scene_mask is None):
        raise UsageError("give exactly one of --gt and --scene-mask")
    if args.initial and args.perturb:
        raise UsageError("give at most one of --initial and --perturb")
    if args.initial:
        initial = parse_pose(args.initial)
    elif args.perturb:
        if gt is None:
            raise UsageError("--perturb needs --gt")
        try:
            angle, frac = (float(v) for v in args.perturb.split(","))
        except ValueError:
            raise UsageError("--perturb wants ANGLE_DEG,TRANSLATION_FRACTION") from None
        seed = args.seed if args.seed is not None else (config.seed if config else 0)
        try:
            diameter = mesh_diameter(mesh.to_mesh())
            initial = PoseModel.from_domain(perturb_pose(gt.to_domain(), angle, frac, diameter, seed))
        except InvalidArgumentError as exc:
            raise UsageError(str(exc)) from None
    else:
        raise UsageError("an initial pose is required: use --initial or --perturb")
    mask_b64 = None
    if args.scene_mask:
        try:
            mask_b64 = base64.b64encode(Path(args.scene_mask).read_bytes()).decode("ascii")
        except OSError as exc:
            raise RuntimeFailure(f"cannot read scene mask: {exc}") from None
    req = RefineRequest(mesh=mesh, initial=initial, intrinsics=_intrinsics(args, config), gt=gt,
                        scene_mask_pgm=mask_b64, config=_refinement(args, config))  # fmt: skip
    resp = client.post("/refine", req)
    _emit(resp, _out_dir(args), "refine.json")
    return EXIT_OK


def cmd_bench(args, client: Client) -> int:
    config, base = _load_config(args)
    if config is None:
        raise UsageError("bench needs --config")
    if args.mesh or args.primitive:
        meshes = [NamedMesh(name=Path(args.mesh).stem if args.mesh else args.primitive.split(":")[0],
                            mesh=_mesh_source(args, None, None))]  # fmt: skip
    else:
        meshes = [NamedMesh(name=m.name, mesh=_entry_source(m, base)) for m in config.meshes]
    req = BenchRequest(
        meshes=meshes,
        intrinsics=_intrinsics(args, config),
        window_padding=config.window_padding,
        refinement=_refinement(args, config),
        perturbation=config.perturbation,
        occlusion_fraction=config.occlusion_fraction,
        min_distance=config.min_distance,
        seed=args.seed if args.seed is not None else config.seed,
    )
    resp = client.post("/bench", req)
    out = _out_dir(args, config.output_dir(base))
    _write(out / config.output.csv, resp["csv"])
    _write(out / config.output.summary, json.dumps(resp["summary"], indent=2, sort_keys=True) + "\n")
    for s in resp["summary"]:
        print(f"{s['object']:>12} {s['mode']:>5} {s['level']:>6g}  <5deg {s['frac_rot_lt5']:.2f}  "
              f"diverged {s['frac_diverged']:.2f}  ADD {s['add_rate']:.2f}")  # fmt: skip
    print(f"wrote {out / config.output.csv}")
    return EXIT_OK


def cmd_metrics(args, client: Client) -> int:
    config, base = _load_config(args)
    req = MetricsRequest(mesh=_mesh_source(args, config, base), gt=parse_pose(args.gt),
                         estimate=parse_pose(args.estimate), intrinsics=_intrinsics(args, config))  # fmt: skip
    resp = client.post("/metrics", req)
    _emit(resp, _out_dir(args), "metrics.json")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="experiment config (JSON)")
    common.add_argument("--seed", type=int, help="random seed (overrides the config)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--mesh", help="ASCII OBJ mesh file")
    common.add_argument("--primitive", help="built-in mesh, e.g. cube:0.1 or icosphere:0.1,3")
    common.add_argument("--intrinsics", help="fx,fy,cx,cy,width,height")
    common.add_argument("--max-iters", type=int, help="outer refinement iterations")
    common.add_argument("--no-bidirectional", action="store_true", help="forward loss term only")
    common.add_argument("--url", help="service URL; default runs in-process")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="contourpose", description="Contour-based 6D pose refinement.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("render", parents=[common], help="dump depth, mask and distance images")
    p.add_argument("--pose", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("refine", parents=[common], help="refine a pose against a scene")
    p.add_argument("--initial", help="initial pose")
    p.add_argument("--perturb", help="ANGLE_DEG,FRACTION: perturb --gt by this much (uses --seed)")
    p.add_argument("--gt", help="ground-truth pose; the scene is rendered from it")
    p.add_argument("--scene-mask", help="binary PGM scene silhouette")
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("bench", parents=[common], help="run the perturbation benchmark")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("metrics", parents=[common], help="VSS / ADD / per-axis errors")
    p.add_argument("--gt", required=True)
    p.add_argument("--estimate", required=True)
    p.set_defaults(func=cmd_metrics)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args, Client(args.url))
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValidationError as exc:
        print(f"error: invalid input: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except RuntimeFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
