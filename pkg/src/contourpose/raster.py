"""Software z-buffer rendering, silhouettes, contours and distance fields.

Every image-like type carries an ``origin``: the full-image pixel coordinate
``(u, v)`` of its ``values[0, 0]`` entry. Full-frame renders have origin
``(0, 0)``; crops keep track of where they came from, so coordinates never
need converting by hand. Pixel ``(u, v)`` is centred on the integer lattice
point, and arrays are indexed ``values[v, u]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DegenerateGeometryError, EmptyContourError, InvalidArgumentError
from .geometry import (
    CameraIntrinsics,
    Pose,
    TriangleMesh,
    UnitQuaternion,
    backproject,
    quat_compose,
    quat_from_axis_angle,
)

BACKGROUND = np.inf
NEAR_PLANE = 1e-4
DEFAULT_CONTOUR_POINTS = 100


@dataclass(frozen=True, eq=False)
class DepthMap:
    values: np.ndarray  # (H, W) float, BACKGROUND where nothing was hit
    origin: tuple[int, int] = (0, 0)

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True, eq=False)
class SilhouetteMask:
    values: np.ndarray  # (H, W) bool
    origin: tuple[int, int] = (0, 0)

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def area(self) -> int:
        return int(self.values.sum())


@dataclass(frozen=True, eq=False)
class DistanceField:
    values: np.ndarray  # (H, W) float, pixels
    origin: tuple[int, int] = (0, 0)

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True, eq=False)
class ContourPointSet:
    points: np.ndarray  # (n, 3) camera space, meters
    pixels: np.ndarray  # (n, 2) int, the contour pixel (u, v) each point came from
    pose: Pose | None = None

    def __len__(self) -> int:
        return len(self.points)


# -- rendering ---------------------------------------------------------------


def _owns_edge(ax, ay, bx, by) -> bool:
    # Exactly one of the two triangles sharing an edge owns it, since the
    # neighbour traverses the edge in the opposite direction.
    dy = by - ay
    return dy > 0 or (dy == 0 and bx - ax < 0)


def _rasterize_triangle(buf, uv, z, bounds):
    """Min-composite one triangle into ``buf`` (full image, indexed [v, u])."""
    (u0, v0), (u1, v1), (u2, v2) = uv
    area = (u1 - u0) * (v2 - v0) - (v1 - v0) * (u2 - u0)
    if area == 0:
        return
    if area < 0:
        u1, v1, u2, v2 = u2, v2, u1, v1
        z = (z[0], z[2], z[1])
        area = -area
    W, H = bounds
    xmin = max(math.ceil(min(u0, u1, u2)), 0)
    xmax = min(math.floor(max(u0, u1, u2)), W - 1)
    ymin = max(math.ceil(min(v0, v1, v2)), 0)
    ymax = min(math.floor(max(v0, v1, v2)), H - 1)
    if xmin > xmax or ymin > ymax:
        return
    px = np.arange(xmin, xmax + 1, dtype=float)[None, :]
    py = np.arange(ymin, ymax + 1, dtype=float)[:, None]

    def edge(ax, ay, bx, by):
        e = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
        if _owns_edge(ax, ay, bx, by):
            return e, e >= 0
        return e, e > 0

    e0, in0 = edge(u1, v1, u2, v2)  # opposite vertex 0
    e1, in1 = edge(u2, v2, u0, v0)
    e2, in2 = edge(u0, v0, u1, v1)
    inside = in0 & in1 & in2
    if not inside.any():
        return
    # perspective-correct depth: 1/z is affine in screen space
    inv_z = (e0 / z[0] + e1 / z[1] + e2 / z[2]) / area
    depth = np.where(inside, 1.0 / np.where(inside, inv_z, 1.0), np.inf)
    region = buf[ymin : ymax + 1, xmin : xmax + 1]
    np.minimum(region, depth, out=region)


def render_depth(mesh: TriangleMesh, pose: Pose, K: CameraIntrinsics) -> DepthMap:
    """Z-buffer render of ``mesh`` under ``pose``; pixel centres are point-sampled."""
    cam = pose.transform(mesh.vertices)
    if np.any(cam[:, 2] <= NEAR_PLANE):
        raise DegenerateGeometryError("mesh vertex behind the near plane; clipping is not supported")
    uv = np.empty((len(cam), 2))
    uv[:, 0] = K.fx * cam[:, 0] / cam[:, 2] + K.cx
    uv[:, 1] = K.fy * cam[:, 1] / cam[:, 2] + K.cy
    buf = np.full((K.height, K.width), BACKGROUND)
    for tri in mesh.triangles:
        _rasterize_triangle(buf, uv[tri].tolist(), tuple(cam[tri, 2]), (K.width, K.height))
    return DepthMap(buf)


def render_scene(items, K: CameraIntrinsics) -> tuple[DepthMap, np.ndarray]:
    """Render several ``(mesh, pose)`` pairs into one shared z-buffer.

    Returns the composited depth and an ``int`` label image holding the index
    of the item visible at each pixel (``-1`` for background).
    """
    depth = np.full((K.height, K.width), BACKGROUND)
    labels = np.full((K.height, K.width), -1, dtype=int)
    for i, (mesh, pose) in enumerate(items):
        d = render_depth(mesh, pose, K).values
        closer = d < depth
        depth[closer] = d[closer]
        labels[closer] = i
    return DepthMap(depth), labels


def extract_silhouette(depth: DepthMap) -> SilhouetteMask:
    return SilhouetteMask(np.isfinite(depth.values), depth.origin)


def mask_bbox(mask: SilhouetteMask) -> tuple[int, int, int, int] | None:
    """Tight ``(umin, vmin, umax, vmax)`` in full-image coordinates, or None if empty."""
    rows = np.flatnonzero(mask.values.any(axis=1))
    if rows.size == 0:
        return None
    cols = np.flatnonzero(mask.values.any(axis=0))
    ou, ov = mask.origin
    return int(cols[0] + ou), int(rows[0] + ov), int(cols[-1] + ou), int(rows[-1] + ov)


def bbox_center(mask: SilhouetteMask) -> tuple[float, float]:
    box = mask_bbox(mask)
    if box is None:
        raise DegenerateGeometryError("empty silhouette has no bounding box")
    return (box[0] + box[2]) / 2.0, (box[1] + box[3]) / 2.0


def extract_contour_pixels(mask: SilhouetteMask) -> np.ndarray:
    """Inner boundary: foreground pixels with a background 4-neighbour.

    Pixels outside the array count as background, so foreground on the border
    is contour. Returns ``(N, 2)`` integer ``(u, v)`` in row-major order.
    """
    m = np.pad(mask.values.astype(bool), 1, constant_values=False)
    core = m[1:-1, 1:-1]
    interior = m[:-2, 1:-1] & m[2:, 1:-1] & m[1:-1, :-2] & m[1:-1, 2:]
    rows, cols = np.nonzero(core & ~interior)  # np.nonzero is row-major already
    ou, ov = mask.origin
    return np.stack([cols + ou, rows + ov], axis=1).astype(np.int64)


def _outward_normals(fg: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Unit ``(du, dv)`` pointing from each contour pixel to its background 4-neighbours."""
    m = np.pad(fg, 1, constant_values=False)
    r, c = rows + 1, cols + 1
    du = (~m[r, c + 1]).astype(float) - (~m[r, c - 1])
    dv = (~m[r + 1, c]).astype(float) - (~m[r - 1, c])
    n = np.hypot(du, dv)
    safe = np.where(n > 0, n, 1.0)
    return np.stack([du / safe, dv / safe], axis=1)


def sample_contour_points_3d(
    depth: DepthMap,
    K: CameraIntrinsics,
    n: int = DEFAULT_CONTOUR_POINTS,
    pose: Pose | None = None,
    contour: np.ndarray | None = None,
) -> ContourPointSet:
    """Back-project ``n`` contour pixels, picked by uniform stride, into camera space.

    Each point is placed half a pixel from its pixel centre towards the
    background neighbours, i.e. on the estimated silhouette edge, and
    back-projected at the pixel's depth. Keeping the points off the integer
    lattice keeps them away from the kinks of the bilinear distance lookup.

    ``contour`` may be passed to sample from a pre-filtered pixel list (e.g.
    the visible part of an occluded object); it must be row-major ordered.
    """
    if n < 1:
        raise InvalidArgumentError("sample count must be >= 1")
    fg = np.isfinite(depth.values)
    if contour is None:
        contour = extract_contour_pixels(SilhouetteMask(fg, depth.origin))
    if len(contour) == 0:
        raise EmptyContourError("silhouette has no contour pixels")
    if len(contour) > n:
        contour = contour[(np.arange(n) * len(contour)) // n]
    ou, ov = depth.origin
    cols = contour[:, 0] - ou
    rows = contour[:, 1] - ov
    z = depth.values[rows, cols]
    edge = contour + 0.5 * _outward_normals(fg, rows, cols)
    pts = backproject(edge[:, 0], edge[:, 1], z, K)
    return ContourPointSet(pts, contour.copy(), pose)


# -- distance fields ----------------------------------------------------------


def distance_transform(
    contour_pixels, width: int, height: int, origin: tuple[int, int] = (0, 0)
) -> DistanceField:
    """Exact Euclidean distance (pixels) to the nearest contour pixel.

    Only contour pixels falling inside the ``width x height`` grid at
    ``origin`` participate.
    """
    pix = np.asarray(contour_pixels, dtype=np.int64).reshape(-1, 2)
    cols = pix[:, 0] - origin[0]
    rows = pix[:, 1] - origin[1]
    keep = (cols >= 0) & (cols < width) & (rows >= 0) & (rows < height)
    if not keep.any():
        raise EmptyContourError("no contour pixel inside the distance-field grid")
    grid = np.ones((height, width), dtype=bool)
    grid[rows[keep], cols[keep]] = False
    return DistanceField(ndimage.distance_transform_edt(grid), tuple(origin))


def sample_distance(field: DistanceField, u, v) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear distance lookup with its analytic gradient.

    Accepts scalars or arrays of full-image coordinates. Inside a cell the
    gradient is the exact derivative of the bilinear patch. Outside the grid the
    value grows with slope 1 along the shortest path back to the grid edge,
    on top of the bilinear value found there. Returns ``(value, grad)`` with
    ``grad[..., 0] = d/du`` and ``grad[..., 1] = d/dv``.
    """
    D = field.values
    H, W = D.shape
    x = np.asarray(u, dtype=float) - field.origin[0]
    y = np.asarray(v, dtype=float) - field.origin[1]
    cx = np.clip(x, 0.0, W - 1.0)
    cy = np.clip(y, 0.0, H - 1.0)
    i0 = np.clip(np.floor(cx).astype(np.int64), 0, max(W - 2, 0))
    j0 = np.clip(np.floor(cy).astype(np.int64), 0, max(H - 2, 0))
    i1 = np.minimum(i0 + 1, W - 1)
    j1 = np.minimum(j0 + 1, H - 1)
    a = cx - i0
    b = cy - j0
    d00 = D[j0, i0]
    d10 = D[j0, i1]
    d01 = D[j1, i0]
    d11 = D[j1, i1]
    val = d00 * (1 - a) * (1 - b) + d10 * a * (1 - b) + d01 * (1 - a) * b + d11 * a * b
    ga = (d10 - d00) * (1 - b) + (d11 - d01) * b
    gb = (d01 - d00) * (1 - a) + (d11 - d10) * a
    # On an interior lattice line the surface is not differentiable; use the
    # mean of the two one-sided derivatives there.
    on_u = (a == 0) & (cx > 0) & (cx < W - 1)
    if np.any(on_u):
        im = np.maximum(i0 - 1, 0)
        ga_left = (d00 - D[j0, im]) * (1 - b) + (d01 - D[j1, im]) * b
        ga = np.where(on_u, 0.5 * (ga + ga_left), ga)
    on_v = (b == 0) & (cy > 0) & (cy < H - 1)
    if np.any(on_v):
        jm = np.maximum(j0 - 1, 0)
        gb_up = (d00 - D[jm, i0]) * (1 - a) + (d10 - D[jm, i1]) * a
        gb = np.where(on_v, 0.5 * (gb + gb_up), gb)
    ex = x - cx
    ey = y - cy
    # along a clamped axis the bilinear part is constant
    ga = np.where(ex == 0, ga, 0.0)
    gb = np.where(ey == 0, gb, 0.0)
    dist = np.hypot(ex, ey)
    outside = dist > 0
    safe = np.where(outside, dist, 1.0)
    val = val + dist
    ga = ga + np.where(outside, ex / safe, 0.0)
    gb = gb + np.where(outside, ey / safe, 0.0)
    return val, np.stack([ga, gb], axis=-1)


# -- windows and crops --------------------------------------------------------


def fibonacci_directions(n: int, seed: int = 0) -> np.ndarray:
    """``n`` low-discrepancy unit vectors; ``seed`` applies a random global rotation."""
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = i * math.pi * (3.0 - math.sqrt(5.0))
    dirs = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    rng = np.random.default_rng(seed)
    q = rng.normal(size=4)
    R = UnitQuaternion.from_array(q).matrix()
    return dirs @ R.T


def view_rotation(direction, roll: float = 0.0) -> UnitQuaternion:
    """Rotation that turns the object-frame ``direction`` towards the camera (-z),
    followed by an in-plane ``roll`` about the optical axis."""
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    target = np.array([0.0, 0.0, -1.0])
    axis = np.cross(d, target)
    s = np.linalg.norm(axis)
    c = float(np.dot(d, target))
    if s < 1e-12:
        q = UnitQuaternion.identity() if c > 0 else quat_from_axis_angle([1.0, 0.0, 0.0], math.pi)
    else:
        q = quat_from_axis_angle(axis, math.atan2(s, c))
    return quat_compose(quat_from_axis_angle([0.0, 0.0, 1.0], roll), q)


def compute_window_size(
    mesh: TriangleMesh,
    K: CameraIntrinsics,
    min_distance: float,
    n_views: int = 24,
    padding_fraction: float = 0.2,
    seed: int = 0,
) -> int:
    """Side length (pixels) of a square crop that holds the object from any
    viewpoint at ``min_distance``, enlarged by ``padding_fraction``."""
    radius = float(np.linalg.norm(mesh.vertices, axis=1).max())
    if min_distance <= radius:
        raise InvalidArgumentError("min_distance must exceed the mesh radius")
    if n_views < 1:
        raise InvalidArgumentError("n_views must be >= 1")
    if padding_fraction < 0:
        raise InvalidArgumentError("padding_fraction must be non-negative")
    rng = np.random.default_rng(seed)
    rolls = rng.uniform(0.0, 2 * math.pi, size=n_views)
    biggest = 0
    for d, roll in zip(fibonacci_directions(n_views, seed), rolls):
        pose = Pose(view_rotation(d, roll), np.array([0.0, 0.0, min_distance]))
        box = mask_bbox(extract_silhouette(render_depth(mesh, pose, K)))
        if box is None:
            raise DegenerateGeometryError("object projects fully outside the image")
        biggest = max(biggest, box[2] - box[0] + 1, box[3] - box[1] + 1)
    # round() guards against 205 * 1.2 = 246.00000000000003
    return int(math.ceil(round(biggest * (1.0 + padding_fraction), 9)))


def _fill_value(values: np.ndarray):
    if values.dtype == bool:
        return False
    if np.issubdtype(values.dtype, np.floating):
        return BACKGROUND
    return -1


def window_origin(center: tuple[float, float], window: int) -> tuple[int, int]:
    """Full-image coordinate of the top-left pixel of a window centred on ``center``."""
    return (
        int(math.floor(center[0] + 0.5)) - window // 2,
        int(math.floor(center[1] + 0.5)) - window // 2,
    )


def crop_patch(image, center: tuple[float, float], window: int):
    """Square ``window x window`` crop centred on ``center`` (full-image coords).

    Works on any of the image types above; out-of-range source pixels get the
    background sentinel (``inf`` / ``False``). The result's ``origin`` records
    the crop offset.
    """
    if window < 1:
        raise InvalidArgumentError("window must be >= 1")
    u0, v0 = window_origin(center, window)
    src = image.values
    out = np.full((window, window), _fill_value(src), dtype=src.dtype)
    ou, ov = image.origin
    # overlap in source-array indices
    c0 = max(u0 - ou, 0)
    c1 = min(u0 - ou + window, src.shape[1])
    r0 = max(v0 - ov, 0)
    r1 = min(v0 - ov + window, src.shape[0])
    if c0 < c1 and r0 < r1:
        out[r0 + ov - v0 : r1 + ov - v0, c0 + ou - u0 : c1 + ou - u0] = src[r0:r1, c0:c1]
    return replace(image, values=out, origin=(u0, v0))


def patch_to_image(image, col: int, row: int) -> tuple[int, int]:
    return col + image.origin[0], row + image.origin[1]


def image_to_patch(image, u: int, v: int) -> tuple[int, int]:
    return u - image.origin[0], v - image.origin[1]


# -- debug dumps --------------------------------------------------------------


def encode_pgm(image) -> bytes:
    """Encode a DepthMap / SilhouetteMask / DistanceField as binary PGM bytes.

    Scaling (also written as a header comment):
      mask     8-bit, 255 = foreground
      depth    16-bit, round(depth_m * 1000) i.e. millimetres, 0 = background
      distance 16-bit, round(distance_px * 100), clipped at 65535
    """
    v = image.values
    if isinstance(image, SilhouetteMask):
        data = np.where(v, 255, 0).astype(">u1")
        maxval, note = 255, "silhouette mask: 255 = foreground, 0 = background"
    elif isinstance(image, DepthMap):
        fin = np.isfinite(v)
        data = np.where(fin, np.clip(np.round(np.where(fin, v, 0) * 1000), 1, 65535), 0).astype(">u2")
        maxval, note = 65535, "depth: value = round(depth_m * 1000) (millimetres); 0 = background"
    elif isinstance(image, DistanceField):
        data = np.clip(np.round(np.nan_to_num(v, posinf=1e9) * 100), 0, 65535).astype(">u2")
        maxval, note = 65535, "distance: value = round(distance_px * 100), clipped at 65535"
    else:
        raise InvalidArgumentError(f"cannot dump {type(image).__name__}")
    header = f"P5\n# {note}\n# origin {image.origin[0]} {image.origin[1]}\n{v.shape[1]} {v.shape[0]}\n{maxval}\n"
    return header.encode("ascii") + data.tobytes()


def decode_pgm(raw: bytes) -> tuple[np.ndarray, list[str]]:
    """Parse binary PGM bytes; returns the raw values and the header comments."""
    tokens, comments, pos = [], [], 0
    try:
        while len(tokens) < 4:
            end = raw.index(b"\n", pos)
            line = raw[pos:end].decode("ascii")
            pos = end + 1
            if line.startswith("#"):
                comments.append(line[1:].strip())
            else:
                tokens.extend(line.split())
        if tokens[0] != "P5":
            raise InvalidArgumentError(f"not a binary PGM (magic {tokens[0]!r})")
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
        dtype = ">u1" if maxval < 256 else ">u2"
        return np.frombuffer(raw[pos:], dtype=dtype).reshape(h, w), comments
    except (ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, InvalidArgumentError):
            raise
        raise InvalidArgumentError(f"malformed PGM: {exc}") from None


def write_pgm(path, image) -> Path:
    """Dump an image to ``path`` as binary PGM (see :func:`encode_pgm` for scaling)."""
    path = Path(path)
    data = encode_pgm(image)
    try:
        path.write_bytes(data)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    return path


def read_pgm(path) -> tuple[np.ndarray, list[str]]:
    """Read back a PGM written by :func:`write_pgm`; returns raw values and comments."""
    return decode_pgm(Path(path).read_bytes())
