"""Meshes: a minimal ASCII OBJ reader and the built-in benchmark primitives."""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .errors import InvalidArgumentError, ObjParseError
from .geometry import TriangleMesh

_IGNORED = {"vn", "vt", "vp", "usemtl", "mtllib", "o", "g", "s", "l", "p"}


def parse_obj(text: str) -> TriangleMesh:
    """Parse the ``v`` / ``f`` subset of Wavefront OBJ.

    Faces with more than three corners are fan-triangulated around their
    first corner. Indices are 1-based; texture/normal references after ``/``
    are dropped.
    """
    verts: list[list[float]] = []
    tris: list[tuple[int, int, int]] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        head, *rest = line.split()
        if head == "v":
            if len(rest) not in (3, 4):
                raise ObjParseError("vertex needs 3 coordinates", lineno)
            try:
                verts.append([float(c) for c in rest[:3]])
            except ValueError:
                raise ObjParseError(f"bad vertex coordinate in {line!r}", lineno) from None
        elif head == "f":
            if len(rest) < 3:
                raise ObjParseError("face needs at least 3 vertices", lineno)
            idx = []
            for tok in rest:
                try:
                    i = int(tok.split("/", 1)[0])
                except ValueError:
                    raise ObjParseError(f"bad face index {tok!r}", lineno) from None
                if i <= 0:
                    raise ObjParseError(f"face index {i} must be positive (1-based)", lineno)
                if i > len(verts):
                    raise ObjParseError(f"face index {i} refers to an undefined vertex", lineno)
                idx.append(i - 1)
            for k in range(1, len(idx) - 1):
                tris.append((idx[0], idx[k], idx[k + 1]))
        elif head in _IGNORED:
            continue
        else:
            raise ObjParseError(f"unsupported statement {head!r}", lineno)
    if not tris:
        raise ObjParseError("no faces found")
    return TriangleMesh(np.array(verts), np.array(tris))


def load_mesh_obj(path) -> TriangleMesh:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise OSError(f"cannot read mesh {path}: {exc}") from exc
    try:
        return parse_obj(text)
    except ObjParseError as exc:
        raise ObjParseError(f"{path}: {exc}") from None


def mesh_to_obj(mesh: TriangleMesh) -> str:
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles.tolist()]
    return "\n".join(lines) + "\n"


# -- primitives ---------------------------------------------------------------


def cube(size: float = 0.1) -> TriangleMesh:
    """Axis-aligned cube centred at the origin: 8 vertices, 12 triangles."""
    h = size / 2.0
    v = np.array([[x, y, z] for x in (-h, h) for y in (-h, h) for z in (-h, h)])
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    tris = [t for a, b, c, d in quads for t in ((a, b, c), (a, c, d))]
    return TriangleMesh(v, tris)


def icosphere(radius: float = 0.1, level: int = 3) -> TriangleMesh:
    """Subdivided icosahedron: ``10 * 4**level + 2`` vertices, ``20 * 4**level`` triangles."""
    if level < 0:
        raise InvalidArgumentError("subdivision level must be >= 0")
    p = (1.0 + math.sqrt(5.0)) / 2.0
    verts = [
        [-1, p, 0], [1, p, 0], [-1, -p, 0], [1, -p, 0],
        [0, -1, p], [0, 1, p], [0, -1, -p], [0, 1, -p],
        [p, 0, -1], [p, 0, 1], [-p, 0, -1], [-p, 0, 1],
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [list(np.asarray(v, float) / np.linalg.norm(v)) for v in verts]
    for _ in range(level):
        cache: dict[tuple[int, int], int] = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = np.add(verts[a], verts[b])
                verts.append(list(m / np.linalg.norm(m)))
                cache[key] = len(verts) - 1
            return cache[key]

        nxt = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nxt += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = nxt
    return TriangleMesh(np.array(verts) * radius, faces)


def cylinder(radius: float = 0.05, height: float = 0.15, segments: int = 32) -> TriangleMesh:
    """Closed cylinder about the z axis, centred at the origin.

    ``2 * segments + 2`` vertices (two rings plus cap centres), ``4 * segments`` triangles.
    """
    if segments < 3:
        raise InvalidArgumentError("cylinder needs at least 3 segments")
    ang = 2 * math.pi * np.arange(segments) / segments
    ring = np.stack([radius * np.cos(ang), radius * np.sin(ang)], axis=1)
    h = height / 2.0
    bottom = np.column_stack([ring, np.full(segments, -h)])
    top = np.column_stack([ring, np.full(segments, h)])
    verts = np.vstack([bottom, top, [[0, 0, -h], [0, 0, h]]])
    cb, ct = 2 * segments, 2 * segments + 1
    tris = []
    for i in range(segments):
        j = (i + 1) % segments
        tris += [(i, j, segments + j), (i, segments + j, segments + i)]
        tris += [(cb, j, i), (ct, segments + i, segments + j)]
    return TriangleMesh(verts, tris)


def lbracket(size: float = 0.15) -> TriangleMesh:
    """Asymmetric L-shaped bracket: an L profile with unequal arms, extruded.

    The profile has no mirror axis, so the solid has no rotational symmetry.
    12 vertices, 20 triangles, centred on its bounding box.
    """
    s = size
    # profile in the xy plane, counter-clockwise: long arm along x, short arm along y
    prof = np.array(
        [[0, 0], [1.0, 0], [1.0, 0.28], [0.3, 0.28], [0.3, 0.62], [0, 0.62]]
    ) * s
    depth = 0.38 * s
    n = len(prof)
    verts = np.vstack([np.column_stack([prof, np.zeros(n)]), np.column_stack([prof, np.full(n, depth)])])
    verts -= (verts.min(axis=0) + verts.max(axis=0)) / 2.0
    # the L splits into two convex quads: (0,1,2,3) and (0,3,4,5)
    caps = [(0, 2, 1), (0, 3, 2), (0, 4, 3), (0, 5, 4)]
    tris = list(caps) + [(a + n, c + n, b + n) for a, b, c in caps]
    for i in range(n):
        j = (i + 1) % n
        tris += [(i, j, n + j), (i, n + j, n + i)]
    return TriangleMesh(verts, tris)


PRIMITIVES = {"cube": cube, "icosphere": icosphere, "cylinder": cylinder, "lbracket": lbracket}


def builtin_primitives(name: str, params=()) -> TriangleMesh:
    try:
        factory = PRIMITIVES[name]
    except KeyError:
        raise InvalidArgumentError(f"unknown primitive {name!r}; choose from {sorted(PRIMITIVES)}") from None
    args = [float(p) for p in params]
    # subdivision level / segment count are integers
    int_slot = {"icosphere": 1, "cylinder": 2}.get(name)
    if int_slot is not None and len(args) > int_slot:
        args[int_slot] = int(args[int_slot])
    return factory(*args)


def parse_primitive(spec: str) -> TriangleMesh:
    """``"name"`` or ``"name:p1,p2,..."``, e.g. ``"icosphere:0.1,3"``."""
    name, _, rest = spec.partition(":")
    params = [p for p in rest.split(",") if p.strip()] if rest else []
    try:
        return builtin_primitives(name.strip(), params)
    except (ValueError, TypeError) as exc:
        raise InvalidArgumentError(f"bad primitive spec {spec!r}: {exc}") from None
