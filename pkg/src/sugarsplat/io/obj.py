"""Wavefront OBJ with the common ``v x y z r g b`` vertex-color extension.

Coordinates are written as float32 values with 9 significant digits, which
is enough to recover every float32 exactly.
"""
from __future__ import annotations

import io

import numpy as np

from ..errors import FormatError
from .ply import _atomic_write


def _fmt(values):
    return " ".join("%.9g" % v for v in values)


def write_obj(path, mesh):
    verts = mesh.vertices.astype(np.float32)
    colors = np.clip(mesh.vertex_colors, 0.0, 1.0).astype(np.float32)
    out = io.StringIO()
    out.write(f"# vertices {len(verts)} faces {len(mesh.faces)}\n")
    for p, c in zip(verts, colors):
        out.write(f"v {_fmt(p)} {_fmt(c)}\n")
    for f in mesh.faces:
        out.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")
    _atomic_write(path, out.getvalue().encode("ascii"))


def read_obj(path):
    from ..mesh import TriMesh

    try:
        with open(path, "r", encoding="ascii") as fh:
            lines = fh.read().split("\n")
    except (OSError, UnicodeDecodeError) as exc:
        raise FormatError(path, f"cannot read: {exc}") from exc
    verts, colors, faces = [], [], []
    for lineno, line in enumerate(lines, 1):
        parts = line.split("#", 1)[0].split()
        if not parts:
            continue
        try:
            if parts[0] == "v":
                if len(parts) not in (4, 7):
                    raise ValueError(f"vertex needs 3 or 6 values, got {len(parts) - 1}")
                vals = np.array([float(x) for x in parts[1:]], dtype=np.float32)
                verts.append(vals[:3])
                colors.append(vals[3:] if len(vals) == 6 else np.full(3, 0.5, np.float32))
            elif parts[0] == "f":
                idx = [int(tok.split("/")[0]) for tok in parts[1:]]
                if len(idx) < 3:
                    raise ValueError("face needs at least 3 vertices")
                idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                # fan-triangulate polygons
                faces.extend([idx[0], idx[k], idx[k + 1]] for k in range(1, len(idx) - 1))
        except ValueError as exc:
            raise FormatError(path, str(exc), lineno, "line") from None
    verts = np.array(verts, dtype=np.float32).reshape(-1, 3).astype(np.float64)
    faces = np.array(faces, dtype=np.int64).reshape(-1, 3)
    if len(faces) and (faces.min() < 0 or faces.max() >= len(verts)):
        raise FormatError(path, "face references a missing vertex")
    return TriMesh(verts, faces, np.array(colors, dtype=np.float32).reshape(-1, 3).astype(np.float64))
