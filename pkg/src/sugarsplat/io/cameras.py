"""Camera list files: one camera per line.

Each line holds ``fov_y width height near far`` followed by the 16 entries of
the world-to-camera matrix in row-major order. ``#`` starts a comment.
"""
from __future__ import annotations

import numpy as np

from ..errors import FormatError
from .ply import _atomic_write


def write_cameras(path, views):
    lines = ["# fov_y width height near far m00 m01 ... m33"]
    for v in views:
        head = [repr(float(v.fov_y)), str(v.width), str(v.height), repr(float(v.near)), repr(float(v.far))]
        lines.append(" ".join(head + [repr(float(x)) for x in v.world_to_camera.ravel()]))
    _atomic_write(path, ("\n".join(lines) + "\n").encode("ascii"))


def read_cameras(path):
    from ..camera import CameraView

    try:
        with open(path, "r", encoding="ascii") as fh:
            text = fh.read()
    except (OSError, UnicodeDecodeError) as exc:
        raise FormatError(path, f"cannot read: {exc}") from exc
    views = []
    for lineno, line in enumerate(text.splitlines(), 1):
        parts = line.split("#", 1)[0].split()
        if not parts:
            continue
        if len(parts) != 21:
            raise FormatError(path, f"expected 21 values, got {len(parts)}", lineno, "line")
        try:
            fov, near, far = float(parts[0]), float(parts[3]), float(parts[4])
            width, height = int(parts[1]), int(parts[2])
            pose = np.array([float(x) for x in parts[5:]]).reshape(4, 4)
            views.append(CameraView(pose, fov, width, height, near, far))
        except ValueError as exc:
            raise FormatError(path, str(exc), lineno, "line") from None
    return views
