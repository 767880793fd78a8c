"""PLY reading (ascii and binary little-endian) and binary writing.

Gaussian clouds use one ``vertex`` element with float32 properties
``x y z rot_0..rot_3 scale_0..scale_2 opacity f_dc_0..f_dc_2``. Scales are
stored in log domain, opacity as a logit and ``f_dc_*`` as plain RGB.
Bound clouds add the mesh (``vertex`` with colors, ``face``) and a
``bound_gaussian`` element; see docs/formats.md.
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from ..errors import BadMagicError, FormatError, PropertyMismatchError, TruncatedFileError

SCALAR_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}

CLOUD_PROPERTIES = (["x", "y", "z"] + [f"rot_{i}" for i in range(4)] + [f"scale_{i}" for i in range(3)]
                    + ["opacity"] + [f"f_dc_{i}" for i in range(3)])
BOUND_PROPERTIES = (["face_index"] + [f"bary_{i}" for i in range(3)] + ["rot_re", "rot_im"]
                    + ["scale2d_0", "scale2d_1", "thickness", "opacity"] + [f"f_dc_{i}" for i in range(3)])


@dataclass
class PlyProperty:
    name: str
    dtype: str
    list_count: str | None = None  # count dtype for list properties


@dataclass
class PlyElement:
    name: str
    count: int
    properties: list


def _parse_header(data: bytes, path):
    if not data.startswith(b"ply\n") and not data.startswith(b"ply\r\n"):
        raise BadMagicError(path, "missing 'ply' magic", 0)
    end = data.find(b"end_header\n")
    if end < 0:
        raise TruncatedFileError(path, "header has no end_header line", len(data))
    body_start = end + len(b"end_header\n")
    fmt = None
    elements = []
    comments = []
    offset = 0
    for raw in data[:end].split(b"\n"):
        line = raw.decode("ascii", errors="replace").strip()
        where = offset
        offset += len(raw) + 1
        if not line or line == "ply":
            continue
        parts = line.split()
        if parts[0] == "format":
            if len(parts) != 3 or parts[2] != "1.0":
                raise FormatError(path, f"unsupported format line {line!r}", where)
            fmt = parts[1]
        elif parts[0] in ("comment", "obj_info"):
            comments.append(line[len(parts[0]):].strip())
        elif parts[0] == "element":
            if len(parts) != 3 or not parts[2].isdigit():
                raise FormatError(path, f"bad element line {line!r}", where)
            elements.append(PlyElement(parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise FormatError(path, "property before any element", where)
            if parts[1] == "list":
                if len(parts) != 5 or parts[2] not in SCALAR_TYPES or parts[3] not in SCALAR_TYPES:
                    raise FormatError(path, f"bad list property {line!r}", where)
                elements[-1].properties.append(PlyProperty(parts[4], SCALAR_TYPES[parts[3]], SCALAR_TYPES[parts[2]]))
            else:
                if len(parts) != 3 or parts[1] not in SCALAR_TYPES:
                    raise FormatError(path, f"bad property line {line!r}", where)
                elements[-1].properties.append(PlyProperty(parts[2], SCALAR_TYPES[parts[1]]))
        else:
            raise FormatError(path, f"unknown header keyword {parts[0]!r}", where)
    if fmt not in ("ascii", "binary_little_endian"):
        raise FormatError(path, f"unsupported PLY format {fmt!r}", 0)
    return fmt, elements, comments, body_start


def _binary_dtype(element: PlyElement, path, offset):
    fields = []
    for prop in element.properties:
        if prop.list_count is None:
            fields.append((prop.name, "<" + prop.dtype))
        else:
            # only fixed-length triangle lists are supported
            fields.append((prop.name + "__count", "<" + prop.list_count))
            fields.append((prop.name, "<" + prop.dtype, (3,)))
    return np.dtype(fields)


def _read_binary(data, elements, start, path):
    out = {}
    pos = start
    for el in elements:
        dt = _binary_dtype(el, path, pos)
        need = dt.itemsize * el.count
        if pos + need > len(data):
            raise TruncatedFileError(path, f"element {el.name!r} needs {need} bytes, {len(data) - pos} remain", pos)
        arr = np.frombuffer(data, dtype=dt, count=el.count, offset=pos).copy()
        for prop in el.properties:
            if prop.list_count is not None and el.count and np.any(arr[prop.name + "__count"] != 3):
                bad = int(np.argmax(arr[prop.name + "__count"] != 3))
                raise FormatError(path, f"element {el.name!r} row {bad} is not a triangle", pos + bad * dt.itemsize)
        out[el.name] = arr
        pos += need
    if pos != len(data):
        raise FormatError(path, f"{len(data) - pos} trailing bytes after last element", pos)
    return out


def _read_ascii(data, elements, start, path):
    text = data[start:].decode("ascii", errors="replace")
    lines = [ln for ln in text.split("\n") if ln.strip()]
    out = {}
    row = 0
    for el in elements:
        dt = _binary_dtype(el, path, start)
        arr = np.zeros(el.count, dtype=dt)
        for i in range(el.count):
            if row >= len(lines):
                raise TruncatedFileError(path, f"element {el.name!r} ends after {i} of {el.count} rows", row, "data line")
            tokens = lines[row].split()
            k = 0
            try:
                for prop in el.properties:
                    if prop.list_count is None:
                        arr[prop.name][i] = float(tokens[k]) if prop.dtype.startswith("f") else int(tokens[k])
                        k += 1
                    else:
                        n = int(tokens[k])
                        if n != 3:
                            raise FormatError(path, f"element {el.name!r} row {i} is not a triangle", row, "data line")
                        arr[prop.name + "__count"][i] = n
                        arr[prop.name][i] = [int(x) for x in tokens[k + 1:k + 4]]
                        k += 4
            except (IndexError, ValueError) as exc:
                raise FormatError(path, f"bad values in element {el.name!r} row {i}: {exc}", row, "data line") from None
            if k != len(tokens):
                raise FormatError(path, f"element {el.name!r} row {i} has {len(tokens) - k} extra values", row, "data line")
            row += 1
        out[el.name] = arr
    return out


def read_ply(path):
    """Return ``(elements, comments)`` with one structured array per element."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise FormatError(path, f"cannot read: {exc.strerror or exc}") from exc
    fmt, elements, comments, start = _parse_header(data, path)
    reader = _read_binary if fmt == "binary_little_endian" else _read_ascii
    return reader(data, elements, start, path), comments


def _header(elements, comments=()):
    lines = ["ply", "format binary_little_endian 1.0"]
    lines += [f"comment {c}" for c in comments]
    names = {v: k for k, v in SCALAR_TYPES.items() if k in ("char", "uchar", "short", "ushort", "int", "uint", "float", "double")}
    for name, count, props in elements:
        lines.append(f"element {name} {count}")
        for pname, dtype, list_count in props:
            if list_count:
                lines.append(f"property list {names[list_count]} {names[dtype]} {pname}")
            else:
                lines.append(f"property {names[dtype]} {pname}")
    lines.append("end_header")
    return ("\n".join(lines) + "\n").encode("ascii")


def _atomic_write(path, payload: bytes):
    path = os.fspath(path)
    tmp = f"{path}.tmp{os.getpid()}"
    try:
        with open(tmp, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except OSError as exc:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise OSError(f"{path}: cannot write: {exc.strerror or exc}") from exc


def _float_block(columns):
    return np.ascontiguousarray(np.stack([np.asarray(c, dtype="<f4") for c in columns], axis=1))


def write_cloud(path, cloud):
    cols = ([cloud.centers[:, i] for i in range(3)] + [cloud.rotations[:, i] for i in range(4)]
            + [cloud.log_scales[:, i] for i in range(3)] + [cloud.opacity_logits]
            + [cloud.colors[:, i] for i in range(3)])
    block = _float_block(cols) if len(cloud) else np.zeros((0, len(CLOUD_PROPERTIES)), "<f4")
    header = _header([("vertex", len(cloud), [(p, "f4", None) for p in CLOUD_PROPERTIES])])
    _atomic_write(path, header + block.tobytes())


def _require(arr, names, path, element):
    if arr is None:
        raise PropertyMismatchError(path, f"missing element {element!r}")
    missing = [n for n in names if n not in arr.dtype.names]
    if missing:
        raise PropertyMismatchError(path, f"element {element!r} lacks properties {missing}")


def _column(arr, name):
    return np.asarray(arr[name], dtype=np.float32).astype(np.float64)


def read_cloud(path):
    from ..scene import GaussianCloud

    elements, _ = read_ply(path)
    v = elements.get("vertex")
    _require(v, CLOUD_PROPERTIES, path, "vertex")
    stack = lambda names: np.stack([_column(v, n) for n in names], axis=1)  # noqa: E731
    return GaussianCloud(stack(["x", "y", "z"]), stack([f"rot_{i}" for i in range(4)]),
                         stack([f"scale_{i}" for i in range(3)]), _column(v, "opacity"),
                         stack([f"f_dc_{i}" for i in range(3)]))


def read_positions(path):
    elements, _ = read_ply(path)
    v = elements.get("vertex")
    _require(v, ["x", "y", "z"], path, "vertex")
    return np.stack([_column(v, n) for n in "xyz"], axis=1)


def write_positions(path, points):
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    header = _header([("vertex", len(points), [(p, "f4", None) for p in "xyz"])])
    _atomic_write(path, header + _float_block([points[:, 0], points[:, 1], points[:, 2]]).tobytes())


def write_bound(path, bound, mesh):
    """Mesh plus bound Gaussians in one file; thickness stored as its logit."""
    nv, nf, nb = len(mesh.vertices), len(mesh.faces), len(bound)
    vert = _float_block([mesh.vertices[:, i] for i in range(3)] + [mesh.vertex_colors[:, i] for i in range(3)])
    face = np.zeros(nf, dtype=[("n", "u1"), ("v", "<i4", (3,))])
    face["n"] = 3
    face["v"] = mesh.faces
    rows = np.zeros(nb, dtype=[(n, "<i4" if n == "face_index" else "<f4") for n in BOUND_PROPERTIES])
    rows["face_index"] = bound.face_index
    for i in range(3):
        rows[f"bary_{i}"] = bound.barycentric[:, i]
        rows[f"f_dc_{i}"] = bound.colors[:, i]
    rows["rot_re"], rows["rot_im"] = bound.in_plane_rotation[:, 0], bound.in_plane_rotation[:, 1]
    rows["scale2d_0"], rows["scale2d_1"] = bound.log_scale_2d[:, 0], bound.log_scale_2d[:, 1]
    rows["thickness"] = bound.thickness_logit
    rows["opacity"] = bound.opacity_logit
    header = _header([
        ("vertex", nv, [(p, "f4", None) for p in ("x", "y", "z", "red", "green", "blue")]),
        ("face", nf, [("vertex_indices", "i4", "u1")]),
        ("bound_gaussian", nb, [(n, "i4" if n == "face_index" else "f4", None) for n in BOUND_PROPERTIES]),
    ], comments=[f"thickness_max {float(bound.thickness_max)!r}"])
    _atomic_write(path, header + vert.tobytes() + face.tobytes() + rows.tobytes())


def read_bound(path):
    from ..mesh import BoundGaussianCloud, TriMesh

    elements, comments = read_ply(path)
    v, f, b = elements.get("vertex"), elements.get("face"), elements.get("bound_gaussian")
    _require(v, ["x", "y", "z", "red", "green", "blue"], path, "vertex")
    _require(f, ["vertex_indices"], path, "face")
    _require(b, BOUND_PROPERTIES, path, "bound_gaussian")
    tmax = [c.split()[1] for c in comments if c.startswith("thickness_max ")]
    if not tmax:
        raise PropertyMismatchError(path, "missing 'comment thickness_max' header line")
    faces = np.asarray(f["vertex_indices"], dtype=np.int64).reshape(-1, 3)
    if len(faces) and (faces.min() < 0 or faces.max() >= len(v)):
        raise FormatError(path, "face index out of range")
    fi = np.asarray(b["face_index"], dtype=np.int64)
    if len(fi) and (fi.min() < 0 or fi.max() >= len(faces)):
        raise FormatError(path, "bound face_index out of range")
    mesh = TriMesh(np.stack([_column(v, n) for n in "xyz"], 1), faces,
                   np.stack([_column(v, n) for n in ("red", "green", "blue")], 1))
    cols = lambda names: np.stack([_column(b, n) for n in names], axis=1)  # noqa: E731
    bound = BoundGaussianCloud(fi, cols([f"bary_{i}" for i in range(3)]), cols(["rot_re", "rot_im"]),
                               cols(["scale2d_0", "scale2d_1"]), _column(b, "thickness"), _column(b, "opacity"),
                               cols([f"f_dc_{i}" for i in range(3)]), float(tmax[0]))
    return bound, mesh
