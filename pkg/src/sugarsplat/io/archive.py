"""Flat binary tensor archive.

Layout (little-endian): magic ``b"SSWT"``, uint32 version (1), uint32 tensor
count, then per tensor: uint16 name length, UTF-8 name, uint8 ndim, ndim
uint32 dims, and the float32 payload in C order.
"""
from __future__ import annotations

import struct

import numpy as np

from ..errors import BadMagicError, FormatError, TruncatedFileError
from .ply import _atomic_write

MAGIC = b"SSWT"
VERSION = 1


def write_archive(path, tensors: dict):
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, value in tensors.items():
        arr = np.asarray(value, dtype="<f4").copy(order="C")  # keeps 0-d tensors 0-d
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    _atomic_write(path, b"".join(chunks))


def read_archive(path) -> dict:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise FormatError(path, f"cannot read: {exc.strerror or exc}") from exc
    if data[:4] != MAGIC:
        raise BadMagicError(path, "not a weights archive", 0)
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise TruncatedFileError(path, f"needs {n} more bytes", pos)
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise FormatError(path, f"unsupported archive version {version}", 4)
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape).copy()
    if pos != len(data):
        raise FormatError(path, f"{len(data) - pos} trailing bytes", pos)
    return out
