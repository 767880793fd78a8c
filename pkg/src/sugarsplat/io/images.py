"""PNG (8-bit) and PFM (float32) image files.

PNG pixel values are treated as already display-encoded: a float ``v`` in
[0, 1] is stored as ``round(255 v)`` with no transfer curve applied.
"""
from __future__ import annotations

import numpy as np
from PIL import Image

from ..errors import BadMagicError, FormatError, TruncatedFileError
from .ply import _atomic_write


def to_uint8(img):
    return np.round(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, img):
    img = np.asarray(img)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[..., 0]
    if img.ndim not in (2, 3) or (img.ndim == 3 and img.shape[2] not in (3, 4)):
        raise ValueError(f"cannot write image of shape {img.shape} as PNG")
    try:
        Image.fromarray(to_uint8(img)).save(path, format="PNG")
    except OSError as exc:
        raise OSError(f"{path}: cannot write PNG: {exc}") from exc


def read_png(path):
    """Float image in [0, 1]; grayscale stays 2-D, alpha channels are kept."""
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode not in ("L", "RGB", "RGBA"):
                im = im.convert("RGBA" if "A" in im.mode else "RGB")
            arr = np.asarray(im)
    except OSError as exc:
        raise FormatError(path, f"cannot read PNG: {exc}") from exc
    return arr.astype(np.float64) / 255.0


def write_pfm(path, img):
    img = np.asarray(img, dtype=np.float32)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[..., 0]
    if img.ndim == 2:
        magic = b"Pf"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"PF"
    else:
        raise ValueError(f"PFM holds 1 or 3 channels, got shape {img.shape}")
    h, w = img.shape[:2]
    header = magic + f"\n{w} {h}\n-1.0\n".encode("ascii")
    # rows run bottom to top; negative scale means little-endian
    _atomic_write(path, header + np.ascontiguousarray(img[::-1], dtype="<f4").tobytes())


def read_pfm(path):
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise FormatError(path, f"cannot read: {exc.strerror or exc}") from exc
    lines = data.split(b"\n", 3)
    if len(lines) < 4:
        raise TruncatedFileError(path, "incomplete PFM header", len(data))
    if lines[0] not in (b"PF", b"Pf"):
        raise BadMagicError(path, f"bad PFM magic {lines[0][:8]!r}", 0)
    channels = 3 if lines[0] == b"PF" else 1
    try:
        w, h = (int(x) for x in lines[1].split())
        scale = float(lines[2])
    except ValueError:
        raise FormatError(path, "malformed PFM header", len(lines[0]) + 1) from None
    if w <= 0 or h <= 0 or scale == 0:
        raise FormatError(path, f"invalid PFM size {w}x{h} or scale {scale}", len(lines[0]) + 1)
    offset = len(data) - len(lines[3])
    need = w * h * channels * 4
    if len(lines[3]) < need:
        raise TruncatedFileError(path, f"pixel data needs {need} bytes, {len(lines[3])} present", offset)
    if len(lines[3]) > need:
        raise FormatError(path, f"{len(lines[3]) - need} trailing bytes", offset + need)
    dtype = "<f4" if scale < 0 else ">f4"
    arr = np.frombuffer(lines[3], dtype=dtype, count=w * h * channels).astype(np.float32)
    arr = arr.reshape((h, w, channels) if channels == 3 else (h, w))[::-1]
    return np.ascontiguousarray(arr)


def png_to_pfm(src, dst):
    write_pfm(dst, read_png(src))


def pfm_to_png(src, dst):
    write_png(dst, read_pfm(src))
