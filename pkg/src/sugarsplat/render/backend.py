"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy
fallback. ``SUGARSPLAT_BACKEND=python`` forces the fallback.
"""
import os
import warnings

from . import _fallback

try:
    from . import _kernels as _compiled
except ImportError as exc:  # extension not built
    _compiled = None
    _import_error = exc
else:
    _import_error = None

COMPILED_AVAILABLE = _compiled is not None

if os.environ.get("SUGARSPLAT_BACKEND", "").lower() == "python":
    DEFAULT = "python"
elif COMPILED_AVAILABLE:
    DEFAULT = "compiled"
else:
    DEFAULT = "python"
    warnings.warn(f"sugarsplat: compiled kernels unavailable ({_import_error}); using numpy fallback")


def get(name=None):
    name = name or DEFAULT
    if name == "compiled":
        if _compiled is None:
            raise RuntimeError("compiled kernels are not built")
        return _compiled
    if name == "python":
        return _fallback
    raise ValueError(f"unknown backend {name!r}")
