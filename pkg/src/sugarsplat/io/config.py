"""Plain-text ``key = value`` configuration with a typed registry.

Keys are namespaced (``guidance.lambda_2d``). Optional ``[section]`` lines
prefix the keys that follow. ``#`` starts a comment. Vectors are written as
comma- or space-separated numbers, optionally in brackets.
"""
from __future__ import annotations

import difflib
from dataclasses import dataclass
from typing import Any, Callable

from ..errors import ConfigSyntaxError, ConstraintError, TypeMismatchError, UnknownKeyError


@dataclass(frozen=True)
class Setting:
    key: str
    type: str  # float | int | bool | str | vector
    default: Any
    check: Callable | None = None
    rule: str = ""
    length: int | None = None  # fixed vector length, None for any
    help: str = ""


def _ge0(v):
    return v >= 0


def _gt0(v):
    return v > 0


def _unit(v):
    return 0 <= v <= 1


def _choice(*options):
    def check(v):
        return v in options

    check.options = options
    return check


REGISTRY: dict[str, Setting] = {}


def _reg(key, type_, default, check=None, rule="", length=None, help=""):
    REGISTRY[key] = Setting(key, type_, default, check, rule, length, help)


_reg("seed", "int", 0, _ge0, ">= 0", help="global seed")
_reg("output.dir", "str", "out", help="output directory")
_reg("output.log", "str", "log.jsonl", help="log file name inside output.dir")

_reg("init.source", "str", "sphere", _choice("sphere", "ply", "positions"), "sphere | ply | positions")
_reg("init.path", "str", "", help="PLY path for ply/positions sources")
_reg("init.num_gaussians", "int", 512, _gt0, "> 0")
_reg("init.radius", "float", 0.5, _gt0, "> 0")
_reg("init.opacity", "float", 0.1, lambda v: 0 < v < 1, "in (0, 1)")
_reg("init.scale", "float", 0.02, _gt0, "> 0")
_reg("init.color", "vector", (0.5, 0.5, 0.5), lambda v: all(0 <= x <= 1 for x in v), "in [0, 1]", 3)

_reg("camera.pose", "vector", (), rule="16 numbers, row-major world-to-camera", length=None)
_reg("camera.fov_y", "float", 50.0, lambda v: 0 < v < 180, "in (0, 180)")
_reg("camera.width", "int", 256, _gt0, "> 0")
_reg("camera.height", "int", 256, _gt0, "> 0")
_reg("camera.start_azimuth", "float", 0.0)
_reg("camera.elevation", "float", 15.0, lambda v: -90 < v < 90, "in (-90, 90)")
_reg("camera.distance", "float", 1.5, _gt0, "> 0")
_reg("camera.near", "float", 0.01, _gt0, "> 0")
_reg("camera.far", "float", 100.0, _gt0, "> 0")

_reg("condition.path", "str", "", help="condition image PNG")
_reg("condition.kind", "str", "edge", _choice("edge", "depth", "normal", "scribble"), "edge | depth | normal | scribble")

_reg("guidance.provider_2d", "str", "echo-noise", _choice("echo-noise", "pull-to-target", "conditioning-toy"),
     "echo-noise | pull-to-target | conditioning-toy")
_reg("guidance.provider_3d", "str", "echo-noise", _choice("echo-noise", "pull-to-target", "conditioning-toy"),
     "echo-noise | pull-to-target | conditioning-toy")
_reg("guidance.provider_refine", "str", "echo-noise", _choice("echo-noise", "pull-to-target", "conditioning-toy"),
     "echo-noise | pull-to-target | conditioning-toy")
_reg("guidance.targets", "str", "", help="directory holding cameras.txt and frame_<i>.png targets (the render layout)")
_reg("guidance.gain", "float", 1.0, _ge0, ">= 0")
_reg("guidance.lambda_2d", "float", 0.1, _ge0, ">= 0")
_reg("guidance.lambda_3d", "float", 0.01, _ge0, ">= 0")
_reg("guidance.lambda_refine", "float", 1.0, _ge0, ">= 0")
_reg("guidance.num_timesteps", "int", 1000, lambda v: v >= 2, ">= 2")
_reg("guidance.beta_start", "float", 1e-4, lambda v: 0 < v < 1, "in (0, 1)")
_reg("guidance.beta_end", "float", 2e-2, lambda v: 0 < v < 1, "in (0, 1)")
_reg("guidance.t_min", "float", 0.02, _unit, "in [0, 1]")
_reg("guidance.t_max", "float", 0.98, _unit, "in [0, 1]")
_reg("guidance.alternate_normals", "bool", True)

_reg("schedule.stage2_total", "int", 3000, _ge0, ">= 0")
_reg("schedule.densify_until", "int", 1500, _ge0, ">= 0")
_reg("schedule.densify_every", "int", 300, _gt0, "> 0")
_reg("schedule.densify_grad_threshold", "float", 2e-4, _ge0, ">= 0")
_reg("schedule.densify_prune_opacity", "float", 0.005, _unit, "in [0, 1]")
_reg("schedule.sugar_reg_from", "int", 1500, _ge0, ">= 0")
_reg("schedule.prune_opacity", "float", 0.5, _unit, "in [0, 1]")
_reg("schedule.stage3_total", "int", 5000, _ge0, ">= 0")
_reg("schedule.random_views", "int", 4, _gt0, "> 0")
_reg("schedule.resolution_2d", "int", 512, _gt0, "> 0")
_reg("schedule.resolution_3d", "int", 256, _gt0, "> 0")
_reg("schedule.resolution_refine", "int", 512, _gt0, "> 0")
_reg("schedule.log_every", "int", 1, _gt0, "> 0")

for _name, _default in (("tv_depth", 0.1), ("tv_normal", 0.1), ("mask", 1.0), ("tv_depth_refine", 0.1),
                        ("tv_normal_refine", 0.1), ("mask_refine", 1.0), ("flat", 1.0), ("align", 1.0)):
    _reg(f"loss.{_name}", "float", _default, _ge0, ">= 0")
_reg("loss.k_neighbors", "int", 8, _gt0, "> 0")

_reg("lr.position", "float", 1.6e-4, _ge0, ">= 0")
_reg("lr.position_final_factor", "float", 0.01, _gt0, "> 0")
_reg("lr.rotation", "float", 1e-3, _ge0, ">= 0")
_reg("lr.scale", "float", 5e-3, _ge0, ">= 0")
_reg("lr.opacity", "float", 5e-2, _ge0, ">= 0")
_reg("lr.color", "float", 2.5e-3, _ge0, ">= 0")
_reg("lr.vertices", "float", 1e-4, _ge0, ">= 0")

_reg("mesh.grid_resolution", "int", 128, lambda v: v >= 8, ">= 8")
_reg("mesh.iso_level", "float", 0.3, _gt0, "> 0")
_reg("mesh.n_per_face", "int", 3, _choice(1, 3, 6), "1 | 3 | 6")
_reg("mesh.thickness_ratio", "float", 1e-3, _gt0, "> 0")

_reg("render.background", "vector", (1.0, 1.0, 1.0), lambda v: all(0 <= x <= 1 for x in v), "in [0, 1]", 3)
_reg("render.backend", "str", "auto", _choice("auto", "compiled", "python"), "auto | compiled | python")
_reg("render.turntable_frames", "int", 36, _gt0, "> 0")


_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def _convert(setting: Setting, raw: str, line):
    t = setting.type
    text = raw.strip()
    try:
        if t == "float":
            return float(text)
        if t == "int":
            if not text.lstrip("+-").isdigit():
                raise ValueError
            return int(text)
        if t == "bool":
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError
        if t == "str":
            if len(text) >= 2 and text[0] == text[-1] and text[0] in "\"'":
                text = text[1:-1]
            return text
        if t == "vector":
            inner = text.strip("[]()")
            values = tuple(float(x) for x in inner.replace(",", " ").split())
            if setting.length is not None and len(values) != setting.length:
                raise TypeMismatchError(f"{setting.key} needs {setting.length} numbers, got {len(values)}",
                                        line, setting.key)
            return values
    except TypeMismatchError:
        raise
    except ValueError:
        pass
    raise TypeMismatchError(f"{setting.key} expects {t}, got {raw.strip()!r}", line, setting.key)


def _validate(setting: Setting, value, line):
    if setting.check is not None and not setting.check(value):
        raise ConstraintError(f"{setting.key} = {format_value(value)} violates constraint {setting.rule}",
                              line, setting.key)


class ConfigDocument:
    """Validated settings; every registered key is present."""

    def __init__(self, values: dict, sources: dict | None = None):
        self._values = dict(values)
        self.sources = dict(sources or {})

    def __getitem__(self, key):
        if key not in self._values:
            raise UnknownKeyError(_unknown_message(key), key=key)
        return self._values[key]

    def get(self, key, default=None):
        return self._values.get(key, default)

    def __contains__(self, key):
        return key in self._values

    def __eq__(self, other):
        return isinstance(other, ConfigDocument) and self._values == other._values

    def items(self):
        return sorted(self._values.items())

    def as_dict(self):
        return dict(self._values)

    def section(self, prefix) -> dict:
        p = prefix.rstrip(".") + "."
        return {k[len(p):]: v for k, v in self._values.items() if k.startswith(p)}

    def replace(self, **overrides) -> "ConfigDocument":
        """Copy with dotted keys given as ``section__name`` keyword arguments."""
        return with_overrides(self, {k.replace("__", "."): v for k, v in overrides.items()})

    def dump(self) -> str:
        return dump_config(self)


def _unknown_message(key):
    close = difflib.get_close_matches(key, list(REGISTRY), n=1, cutoff=0.6)
    hint = f"; did you mean {close[0]!r}?" if close else ""
    return f"unknown key {key!r}{hint}"


def _cross_check(values, lines):
    d, s, t = values["schedule.densify_until"], values["schedule.sugar_reg_from"], values["schedule.stage2_total"]
    if not d <= s <= t:
        line = max((lines.get(k) or 0) for k in ("schedule.densify_until", "schedule.sugar_reg_from",
                                                 "schedule.stage2_total")) or None
        raise ConstraintError(f"schedule requires densify_until ({d}) <= sugar_reg_from ({s}) <= stage2_total ({t})",
                              line, "schedule")
    pose = values["camera.pose"]
    if len(pose) not in (0, 16):
        raise TypeMismatchError(f"camera.pose needs 16 numbers, got {len(pose)}", lines.get("camera.pose"),
                                "camera.pose")
    if not values["camera.near"] < values["camera.far"]:
        raise ConstraintError("camera.near must be < camera.far", lines.get("camera.far"), "camera.far")
    if not values["guidance.t_min"] <= values["guidance.t_max"]:
        raise ConstraintError("guidance.t_min must be <= guidance.t_max", lines.get("guidance.t_max"),
                              "guidance.t_max")


def _strip_comment(line):
    quote = None
    for i, ch in enumerate(line):
        if quote:
            if ch == quote:
                quote = None
        elif ch in "\"'":
            quote = ch
        elif ch == "#":
            return line[:i]
    return line


def parse_config(text: str) -> ConfigDocument:
    values = {k: s.default for k, s in REGISTRY.items()}
    lines = {}
    section = ""
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = _strip_comment(raw).strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if not section or " " in section:
                raise ConfigSyntaxError(f"bad section header {raw.strip()!r}", lineno)
            continue
        if "=" not in line:
            raise ConfigSyntaxError(f"expected 'key = value', got {raw.strip()!r}", lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigSyntaxError("missing key before '='", lineno)
        if section:
            key = f"{section}.{key}"
        if key not in REGISTRY:
            raise UnknownKeyError(_unknown_message(key), lineno, key)
        if key in lines:
            raise ConfigSyntaxError(f"duplicate key {key!r} (first set on line {lines[key]})", lineno, key)
        setting = REGISTRY[key]
        converted = _convert(setting, value, lineno)
        _validate(setting, converted, lineno)
        values[key] = converted
        lines[key] = lineno
    _cross_check(values, lines)
    return ConfigDocument(values, lines)


def load_config(path) -> ConfigDocument:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise OSError(f"{path}: cannot read config: {exc.strerror or exc}") from exc
    return parse_config(text)


def default_config() -> ConfigDocument:
    return parse_config("")


def with_overrides(doc: ConfigDocument, overrides: dict) -> ConfigDocument:
    """Apply typed or string overrides (e.g. from CLI flags) and revalidate."""
    values = doc.as_dict()
    for key, value in overrides.items():
        if key not in REGISTRY:
            raise UnknownKeyError(_unknown_message(key), key=key)
        setting = REGISTRY[key]
        if isinstance(value, str) and setting.type != "str":
            value = _convert(setting, value, None)
        elif setting.type == "vector":
            value = tuple(float(x) for x in value)
        elif setting.type == "float":
            value = float(value)
        _validate(setting, value, None)
        values[key] = value
    _cross_check(values, {})
    return ConfigDocument(values)


def format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return "[" + ", ".join(repr(float(x)) for x in value) + "]"
    if isinstance(value, str):
        return f'"{value}"' if (value == "" or value != value.strip() or "#" in value) else value
    return str(value)


def dump_config(doc: ConfigDocument) -> str:
    """Effective settings as a config that parses back to the same document."""
    out = []
    for key, value in doc.items():
        out.append(f"{key} = {format_value(value)}")
    return "\n".join(out) + "\n"
