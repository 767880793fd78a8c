"""Command-line entry point.

Every config key is also a flag (``--guidance.lambda_2d 0.2``); flags
override ``--config``. On success one JSON line goes to stdout; on failure
one JSON error line goes to stderr and the exit code is nonzero.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import __version__
from .errors import ConfigError, FormatError

EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_PIPELINE = 4
EXIT_OTHER = 1


def _config_parent():
    from .io.config import REGISTRY

    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument("--config", help="plain-text key = value config file")
    for key, setting in sorted(REGISTRY.items()):
        if key == "seed":
            parent.add_argument("--seed", dest="cfg__seed", metavar="INT", help="global seed")
            continue
        parent.add_argument(f"--{key}", dest="cfg__" + key.replace(".", "__"), metavar=setting.type.upper(),
                            help=setting.help or f"default {setting.default!r}")
    return parent


def build_parser():
    parent = _config_parent()
    parser = argparse.ArgumentParser(prog="sugarsplat", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"sugarsplat {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init", parents=[parent], help="build the coarse Gaussian cloud")
    p.add_argument("--output", help="cloud PLY (default <output.dir>/init.ply)")

    p = sub.add_parser("optimize", parents=[parent], help="stage 2: Gaussian-to-SuGaR optimization")
    p.add_argument("--input", required=True, help="cloud PLY")
    p.add_argument("--output", help="optimized cloud PLY (default <output.dir>/stage2.ply)")

    p = sub.add_parser("extract", parents=[parent], help="marching-cubes mesh from a cloud")
    p.add_argument("--input", required=True, help="cloud PLY")
    p.add_argument("--output", help="mesh OBJ (default <output.dir>/mesh.obj)")

    p = sub.add_parser("refine", parents=[parent], help="stage 3: bind Gaussians to the mesh and refine")
    p.add_argument("--input", required=True, help="cloud PLY")
    p.add_argument("--output", help="bound PLY (default <output.dir>/bound.ply)")
    p.add_argument("--mesh-output", help="textured OBJ (default <output.dir>/textured.obj)")

    p = sub.add_parser("render", parents=[parent], help="turntable PNG sequence")
    p.add_argument("--input", required=True, help="cloud PLY or bound PLY")
    p.add_argument("--output-dir", help="frame directory (default <output.dir>/turntable)")
    p.add_argument("--depth", action="store_true", help="also write depth PFM files")

    p = sub.add_parser("export", parents=[parent], help="bake a bound PLY into a vertex-colored OBJ")
    p.add_argument("--input", required=True, help="bound PLY")
    p.add_argument("--output", help="mesh OBJ (default <output.dir>/textured.obj)")
    return parser


def load_settings(args):
    from .io.config import default_config, load_config, with_overrides

    doc = load_config(args.config) if args.config else default_config()
    overrides = {k[5:].replace("__", "."): v for k, v in vars(args).items()
                 if k.startswith("cfg__") and v is not None}
    return with_overrides(doc, overrides)


def _backend(cfg):
    return None if cfg["render.backend"] == "auto" else cfg["render.backend"]


def _targets(cfg):
    """Target images and their cameras from ``guidance.targets``, if set."""
    from .io.cameras import read_cameras
    from .io.images import read_png

    folder = cfg["guidance.targets"]
    if not folder:
        return {}, []
    views = read_cameras(os.path.join(folder, "cameras.txt"))
    targets = {}
    for i, v in enumerate(views):
        img = read_png(os.path.join(folder, f"frame_{i:03d}.png"))
        if img.ndim == 2:
            img = np.repeat(img[..., None], 3, axis=2)
        targets[v.key()] = img[..., :3]
    return targets, views


def _condition(cfg):
    from .conditioning import ConditionImage
    from .io.images import read_png

    if not cfg["condition.path"]:
        return None
    return ConditionImage(read_png(cfg["condition.path"]), cfg["condition.kind"])


def _write_effective(cfg, name):
    from .pipeline import output_path

    path = output_path(cfg, name)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(cfg.dump())
    return path


def cmd_init(args, cfg):
    from .io.ply import write_cloud
    from .pipeline import output_path, stage1_init

    cloud = stage1_init(cfg["init.source"], cfg["init.path"] or None, cfg["init.num_gaussians"],
                        cfg["init.radius"], cfg["init.opacity"], cfg["init.scale"], cfg["init.color"])
    out = args.output or output_path(cfg, "init.ply")
    write_cloud(out, cloud)
    return {"outputs": [out], "count": len(cloud)}


def cmd_optimize(args, cfg):
    from .io.logs import RunLog
    from .io.ply import read_cloud, write_cloud
    from .pipeline import (
        LearningRates,
        StageSchedule,
        cycling_view_sampler,
        noise_schedule_from_config,
        output_path,
        providers_from_config,
        reference_view_from_config,
        run_stage2,
        weights_from_config,
    )

    cloud = read_cloud(args.input)
    schedule = StageSchedule.from_config(cfg)
    targets, target_views = _targets(cfg)
    ns = noise_schedule_from_config(cfg)
    providers = providers_from_config(cfg, targets, ns)
    sampler = cycling_view_sampler(target_views, schedule.random_views) if target_views else None
    log = RunLog(output_path(cfg, cfg["output.log"]))
    _write_effective(cfg, "config.effective.txt")
    run_stage2(cloud, providers, reference_view_from_config(cfg), schedule, weights_from_config(cfg),
               rng=cfg["seed"], lrs=LearningRates.from_config(cfg), condition=_condition(cfg),
               noise_schedule=ns, background=cfg["render.background"], view_sampler=sampler, log=log,
               backend=_backend(cfg))
    out = args.output or output_path(cfg, "stage2.ply")
    write_cloud(out, cloud)
    return {"outputs": [out, log.path], "count": len(cloud)}


def cmd_extract(args, cfg):
    from .io.obj import write_obj
    from .io.ply import read_cloud
    from .mesh import extract_mesh
    from .pipeline import output_path

    mesh = extract_mesh(read_cloud(args.input), cfg["mesh.grid_resolution"], cfg["mesh.iso_level"],
                        backend=_backend(cfg))
    out = args.output or output_path(cfg, "mesh.obj")
    write_obj(out, mesh)
    return {"outputs": [out], "vertices": len(mesh.vertices), "faces": len(mesh.faces),
            "watertight": mesh.is_watertight()}


def cmd_refine(args, cfg):
    from .io.logs import RunLog
    from .io.ply import read_cloud, write_bound
    from .mesh import export_textured_mesh
    from .pipeline import (
        LearningRates,
        StageSchedule,
        cycling_view_sampler,
        noise_schedule_from_config,
        output_path,
        providers_from_config,
        run_stage3,
        weights_from_config,
    )

    cloud = read_cloud(args.input)
    schedule = StageSchedule.from_config(cfg)
    targets, target_views = _targets(cfg)
    ns = noise_schedule_from_config(cfg)
    providers = providers_from_config(cfg, targets, ns)
    sampler = cycling_view_sampler(target_views, schedule.random_views) if target_views else None
    log = RunLog(output_path(cfg, "refine_" + cfg["output.log"]))
    _write_effective(cfg, "config.effective.txt")
    mesh, bound, _ = run_stage3(
        cloud, providers.refine, schedule, weights_from_config(cfg), rng=cfg["seed"],
        lrs=LearningRates.from_config(cfg), grid_resolution=cfg["mesh.grid_resolution"],
        iso_level=cfg["mesh.iso_level"], n_per_face=cfg["mesh.n_per_face"],
        thickness_ratio=cfg["mesh.thickness_ratio"], lambda_refine=providers.lambda_refine,
        noise_schedule=ns, background=cfg["render.background"], view_sampler=sampler, log=log,
        backend=_backend(cfg), condition=_condition(cfg))
    out = args.output or output_path(cfg, "bound.ply")
    write_bound(out, bound, mesh)
    obj = args.mesh_output or output_path(cfg, "textured.obj")
    export_textured_mesh(bound, mesh, obj)
    return {"outputs": [out, obj, log.path], "count": len(bound), "faces": len(mesh.faces)}


def cmd_render(args, cfg):
    from .camera import orbit_camera
    from .io.cameras import write_cameras
    from .io.images import write_pfm, write_png
    from .io.ply import read_bound, read_cloud, read_ply
    from .mesh import BoundScene
    from .pipeline import output_path
    from .render.splat import SplatScene

    elements, _ = read_ply(args.input)
    bg = cfg["render.background"]
    if "bound_gaussian" in elements:
        bound, mesh = read_bound(args.input)
        scene = BoundScene(bound, mesh, bg, _backend(cfg))
    else:
        scene = SplatScene(read_cloud(args.input), bg, _backend(cfg))
    folder = args.output_dir or output_path(cfg, "turntable")
    os.makedirs(folder, exist_ok=True)
    n = cfg["render.turntable_frames"]
    views = [orbit_camera(cfg["camera.start_azimuth"] + 360.0 * k / n, cfg["camera.elevation"],
                          cfg["camera.distance"], cfg["camera.fov_y"], cfg["camera.width"], cfg["camera.height"],
                          cfg["camera.near"], cfg["camera.far"]) for k in range(n)]
    outputs = []
    for i, view in enumerate(views):
        out = scene.render(view)
        path = os.path.join(folder, f"frame_{i:03d}.png")
        write_png(path, out.color)
        outputs.append(path)
        if args.depth:
            write_pfm(os.path.join(folder, f"depth_{i:03d}.pfm"), out.depth)
    write_cameras(os.path.join(folder, "cameras.txt"), views)
    return {"outputs": [folder], "frames": n}


def cmd_export(args, cfg):
    from .io.ply import read_bound
    from .mesh import export_textured_mesh
    from .pipeline import output_path

    bound, mesh = read_bound(args.input)
    out = args.output or output_path(cfg, "textured.obj")
    export_textured_mesh(bound, mesh, out)
    return {"outputs": [out], "vertices": len(mesh.vertices)}


COMMANDS = {"init": cmd_init, "optimize": cmd_optimize, "extract": cmd_extract, "refine": cmd_refine,
            "render": cmd_render, "export": cmd_export}


def _reject_extra(parser, extra):
    """Unknown dotted flags are misspelled config keys; report them as such."""
    from .errors import UnknownKeyError
    from .io.config import _unknown_message

    for token in extra:
        key = token[2:].split("=", 1)[0] if token.startswith("--") else ""
        if "." in key:
            raise UnknownKeyError(_unknown_message(key), key=key)
    if extra:
        parser.error("unrecognized arguments: " + " ".join(extra))


def _fail(kind, message, code):
    sys.stderr.write(json.dumps({"status": "error", "kind": kind, "message": message}, sort_keys=True) + "\n")
    return code


def main(argv=None):
    from .guidance import GuidanceError
    from .mesh import EmptyMeshError
    from .pipeline import PipelineError

    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        _reject_extra(parser, extra)
        cfg = load_settings(args)
        result = COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        return _fail(f"config/{exc.kind}", str(exc), EXIT_CONFIG)
    except FormatError as exc:
        return _fail("io/format", str(exc), EXIT_IO)
    except (PipelineError, EmptyMeshError, GuidanceError) as exc:
        return _fail("pipeline", str(exc), EXIT_PIPELINE)
    except OSError as exc:
        return _fail("io", str(exc), EXIT_IO)
    except Exception as exc:  # noqa: BLE001
        return _fail("internal", f"{type(exc).__name__}: {exc}", EXIT_OTHER)
    sys.stdout.write(json.dumps({"status": "ok", "command": args.command, **result}, sort_keys=True) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
