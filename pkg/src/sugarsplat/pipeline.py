"""Three-stage optimization: initialization, Gaussian-to-SuGaR, refinement.

Steps are numbered from 1. In stage 2, densify and prune run after steps
that are multiples of ``densify_every`` up to ``densify_until``; the SuGaR
regularizers switch on once ``sugar_reg_from`` steps are done, and a final
opacity prune follows the last step.
"""
from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass

import numpy as np

from .camera import CameraView, canonical_rig, orbit_camera, sample_random_camera
from .errors import ConstraintError
from .guidance import (
    GuidanceContext,
    GuidanceError,
    NoiseSchedule,
    make_synthetic_provider,
    normal_to_image,
    sds_adjoints,
)
from .io.logs import RunLog
from .losses import LossWeights, guidance_value, stage2_loss, stage3_loss
from .mesh import (
    BoundScene,
    EmptyMeshError,
    bind_gaussians,
    check_bound_invariants,
    extract_mesh,
)
from .optim import Adam, exponential_decay
from .render.splat import RenderAdjoint, SplatScene, cloud_gradients
from .scene import GaussianCloud, densify_split, logit, prune


class PipelineError(RuntimeError):
    pass


class NonFiniteLossError(PipelineError):
    def __init__(self, message, diagnostic):
        self.diagnostic = diagnostic
        super().__init__(message)


@dataclass
class StageSchedule:
    stage2_total: int = 3000
    densify_until: int = 1500
    densify_every: int = 300
    densify_grad_threshold: float = 2e-4
    densify_prune_opacity: float = 0.005
    sugar_reg_from: int = 1500
    prune_opacity: float = 0.5
    stage3_total: int = 5000
    random_views: int = 4
    resolution_2d: int = 512
    resolution_3d: int = 256
    resolution_refine: int = 512
    alternate_normals: bool = True
    log_every: int = 1

    def __post_init__(self):
        if not 0 <= self.densify_until <= self.sugar_reg_from <= self.stage2_total:
            raise ConstraintError(
                f"schedule requires densify_until ({self.densify_until}) <= sugar_reg_from "
                f"({self.sugar_reg_from}) <= stage2_total ({self.stage2_total})")
        if self.densify_every <= 0 or self.random_views <= 0 or self.log_every <= 0:
            raise ConstraintError("densify_every, random_views and log_every must be positive")

    def densify_steps(self):
        return list(range(self.densify_every, self.densify_until + 1, self.densify_every))

    @classmethod
    def from_config(cls, cfg):
        s = cfg.section("schedule")
        return cls(**{k: s[k] for k in (
            "stage2_total", "densify_until", "densify_every", "densify_grad_threshold", "densify_prune_opacity",
            "sugar_reg_from", "prune_opacity", "stage3_total", "random_views", "resolution_2d", "resolution_3d",
            "resolution_refine", "log_every")}, alternate_normals=cfg["guidance.alternate_normals"])


@dataclass
class LearningRates:
    position: float = 1.6e-4
    position_final_factor: float = 0.01
    rotation: float = 1e-3
    scale: float = 5e-3
    opacity: float = 5e-2
    color: float = 2.5e-3
    vertices: float = 1e-4

    @classmethod
    def from_config(cls, cfg):
        return cls(**cfg.section("lr"))

    def cloud(self):
        return {"centers": self.position, "rotations": self.rotation, "log_scales": self.scale,
                "opacity_logits": self.opacity, "colors": self.color}

    def bound(self):
        return {"in_plane_rotation": self.rotation, "log_scale_2d": self.scale, "thickness_logit": self.scale,
                "opacity_logit": self.opacity, "colors": self.color, "vertices": self.vertices}


@dataclass
class Providers:
    guidance_2d: object
    guidance_3d: object
    refine: object = None
    lambda_2d: float = 0.1
    lambda_3d: float = 0.01
    lambda_refine: float = 1.0


# ---------------------------------------------------------------- stage 1

def fibonacci_sphere(n, radius=0.5):
    i = np.arange(n) + 0.5
    y = 1.0 - 2.0 * i / n
    r = np.sqrt(1.0 - y * y)
    phi = np.pi * (3.0 - np.sqrt(5.0)) * i
    return radius * np.stack([r * np.cos(phi), y, r * np.sin(phi)], axis=1)


def cloud_from_positions(points, opacity=0.1, scale=0.02, color=(0.5, 0.5, 0.5)) -> GaussianCloud:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(points)
    return GaussianCloud(points, np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)), np.full((n, 3), math.log(scale)),
                         np.full(n, float(logit(opacity))), np.tile(np.asarray(color, dtype=np.float64), (n, 1)))


def stage1_init(source="sphere", path=None, num_gaussians=512, radius=0.5, opacity=0.1, scale=0.02,
                color=(0.5, 0.5, 0.5)) -> GaussianCloud:
    """Coarse cloud from a full PLY, a positions-only PLY, or a synthetic sphere."""
    from .io.ply import read_cloud, read_positions

    if source == "sphere":
        return cloud_from_positions(fibonacci_sphere(num_gaussians, radius), opacity, scale, color)
    if source == "ply":
        return read_cloud(path)
    if source == "positions":
        return cloud_from_positions(read_positions(path), opacity, scale, color)
    raise ConstraintError(f"unknown init source {source!r}; expected sphere, ply or positions")


# ---------------------------------------------------------------- helpers

def orbit_parameters(view: CameraView):
    """``(azimuth, elevation, distance)`` of a camera looking at the origin."""
    p = view.position
    d = float(np.linalg.norm(p))
    return math.degrees(math.atan2(p[0], p[2])), math.degrees(math.asin(np.clip(p[1] / d, -1, 1))), d


def rig_from_reference(reference: CameraView, resolution):
    az, el, d = orbit_parameters(reference)
    return canonical_rig(az, el, d, reference.fov_y, resolution)


def random_view_sampler(count, resolution):
    def sample(rng, step):
        return [sample_random_camera(int(rng.integers(2**62)), resolution) for _ in range(count)]

    return sample


def cycling_view_sampler(views, count):
    """Deterministic batches cycling through a fixed list of views."""
    views = list(views)

    def sample(rng, step):
        start = ((step - 1) * count) % len(views)
        return [views[(start + k) % len(views)] for k in range(count)]

    return sample


def _mode(step, alternate):
    return "normal" if alternate and step % 2 == 0 else "rgb"


def _guidance_images(outputs, mode):
    if mode == "normal":
        return np.stack([normal_to_image(o.normal) for o in outputs])
    return np.stack([o.color for o in outputs])


def _guidance_adjoints(residual, scale, mode):
    if mode == "normal":
        return [RenderAdjoint(normal=0.5 * scale * r) for r in residual]
    return [RenderAdjoint(color=scale * r) for r in residual]


def _finite_grads(grads):
    return all(np.all(np.isfinite(g)) for g in grads.values())


def _nonfinite_counts(arrays):
    return {k: int(np.sum(~np.isfinite(v))) for k, v in arrays.items()}


def _abort(log: RunLog, diagnostic):
    # a non-finite parameter poisons the loss even where the renderer culls it
    _dump_diagnostic(log, diagnostic)
    raise NonFiniteLossError(f"non-finite loss at stage {diagnostic['stage']} step {diagnostic['step']}", diagnostic)


def _dump_diagnostic(log: RunLog, diagnostic):
    log.write({"event": "abort", **diagnostic})
    if log.path:
        with open(log.path + ".diagnostic.json", "w", encoding="utf-8") as fh:
            json.dump(diagnostic, fh, indent=2, sort_keys=True, default=str)


# ---------------------------------------------------------------- stage 2

def run_stage2(cloud: GaussianCloud, providers: Providers, reference_view: CameraView | None = None,
               schedule: StageSchedule | None = None, weights: LossWeights | None = None,
               rng=0, lrs: LearningRates | None = None, condition=None, masks=None,
               noise_schedule: NoiseSchedule | None = None, background=(1.0, 1.0, 1.0),
               view_sampler=None, log: RunLog | None = None, backend=None, prompt=""):
    """Optimize ``cloud`` in place with hybrid guidance and the stage-2 loss.

    ``masks`` maps canonical view index to a ground-truth alpha mask at the
    3D resolution. ``view_sampler(rng, step)`` supplies the 2D-branch views.
    Returns ``(cloud, log)``.
    """
    schedule = schedule or StageSchedule()
    weights = weights or LossWeights()
    lrs = lrs or LearningRates()
    noise_schedule = noise_schedule or NoiseSchedule.linear()
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    log = log if log is not None else RunLog()
    reference_view = reference_view or orbit_camera(0.0, 15.0, 1.5, 50.0, schedule.resolution_3d)
    rig = rig_from_reference(reference_view, schedule.resolution_3d)
    view_sampler = view_sampler or random_view_sampler(schedule.random_views, schedule.resolution_2d)
    background = np.asarray(background, dtype=np.float64)
    scene = SplatScene(cloud, background, backend)
    adam = Adam(lrs.cloud())
    total = schedule.stage2_total
    densify_at = set(schedule.densify_steps())
    masks = masks or {}
    mask_list = [masks.get(i) for i in range(4)]
    log.event(2, 0, "start", count=len(cloud), total_steps=total, densify_steps=sorted(densify_at),
              sugar_reg_from=schedule.sugar_reg_from, prune_opacity=schedule.prune_opacity)
    if schedule.sugar_reg_from == 0 and total > 0:
        log.event(2, 0, "sugar_on")
    need_3d = (providers.lambda_3d != 0 or weights.tv_depth > 0 or weights.tv_normal > 0
               or (weights.mask > 0 and any(m is not None for m in mask_list)))
    cloud.zero_grad()
    for step in range(1, total + 1):
        t0 = time.perf_counter()
        if not _finite_grads(cloud.params()):
            _abort(log, {"stage": 2, "step": step, "loss": "nan", "count": len(cloud),
                         "nonfinite_params": _nonfinite_counts(cloud.params())})
        mode = _mode(step, schedule.alternate_normals)
        sugar_active = step > schedule.sugar_reg_from
        views_2d = view_sampler(rng, step)
        try:
            adj_2d, g2 = [], 0.0
            if providers.lambda_2d != 0:
                outs_2d = [scene.render(v) for v in views_2d]
                ctx = GuidanceContext(prompt=prompt, condition=None, mode=mode, cameras=views_2d,
                                      view_keys=[v.key() for v in views_2d])
                r2, _ = sds_adjoints(_guidance_images(outs_2d, mode), providers.guidance_2d, noise_schedule, rng, ctx)
                adj_2d = _guidance_adjoints(r2, providers.lambda_2d, mode)
                g2 = providers.lambda_2d * guidance_value(_guidance_adjoints(r2, 1.0, mode))
            outs_3d = [scene.render(v) for v in rig] if need_3d else []
            guid_3d, g3 = None, 0.0
            if providers.lambda_3d != 0:
                ctx = GuidanceContext(prompt=prompt, condition=condition, mode=mode, cameras=rig,
                                      view_keys=[v.key() for v in rig])
                r3, _ = sds_adjoints(_guidance_images(outs_3d, mode), providers.guidance_3d, noise_schedule, rng, ctx)
                guid_3d = _guidance_adjoints(r3, providers.lambda_3d, mode)
                g3 = providers.lambda_3d * guidance_value(_guidance_adjoints(r3, 1.0, mode))
        except GuidanceError as exc:
            log.event(2, step, "guidance_skipped", message=str(exc))
            log.timing(2, step, time.perf_counter() - t0)
            continue
        res = stage2_loss(outs_3d, guid_3d, weights, mask_list if outs_3d else [], cloud, sugar_active)
        # logged guidance terms are lambda times the unweighted surrogate
        res.total += g2 + g3 - res.terms["guidance"]
        res.terms["guidance"] = g3
        res.terms["guidance_2d"] = g2
        grads = scene.zero_gradients()
        for view, adj in list(zip(views_2d, adj_2d)) + list(zip(rig, res.adjoints)):
            if adj.is_zero():
                continue
            for k, g in cloud_gradients(cloud, view, background, adj, backend).items():
                grads[k] += g
        if "sugar_grads" in res.terms:
            for k, g in res.terms.pop("sugar_grads").items():
                grads[k] += g
        if not (math.isfinite(res.total) and _finite_grads(grads)):
            _abort(log, {"stage": 2, "step": step, "loss": repr(res.total), "count": len(cloud),
                         "terms": {k: repr(v) for k, v in res.terms.items()},
                         "nonfinite_params": _nonfinite_counts(cloud.params())})
        cloud.accumulate(grads)
        cloud.record_position_grads(grads["centers"])
        decay = exponential_decay(step, total, lrs.position_final_factor)
        adam.step(cloud.params(), cloud.grads, {"centers": decay})
        np.clip(cloud.colors, 0.0, 1.0, out=cloud.colors)
        cloud.zero_grad()
        if step % schedule.log_every == 0:
            log.write({"stage": 2, "step": step, "mode": mode, "loss": res.total, "count": len(cloud),
                       "sugar": sugar_active, "terms": res.terms, "lr_position": lrs.position * decay})
        if step in densify_at:
            before = len(cloud)
            split = densify_split(cloud, schedule.densify_grad_threshold, rng)
            adam.remap(split)
            after_split = len(cloud)
            pr = prune(cloud, schedule.densify_prune_opacity)
            adam.remap(pr)
            log.event(2, step, "densify_prune", before=before, after_split=after_split, count=len(cloud),
                      grad_threshold=schedule.densify_grad_threshold, prune_opacity=schedule.densify_prune_opacity)
        if step == schedule.sugar_reg_from:
            log.event(2, step, "sugar_on")
        log.timing(2, step, time.perf_counter() - t0)
    if total > 0:
        before = len(cloud)
        pr = prune(cloud, schedule.prune_opacity)
        adam.remap(pr)
        log.event(2, total, "final_prune", threshold=schedule.prune_opacity, before=before, count=len(cloud))
    log.event(2, total, "end", count=len(cloud))
    return cloud, log


# ---------------------------------------------------------------- stage 3

def run_stage3(cloud: GaussianCloud, provider, schedule: StageSchedule | None = None,
               weights: LossWeights | None = None, rng=0, lrs: LearningRates | None = None,
               grid_resolution=128, iso_level=0.3, n_per_face=3, thickness_ratio=1e-3,
               lambda_refine=1.0, masks=None, noise_schedule: NoiseSchedule | None = None,
               background=(1.0, 1.0, 1.0), view_sampler=None, log: RunLog | None = None, backend=None,
               check_every=None, prompt="", condition=None):
    """Extract a mesh, bind flat Gaussians and refine them with the mesh vertices.

    ``masks`` maps view keys to ground-truth alpha masks. Returns
    ``(mesh, bound, log)``.
    """
    schedule = schedule or StageSchedule()
    weights = weights or LossWeights()
    lrs = lrs or LearningRates()
    noise_schedule = noise_schedule or NoiseSchedule.linear()
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    log = log if log is not None else RunLog()
    view_sampler = view_sampler or random_view_sampler(schedule.random_views, schedule.resolution_refine)
    background = np.asarray(background, dtype=np.float64)
    masks = masks or {}
    try:
        mesh = extract_mesh(cloud, grid_resolution, iso_level, backend=backend)
    except EmptyMeshError as exc:
        diagnostic = {"stage": 3, "step": 0, "count": len(cloud), "iso_level": iso_level,
                      "grid_resolution": grid_resolution, "message": str(exc)}
        _dump_diagnostic(log, diagnostic)
        raise PipelineError(f"mesh extraction failed: {exc}") from exc
    bound = bind_gaussians(mesh, n_per_face, thickness_ratio)
    scene = BoundScene(bound, mesh, background, backend)
    total = schedule.stage3_total
    check_every = check_every or max(1, total // 10)
    log.event(3, 0, "start", vertices=len(mesh.vertices), faces=len(mesh.faces), count=len(bound),
              total_steps=total, watertight=mesh.is_watertight())
    adam = Adam(lrs.bound())
    for step in range(1, total + 1):
        t0 = time.perf_counter()
        params = dict(bound.params(), vertices=mesh.vertices)
        if not _finite_grads(params):
            _abort(log, {"stage": 3, "step": step, "loss": "nan", "count": len(bound),
                         "nonfinite_params": _nonfinite_counts(params)})
        mode = _mode(step, schedule.alternate_normals)
        views = view_sampler(rng, step)
        outs = [scene.render(v) for v in views]
        guid, g = None, 0.0
        try:
            if lambda_refine != 0:
                ctx = GuidanceContext(prompt=prompt, condition=condition, mode=mode, cameras=views,
                                      view_keys=[v.key() for v in views])
                r, _ = sds_adjoints(_guidance_images(outs, mode), provider, noise_schedule, rng, ctx)
                guid = _guidance_adjoints(r, lambda_refine, mode)
                g = lambda_refine * guidance_value(_guidance_adjoints(r, 1.0, mode))
        except GuidanceError as exc:
            log.event(3, step, "guidance_skipped", message=str(exc))
            log.timing(3, step, time.perf_counter() - t0)
            continue
        res = stage3_loss(outs, guid, weights, [masks.get(v.key()) for v in views])
        res.total += g - res.terms["guidance"]
        res.terms["guidance"] = g
        grads = scene.zero_gradients()
        for view, adj in zip(views, res.adjoints):
            if adj.is_zero():
                continue
            for k, g in scene.gradients(view, adj).items():
                grads[k] += g
        if not (math.isfinite(res.total) and _finite_grads(grads)):
            _abort(log, {"stage": 3, "step": step, "loss": repr(res.total), "count": len(bound),
                         "terms": {k: repr(v) for k, v in res.terms.items()}})
        adam.step(params, grads)
        np.clip(bound.colors, 0.0, 1.0, out=bound.colors)
        if step % schedule.log_every == 0:
            log.write({"stage": 3, "step": step, "mode": mode, "loss": res.total, "count": len(bound),
                       "terms": res.terms})
        if step % check_every == 0 or step == total:
            inv = check_bound_invariants(bound, mesh)
            log.event(3, step, "invariants", max_plane_distance=inv["max_plane_distance"],
                      min_barycentric=inv["min_barycentric"], max_normal_angle=inv["max_normal_angle"],
                      all_hold=bool(inv["in_plane"].all() and inv["in_triangle"].all()
                                    and inv["normal_aligned"].all()))
        log.timing(3, step, time.perf_counter() - t0)
    log.event(3, total, "end", count=len(bound))
    return mesh, bound, log


# ---------------------------------------------------------------- config glue

def providers_from_config(cfg, targets=None, noise_schedule=None):
    """Providers for the three guidance slots; ``targets`` feed pull-to-target."""
    noise_schedule = noise_schedule or noise_schedule_from_config(cfg)

    def build(kind):
        if kind == "pull-to-target":
            return make_synthetic_provider(kind, schedule=noise_schedule, targets=targets or {},
                                           gain=cfg["guidance.gain"])
        if kind == "conditioning-toy":
            return make_synthetic_provider(kind, seed=cfg["seed"])
        return make_synthetic_provider(kind)

    return Providers(build(cfg["guidance.provider_2d"]), build(cfg["guidance.provider_3d"]),
                     build(cfg["guidance.provider_refine"]), cfg["guidance.lambda_2d"],
                     cfg["guidance.lambda_3d"], cfg["guidance.lambda_refine"])


def noise_schedule_from_config(cfg):
    return NoiseSchedule.linear(cfg["guidance.num_timesteps"], cfg["guidance.beta_start"],
                                cfg["guidance.beta_end"], (cfg["guidance.t_min"], cfg["guidance.t_max"]))


def weights_from_config(cfg):
    return LossWeights(**cfg.section("loss"))


def reference_view_from_config(cfg):
    pose = cfg["camera.pose"]
    if pose:
        return CameraView(np.asarray(pose, dtype=np.float64).reshape(4, 4), cfg["camera.fov_y"],
                          cfg["camera.width"], cfg["camera.height"], cfg["camera.near"], cfg["camera.far"])
    return orbit_camera(cfg["camera.start_azimuth"], cfg["camera.elevation"], cfg["camera.distance"],
                        cfg["camera.fov_y"], cfg["camera.width"], cfg["camera.height"],
                        cfg["camera.near"], cfg["camera.far"])


def output_path(cfg, name):
    os.makedirs(cfg["output.dir"], exist_ok=True)
    return os.path.join(cfg["output.dir"], name)
