"""Score-distillation guidance behind a pluggable noise-predictor interface.

Everything runs in image space: ``z_t = sqrt(abar_t) x + sqrt(1 - abar_t) eps``,
so ``dz_t/dx = sqrt(abar_t) I`` and the SDS residual
``w(t) sqrt(abar_t) (eps_hat - eps)`` is the color adjoint fed to the renderer.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Protocol, Sequence

import numpy as np

from .errors import ConfigError
from .render.splat import RenderAdjoint


class GuidanceError(RuntimeError):
    """A provider failed to produce a prediction; the step should be skipped."""


@dataclass
class NoiseSchedule:
    alphas_cumprod: np.ndarray
    weights: np.ndarray = None
    t_range: tuple = (0.02, 0.98)

    def __post_init__(self):
        abar = np.asarray(self.alphas_cumprod, dtype=np.float64)
        if abar.ndim != 1 or len(abar) < 1:
            raise ValueError("alphas_cumprod must be a non-empty 1-D array")
        if np.any(abar < 0) or np.any(abar > 1):
            raise ValueError("alphas_cumprod must lie in [0, 1]")
        if np.any(np.diff(abar) >= 0):
            raise ValueError("alphas_cumprod must be strictly decreasing")
        self.alphas_cumprod = abar
        self.weights = 1.0 - abar if self.weights is None else np.asarray(self.weights, dtype=np.float64)

    @classmethod
    def linear(cls, num_timesteps=1000, beta_start=1e-4, beta_end=2e-2, t_range=(0.02, 0.98)):
        betas = np.linspace(beta_start, beta_end, num_timesteps)
        return cls(np.cumprod(1.0 - betas), t_range=tuple(t_range))

    @property
    def num_timesteps(self) -> int:
        return len(self.alphas_cumprod)

    def check(self, t):
        if not (isinstance(t, (int, np.integer)) and 0 <= t < self.num_timesteps):
            raise IndexError(f"timestep {t!r} outside schedule range [0, {self.num_timesteps})")

    def alpha_bar(self, t) -> float:
        self.check(t)
        return float(self.alphas_cumprod[t])

    def weight(self, t) -> float:
        self.check(t)
        return float(self.weights[t])

    def sample_t(self, rng) -> int:
        lo = int(self.t_range[0] * self.num_timesteps)
        hi = max(lo, min(self.num_timesteps - 1, int(self.t_range[1] * self.num_timesteps)))
        return int(rng.integers(lo, hi + 1))


def add_noise(x, t, eps, schedule: NoiseSchedule):
    x = np.asarray(x, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x.shape != eps.shape:
        raise ValueError(f"noise shape {eps.shape} != image shape {x.shape}")
    abar = schedule.alpha_bar(t)
    return np.sqrt(abar) * x + np.sqrt(1.0 - abar) * eps


@dataclass
class GuidanceContext:
    """What a provider may look at besides ``z_t`` and ``t``.

    ``noise`` carries the sampled epsilon; only the synthetic test providers
    use it. ``view_keys`` identify the rendered cameras.
    """

    prompt: str = ""
    condition: object = None
    cameras: Sequence | None = None
    mode: str = "rgb"
    noise: np.ndarray | None = None
    view_keys: Sequence[str] | None = None
    extra: dict = field(default_factory=dict)


class GuidanceProvider(Protocol):
    def predict(self, z_t: np.ndarray, t: int, context: GuidanceContext) -> np.ndarray:
        ...


class EchoNoiseProvider:
    """Predicts the exact noise, so the SDS residual vanishes."""

    def predict(self, z_t, t, context):
        if context.noise is None:
            raise GuidanceError("echo-noise provider needs the sampled noise in its context")
        return np.array(context.noise, dtype=np.float64)


class PullToTargetProvider:
    """``eps_hat = eps + gain * (x_estimate - target)``.

    Targets are keyed by camera (``CameraView.key()``) and mode; images with
    no registered target get a zero residual.
    """

    def __init__(self, schedule: NoiseSchedule, targets=None, gain=1.0):
        self.schedule = schedule
        self.gain = float(gain)
        self.targets = {}
        for key, image in (targets or {}).items():
            self.add_target(key, image)

    def add_target(self, key, image, mode="rgb"):
        if not isinstance(key, str):
            key = key.key()
        self.targets[(key, mode)] = np.asarray(image, dtype=np.float64)

    def predict(self, z_t, t, context):
        if context.noise is None:
            raise GuidanceError("pull-to-target provider needs the sampled noise in its context")
        eps = np.asarray(context.noise, dtype=np.float64)
        abar = self.schedule.alpha_bar(t)
        x_est = (z_t - np.sqrt(1.0 - abar) * eps) / np.sqrt(abar)
        out = eps.copy()
        keys = context.view_keys or [None] * len(z_t)
        for i, key in enumerate(keys):
            target = self.targets.get((key, context.mode))
            if target is None:
                continue
            if target.shape != z_t[i].shape:
                raise GuidanceError(f"target for view {key} has shape {target.shape}, image {z_t[i].shape}")
            out[i] += self.gain * (x_est[i] - target)
        return out


class ConditioningToyProvider:
    """Wraps the toy multi-view conditioning network as a 4-view provider.

    Images are average-pooled to the latent grid, channel-padded, predicted,
    and upsampled back, so any ``(4, H, W, 3)`` batch with H, W multiples of
    the latent size satisfies the shape contract.
    """

    def __init__(self, model=None, seed=0):
        from .conditioning import ConditioningConfig, MultiViewControlToy

        self.model = model if model is not None else MultiViewControlToy(ConditioningConfig(), seed=seed)

    def predict(self, z_t, t, context):
        from .conditioning import predict_images

        if z_t.shape[0] != 4:
            raise GuidanceError(f"conditioning-toy provider expects 4 views, got {z_t.shape[0]}")
        return predict_images(self.model, z_t, t, context.condition, context.cameras)


PROVIDER_KINDS = ("echo-noise", "pull-to-target", "conditioning-toy")


def make_synthetic_provider(kind: str, **kwargs) -> GuidanceProvider:
    if kind == "echo-noise":
        return EchoNoiseProvider()
    if kind == "pull-to-target":
        schedule = kwargs.pop("schedule", None) or NoiseSchedule.linear()
        return PullToTargetProvider(schedule, **kwargs)
    if kind == "conditioning-toy":
        return ConditioningToyProvider(**kwargs)
    raise ConfigError(f"unknown provider kind {kind!r}; expected one of {', '.join(PROVIDER_KINDS)}")


def normal_to_image(normal):
    return 0.5 * (np.asarray(normal) + 1.0)


def sds_adjoints(images, provider, schedule: NoiseSchedule, rng, context: GuidanceContext | None = None):
    """Image-space SDS residuals ``w(t) sqrt(abar_t) (eps_hat - eps)`` for a batch.

    One timestep is shared across the batch; noise is drawn per image.
    Returns ``(residuals, t)``.
    """
    images = np.asarray(images, dtype=np.float64)
    t = schedule.sample_t(rng)
    eps = rng.standard_normal(images.shape)
    z_t = add_noise(images, t, eps, schedule)
    ctx = replace(context or GuidanceContext(), noise=eps)
    try:
        eps_hat = np.asarray(provider.predict(z_t, t, ctx), dtype=np.float64)
    except GuidanceError:
        raise
    except Exception as exc:
        raise GuidanceError(f"provider {type(provider).__name__} failed: {exc}") from exc
    if eps_hat.shape != images.shape:
        raise GuidanceError(f"provider returned shape {eps_hat.shape}, expected {images.shape}")
    if not np.all(np.isfinite(eps_hat)):
        raise GuidanceError("provider returned non-finite values")
    scale = schedule.weight(t) * np.sqrt(schedule.alpha_bar(t))
    return scale * (eps_hat - eps), t


def _context_for(views, context):
    ctx = context or GuidanceContext()
    return replace(ctx, cameras=list(views), view_keys=[v.key() for v in views])


def sds_grad(scene, views, provider, schedule: NoiseSchedule, rng, context=None, accumulate=True):
    """SDS gradients for ``scene`` rendered from ``views``.

    ``scene`` exposes ``render(view)``, ``gradients(view, adjoint)``,
    ``zero_gradients()`` and ``accumulate(grads, scale)``. In ``normal`` mode
    the provider sees normal maps mapped to [0, 1] and the residual flows
    back through the normals. Returns the fresh (unscaled) gradient dict.
    """
    views = list(views)
    ctx = _context_for(views, context)
    outputs = [scene.render(v) for v in views]
    if ctx.mode == "normal":
        images = np.stack([normal_to_image(o.normal) for o in outputs])
    else:
        images = np.stack([o.color for o in outputs])
    residual, _ = sds_adjoints(images, provider, schedule, rng, ctx)
    grads = scene.zero_gradients()
    for view, r in zip(views, residual):
        adj = RenderAdjoint(normal=0.5 * r) if ctx.mode == "normal" else RenderAdjoint(color=r)
        for k, g in scene.gradients(view, adj).items():
            grads[k] += g
    if accumulate:
        scene.accumulate(grads)
    return grads


def hybrid_sds_grad(scene, canonical_views, random_views, provider2d, provider3d,
                    lambda_2d=0.1, lambda_3d=0.01, schedule=None, rng=None, context=None,
                    accumulate=True):
    """``lambda_2d * SDS_2D(random views) + lambda_3d * SDS_3D(canonical rig)``.

    The 2D part runs first on the shared rng stream. The condition image in
    ``context`` reaches only the 3D provider.
    """
    canonical_views = list(canonical_views)
    random_views = list(random_views)
    if len(canonical_views) != 4:
        raise ValueError(f"canonical rig needs exactly 4 views, got {len(canonical_views)}")
    if not random_views:
        raise ValueError("random view batch is empty")
    schedule = schedule or NoiseSchedule.linear()
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    ctx = context or GuidanceContext()
    total = scene.zero_gradients()
    if lambda_2d != 0:
        g2 = sds_grad(scene, random_views, provider2d, schedule, rng, replace(ctx, condition=None),
                      accumulate=False)
        for k in total:
            total[k] = total[k] + lambda_2d * g2[k]
    if lambda_3d != 0:
        g3 = sds_grad(scene, canonical_views, provider3d, schedule, rng, ctx, accumulate=False)
        for k in total:
            total[k] = total[k] + lambda_3d * g3[k]
    if accumulate:
        scene.accumulate(total)
    return total
