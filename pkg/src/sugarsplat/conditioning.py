"""Toy multi-view conditioning network with a locked base and a control branch.

A condition image is encoded to a feature map ``psi``. Relative camera poses
and the timestep give a local embedding ``e_l = Conv(psi + M1(cam + t))`` per
view and one global vector ``e_g = M2(cams, t)``. The control branch is a
copy of the base encoder fed ``z_t + e_l``; its features enter the frozen base
through zero-initialized 1x1 projections, so an untrained branch is inert.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

CONDITION_KINDS = ("edge", "depth", "normal", "scribble")


@dataclass(frozen=True)
class ConditioningConfig:
    n_views: int = 4
    latent_channels: int = 8
    latent_size: int = 16
    condition_size: int = 64
    condition_channels: int = 3
    psi_channels: int = 32
    width: int = 32
    emb_dim: int = 64
    init_range: float = 1.0  # uniform half-width is init_range / sqrt(fan_in)

    def __post_init__(self):
        if self.condition_size % self.latent_size:
            raise ValueError("condition_size must be a multiple of latent_size")
        if (self.condition_size // self.latent_size) not in (1, 2, 4, 8, 16):
            raise ValueError("condition_size / latent_size must be a power of two up to 16")
        if max(self.psi_channels, 2 * self.width, self.emb_dim) > 64:
            raise ValueError("embedding widths are capped at 64")


@dataclass
class ConditionImage:
    pixels: np.ndarray
    kind: str = "edge"

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim == 2:
            self.pixels = self.pixels[..., None]
        if self.pixels.ndim != 3:
            raise ValueError(f"condition pixels must be H x W x C, got shape {self.pixels.shape}")
        if self.kind not in CONDITION_KINDS:
            raise ValueError(f"unknown condition kind {self.kind!r}; expected one of {CONDITION_KINDS}")
        if self.pixels.size and (self.pixels.min() < 0 or self.pixels.max() > 1):
            raise ValueError("condition pixels must lie in [0, 1]")


@dataclass
class ControlEmbeddings:
    local: torch.Tensor  # views x C x H x W
    global_: torch.Tensor  # emb_dim


def timestep_embedding(t, dim):
    t = torch.as_tensor(t, dtype=torch.float32).reshape(-1)
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


def _zero(module):
    for p in module.parameters():
        nn.init.zeros_(p)
    module.is_zero_module = True
    return module


class ResBlock(nn.Module):
    def __init__(self, ch, emb_dim):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, ch)
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.emb = nn.Linear(emb_dim, ch)
        self.norm2 = nn.GroupNorm(8, ch)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return x + h


class Encoder(nn.Module):
    """Shared encoder layout for the base predictor and its control copy."""

    def __init__(self, cfg: ConditioningConfig):
        super().__init__()
        w = cfg.width
        self.time_mlp = nn.Sequential(nn.Linear(cfg.emb_dim, cfg.emb_dim), nn.SiLU(),
                                      nn.Linear(cfg.emb_dim, cfg.emb_dim))
        self.conv_in = nn.Conv2d(cfg.latent_channels, w, 3, padding=1)
        self.enc1 = ResBlock(w, cfg.emb_dim)
        self.down = nn.Conv2d(w, 2 * w, 3, stride=2, padding=1)
        self.enc2 = ResBlock(2 * w, cfg.emb_dim)
        self.mid = ResBlock(2 * w, cfg.emb_dim)

    def time(self, t, e_g, n):
        emb = self.time_mlp(timestep_embedding(t, self.time_mlp[0].in_features))
        return (emb + e_g.reshape(1, -1)).expand(n, -1)

    def features(self, x, emb):
        h0 = self.conv_in(x)
        h1 = self.enc1(h0, emb)
        h2 = self.enc2(self.down(h1), emb)
        h3 = self.mid(h2, emb)
        return [h1, h2, h3]


class ToyPredictor(nn.Module):
    """Small encoder-decoder noise predictor standing in for the frozen base."""

    def __init__(self, cfg: ConditioningConfig):
        super().__init__()
        w = cfg.width
        self.encoder = Encoder(cfg)
        self.dec2 = ResBlock(2 * w, cfg.emb_dim)
        self.up = nn.Conv2d(2 * w, w, 3, padding=1)
        self.dec1 = ResBlock(w, cfg.emb_dim)
        self.norm_out = nn.GroupNorm(8, w)
        self.conv_out = nn.Conv2d(w, cfg.latent_channels, 3, padding=1)

    def forward(self, z, t, e_g, residuals=None):
        emb = self.encoder.time(t, e_g, z.shape[0])
        h1, h2, h3 = self.encoder.features(z, emb)
        if residuals is not None:
            h1, h2, h3 = h1 + residuals[0], h2 + residuals[1], h3 + residuals[2]
        d = self.dec2(h3 + h2, emb)
        d = self.up(F.interpolate(d, scale_factor=2, mode="nearest"))
        d = self.dec1(d + h1, emb)
        return self.conv_out(F.silu(self.norm_out(d)))


class ConditionEncoder(nn.Module):
    """Four strided convolutions taking the condition image to the latent grid."""

    def __init__(self, cfg: ConditioningConfig):
        super().__init__()
        factor = cfg.condition_size // cfg.latent_size
        strides = [1, 1, 1, 1]
        for i in range(int(math.log2(factor))):
            strides[i] = 2
        chans = [cfg.condition_channels, 16, 16, 32, cfg.psi_channels]
        self.convs = nn.ModuleList(
            nn.Conv2d(chans[i], chans[i + 1], 3, stride=strides[i], padding=1) for i in range(4))

    def forward(self, c):
        h = c
        for i, conv in enumerate(self.convs):
            h = conv(h)
            if i < 3:
                h = F.silu(h)
        return h


class MultiViewControlToy(nn.Module):
    def __init__(self, config: ConditioningConfig | None = None, seed=0):
        super().__init__()
        cfg = self.config = config or ConditioningConfig()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.base = ToyPredictor(cfg)
            self.cond_encoder = ConditionEncoder(cfg)
            self.cam_embed = nn.Sequential(nn.Linear(16, cfg.emb_dim), nn.SiLU(), nn.Linear(cfg.emb_dim, cfg.emb_dim))
            self.t_embed = nn.Sequential(nn.Linear(cfg.emb_dim, cfg.emb_dim), nn.SiLU(),
                                         nn.Linear(cfg.emb_dim, cfg.emb_dim))
            self.m1 = nn.Linear(cfg.emb_dim, cfg.psi_channels)
            self.local_conv = nn.Conv2d(cfg.psi_channels, cfg.latent_channels, 3, padding=1)
            self.m2 = nn.Sequential(nn.Linear(cfg.n_views * cfg.emb_dim + cfg.emb_dim, cfg.emb_dim), nn.SiLU(),
                                    nn.Linear(cfg.emb_dim, cfg.emb_dim))
            self.control = Encoder(cfg)
            self.zero_proj = nn.ModuleList(
                [nn.Conv2d(cfg.width, cfg.width, 1), nn.Conv2d(2 * cfg.width, 2 * cfg.width, 1),
                 nn.Conv2d(2 * cfg.width, 2 * cfg.width, 1)])
            self._init_weights(cfg.init_range)
        # the control encoder starts as a copy of the base encoder
        self.control.load_state_dict(self.base.encoder.state_dict())
        _zero(self.m1)
        for proj in self.zero_proj:
            _zero(proj)
        self.base.requires_grad_(False)

    def _init_weights(self, init_range):
        for module in self.modules():
            if isinstance(module, (nn.Linear, nn.Conv2d)):
                fan_in = module.weight[0].numel()
                bound = init_range / math.sqrt(fan_in)
                nn.init.uniform_(module.weight, -bound, bound)
                nn.init.uniform_(module.bias, -bound, bound)

    def control_parameters(self):
        return [p for name, p in self.named_parameters() if not name.startswith("base.")]

    def encode_condition(self, c):
        cfg = self.config
        c = _condition_tensor(c, cfg)
        return self.cond_encoder(c)[0]

    def _camera_features(self, rel_poses):
        poses = torch.as_tensor(np.asarray(rel_poses), dtype=torch.float32)
        if poses.shape != (self.config.n_views, 4, 4):
            raise ValueError(f"expected {self.config.n_views} relative 4x4 poses, got shape {tuple(poses.shape)}")
        return self.cam_embed(poses.reshape(self.config.n_views, 16))

    def _t_features(self, t):
        return self.t_embed(timestep_embedding(t, self.config.emb_dim))

    def local_embedding(self, psi, rel_poses, t):
        cam = self._camera_features(rel_poses)
        bias = self.m1(cam + self._t_features(t))
        return self.local_conv(psi[None] + bias[:, :, None, None])

    def global_embedding(self, rel_poses, t):
        cam = self._camera_features(rel_poses)
        return self.m2(torch.cat([cam.reshape(-1), self._t_features(t)[0]]))

    def embeddings(self, c, rel_poses, t) -> ControlEmbeddings:
        psi = self.encode_condition(c)
        return ControlEmbeddings(self.local_embedding(psi, rel_poses, t), self.global_embedding(rel_poses, t))

    def base_predict(self, z_t, t, e_g):
        return self.base(_latent_tensor(z_t, self.config), t, e_g)

    def control_residuals(self, z_t, t, emb: ControlEmbeddings):
        z = _latent_tensor(z_t, self.config)
        h_emb = self.control.time(t, emb.global_, z.shape[0])
        feats = self.control.features(z + emb.local, h_emb)
        return [proj(f) for proj, f in zip(self.zero_proj, feats)]

    def controlled_predict(self, z_t, t, c, rel_poses):
        emb = self.embeddings(c, rel_poses, t)
        residuals = self.control_residuals(z_t, t, emb)
        return self.base(_latent_tensor(z_t, self.config), t, emb.global_, residuals)

    def forward(self, z_t, t, c, rel_poses):
        return self.controlled_predict(z_t, t, c, rel_poses)


def _condition_tensor(c, cfg):
    if isinstance(c, ConditionImage):
        c = c.pixels
    if c is None:
        c = np.zeros((cfg.condition_size, cfg.condition_size, cfg.condition_channels))
    c = torch.as_tensor(np.asarray(c), dtype=torch.float32)
    if c.ndim == 2:
        c = c[..., None]
    if c.shape != (cfg.condition_size, cfg.condition_size, cfg.condition_channels):
        raise ValueError(f"condition shape {tuple(c.shape)} does not match config "
                         f"({cfg.condition_size}, {cfg.condition_size}, {cfg.condition_channels})")
    return c.permute(2, 0, 1)[None]


def _latent_tensor(z, cfg):
    z = torch.as_tensor(z, dtype=torch.float32)
    expected = (cfg.n_views, cfg.latent_channels, cfg.latent_size, cfg.latent_size)
    if tuple(z.shape) != expected:
        raise ValueError(f"latent shape {tuple(z.shape)} != {expected}")
    return z


def identity_poses(n=4):
    return np.repeat(np.eye(4)[None], n, axis=0)


def predict_images(model: MultiViewControlToy, z_t, t, condition=None, cameras=None):
    """Run the toy model on an image batch ``(views, H, W, 3)``.

    Images are average-pooled onto the latent grid and zero-padded in
    channels; the prediction is cropped back to 3 channels and upsampled.
    """
    from .camera import relative_poses

    cfg = model.config
    z_t = np.asarray(z_t, dtype=np.float64)
    V, H, W, C = z_t.shape
    L = cfg.latent_size
    if V != cfg.n_views or H % L or W % L or C > cfg.latent_channels:
        raise ValueError(f"image batch {z_t.shape} incompatible with latent grid {L}x{L}")
    pooled = z_t.reshape(V, L, H // L, L, W // L, C).mean(axis=(2, 4))
    latent = np.zeros((V, cfg.latent_channels, L, L))
    latent[:, :C] = pooled.transpose(0, 3, 1, 2)
    poses = relative_poses(cameras) if cameras is not None else identity_poses(cfg.n_views)
    if condition is not None:
        cond = condition.pixels if isinstance(condition, ConditionImage) else np.asarray(condition)
        if cond.shape[:2] != (cfg.condition_size, cfg.condition_size):
            cond = _resize_nearest(cond, cfg.condition_size)
        condition = cond
    with torch.no_grad():
        out = model.controlled_predict(latent, t, condition, poses).double().numpy()
    out = out[:, :C].transpose(0, 2, 3, 1)
    return np.repeat(np.repeat(out, H // L, axis=1), W // L, axis=2)


def _resize_nearest(img, size):
    img = np.asarray(img)
    rows = (np.arange(size) * img.shape[0] / size).astype(int)
    cols = (np.arange(size) * img.shape[1] / size).astype(int)
    return img[rows][:, cols]


def condition_bias(c, cfg: ConditioningConfig, gain=0.5):
    """Synthetic target offset: the pooled condition broadcast across latent channels."""
    c = _condition_tensor(c, cfg)[0]
    pooled = F.adaptive_avg_pool2d(c, cfg.latent_size).mean(dim=0)
    signs = torch.tensor([(-1.0) ** k for k in range(cfg.latent_channels)])
    return gain * signs[:, None, None] * (2.0 * pooled[None] - 1.0)


def synthetic_batch(cfg: ConditioningConfig, rng: np.random.Generator, alphas_cumprod):
    """One sample of the condition-biased noise task.

    Returns ``(z_t, t, condition, rel_poses, target)`` where the target is the
    true noise plus a condition-dependent offset.
    """
    from .camera import canonical_rig, relative_poses

    n = cfg.condition_size
    yy, xx = np.mgrid[0:n, 0:n] / n
    freq = rng.uniform(1, 4, size=2)
    phase = rng.uniform(0, 2 * np.pi, size=2)
    base = 0.5 + 0.5 * np.sin(2 * np.pi * freq[0] * xx + phase[0]) * np.cos(2 * np.pi * freq[1] * yy + phase[1])
    cond = np.repeat(base[..., None], cfg.condition_channels, axis=2)
    rig = canonical_rig(rng.uniform(0, 360), rng.uniform(0, 30), rng.uniform(1.4, 1.6), width=cfg.latent_size)
    t = int(rng.integers(20, 980))
    abar = float(alphas_cumprod[t])
    x0 = rng.standard_normal((cfg.n_views, cfg.latent_channels, cfg.latent_size, cfg.latent_size)) * 0.5
    eps = rng.standard_normal(x0.shape)
    z_t = np.sqrt(abar) * x0 + np.sqrt(1 - abar) * eps
    target = torch.as_tensor(eps, dtype=torch.float32) + condition_bias(cond, cfg)[None]
    return z_t, t, cond, relative_poses(rig), target


def prediction_error(model: MultiViewControlToy, batches, use_control=True) -> float:
    errs = []
    with torch.no_grad():
        for z_t, t, cond, poses, target in batches:
            if use_control:
                pred = model.controlled_predict(z_t, t, cond, poses)
            else:
                pred = model.base_predict(z_t, t, model.global_embedding(poses, t))
            errs.append(float(torch.mean((pred - target) ** 2)))
    return float(np.mean(errs))


def train_control(model: MultiViewControlToy, steps=200, lr=1e-3, seed=0, alphas_cumprod=None):
    """Fit the control branch on the synthetic task; the base stays locked."""
    if alphas_cumprod is None:
        alphas_cumprod = np.cumprod(1.0 - np.linspace(1e-4, 2e-2, 1000))
    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(model.control_parameters(), lr=lr)
    losses = []
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        for _ in range(steps):
            z_t, t, cond, poses, target = synthetic_batch(model.config, rng, alphas_cumprod)
            loss = torch.mean((model.controlled_predict(z_t, t, cond, poses) - target) ** 2)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
    return losses


def state_arrays(model: nn.Module) -> dict:
    """Named float32 arrays for the weights archive."""
    return {k: v.detach().cpu().numpy().astype(np.float32) for k, v in model.state_dict().items()}


def load_state_arrays(model: nn.Module, arrays: dict):
    model.load_state_dict({k: torch.from_numpy(np.asarray(v)) for k, v in arrays.items()})
