"""Regularizers and the stage loss totals.

Every term returns its value together with the gradient w.r.t. its input so
the pipeline can push a single combined adjoint through the renderer.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np
from scipy.spatial import cKDTree

from .render.splat import RenderAdjoint
from .scene import GaussianCloud, quaternion_to_matrix, quaternion_to_matrix_backward

TV_EPS = 1e-6


@dataclass
class LossWeights:
    tv_depth: float = 0.1
    tv_normal: float = 0.1
    mask: float = 1.0
    tv_depth_refine: float = 0.1
    tv_normal_refine: float = 0.1
    mask_refine: float = 1.0
    flat: float = 1.0
    align: float = 1.0
    k_neighbors: int = 8

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be >= 0, got {getattr(self, f.name)}")


def _smooth_abs(x):
    return np.sqrt(x * x + TV_EPS * TV_EPS) - TV_EPS


def tv_loss(img):
    """Anisotropic total variation averaged over all forward differences.

    Accepts ``H x W`` or ``H x W x C``. Returns ``(value, gradient)``.
    """
    img = np.asarray(img, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[..., None]
    H, W = img.shape[:2]
    if H < 2 or W < 2:
        raise ValueError(f"tv_loss needs H, W >= 2, got {H}x{W}")
    dx = img[:, 1:] - img[:, :-1]
    dy = img[1:, :] - img[:-1, :]
    count = dx.size + dy.size
    value = (_smooth_abs(dx).sum() + _smooth_abs(dy).sum()) / count
    gx = dx / np.sqrt(dx * dx + TV_EPS * TV_EPS) / count
    gy = dy / np.sqrt(dy * dy + TV_EPS * TV_EPS) / count
    grad = np.zeros_like(img)
    grad[:, 1:] += gx
    grad[:, :-1] -= gx
    grad[1:, :] += gy
    grad[:-1, :] -= gy
    return float(value), (grad[..., 0] if squeeze else grad)


def mask_loss(alpha, m_gt):
    alpha = np.asarray(alpha, dtype=np.float64)
    m_gt = np.asarray(m_gt, dtype=np.float64)
    if alpha.shape != m_gt.shape:
        raise ValueError(f"mask shape {m_gt.shape} != alpha shape {alpha.shape}")
    diff = alpha - m_gt
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def _flat_axes(cloud):
    order = np.argsort(cloud.log_scales, axis=1, kind="stable")
    return order[:, 0], order[:, 1]


def flatness(cloud: GaussianCloud):
    """Mean squared ratio of smallest to middle scale, with log-scale gradient."""
    n = len(cloud)
    i_min, i_mid = _flat_axes(cloud)
    rows = np.arange(n)
    ratio2 = np.exp(2.0 * (cloud.log_scales[rows, i_min] - cloud.log_scales[rows, i_mid]))
    g = np.zeros_like(cloud.log_scales)
    g[rows, i_min] += 2.0 * ratio2 / n
    g[rows, i_mid] -= 2.0 * ratio2 / n
    return float(ratio2.mean()), g


def neighbor_indices(centers, k):
    n = len(centers)
    k = min(k, n - 1)
    if k <= 0:
        return np.zeros((n, 0), dtype=np.int64)
    _, idx = cKDTree(centers).query(centers, k=k + 1)
    idx = np.asarray(idx).reshape(n, k + 1)
    out = np.empty((n, k), dtype=np.int64)
    for i in range(n):
        row = idx[i][idx[i] != i]
        out[i] = row[:k]
    return out


def alignment(cloud: GaussianCloud, k_neighbors=8):
    """Mean over Gaussians of ``1 - a_g^T S_g a_g``.

    ``a_g`` is the Gaussian's flat axis (smallest scale) and ``S_g`` the mean
    outer product of its neighbors' flat axes, so the deviation is the
    average squared sine between axes and is blind to sign.
    """
    n = len(cloud)
    if n < 2:
        return 0.0, np.zeros_like(cloud.rotations)
    nbr = neighbor_indices(cloud.centers, k_neighbors)
    k = nbr.shape[1]
    i_min, _ = _flat_axes(cloud)
    R = quaternion_to_matrix(cloud.rotations)
    axes = R[np.arange(n), :, i_min]
    dots = np.einsum("nd,nkd->nk", axes, axes[nbr])
    value = float(np.mean(1.0 - np.mean(dots**2, axis=1)))
    coef = -2.0 * dots / (n * k)
    g_axes = np.einsum("nk,nkd->nd", coef, axes[nbr])
    np.add.at(g_axes, nbr.ravel(), (coef[..., None] * axes[:, None, :]).reshape(-1, 3))
    g_R = np.zeros_like(R)
    g_R[np.arange(n), :, i_min] = g_axes
    return value, quaternion_to_matrix_backward(cloud.rotations, g_R)


def sugar_regularizers(cloud: GaussianCloud, k_neighbors=8, lambda_flat=1.0, lambda_align=1.0):
    """``lambda_flat * flatness + lambda_align * alignment`` with parameter gradients."""
    if len(cloud) == 0:
        raise ValueError("sugar_regularizers needs a non-empty cloud")
    f_val, g_logs = flatness(cloud)
    a_val, g_rot = alignment(cloud, k_neighbors)
    grads = {name: np.zeros_like(value) for name, value in cloud.params().items()}
    grads["log_scales"] = lambda_flat * g_logs
    grads["rotations"] = lambda_align * g_rot
    return lambda_flat * f_val + lambda_align * a_val, grads, {"flatness": f_val, "alignment": a_val}


@dataclass
class LossResult:
    total: float
    terms: dict
    adjoints: list


def guidance_value(adjoints) -> float:
    """Logged SDS surrogate: half the mean squared residual, summed over views."""
    total = 0.0
    for adj in adjoints:
        if adj is None:
            continue
        for img in (adj.color, adj.normal):
            if img is not None:
                total += 0.5 * float(np.mean(np.asarray(img) ** 2))
    return total


def _assemble(outputs, guidance, masks, w_depth, w_normal, w_mask):
    n = len(outputs)
    guidance = list(guidance) if guidance is not None else [None] * n
    masks = list(masks) if masks is not None else [None] * n
    if len(guidance) != n or len(masks) != n:
        raise ValueError("outputs, guidance and masks must align per view")
    terms = {"guidance": guidance_value(guidance), "tv_depth": 0.0, "tv_normal": 0.0, "mask": 0.0}
    adjoints = []
    for out, g, m in zip(outputs, guidance, masks):
        H, W = out.alpha.shape
        color = None if g is None or g.color is None else np.array(g.color, dtype=np.float64)
        normal = None if g is None or g.normal is None else np.array(g.normal, dtype=np.float64)
        depth = np.zeros((H, W))
        alpha = np.zeros((H, W))
        if w_depth > 0:
            v, gd = tv_loss(out.depth)
            terms["tv_depth"] += v
            depth += w_depth * gd
        if w_normal > 0 and out.normal is not None:
            v, gn = tv_loss(out.normal)
            terms["tv_normal"] += v
            normal = w_normal * gn if normal is None else normal + w_normal * gn
        if w_mask > 0 and m is not None:
            v, ga = mask_loss(out.alpha, m)
            terms["mask"] += v
            alpha += w_mask * ga
        adjoints.append(RenderAdjoint(color=color, depth=depth, alpha=alpha, normal=normal))
    total = terms["guidance"] + w_depth * terms["tv_depth"] + w_normal * terms["tv_normal"] + w_mask * terms["mask"]
    return LossResult(total, terms, adjoints)


def stage2_loss(outputs, guidance, weights: LossWeights, masks=None, cloud=None, sugar_active=False):
    """Hybrid-SDS adjoints plus depth/normal TV and mask terms.

    ``guidance`` holds one (already weighted) SDS ``RenderAdjoint`` per
    view, or ``None``. When ``sugar_active`` the SuGaR regularizers on
    ``cloud`` are added; their parameter gradients are in
    ``terms['sugar_grads']``.
    """
    res = _assemble(outputs, guidance, masks, weights.tv_depth, weights.tv_normal, weights.mask)
    if sugar_active and cloud is not None and len(cloud):
        value, grads, parts = sugar_regularizers(cloud, weights.k_neighbors, weights.flat, weights.align)
        res.total += value
        res.terms.update(parts)
        res.terms["sugar"] = value
        res.terms["sugar_grads"] = grads
    return res


def stage3_loss(outputs, guidance, weights: LossWeights, masks=None):
    """Distillation adjoints plus the refine-stage TV and mask terms.

    Normals in ``outputs`` come from mesh faces, so normal adjoints are routed
    to the mesh rather than through depth.
    """
    return _assemble(outputs, guidance, masks, weights.tv_depth_refine, weights.tv_normal_refine,
                     weights.mask_refine)
