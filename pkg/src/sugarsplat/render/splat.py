"""Differentiable Gaussian splatting: projection, compositing and backward pass."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..camera import CameraView
from ..scene import GaussianCloud, covariance_backward
from . import backend as _backend

COV2D_FLOOR = 0.3  # px^2
TRANSMITTANCE_MIN = 1e-4
DEPTH_EPS = 1e-8
BBOX_SIGMAS = 3.0
TILE_SIZE = 16


@dataclass
class RenderOutput:
    color: np.ndarray  # H x W x 3
    depth: np.ndarray  # H x W, alpha-normalized expected depth, 0 where empty
    alpha: np.ndarray  # H x W
    normal: np.ndarray | None = None  # H x W x 3, camera space
    depth_sum: np.ndarray | None = None  # unnormalized sum of w_i d_i


@dataclass
class RenderAdjoint:
    """Per-channel adjoint images; missing channels count as zero."""

    color: np.ndarray | None = None
    depth: np.ndarray | None = None
    alpha: np.ndarray | None = None
    normal: np.ndarray | None = None

    def check(self, height, width):
        for name, shape in (("color", (height, width, 3)), ("depth", (height, width)),
                            ("alpha", (height, width)), ("normal", (height, width, 3))):
            value = getattr(self, name)
            if value is not None and np.shape(value) != shape:
                raise ValueError(f"adjoint '{name}' has shape {np.shape(value)}, expected {shape}")

    def is_zero(self) -> bool:
        return all(v is None or not np.any(v) for v in (self.color, self.depth, self.alpha, self.normal))


@dataclass
class Projected:
    mean2d: np.ndarray
    cov2d: np.ndarray  # after eigenvalue floor
    conic: np.ndarray  # (a, b, c) of the inverse 2D covariance
    depth: np.ndarray
    visible: np.ndarray
    bbox: np.ndarray  # int32 (x0, x1, y0, y1), inclusive
    # cached for the backward pass
    cam: np.ndarray
    JW: np.ndarray
    raw_cov2d: np.ndarray
    eigvals: np.ndarray
    eigvecs: np.ndarray
    clamped: np.ndarray


def project_splats(means, covs, view: CameraView) -> Projected:
    """EWA projection of world-space Gaussians into ``view``."""
    means = np.asarray(means, dtype=np.float64).reshape(-1, 3)
    covs = np.asarray(covs, dtype=np.float64).reshape(-1, 3, 3)
    n = len(means)
    R, t = view.rotation, view.translation
    f = view.focal
    cx, cy = view.principal_point
    cam = means @ R.T + t
    visible = (cam[:, 2] > view.near) & (cam[:, 2] < view.far)
    tz = np.where(visible, cam[:, 2], 1.0)
    tx, ty = cam[:, 0], cam[:, 1]
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = f / tz
    J[:, 0, 2] = -f * tx / tz**2
    J[:, 1, 1] = f / tz
    J[:, 1, 2] = -f * ty / tz**2
    JW = J @ R
    raw = JW @ covs @ np.swapaxes(JW, 1, 2)
    raw = 0.5 * (raw + np.swapaxes(raw, 1, 2))
    eigvals, eigvecs = np.linalg.eigh(raw) if n else (np.zeros((0, 2)), np.zeros((0, 2, 2)))
    clamped = eigvals[:, 0] < COV2D_FLOOR
    floored = np.maximum(eigvals, COV2D_FLOOR)
    rebuilt = np.einsum("nik,nk,njk->nij", eigvecs, floored, eigvecs)
    rebuilt = 0.5 * (rebuilt + np.swapaxes(rebuilt, 1, 2))
    cov2d = np.where(clamped[:, None, None], rebuilt, raw)
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=1)
    mean2d = np.stack([f * tx / tz + cx, f * ty / tz + cy], axis=1)
    radius = BBOX_SIGMAS * np.sqrt(floored[:, 1]) if n else np.zeros(0)
    x0, x1 = np.ceil(mean2d[:, 0] - radius), np.floor(mean2d[:, 0] + radius)
    y0, y1 = np.ceil(mean2d[:, 1] - radius), np.floor(mean2d[:, 1] + radius)
    with np.errstate(invalid="ignore"):
        on_screen = (x0 <= view.width - 1) & (x1 >= 0) & (y0 <= view.height - 1) & (y1 >= 0)
    visible = visible & on_screen & np.isfinite(mean2d).all(axis=1)
    x0, x1 = np.clip(x0, 0, view.width - 1), np.clip(x1, 0, view.width - 1)
    y0, y1 = np.clip(y0, 0, view.height - 1), np.clip(y1, 0, view.height - 1)
    bbox = np.stack([x0, x1, y0, y1], axis=1)
    bbox = np.where(np.isfinite(bbox), bbox, -1).astype(np.int32)
    return Projected(mean2d, cov2d, conic, cam[:, 2].copy(), visible, bbox, cam, JW, raw,
                     eigvals, eigvecs, clamped)


def project_splats_backward(proj: Projected, covs, view: CameraView, g_mean2d, g_conic, g_depth):
    """Pull gradients on 2D means, conics and depths back to world means and covariances."""
    covs = np.asarray(covs, dtype=np.float64).reshape(-1, 3, 3)
    n = len(covs)
    g_means = np.zeros((n, 3))
    g_covs = np.zeros((n, 3, 3))
    vis = proj.visible
    if not np.any(vis):
        return g_means, g_covs
    R = view.rotation
    f = view.focal
    cam = proj.cam[vis]
    tx, ty, tz = cam[:, 0], cam[:, 1], cam[:, 2]
    conic = proj.conic[vis]
    Q = np.empty((len(cam), 2, 2))
    Q[:, 0, 0], Q[:, 0, 1], Q[:, 1, 0], Q[:, 1, 1] = conic[:, 0], conic[:, 1], conic[:, 1], conic[:, 2]
    gc = g_conic[vis]
    gQ = np.empty_like(Q)
    gQ[:, 0, 0], gQ[:, 1, 1] = gc[:, 0], gc[:, 2]
    gQ[:, 0, 1] = gQ[:, 1, 0] = 0.5 * gc[:, 1]
    g_cov2d = -Q @ gQ @ Q
    # eigenvalue floor (Daleckii-Krein); identity where nothing was clamped
    clamped = proj.clamped[vis]
    if np.any(clamped):
        lam = proj.eigvals[vis][clamped]
        V = proj.eigvecs[vis][clamped]
        fl = np.maximum(lam, COV2D_FLOOR)
        d = (lam > COV2D_FLOOR).astype(np.float64)
        gap = lam[:, 1] - lam[:, 0]
        safe = np.abs(gap) > 1e-12
        off = np.where(safe, (fl[:, 1] - fl[:, 0]) / np.where(safe, gap, 1.0), d[:, 0])
        Gm = np.empty((len(lam), 2, 2))
        Gm[:, 0, 0], Gm[:, 1, 1] = d[:, 0], d[:, 1]
        Gm[:, 0, 1] = Gm[:, 1, 0] = off
        A = np.swapaxes(V, 1, 2) @ g_cov2d[clamped] @ V
        g_cov2d[clamped] = V @ (Gm * A) @ np.swapaxes(V, 1, 2)
    g_cov2d = 0.5 * (g_cov2d + np.swapaxes(g_cov2d, 1, 2))
    JW = proj.JW[vis]
    JWt = np.swapaxes(JW, 1, 2)
    g_covs[vis] = JWt @ g_cov2d @ JW
    g_JW = 2.0 * g_cov2d @ JW @ covs[vis]
    gJ = g_JW @ R.T
    gt = np.zeros((len(cam), 3))
    gt[:, 0] = gJ[:, 0, 2] * (-f / tz**2)
    gt[:, 1] = gJ[:, 1, 2] * (-f / tz**2)
    gt[:, 2] = (gJ[:, 0, 0] * (-f / tz**2) + gJ[:, 0, 2] * (2 * f * tx / tz**3)
                + gJ[:, 1, 1] * (-f / tz**2) + gJ[:, 1, 2] * (2 * f * ty / tz**3))
    gm = g_mean2d[vis]
    gt[:, 0] += gm[:, 0] * f / tz
    gt[:, 1] += gm[:, 1] * f / tz
    gt[:, 2] += -gm[:, 0] * f * tx / tz**2 - gm[:, 1] * f * ty / tz**2
    gt[:, 2] += g_depth[vis]
    g_means[vis] = gt @ R
    return g_means, g_covs


def _bin_tiles(bbox, height, width, tile_size=TILE_SIZE):
    tiles_x = -(-width // tile_size)
    tiles_y = -(-height // tile_size)
    n_tiles = tiles_x * tiles_y
    m = len(bbox)
    if m == 0:
        return np.zeros((n_tiles, 2), dtype=np.int64), np.zeros(0, dtype=np.int64)
    tx0, tx1 = bbox[:, 0] // tile_size, bbox[:, 1] // tile_size
    ty0, ty1 = bbox[:, 2] // tile_size, bbox[:, 3] // tile_size
    nx = (tx1 - tx0 + 1).astype(np.int64)
    counts = nx * (ty1 - ty0 + 1)
    splat = np.repeat(np.arange(m, dtype=np.int64), counts)
    starts = np.cumsum(counts) - counts
    local = np.arange(counts.sum(), dtype=np.int64) - np.repeat(starts, counts)
    nxr = np.repeat(nx, counts)
    tile = (np.repeat(ty0, counts) + local // nxr) * tiles_x + np.repeat(tx0, counts) + local % nxr
    order = np.argsort(tile, kind="stable")
    tile_sorted = tile[order]
    tile_ids = np.ascontiguousarray(splat[order])
    bounds = np.searchsorted(tile_sorted, np.arange(n_tiles + 1))
    ranges = np.ascontiguousarray(np.stack([bounds[:-1], bounds[1:]], axis=1), dtype=np.int64)
    return ranges, tile_ids


@dataclass
class _Prepared:
    proj: Projected
    order: np.ndarray  # sorted visible splat indices into the input arrays
    args: tuple


def _prepare(means, covs, opacities, features, background, view, proj=None):
    proj = proj if proj is not None else project_splats(means, covs, view)
    vis = np.flatnonzero(proj.visible)
    # front to back, ties broken by storage index
    order = vis[np.argsort(proj.depth[vis], kind="stable")]
    feats = np.ascontiguousarray(features[order], dtype=np.float64)
    bbox = np.ascontiguousarray(proj.bbox[order])
    ranges, ids = _bin_tiles(bbox, view.height, view.width)
    args = (np.ascontiguousarray(proj.mean2d[order]), np.ascontiguousarray(proj.conic[order]),
            np.ascontiguousarray(opacities[order], dtype=np.float64), feats, bbox,
            np.ascontiguousarray(background, dtype=np.float64), int(view.height), int(view.width),
            TILE_SIZE, ranges, ids, TRANSMITTANCE_MIN)
    return _Prepared(proj, order, args)


def rasterize(means, covs, opacities, features, background, view: CameraView, backend=None):
    """Composite arbitrary per-splat features. Returns ``(features HxWxF, alpha HxW)``."""
    features = _as_rows(features, len(opacities))
    prep = _prepare(means, covs, np.asarray(opacities, dtype=np.float64), features, background, view)
    return _backend.get(backend).composite_forward(*prep.args)


def rasterize_backward(means, covs, opacities, features, background, view: CameraView,
                       grad_features, grad_alpha, feature_depth_channel=None, backend=None):
    """Gradients of ``sum(grad_features * F) + sum(grad_alpha * alpha)``.

    Returns gradients w.r.t. means, covariances, opacities and features. When
    ``feature_depth_channel`` is given, that feature column is the splat's
    camera depth and its gradient is routed into the means.
    """
    opacities = np.asarray(opacities, dtype=np.float64)
    features = _as_rows(features, len(opacities))
    n, F = features.shape
    prep = _prepare(means, covs, opacities, features, background, view)
    g_mean2d_s, g_conic_s, g_opac_s, g_feat_s = _backend.get(backend).composite_backward(
        *prep.args, np.ascontiguousarray(grad_features, dtype=np.float64),
        np.ascontiguousarray(grad_alpha, dtype=np.float64))
    g_mean2d = np.zeros((n, 2))
    g_conic = np.zeros((n, 3))
    g_opac = np.zeros(n)
    g_feat = np.zeros((n, F))
    g_mean2d[prep.order] = g_mean2d_s
    g_conic[prep.order] = g_conic_s
    g_opac[prep.order] = g_opac_s
    g_feat[prep.order] = g_feat_s
    g_depth = g_feat[:, feature_depth_channel] if feature_depth_channel is not None else np.zeros(n)
    g_means, g_covs = project_splats_backward(prep.proj, covs, view, g_mean2d, g_conic, g_depth)
    return g_means, g_covs, g_opac, g_feat


def _as_rows(values, n):
    values = np.asarray(values, dtype=np.float64)
    return values.reshape(n, values.size // n if n else values.shape[-1] if values.ndim > 1 else 1)


def _splat_features(means, colors, view, extra=None):
    depth = (np.asarray(means).reshape(-1, 3) @ view.rotation[2]) + view.translation[2]
    cols = [np.asarray(colors, dtype=np.float64).reshape(-1, 3), depth[:, None]]
    if extra is not None:
        cols.append(np.asarray(extra, dtype=np.float64).reshape(len(depth), -1))
    return np.concatenate(cols, axis=1)


def _feature_background(background, n_extra):
    return np.concatenate([np.asarray(background, dtype=np.float64).reshape(3), np.zeros(1 + n_extra)])


def render_splats(means, covs, opacities, colors, view, background=(0.0, 0.0, 0.0),
                  extra=None, with_normals=True, backend=None):
    """Render color, depth, alpha (and depth-derived normals) from world splats.

    ``extra`` features (e.g. face normals) are composited against a zero
    background and returned in ``RenderOutput.normal`` instead of the
    depth-derived estimate.
    """
    n_extra = 0 if extra is None else _as_rows(extra, len(opacities)).shape[1]
    feats = _splat_features(means, colors, view, extra)
    img, alpha = rasterize(means, covs, opacities, feats, _feature_background(background, n_extra), view, backend)
    dsum = img[..., 3]
    depth = dsum / np.maximum(alpha, DEPTH_EPS)
    if extra is not None:
        normal = img[..., 4:7]
    elif with_normals:
        normal = normals_from_depth(depth, alpha, view)
    else:
        normal = None
    return RenderOutput(img[..., :3].copy(), depth, alpha, normal, dsum)


def render_splats_backward(means, covs, opacities, colors, view, background, adjoint: RenderAdjoint,
                           extra=None, backend=None):
    """Returns gradients for (means, covs, opacities, colors, extra)."""
    H, W = view.height, view.width
    adjoint.check(H, W)
    n = len(opacities)
    n_extra = 0 if extra is None else _as_rows(extra, n).shape[1]
    feats = _splat_features(means, colors, view, extra)
    bg = _feature_background(background, n_extra)
    img, alpha = rasterize(means, covs, opacities, feats, bg, view, backend)
    dsum = img[..., 3]
    g_depth = np.zeros((H, W)) if adjoint.depth is None else np.array(adjoint.depth, dtype=np.float64)
    if adjoint.normal is not None and extra is None:
        depth = dsum / np.maximum(alpha, DEPTH_EPS)
        g_depth = g_depth + normals_from_depth_backward(depth, alpha, view, adjoint.normal)
    g_alpha = np.zeros((H, W)) if adjoint.alpha is None else np.array(adjoint.alpha, dtype=np.float64)
    big = alpha > DEPTH_EPS
    safe = np.where(big, alpha, 1.0)
    g_dsum = np.where(big, g_depth / safe, g_depth / DEPTH_EPS)
    g_alpha = g_alpha - np.where(big, g_depth * dsum / safe**2, 0.0)
    g_feat = np.zeros((H, W, 4 + n_extra))
    if adjoint.color is not None:
        g_feat[..., :3] = adjoint.color
    g_feat[..., 3] = g_dsum
    if extra is not None and adjoint.normal is not None:
        g_feat[..., 4:7] = adjoint.normal
    g_means, g_covs, g_opac, g_f = rasterize_backward(means, covs, opacities, feats, bg, view, g_feat,
                                                      g_alpha, feature_depth_channel=3, backend=backend)
    g_extra = g_f[:, 4:] if extra is not None else None
    return g_means, g_covs, g_opac, g_f[:, :3], g_extra


def render(cloud: GaussianCloud, view: CameraView, background=(0.0, 0.0, 0.0), with_normals=True,
           backend=None) -> RenderOutput:
    return render_splats(cloud.centers, cloud.covariances(), cloud.opacities, cloud.colors, view,
                         background, with_normals=with_normals, backend=backend)


def cloud_gradients(cloud: GaussianCloud, view: CameraView, background, adjoint: RenderAdjoint,
                    backend=None) -> dict:
    """Fresh parameter gradients of ``sum(adjoint * render(cloud))``."""
    opac = cloud.opacities
    g_means, g_covs, g_opac, g_colors, _ = render_splats_backward(
        cloud.centers, cloud.covariances(), opac, cloud.colors, view, background, adjoint, backend=backend)
    g_rot, g_logs = covariance_backward(cloud.rotations, cloud.log_scales, g_covs)
    return {
        "centers": g_means,
        "rotations": g_rot,
        "log_scales": g_logs,
        "opacity_logits": g_opac * opac * (1.0 - opac),
        "colors": g_colors,
    }


def render_backward(cloud: GaussianCloud, view: CameraView, background, adjoint: RenderAdjoint,
                    backend=None) -> dict:
    """Accumulate (not overwrite) parameter gradients into ``cloud.grads``."""
    grads = cloud_gradients(cloud, view, background, adjoint, backend)
    cloud.accumulate(grads)
    return grads


def _camera_rays(view: CameraView):
    f = view.focal
    cx, cy = view.principal_point
    rows, cols = np.mgrid[0:view.height, 0:view.width].astype(np.float64)
    return np.stack([(cols - cx) / f, (rows - cy) / f, np.ones_like(cols)], axis=-1)


def _normal_mask(alpha):
    H, W = alpha.shape
    ok = alpha >= 0.5
    mask = np.zeros((H, W), dtype=bool)
    if H >= 3 and W >= 3:
        mask[1:-1, 1:-1] = (ok[1:-1, 1:-1] & ok[:-2, 1:-1] & ok[2:, 1:-1] & ok[1:-1, :-2] & ok[1:-1, 2:])
    return mask


def _tangents(depth, view):
    P = depth[..., None] * _camera_rays(view)
    Tx = np.zeros_like(P)
    Ty = np.zeros_like(P)
    Tx[:, 1:-1] = 0.5 * (P[:, 2:] - P[:, :-2])
    Ty[1:-1, :] = 0.5 * (P[2:, :] - P[:-2, :])
    return Tx, Ty


def normals_from_depth(depth, alpha, view: CameraView):
    """Camera-space unit normals from central differences of back-projected depth.

    Border pixels and pixels whose 4-neighbourhood has alpha < 0.5 get zero.
    """
    depth = np.asarray(depth, dtype=np.float64)
    Tx, Ty = _tangents(depth, view)
    m = np.cross(Ty, Tx)
    norm = np.linalg.norm(m, axis=-1)
    mask = _normal_mask(np.asarray(alpha)) & (norm > 1e-20)
    return np.where(mask[..., None], m / np.where(mask, norm, 1.0)[..., None], 0.0)


def normals_from_depth_backward(depth, alpha, view: CameraView, grad_normal):
    depth = np.asarray(depth, dtype=np.float64)
    Tx, Ty = _tangents(depth, view)
    m = np.cross(Ty, Tx)
    norm = np.linalg.norm(m, axis=-1)
    mask = _normal_mask(np.asarray(alpha)) & (norm > 1e-20)
    safe = np.where(mask, norm, 1.0)[..., None]
    n = m / safe
    gn = np.where(mask[..., None], grad_normal, 0.0)
    gm = (gn - n * np.sum(n * gn, axis=-1, keepdims=True)) / safe
    gTy = np.cross(Tx, gm)
    gTx = np.cross(gm, Ty)
    gP = np.zeros_like(Tx)
    gP[:, 2:] += 0.5 * gTx[:, 1:-1]
    gP[:, :-2] -= 0.5 * gTx[:, 1:-1]
    gP[2:, :] += 0.5 * gTy[1:-1, :]
    gP[:-2, :] -= 0.5 * gTy[1:-1, :]
    return np.sum(gP * _camera_rays(view), axis=-1)


class SplatScene:
    """Adapter exposing a free Gaussian cloud to the guidance and loss code."""

    def __init__(self, cloud: GaussianCloud, background=(0.0, 0.0, 0.0), backend=None):
        self.cloud = cloud
        self.background = np.asarray(background, dtype=np.float64)
        self.backend = backend

    def render(self, view: CameraView) -> RenderOutput:
        return render(self.cloud, view, self.background, backend=self.backend)

    def gradients(self, view: CameraView, adjoint: RenderAdjoint) -> dict:
        return cloud_gradients(self.cloud, view, self.background, adjoint, self.backend)

    def zero_gradients(self) -> dict:
        return {k: np.zeros_like(v) for k, v in self.cloud.grads.items()}

    def accumulate(self, grads: dict, scale: float = 1.0):
        self.cloud.accumulate(grads, scale)
