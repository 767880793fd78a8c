"""Vectorized numpy versions of the compiled kernels.

Same signatures as ``_kernels``; the tile arguments are accepted and ignored
because every splat is evaluated densely against every pixel inside its box.
"""
import numpy as np


_BAND_BUDGET = 2_000_000  # splat-pixel pairs evaluated per band


def _bands(bbox, height, width):
    """Yield (row0, row1, splat indices overlapping those rows)."""
    m = max(len(bbox), 1)
    rows_per_band = max(1, min(height, _BAND_BUDGET // (m * width)))
    for r0 in range(0, height, rows_per_band):
        r1 = min(height, r0 + rows_per_band)
        sel = np.flatnonzero((bbox[:, 2] < r1) & (bbox[:, 3] >= r0))
        yield r0, r1, sel


def _pixel_terms(mean2d, conic, opacity, bbox, r0, r1, width):
    rows, cols = np.divmod(np.arange((r1 - r0) * width), width)
    rows = rows + r0
    inside = ((cols[None, :] >= bbox[:, 0:1]) & (cols[None, :] <= bbox[:, 1:2])
              & (rows[None, :] >= bbox[:, 2:3]) & (rows[None, :] <= bbox[:, 3:4]))
    dx = cols[None, :] - mean2d[:, 0:1]
    dy = rows[None, :] - mean2d[:, 1:2]
    q = conic[:, 0:1] * dx * dx + 2.0 * conic[:, 1:2] * dx * dy + conic[:, 2:3] * dy * dy
    G = np.where(inside, np.exp(-0.5 * np.where(inside, q, 0.0)), 0.0)
    a = opacity[:, None] * G
    return dx, dy, G, a


def _transmittance(a, t_min):
    # T before each splat; splats reached after T fell below t_min are inactive
    T = np.ones_like(a)
    if len(a) > 1:
        T[1:] = np.cumprod(1.0 - a[:-1], axis=0)
    active = T >= t_min
    return T, active


def composite_forward(mean2d, conic, opacity, feats, bbox, background, height, width,
                      tile_size, tile_ranges, tile_ids, t_min):
    F = feats.shape[1]
    out = np.empty((height * width, F))
    alpha = np.zeros(height * width)
    for r0, r1, sel in _bands(bbox, height, width):
        px = slice(r0 * width, r1 * width)
        _, _, _, a = _pixel_terms(mean2d[sel], conic[sel], opacity[sel], bbox[sel], r0, r1, width)
        T, active = _transmittance(a, t_min)
        w = np.where(active, a * T, 0.0)
        alpha[px] = w.sum(axis=0)
        out[px] = w.T @ feats[sel] + (1.0 - alpha[px])[:, None] * background[None, :]
    return out.reshape(height, width, F), alpha.reshape(height, width)


def composite_backward(mean2d, conic, opacity, feats, bbox, background, height, width,
                       tile_size, tile_ranges, tile_ids, t_min, grad_feat, grad_alpha):
    M, F = feats.shape
    g_mean = np.zeros((M, 2))
    g_conic = np.zeros((M, 3))
    g_opac = np.zeros(M)
    g_feats = np.zeros((M, F))
    gF_all = grad_feat.reshape(-1, F)
    gA_all = grad_alpha.reshape(-1)
    for r0, r1, sel in _bands(bbox, height, width):
        if len(sel) == 0:
            continue
        px = slice(r0 * width, r1 * width)
        op, cn, ft = opacity[sel], conic[sel], feats[sel]
        dx, dy, G, a = _pixel_terms(mean2d[sel], cn, op, bbox[sel], r0, r1, width)
        T, active = _transmittance(a, t_min)
        a = np.where(active, a, 0.0)
        G = np.where(active, G, 0.0)
        gF = gF_all[px]
        kconst = gA_all[px] - gF @ background
        val = ft @ gF.T + kconst[None, :]
        w = a * T
        contrib = w * val
        # suffix sums over later splats, exclusive
        S = np.cumsum(contrib[::-1], axis=0)[::-1] - contrib
        dLda = np.where(G > 0, T * val - S / (1.0 - a), 0.0)
        g_feats[sel] += w @ gF
        g_opac[sel] += np.sum(dLda * G, axis=1)
        dLdG_G = dLda * op[:, None] * G
        qx = cn[:, 0:1] * dx + cn[:, 1:2] * dy
        qy = cn[:, 1:2] * dx + cn[:, 2:3] * dy
        g_mean[sel, 0] += np.sum(dLdG_G * qx, axis=1)
        g_mean[sel, 1] += np.sum(dLdG_G * qy, axis=1)
        g_conic[sel, 0] += np.sum(-0.5 * dLdG_G * dx * dx, axis=1)
        g_conic[sel, 1] += np.sum(-dLdG_G * dx * dy, axis=1)
        g_conic[sel, 2] += np.sum(-0.5 * dLdG_G * dy * dy, axis=1)
    return g_mean, g_conic, g_opac, g_feats


def splat_density(centers, precisions, weights, lo, hi, origin, spacing, nx, ny, nz):
    grid = np.zeros((nx, ny, nz))
    for n in range(len(centers)):
        (i0, j0, k0), (i1, j1, k1) = lo[n], hi[n]
        if i1 <= i0 or j1 <= j0 or k1 <= k0:
            continue
        xs = origin[0] + np.arange(i0, i1) * spacing - centers[n, 0]
        ys = origin[1] + np.arange(j0, j1) * spacing - centers[n, 1]
        zs = origin[2] + np.arange(k0, k1) * spacing - centers[n, 2]
        d = np.stack(np.meshgrid(xs, ys, zs, indexing="ij"), axis=-1)
        q = np.einsum("...i,ij,...j->...", d, precisions[n], d)
        grid[i0:i1, j0:j1, k0:k1] += weights[n] * np.exp(-0.5 * q)
    return grid
