# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled compositing and density kernels.

Splats arrive pre-sorted front to back. Each tile owns a contiguous slice of
``tile_ids`` (indices into the sorted splats, ascending) delimited by
``tile_ranges``.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp

cnp.import_array()


def composite_forward(double[:, ::1] mean2d, double[:, ::1] conic, double[::1] opacity,
                      double[:, ::1] feats, int[:, ::1] bbox, double[::1] background,
                      int height, int width, int tile_size,
                      long[:, ::1] tile_ranges, long[::1] tile_ids, double t_min):
    cdef Py_ssize_t F = feats.shape[1]
    out_feat_np = np.zeros((height, width, F))
    out_alpha_np = np.zeros((height, width))
    cdef double[:, :, ::1] out_feat = out_feat_np
    cdef double[:, ::1] out_alpha = out_alpha_np
    cdef int tiles_x = (width + tile_size - 1) // tile_size
    cdef Py_ssize_t row, col, k, c, g, start, stop
    cdef int tile
    cdef double T, dx, dy, q, a, w
    with nogil:
        for row in range(height):
            for col in range(width):
                tile = (row // tile_size) * tiles_x + (col // tile_size)
                start = tile_ranges[tile, 0]
                stop = tile_ranges[tile, 1]
                T = 1.0
                for k in range(start, stop):
                    if T < t_min:
                        break
                    g = tile_ids[k]
                    if col < bbox[g, 0] or col > bbox[g, 1] or row < bbox[g, 2] or row > bbox[g, 3]:
                        continue
                    dx = col - mean2d[g, 0]
                    dy = row - mean2d[g, 1]
                    q = conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy + conic[g, 2] * dy * dy
                    a = opacity[g] * exp(-0.5 * q)
                    w = a * T
                    for c in range(F):
                        out_feat[row, col, c] += w * feats[g, c]
                    out_alpha[row, col] += w
                    T = T * (1.0 - a)
                for c in range(F):
                    out_feat[row, col, c] += (1.0 - out_alpha[row, col]) * background[c]
    return out_feat_np, out_alpha_np


def composite_backward(double[:, ::1] mean2d, double[:, ::1] conic, double[::1] opacity,
                       double[:, ::1] feats, int[:, ::1] bbox, double[::1] background,
                       int height, int width, int tile_size,
                       long[:, ::1] tile_ranges, long[::1] tile_ids, double t_min,
                       double[:, :, ::1] grad_feat, double[:, ::1] grad_alpha):
    cdef Py_ssize_t M = feats.shape[0]
    cdef Py_ssize_t F = feats.shape[1]
    g_mean_np = np.zeros((M, 2))
    g_conic_np = np.zeros((M, 3))
    g_opac_np = np.zeros(M)
    g_feats_np = np.zeros((M, F))
    cdef double[:, ::1] g_mean = g_mean_np
    cdef double[:, ::1] g_conic = g_conic_np
    cdef double[::1] g_opac = g_opac_np
    cdef double[:, ::1] g_feats = g_feats_np

    cdef Py_ssize_t longest = 0
    cdef Py_ssize_t tt
    for tt in range(tile_ranges.shape[0]):
        if tile_ranges[tt, 1] - tile_ranges[tt, 0] > longest:
            longest = tile_ranges[tt, 1] - tile_ranges[tt, 0]
    scratch_np = np.zeros((max(longest, 1), 5))
    scratch_idx_np = np.zeros(max(longest, 1), dtype=np.int64)
    cdef double[:, ::1] scratch = scratch_np
    cdef long[::1] scratch_idx = scratch_idx_np

    cdef int tiles_x = (width + tile_size - 1) // tile_size
    cdef Py_ssize_t row, col, k, c, g, start, stop, n, i
    cdef int tile
    cdef double T, dx, dy, q, G, a, w, val, kconst, S, dLda, dLdG, qx, qy
    with nogil:
        for row in range(height):
            for col in range(width):
                tile = (row // tile_size) * tiles_x + (col // tile_size)
                start = tile_ranges[tile, 0]
                stop = tile_ranges[tile, 1]
                # replay the forward traversal, remembering each contribution
                T = 1.0
                n = 0
                for k in range(start, stop):
                    if T < t_min:
                        break
                    g = tile_ids[k]
                    if col < bbox[g, 0] or col > bbox[g, 1] or row < bbox[g, 2] or row > bbox[g, 3]:
                        continue
                    dx = col - mean2d[g, 0]
                    dy = row - mean2d[g, 1]
                    q = conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy + conic[g, 2] * dy * dy
                    G = exp(-0.5 * q)
                    a = opacity[g] * G
                    scratch_idx[n] = g
                    scratch[n, 0] = a
                    scratch[n, 1] = G
                    scratch[n, 2] = T
                    scratch[n, 3] = dx
                    scratch[n, 4] = dy
                    n = n + 1
                    T = T * (1.0 - a)
                if n == 0:
                    continue
                kconst = grad_alpha[row, col]
                for c in range(F):
                    kconst = kconst - grad_feat[row, col, c] * background[c]
                S = 0.0
                for i in range(n - 1, -1, -1):
                    g = scratch_idx[i]
                    a = scratch[i, 0]
                    G = scratch[i, 1]
                    T = scratch[i, 2]
                    dx = scratch[i, 3]
                    dy = scratch[i, 4]
                    val = kconst
                    for c in range(F):
                        val = val + grad_feat[row, col, c] * feats[g, c]
                    w = a * T
                    dLda = T * val - S / (1.0 - a)
                    S = S + w * val
                    for c in range(F):
                        g_feats[g, c] += grad_feat[row, col, c] * w
                    g_opac[g] += dLda * G
                    dLdG = dLda * opacity[g]
                    qx = conic[g, 0] * dx + conic[g, 1] * dy
                    qy = conic[g, 1] * dx + conic[g, 2] * dy
                    g_mean[g, 0] += dLdG * G * qx
                    g_mean[g, 1] += dLdG * G * qy
                    g_conic[g, 0] += -0.5 * dLdG * G * dx * dx
                    g_conic[g, 1] += -dLdG * G * dx * dy
                    g_conic[g, 2] += -0.5 * dLdG * G * dy * dy
    return g_mean_np, g_conic_np, g_opac_np, g_feats_np


def splat_density(double[:, ::1] centers, double[:, :, ::1] precisions, double[::1] weights,
                  long[:, ::1] lo, long[:, ::1] hi, double[::1] origin, double spacing,
                  int nx, int ny, int nz):
    """Accumulate weighted Gaussian kernels into a regular grid inside per-splat boxes."""
    grid_np = np.zeros((nx, ny, nz))
    cdef double[:, :, ::1] grid = grid_np
    cdef Py_ssize_t n, i, j, k
    cdef double px, py, pz, dx, dy, dz, q
    with nogil:
        for n in range(centers.shape[0]):
            for i in range(lo[n, 0], hi[n, 0]):
                px = origin[0] + i * spacing
                dx = px - centers[n, 0]
                for j in range(lo[n, 1], hi[n, 1]):
                    py = origin[1] + j * spacing
                    dy = py - centers[n, 1]
                    for k in range(lo[n, 2], hi[n, 2]):
                        pz = origin[2] + k * spacing
                        dz = pz - centers[n, 2]
                        q = (precisions[n, 0, 0] * dx * dx + precisions[n, 1, 1] * dy * dy
                             + precisions[n, 2, 2] * dz * dz
                             + 2.0 * (precisions[n, 0, 1] * dx * dy + precisions[n, 0, 2] * dx * dz
                                      + precisions[n, 1, 2] * dy * dz))
                        grid[i, j, k] += weights[n] * exp(-0.5 * q)
    return grid_np
