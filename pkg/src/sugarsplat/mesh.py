"""Mesh extraction and the mesh-bound Gaussian (SuGaR-style) representation.

Meshes come from marching cubes over the opacity-weighted Gaussian density
field. Bound Gaussians live on faces: the center is a frozen barycentric
combination of the face vertices, the orientation is the face's edge frame
rotated in-plane by a unit complex number, and the thickness along the face
normal is capped below the in-plane scales.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from skimage.measure import marching_cubes

from .render import backend as _backend
from .render.splat import RenderAdjoint, RenderOutput, render_splats, render_splats_backward
from .scene import Gaussian3D, GaussianCloud, logit, matrix_to_quaternion, sigmoid

log = logging.getLogger(__name__)

DEGENERATE_AREA = 1e-12
BOUND_OPACITY_INIT = 0.9

BARYCENTRIC_PATTERNS = {
    1: np.array([[1, 1, 1]]) / 3.0,
    # midpoints between the centroid and each vertex
    3: np.array([[4, 1, 1], [1, 4, 1], [1, 1, 4]]) / 6.0,
    # the triad plus midpoints between the centroid and each edge midpoint
    6: np.array([[8, 2, 2], [2, 8, 2], [2, 2, 8], [5, 5, 2], [2, 5, 5], [5, 2, 5]]) / 12.0,
}


class EmptyMeshError(RuntimeError):
    pass


@dataclass
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray
    vertex_colors: np.ndarray = None
    grads: dict = field(default=None, repr=False)

    def __post_init__(self):
        self.vertices = np.array(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.array(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.vertex_colors is None:
            self.vertex_colors = np.full((len(self.vertices), 3), 0.5)
        self.vertex_colors = np.array(self.vertex_colors, dtype=np.float64).reshape(len(self.vertices), 3)
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")
        if self.grads is None:
            self.zero_grad()

    def zero_grad(self):
        self.grads = {"vertices": np.zeros_like(self.vertices)}

    def copy(self) -> "TriMesh":
        return TriMesh(self.vertices.copy(), self.faces.copy(), self.vertex_colors.copy())

    def face_areas(self):
        v = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    def face_normals(self):
        v = self.vertices[self.faces]
        n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        return n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)

    def edge_counts(self):
        e = np.sort(self.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return counts

    def is_watertight(self) -> bool:
        return len(self.faces) > 0 and bool(np.all(self.edge_counts() == 2))

    def connected_components(self) -> int:
        n = len(self.vertices)
        used = np.unique(self.faces)
        e = self.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
        adj = coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n))
        _, labels = connected_components(adj, directed=False)
        return len(np.unique(labels[used]))

    def mean_edge_length(self) -> float:
        v = self.vertices[self.faces]
        return float(np.mean(np.linalg.norm(v - np.roll(v, 1, axis=1), axis=2)))


def _clean(vertices, faces):
    # merge coincident vertices, then drop collapsed and zero-area faces
    scale = max(float(np.ptp(vertices, axis=0).max()), 1e-12)
    keys = np.round(vertices / (scale * 1e-9)).astype(np.int64)
    _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    vertices = vertices[first]
    faces = inverse[faces]
    ok = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])
    faces = faces[ok]
    v = vertices[faces]
    area = 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)
    faces = faces[area > DEGENERATE_AREA]
    used, remap = np.unique(faces, return_inverse=True)
    return vertices[used], remap.reshape(-1, 3)


def density_grid(cloud: GaussianCloud, grid_resolution=128, margin=0.1, backend=None):
    """Sample the opacity-weighted density on a regular grid.

    Returns ``(grid, origin, spacing)``; grid point ``(i, j, k)`` sits at
    ``origin + spacing * (i, j, k)``.
    """
    covs = cloud.covariances()
    ext = 3.0 * np.sqrt(np.einsum("nii->ni", covs))
    lo = (cloud.centers - ext).min(axis=0)
    hi = (cloud.centers + ext).max(axis=0)
    size = hi - lo
    lo = lo - margin * size
    hi = hi + margin * size
    spacing = float((hi - lo).max() / (grid_resolution - 1))
    dims = np.minimum(np.ceil((hi - lo) / spacing).astype(int) + 1, grid_resolution)
    box_lo = np.clip(np.floor((cloud.centers - ext - lo) / spacing), 0, dims).astype(np.int64)
    box_hi = np.clip(np.ceil((cloud.centers + ext - lo) / spacing) + 1, 0, dims).astype(np.int64)
    grid = _backend.get(backend).splat_density(
        np.ascontiguousarray(cloud.centers), np.ascontiguousarray(np.linalg.inv(covs)),
        np.ascontiguousarray(cloud.opacities), np.ascontiguousarray(box_lo), np.ascontiguousarray(box_hi),
        np.ascontiguousarray(lo), spacing, int(dims[0]), int(dims[1]), int(dims[2]))
    return grid, lo, spacing


def sample_vertex_colors(cloud: GaussianCloud, points, chunk_pairs=2_000_000):
    """Opacity- and kernel-weighted mean of Gaussian colors at each point."""
    points = np.asarray(points, dtype=np.float64)
    prec = np.linalg.inv(cloud.covariances())
    opac = cloud.opacities
    out = np.empty((len(points), 3))
    step = max(1, chunk_pairs // max(len(cloud), 1))
    for s in range(0, len(points), step):
        p = points[s:s + step]
        d = p[:, None, :] - cloud.centers[None, :, :]
        m2 = np.einsum("vni,nij,vnj->vn", d, prec, d)
        w = opac[None, :] * np.exp(-0.5 * m2) * (m2 < 9.0 * 3)
        total = w.sum(axis=1)
        nearest = np.argmin(np.einsum("vni,vni->vn", d, d), axis=1)
        col = np.where(total[:, None] > 1e-12, (w @ cloud.colors) / np.maximum(total, 1e-300)[:, None],
                       cloud.colors[nearest])
        out[s:s + step] = col
    return out


def extract_mesh(cloud: GaussianCloud, grid_resolution=128, iso_level=0.3, backend=None) -> TriMesh:
    if len(cloud) == 0:
        raise EmptyMeshError("cannot extract a mesh from an empty cloud")
    grid, origin, spacing = density_grid(cloud, grid_resolution, backend=backend)
    if not grid.max() > iso_level:
        raise EmptyMeshError(f"density never exceeds iso level {iso_level} (max {grid.max():.4g})")
    padded = np.pad(grid, 1)
    verts, faces, _, _ = marching_cubes(padded, level=iso_level, spacing=(spacing,) * 3,
                                        allow_degenerate=False)
    verts = verts.astype(np.float64) + origin - spacing
    verts, faces = _clean(verts, faces.astype(np.int64))
    if len(faces) == 0:
        raise EmptyMeshError("marching cubes produced no faces")
    return TriMesh(verts, faces, sample_vertex_colors(cloud, verts))


@dataclass
class BoundGaussianCloud:
    face_index: np.ndarray
    barycentric: np.ndarray
    in_plane_rotation: np.ndarray
    log_scale_2d: np.ndarray
    thickness_logit: np.ndarray
    opacity_logit: np.ndarray
    colors: np.ndarray
    thickness_max: float
    grads: dict = field(default=None, repr=False)

    LEARNABLE = ("in_plane_rotation", "log_scale_2d", "thickness_logit", "opacity_logit", "colors")

    def __post_init__(self):
        self.face_index = np.array(self.face_index, dtype=np.int64).reshape(-1)
        n = len(self.face_index)
        self.barycentric = np.array(self.barycentric, dtype=np.float64).reshape(n, 3)
        self.in_plane_rotation = np.array(self.in_plane_rotation, dtype=np.float64).reshape(n, 2)
        self.log_scale_2d = np.array(self.log_scale_2d, dtype=np.float64).reshape(n, 2)
        self.thickness_logit = np.array(self.thickness_logit, dtype=np.float64).reshape(n)
        self.opacity_logit = np.array(self.opacity_logit, dtype=np.float64).reshape(n)
        self.colors = np.array(self.colors, dtype=np.float64).reshape(n, 3)
        self.thickness_max = float(self.thickness_max)
        if self.grads is None:
            self.zero_grad()

    def __len__(self):
        return len(self.face_index)

    def zero_grad(self):
        self.grads = {name: np.zeros_like(getattr(self, name)) for name in self.LEARNABLE}

    def params(self) -> dict:
        return {name: getattr(self, name) for name in self.LEARNABLE}

    @property
    def opacities(self):
        return sigmoid(self.opacity_logit)

    def copy(self) -> "BoundGaussianCloud":
        return BoundGaussianCloud(self.face_index.copy(), self.barycentric.copy(),
                                  self.in_plane_rotation.copy(), self.log_scale_2d.copy(),
                                  self.thickness_logit.copy(), self.opacity_logit.copy(),
                                  self.colors.copy(), self.thickness_max)


def bind_gaussians(mesh: TriMesh, n_per_face=3, thickness_ratio=1e-3) -> BoundGaussianCloud:
    if n_per_face not in BARYCENTRIC_PATTERNS:
        raise ValueError(f"n_per_face must be one of {sorted(BARYCENTRIC_PATTERNS)}, got {n_per_face}")
    pattern = BARYCENTRIC_PATTERNS[n_per_face]
    areas = mesh.face_areas()
    good = np.flatnonzero(areas > DEGENERATE_AREA)
    if len(good) < len(areas):
        log.warning("skipping %d degenerate faces while binding", len(areas) - len(good))
    eps_max = thickness_ratio * mesh.mean_edge_length()
    face_index = np.repeat(good, len(pattern))
    bary = np.tile(pattern, (len(good), 1))
    colors = np.einsum("nk,nkc->nc", bary, mesh.vertex_colors[mesh.faces[face_index]])
    radius = np.sqrt(areas[face_index] / (np.pi * len(pattern)))
    in_plane = np.where(radius > 2 * eps_max, radius - eps_max, 0.5 * radius)
    n = len(face_index)
    return BoundGaussianCloud(
        face_index=face_index,
        barycentric=bary,
        in_plane_rotation=np.tile([1.0, 0.0], (n, 1)),
        log_scale_2d=np.repeat(np.log(in_plane)[:, None], 2, axis=1),
        thickness_logit=np.zeros(n),
        opacity_logit=np.full(n, float(logit(BOUND_OPACITY_INIT))),
        colors=colors,
        thickness_max=eps_max,
    )


def _normalize(x):
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / norm, norm


def _normalize_backward(xhat, norm, g):
    return (g - xhat * np.sum(xhat * g, axis=-1, keepdims=True)) / norm


@dataclass
class BoundWorld:
    """World-space splats derived from bound Gaussians, plus backward cache."""

    centers: np.ndarray
    frames: np.ndarray  # columns: tangent1, tangent2, face normal
    scales: np.ndarray
    covs: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray
    normals: np.ndarray
    cache: dict


def bound_world(bound: BoundGaussianCloud, mesh: TriMesh) -> BoundWorld:
    tri = mesh.vertices[mesh.faces[bound.face_index]]
    centers = np.einsum("nk,nkd->nd", bound.barycentric, tri)
    a = tri[:, 1] - tri[:, 0]
    b = tri[:, 2] - tri[:, 0]
    e1, a_norm = _normalize(a)
    m = np.cross(a, b)
    normal, m_norm = _normalize(m)
    e2 = np.cross(normal, e1)
    z, z_norm = _normalize(bound.in_plane_rotation)
    c, s = z[:, 0:1], z[:, 1:2]
    t1 = c * e1 + s * e2
    t2 = -s * e1 + c * e2
    frames = np.stack([t1, t2, normal], axis=2)
    thick_sig = sigmoid(bound.thickness_logit)
    scales = np.concatenate([bound.thickness_max + np.exp(bound.log_scale_2d),
                             (bound.thickness_max * thick_sig)[:, None]], axis=1)
    covs = np.einsum("nik,nk,njk->nij", frames, scales**2, frames)
    cache = dict(tri=tri, a=a, b=b, e1=e1, a_norm=a_norm, m_norm=m_norm, e2=e2, z=z, z_norm=z_norm,
                 thick_sig=thick_sig)
    return BoundWorld(centers, frames, scales, covs, sigmoid(bound.opacity_logit), bound.colors.copy(),
                      normal, cache)


def bound_world_backward(bound: BoundGaussianCloud, mesh: TriMesh, world: BoundWorld,
                         g_centers, g_covs, g_opacities, g_colors, g_normals=None) -> dict:
    """Chain world-space splat gradients to bound parameters and mesh vertices."""
    cch = world.cache
    frames, scales = world.frames, world.scales
    t1, t2, normal = frames[..., 0], frames[..., 1], frames[..., 2]
    e1, e2 = cch["e1"], cch["e2"]
    g = 0.5 * (g_covs + np.swapaxes(g_covs, 1, 2))
    g_t1 = 2 * scales[:, 0:1] ** 2 * np.einsum("nij,nj->ni", g, t1)
    g_t2 = 2 * scales[:, 1:2] ** 2 * np.einsum("nij,nj->ni", g, t2)
    g_n = 2 * scales[:, 2:3] ** 2 * np.einsum("nij,nj->ni", g, normal)
    if g_normals is not None:
        g_n = g_n + g_normals
    g_scales = 2 * scales * np.stack([np.einsum("ni,nij,nj->n", t1, g, t1),
                                      np.einsum("ni,nij,nj->n", t2, g, t2),
                                      np.einsum("ni,nij,nj->n", normal, g, normal)], axis=1)
    z = cch["z"]
    c, s = z[:, 0:1], z[:, 1:2]
    g_c = np.sum(g_t1 * e1 + g_t2 * e2, axis=1)
    g_s = np.sum(g_t1 * e2 - g_t2 * e1, axis=1)
    g_e1 = c * g_t1 - s * g_t2
    g_e2 = s * g_t1 + c * g_t2
    # e2 = normal x e1
    g_n = g_n + np.cross(e1, g_e2)
    g_e1 = g_e1 + np.cross(g_e2, normal)
    g_m = _normalize_backward(normal, cch["m_norm"], g_n)
    g_a = _normalize_backward(e1, cch["a_norm"], g_e1) + np.cross(cch["b"], g_m)
    g_b = np.cross(g_m, cch["a"])
    g_tri = bound.barycentric[:, :, None] * g_centers[:, None, :]
    g_tri[:, 1] += g_a
    g_tri[:, 2] += g_b
    g_tri[:, 0] -= g_a + g_b
    g_vertices = np.zeros_like(mesh.vertices)
    np.add.at(g_vertices, mesh.faces[bound.face_index].ravel(), g_tri.reshape(-1, 3))
    g_z = _normalize_backward(z, cch["z_norm"], np.stack([g_c, g_s], axis=1))
    opac = world.opacities
    ts = cch["thick_sig"]
    return {
        "in_plane_rotation": g_z,
        "log_scale_2d": g_scales[:, :2] * np.exp(bound.log_scale_2d),
        "thickness_logit": g_scales[:, 2] * bound.thickness_max * ts * (1 - ts),
        "opacity_logit": g_opacities * opac * (1 - opac),
        "colors": np.array(g_colors, dtype=np.float64),
        "vertices": g_vertices,
    }


def bound_to_world(bound: BoundGaussianCloud, mesh: TriMesh, index: int) -> Gaussian3D:
    w = bound_world(bound, mesh)
    return Gaussian3D(w.centers[index], matrix_to_quaternion(w.frames[index]), np.log(w.scales[index]),
                      float(bound.opacity_logit[index]), bound.colors[index].copy())


def bound_to_cloud(bound: BoundGaussianCloud, mesh: TriMesh) -> GaussianCloud:
    """Equivalent free cloud built from the world-space parameters."""
    return GaussianCloud.from_gaussians(bound_to_world(bound, mesh, i) for i in range(len(bound)))


def check_bound_invariants(bound: BoundGaussianCloud, mesh: TriMesh) -> dict:
    """Worst-case plane distance, simplex violation and normal misalignment (radians)."""
    w = bound_world(bound, mesh)
    tri = w.cache["tri"]
    plane = np.abs(np.sum(w.normals * (w.centers - tri[:, 0]), axis=1))
    # barycentrics recovered from the reconstructed center
    a, b = w.cache["a"], w.cache["b"]
    p = w.centers - tri[:, 0]
    d00, d01, d11 = np.sum(a * a, 1), np.sum(a * b, 1), np.sum(b * b, 1)
    d20, d21 = np.sum(p * a, 1), np.sum(p * b, 1)
    den = d00 * d11 - d01 * d01
    l1 = (d11 * d20 - d01 * d21) / den
    l2 = (d00 * d21 - d01 * d20) / den
    bary = np.stack([1 - l1 - l2, l1, l2], axis=1)
    _, vecs = np.linalg.eigh(w.covs)
    smallest = vecs[:, :, 0]
    angle = np.arctan2(np.linalg.norm(np.cross(smallest, w.normals), axis=1),
                       np.abs(np.sum(smallest * w.normals, axis=1)))
    return {
        "max_plane_distance": float(plane.max(initial=0.0)),
        "min_barycentric": float(bary.min(initial=1.0)),
        "max_normal_angle": float(angle.max(initial=0.0)),
        "in_plane": plane < 1e-6,
        "in_triangle": np.all(bary >= -1e-9, axis=1),
        "normal_aligned": angle < 1e-6,
    }


class BoundScene:
    """Adapter rendering bound Gaussians; normals come from mesh faces."""

    def __init__(self, bound: BoundGaussianCloud, mesh: TriMesh, background=(0.0, 0.0, 0.0), backend=None):
        self.bound = bound
        self.mesh = mesh
        self.background = np.asarray(background, dtype=np.float64)
        self.backend = backend

    def render(self, view) -> RenderOutput:
        w = bound_world(self.bound, self.mesh)
        return render_splats(w.centers, w.covs, w.opacities, w.colors, view, self.background,
                             extra=w.normals @ view.rotation.T, backend=self.backend)

    def gradients(self, view, adjoint: RenderAdjoint) -> dict:
        w = bound_world(self.bound, self.mesh)
        g_means, g_covs, g_opac, g_colors, g_extra = render_splats_backward(
            w.centers, w.covs, w.opacities, w.colors, view, self.background, adjoint,
            extra=w.normals @ view.rotation.T, backend=self.backend)
        return bound_world_backward(self.bound, self.mesh, w, g_means, g_covs, g_opac, g_colors,
                                    g_extra @ view.rotation)

    def zero_gradients(self) -> dict:
        out = {k: np.zeros_like(v) for k, v in self.bound.params().items()}
        out["vertices"] = np.zeros_like(self.mesh.vertices)
        return out

    def accumulate(self, grads: dict, scale: float = 1.0):
        for k, g in grads.items():
            target = self.mesh.grads["vertices"] if k == "vertices" else self.bound.grads[k]
            target += g if scale == 1.0 else scale * g


def bake_vertex_colors(bound: BoundGaussianCloud, mesh: TriMesh) -> np.ndarray:
    """Opacity- and barycentric-weighted average color of Gaussians on incident faces."""
    corners = mesh.faces[bound.face_index]  # N x 3 vertex ids
    weights = bound.opacities[:, None] * bound.barycentric
    acc = np.zeros((len(mesh.vertices), 3))
    wsum = np.zeros(len(mesh.vertices))
    np.add.at(acc, corners.ravel(), (weights[..., None] * bound.colors[:, None, :]).reshape(-1, 3))
    np.add.at(wsum, corners.ravel(), weights.ravel())
    out = mesh.vertex_colors.copy()
    has = wsum > 1e-12
    out[has] = acc[has] / wsum[has, None]
    return np.clip(out, 0.0, 1.0)


def export_textured_mesh(bound: BoundGaussianCloud, mesh: TriMesh, path) -> TriMesh:
    from .io.obj import write_obj

    baked = TriMesh(mesh.vertices, mesh.faces, bake_vertex_colors(bound, mesh))
    write_obj(path, baked)
    return baked
