from .backend import COMPILED_AVAILABLE, DEFAULT as BACKEND
from .splat import (
    COV2D_FLOOR,
    TRANSMITTANCE_MIN,
    Projected,
    RenderAdjoint,
    RenderOutput,
    SplatScene,
    cloud_gradients,
    normals_from_depth,
    normals_from_depth_backward,
    project_splats,
    rasterize,
    rasterize_backward,
    render,
    render_backward,
    render_splats,
    render_splats_backward,
)

__all__ = [
    "BACKEND",
    "COMPILED_AVAILABLE",
    "COV2D_FLOOR",
    "TRANSMITTANCE_MIN",
    "Projected",
    "RenderAdjoint",
    "RenderOutput",
    "SplatScene",
    "cloud_gradients",
    "normals_from_depth",
    "normals_from_depth_backward",
    "project_gaussian",
    "project_splats",
    "rasterize",
    "rasterize_backward",
    "render",
    "render_backward",
    "render_splats",
    "render_splats_backward",
]


def project_gaussian(g, view):
    """Project a single Gaussian. Returns ``(mean2d, cov2d, depth)`` or ``None`` if culled."""
    import numpy as np

    from ..scene import covariance

    proj = project_splats(np.asarray(g.center)[None], covariance(g)[None], view)
    if not view.near < proj.depth[0] < view.far:
        return None
    return proj.mean2d[0], proj.cov2d[0], float(proj.depth[0])
