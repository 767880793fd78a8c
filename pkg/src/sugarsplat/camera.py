"""Pinhole cameras, canonical four-view rigs and random view sampling.

Conventions: right-handed world with +y up; cameras look at the origin.
Camera space is x right, y down, z forward, so visible points have z > 0.
Pixel ``(col, row)`` samples the continuous image coordinate ``(col, row)``
and the principal point sits at ``(width / 2, height / 2)``.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

WORLD_UP = np.array([0.0, 1.0, 0.0])


@dataclass(frozen=True, eq=False)
class CameraView:
    world_to_camera: np.ndarray
    fov_y: float  # degrees
    width: int
    height: int
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        M = np.array(self.world_to_camera, dtype=np.float64).reshape(4, 4)
        M.setflags(write=False)
        object.__setattr__(self, "world_to_camera", M)
        if not 0 < self.near < self.far:
            raise ValueError(f"need 0 < near < far, got near={self.near}, far={self.far}")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    @property
    def focal(self) -> float:
        """Focal length in pixels (square pixels)."""
        return 0.5 * self.height / math.tan(math.radians(self.fov_y) / 2.0)

    @property
    def principal_point(self) -> tuple[float, float]:
        return 0.5 * self.width, 0.5 * self.height

    @property
    def position(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def with_resolution(self, width: int, height: int | None = None) -> "CameraView":
        return CameraView(self.world_to_camera, self.fov_y, int(width), int(height or width), self.near, self.far)

    def key(self) -> str:
        """Stable identifier of pose, fov and resolution."""
        payload = np.concatenate([np.round(self.world_to_camera.ravel(), 9),
                                  [round(self.fov_y, 9), self.width, self.height]])
        return hashlib.sha1(payload.astype(np.float64).tobytes()).hexdigest()[:16]

    def __eq__(self, other):
        if not isinstance(other, CameraView):
            return NotImplemented
        return (np.array_equal(self.world_to_camera, other.world_to_camera)
                and (self.fov_y, self.width, self.height, self.near, self.far)
                == (other.fov_y, other.width, other.height, other.near, other.far))

    def __hash__(self):
        return hash(self.key())


def look_at(eye, target=(0.0, 0.0, 0.0), up=WORLD_UP) -> np.ndarray:
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-12:
        # looking straight along the up axis
        right = np.cross(forward, np.array([0.0, 0.0, -1.0]))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    M = np.eye(4)
    M[0, :3], M[1, :3], M[2, :3] = right, down, forward
    M[:3, 3] = -M[:3, :3] @ eye
    return M


def orbit_position(azimuth_deg: float, elevation_deg: float, distance: float) -> np.ndarray:
    az, el = math.radians(azimuth_deg), math.radians(elevation_deg)
    return distance * np.array([math.cos(el) * math.sin(az), math.sin(el), math.cos(el) * math.cos(az)])


def orbit_camera(azimuth_deg, elevation_deg, distance, fov_y=50.0, width=256, height=None,
                 near=0.01, far=100.0) -> CameraView:
    eye = orbit_position(azimuth_deg, elevation_deg, distance)
    return CameraView(look_at(eye), fov_y, int(width), int(height or width), near, far)


def canonical_rig(start_azimuth=0.0, elevation=15.0, distance=1.5, fov_y=50.0, width=256, height=None):
    """Four views at ``start_azimuth + {0, 90, 180, 270}`` degrees."""
    return [orbit_camera(start_azimuth + 90.0 * k, elevation, distance, fov_y, width, height) for k in range(4)]


def rigid_inverse(M: np.ndarray) -> np.ndarray:
    R, t = M[:3, :3], M[:3, 3]
    out = np.eye(4)
    out[:3, :3] = R.T
    out[:3, 3] = -R.T @ t
    return out


def relative_pose(reference: CameraView, other: CameraView) -> np.ndarray:
    """``other`` expressed in the reference camera's frame (reference -> identity)."""
    return other.world_to_camera @ rigid_inverse(reference.world_to_camera)


def relative_poses(views) -> np.ndarray:
    """Stack of poses relative to the first view, shape ``(len(views), 4, 4)``."""
    return np.stack([relative_pose(views[0], v) for v in views])


def sample_random_camera(rng_seed=None, width=512, height=None,
                         distance_range=(1.4, 1.6), fov_range=(40.0, 60.0),
                         elevation_range=(0.0, 30.0), azimuth_range=(0.0, 360.0)) -> CameraView:
    rng = np.random.default_rng(rng_seed)
    distance = rng.uniform(*distance_range)
    fov = rng.uniform(*fov_range)
    elevation = rng.uniform(*elevation_range)
    azimuth = rng.uniform(*azimuth_range)
    return orbit_camera(azimuth, elevation, distance, fov, width, height)


@dataclass(frozen=True)
class Projection:
    u: float
    v: float
    depth: float
    visible: bool


def project(view: CameraView, point) -> Projection:
    p = view.rotation @ np.asarray(point, dtype=np.float64) + view.translation
    if p[2] <= 0:
        return Projection(math.nan, math.nan, float(p[2]), False)
    f = view.focal
    cx, cy = view.principal_point
    return Projection(f * p[0] / p[2] + cx, f * p[1] / p[2] + cy, float(p[2]), True)


def is_rigid(M, tol=1e-9) -> bool:
    R = np.asarray(M)[:3, :3]
    return bool(np.allclose(R @ R.T, np.eye(3), atol=tol) and abs(np.linalg.det(R) - 1.0) < tol
                and np.allclose(np.asarray(M)[3], [0, 0, 0, 1], atol=tol))
