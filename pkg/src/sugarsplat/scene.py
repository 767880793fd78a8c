"""3D Gaussian scene representation.

Parameters are stored struct-of-arrays in unconstrained domains: scales as
logs, opacities as logits, rotations as (possibly unnormalized) quaternions
in ``(w, x, y, z)`` order. Colors are plain RGB (SH degree 0).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

PARAM_NAMES = ("centers", "rotations", "log_scales", "opacity_logits", "colors")
SPLIT_SCALE_DIVISOR = 1.6


def sigmoid(x):
    return expit(np.asarray(x, dtype=np.float64))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def normalize_quaternions(q):
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quaternion_to_matrix(q):
    """Rotation matrices for quaternions ``(..., 4)`` in (w, x, y, z) order.

    Quaternions are normalized first.
    """
    q = normalize_quaternions(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quaternion_to_matrix_backward(q, grad_R):
    """Pull back a gradient on rotation matrices to the raw quaternions."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    qn = q / norm
    w, x, y, z = qn[..., 0], qn[..., 1], qn[..., 2], qn[..., 3]
    g = grad_R
    gw = 2 * (-z * g[..., 0, 1] + y * g[..., 0, 2] + z * g[..., 1, 0]
              - x * g[..., 1, 2] - y * g[..., 2, 0] + x * g[..., 2, 1])
    gx = 2 * (y * g[..., 0, 1] + z * g[..., 0, 2] + y * g[..., 1, 0]
              - 2 * x * g[..., 1, 1] - w * g[..., 1, 2] + z * g[..., 2, 0]
              + w * g[..., 2, 1] - 2 * x * g[..., 2, 2])
    gy = 2 * (-2 * y * g[..., 0, 0] + x * g[..., 0, 1] + w * g[..., 0, 2]
              + x * g[..., 1, 0] + z * g[..., 1, 2] - w * g[..., 2, 0]
              + z * g[..., 2, 1] - 2 * y * g[..., 2, 2])
    gz = 2 * (-2 * z * g[..., 0, 0] - w * g[..., 0, 1] + x * g[..., 0, 2]
              + w * g[..., 1, 0] - 2 * z * g[..., 1, 1] + y * g[..., 1, 2]
              + x * g[..., 2, 0] + y * g[..., 2, 1])
    gqn = np.stack([gw, gx, gy, gz], axis=-1)
    return (gqn - qn * np.sum(qn * gqn, axis=-1, keepdims=True)) / norm


def matrix_to_quaternion(R):
    """Inverse of :func:`quaternion_to_matrix` for a single proper rotation."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.asarray(q)
    return q / np.linalg.norm(q)


def covariance_from(rotations, log_scales):
    """Batched ``R diag(s^2) R^T`` from raw quaternions and log-scales."""
    R = quaternion_to_matrix(rotations)
    s2 = np.exp(2.0 * np.asarray(log_scales, dtype=np.float64))
    cov = np.einsum("...ik,...k,...jk->...ij", R, s2, R)
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))


def covariance_backward(rotations, log_scales, grad_cov):
    """Gradients of a loss w.r.t. quaternions and log-scales given dL/dSigma."""
    R = quaternion_to_matrix(rotations)
    s = np.exp(np.asarray(log_scales, dtype=np.float64))
    g = 0.5 * (grad_cov + np.swapaxes(grad_cov, -1, -2))
    # Sigma = M M^T with M = R diag(s)
    M = R * s[..., None, :]
    gM = 2.0 * g @ M
    grad_s = np.einsum("...ik,...ik->...k", R, gM)
    grad_R = gM * s[..., None, :]
    return quaternion_to_matrix_backward(rotations, grad_R), grad_s * s


@dataclass
class Gaussian3D:
    center: np.ndarray
    rotation: np.ndarray
    log_scale: np.ndarray
    opacity_logit: float
    color: np.ndarray

    @property
    def scale(self):
        return np.exp(self.log_scale)

    @property
    def opacity(self):
        return float(sigmoid(self.opacity_logit))


def covariance(g: Gaussian3D) -> np.ndarray:
    return covariance_from(np.asarray(g.rotation)[None], np.asarray(g.log_scale)[None])[0]


@dataclass
class IndexRemap:
    """Maps every new Gaussian index to the old index it came from.

    ``split_children`` marks new entries created by splitting.
    """

    source: np.ndarray
    old_count: int
    split_children: np.ndarray = None

    def __post_init__(self):
        self.source = np.asarray(self.source, dtype=np.int64)
        if self.split_children is None:
            self.split_children = np.zeros(len(self.source), dtype=bool)

    @property
    def is_identity(self) -> bool:
        return len(self.source) == self.old_count and bool(np.all(self.source == np.arange(self.old_count)))

    @property
    def empty(self) -> bool:
        return len(self.source) == 0

    @property
    def new_count(self) -> int:
        return len(self.source)


@dataclass
class GaussianCloud:
    centers: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    grads: dict = field(default=None, repr=False)
    grad_accum: np.ndarray = field(default=None, repr=False)
    grad_count: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.centers = np.array(self.centers, dtype=np.float64).reshape(-1, 3)
        n = len(self.centers)
        self.rotations = np.array(self.rotations, dtype=np.float64).reshape(n, 4)
        self.log_scales = np.array(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.opacity_logits = np.array(self.opacity_logits, dtype=np.float64).reshape(n)
        self.colors = np.array(self.colors, dtype=np.float64).reshape(n, 3)
        if self.grads is None:
            self.zero_grad()
        if self.grad_accum is None:
            self.reset_densify_stats()

    @classmethod
    def empty(cls) -> "GaussianCloud":
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3)))

    @classmethod
    def from_gaussians(cls, gaussians) -> "GaussianCloud":
        gaussians = list(gaussians)
        if not gaussians:
            return cls.empty()
        return cls(
            [g.center for g in gaussians],
            [g.rotation for g in gaussians],
            [g.log_scale for g in gaussians],
            [g.opacity_logit for g in gaussians],
            [g.color for g in gaussians],
        )

    def __len__(self):
        return len(self.centers)

    def __getitem__(self, i) -> Gaussian3D:
        return Gaussian3D(self.centers[i].copy(), self.rotations[i].copy(), self.log_scales[i].copy(),
                          float(self.opacity_logits[i]), self.colors[i].copy())

    @property
    def opacities(self):
        return sigmoid(self.opacity_logits)

    @property
    def scales(self):
        return np.exp(self.log_scales)

    def params(self) -> dict:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def covariances(self):
        return covariance_from(self.rotations, self.log_scales)

    def zero_grad(self):
        self.grads = {name: np.zeros_like(getattr(self, name)) for name in PARAM_NAMES}

    def reset_densify_stats(self):
        self.grad_accum = np.zeros(len(self))
        self.grad_count = np.zeros(len(self))

    def accumulate(self, grads: dict, scale: float = 1.0):
        for name, g in grads.items():
            if scale == 1.0:
                self.grads[name] += g
            else:
                self.grads[name] += scale * g

    def record_position_grads(self, grad_centers):
        """Feed one backward pass worth of positional gradients into densify stats."""
        norms = np.linalg.norm(grad_centers, axis=1)
        self.grad_accum += norms
        self.grad_count += 1

    def copy(self) -> "GaussianCloud":
        out = GaussianCloud(self.centers.copy(), self.rotations.copy(), self.log_scales.copy(),
                            self.opacity_logits.copy(), self.colors.copy())
        out.grads = {k: v.copy() for k, v in self.grads.items()}
        out.grad_accum = self.grad_accum.copy()
        out.grad_count = self.grad_count.copy()
        return out

    def take(self, index) -> "GaussianCloud":
        index = np.asarray(index, dtype=np.int64)
        out = GaussianCloud(self.centers[index], self.rotations[index], self.log_scales[index],
                            self.opacity_logits[index], self.colors[index])
        out.grads = {k: v[index].copy() for k, v in self.grads.items()}
        out.grad_accum = self.grad_accum[index].copy()
        out.grad_count = self.grad_count[index].copy()
        return out

    def _assign(self, other: "GaussianCloud"):
        for name in PARAM_NAMES:
            setattr(self, name, getattr(other, name))
        self.grads = other.grads
        self.grad_accum = other.grad_accum
        self.grad_count = other.grad_count


def prune(cloud: GaussianCloud, opacity_threshold: float) -> IndexRemap:
    """Remove Gaussians with opacity strictly below the threshold, in place."""
    n = len(cloud)
    keep = np.flatnonzero(~(cloud.opacities < opacity_threshold))
    if len(keep) != n:
        cloud._assign(cloud.take(keep))
    return IndexRemap(keep, n)


def densify_split(cloud: GaussianCloud, grad_threshold: float, rng=None) -> IndexRemap:
    """Split Gaussians whose mean positional gradient norm exceeds the threshold.

    Each selected parent is replaced by two children whose centers are drawn
    from the parent distribution and whose scales are divided by 1.6.
    Survivors keep their order; children are appended. Densify statistics
    are reset afterward.
    """
    n = len(cloud)
    if n == 0:
        return IndexRemap(np.zeros(0, dtype=np.int64), 0)
    rng = np.random.default_rng(rng)
    mean_grad = cloud.grad_accum / np.maximum(cloud.grad_count, 1)
    selected = mean_grad > grad_threshold
    if not np.any(selected):
        cloud.reset_densify_stats()
        return IndexRemap(np.arange(n), n)
    parents = np.flatnonzero(selected)
    keep = np.flatnonzero(~selected)
    source = np.concatenate([keep, np.repeat(parents, 2)])
    out = cloud.take(source)
    m = len(parents)
    R = quaternion_to_matrix(cloud.rotations[parents])
    s = cloud.scales[parents]
    z = rng.standard_normal((m, 2, 3))
    offsets = np.einsum("nij,nkj->nki", R, z * s[:, None, :]).reshape(2 * m, 3)
    child = slice(len(keep), None)
    out.centers[child] = np.repeat(cloud.centers[parents], 2, axis=0) + offsets
    out.log_scales[child] = np.repeat(cloud.log_scales[parents], 2, axis=0) - np.log(SPLIT_SCALE_DIVISOR)
    for g in out.grads.values():
        g[child] = 0.0
    cloud._assign(out)
    cloud.reset_densify_stats()
    children = np.zeros(len(source), dtype=bool)
    children[child] = True
    return IndexRemap(source, n, children)


def opacity_weighted_volume(cloud: GaussianCloud) -> float:
    return float(np.sum(cloud.opacities * (4.0 / 3.0) * np.pi * np.prod(cloud.scales, axis=1)))
