"""Pinhole projection, quaternion algebra and screen-space covariance transport.

Batched and differentiable: inputs are tensors with a leading Gaussian axis.
Pixel centers lie at integer coordinates everywhere in the package.
"""
from __future__ import annotations

import numpy as np

from .scene.types import Camera
from .tensor import Tensor, as_tensor, sqrt, stack

Z_EPS = 1e-4
DILATION = 0.3


def quat_to_rot(r) -> Tensor:
    """(N, 4) quaternions, w first, to (N, 3, 3) rotations. Inputs are renormalized."""
    r = as_tensor(r)
    norm2 = (r * r).sum(axis=1, keepdims=True)
    if np.any(norm2.data == 0):
        raise ValueError("quat_to_rot: zero quaternion")
    q = r / sqrt(norm2)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    rows = [
        stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=1),
        stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=1),
        stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=1),
    ]
    return stack(rows, axis=1)


def covariance(s, r) -> Tensor:
    """World covariance R S S^T R^T from per-axis standard deviations ``s`` (N, 3)."""
    s = as_tensor(s)
    if np.any(s.data <= 0):
        raise ValueError("covariance: scales must be positive")
    M = quat_to_rot(r) * s.reshape(-1, 1, 3)
    return M @ M.transpose(0, 2, 1)


def to_camera(mu, cam: Camera) -> Tensor:
    return as_tensor(mu) @ Tensor(cam.R.T) + Tensor(cam.t)


def project(mu, cam: Camera):
    """Project (N, 3) world points. Returns (pixels (N, 2), depth (N,), visible (N,) bool).

    A point is invisible when its depth is at most ``Z_EPS`` or its pixel falls
    outside ``[0, W-1] x [0, H-1]``; invisible pixels are still returned.
    """
    pc = to_camera(mu, cam)
    z = pc[:, 2]
    zd = z.data
    front = (zd > Z_EPS).astype(float)
    zs = z * Tensor(front) + Tensor(1.0 - front)
    u = pc[:, 0] / zs * cam.fx + cam.cx
    v = pc[:, 1] / zs * cam.fy + cam.cy
    pix = stack([u, v], axis=1)
    visible = ((zd > Z_EPS) & (u.data >= 0) & (u.data <= cam.width - 1)
               & (v.data >= 0) & (v.data <= cam.height - 1))
    return pix, z, visible


def unproject(pix, depth, cam: Camera) -> Tensor:
    """Inverse of ``project`` for (N, 2) pixels at (N,) positive depths."""
    pix, depth = as_tensor(pix), as_tensor(depth)
    if np.any(depth.data <= 0):
        raise ValueError("unproject: depth must be positive")
    x = (pix[:, 0] - cam.cx) * (1.0 / cam.fx) * depth
    y = (pix[:, 1] - cam.cy) * (1.0 / cam.fy) * depth
    pc = stack([x, y, depth], axis=1)
    return (pc - Tensor(cam.t)) @ Tensor(cam.R)


def project_covariance(sigma, mu_cam, cam: Camera, dilation: float = DILATION) -> Tensor:
    """Screen covariance J W Sigma W^T J^T + dilation * I for (N, 3, 3) world covariances.

    ``mu_cam`` are the centers in camera coordinates (N, 3) with depth > Z_EPS.
    """
    sigma, mu_cam = as_tensor(sigma), as_tensor(mu_cam)
    if np.any(mu_cam.data[:, 2] <= Z_EPS):
        raise ValueError("project_covariance: depth must exceed z_eps")
    x, y, z = mu_cam[:, 0], mu_cam[:, 1], mu_cam[:, 2]
    iz = 1.0 / z
    zero = Tensor(np.zeros(len(z)))
    J = stack([
        stack([cam.fx * iz, zero, -cam.fx * x * iz * iz], axis=1),
        stack([zero, cam.fy * iz, -cam.fy * y * iz * iz], axis=1),
    ], axis=1)
    T = J @ Tensor(cam.R)
    cov = T @ sigma @ T.transpose(0, 2, 1)
    cov = (cov + cov.transpose(0, 2, 1)) * 0.5
    return cov + Tensor(np.eye(2) * dilation)


# ---------------------------------------------------------------- numpy helpers
def project_points(mu: np.ndarray, cam: Camera):
    """Non-differentiable ``project`` on plain arrays."""
    pix, z, vis = project(Tensor(np.atleast_2d(mu)), cam)
    return pix.data, z.data, vis


def unproject_points(pix: np.ndarray, depth: np.ndarray, cam: Camera) -> np.ndarray:
    return unproject(Tensor(np.atleast_2d(pix)), Tensor(np.atleast_1d(depth)), cam).data


def rigid_inverse(m: np.ndarray) -> np.ndarray:
    out = np.eye(4)
    out[:3, :3] = m[:3, :3].T
    out[:3, 3] = -m[:3, :3].T @ m[:3, 3]
    return out
