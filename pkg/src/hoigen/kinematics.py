"""Rotation helpers, forward kinematics, object transforms, resampling.

All kernels take float arrays of any dtype and compute in float64.
"""
from __future__ import annotations

import numpy as np

from .errors import ContractError
from .types import default_body

_EPS = 1e-12


def rotation_matrices(axis_angle):
    """Rodrigues formula, vectorized. axis_angle (..., 3) -> (..., 3, 3) float64."""
    v = np.asarray(axis_angle, dtype=np.float64)
    if v.shape[-1] != 3:
        raise ContractError("axis-angle vectors must have last dim 3")
    theta = np.linalg.norm(v, axis=-1, keepdims=True)
    axis = v / np.maximum(theta, _EPS)
    ax, ay, az = axis[..., 0], axis[..., 1], axis[..., 2]
    zero = np.zeros_like(ax)
    # skew-symmetric cross-product matrix
    k = np.stack([
        np.stack([zero, -az, ay], axis=-1),
        np.stack([az, zero, -ax], axis=-1),
        np.stack([-ay, ax, zero], axis=-1),
    ], axis=-2)
    t = theta[..., None]
    eye = np.broadcast_to(np.eye(3), k.shape)
    r = eye + np.sin(t) * k + (1.0 - np.cos(t)) * (k @ k)
    # tiny angles: first-order expansion avoids 0/0 in the axis
    small = (theta[..., None] < 1e-8)
    vk = np.stack([
        np.stack([zero, -v[..., 2], v[..., 1]], axis=-1),
        np.stack([v[..., 2], zero, -v[..., 0]], axis=-1),
        np.stack([-v[..., 1], v[..., 0], zero], axis=-1),
    ], axis=-2)
    return np.where(small, eye + vk, r)


def axis_angle_from_matrix(r):
    """Log map: rotation matrices (..., 3, 3) -> axis-angle (..., 3), norm <= pi."""
    r = np.asarray(r, dtype=np.float64)
    tr = np.clip((np.trace(r, axis1=-2, axis2=-1) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(tr)
    w = np.stack([r[..., 2, 1] - r[..., 1, 2],
                  r[..., 0, 2] - r[..., 2, 0],
                  r[..., 1, 0] - r[..., 0, 1]], axis=-1)
    sin = np.sin(theta)
    safe = sin > 1e-6
    axis = np.where(safe[..., None], w / np.maximum(2.0 * sin, _EPS)[..., None], 0.0)
    out = axis * theta[..., None]
    # near pi the w-vector vanishes; recover the axis from the symmetric part
    near_pi = (~safe) & (theta > 1.0)
    if near_pi.any():
        idx = np.argwhere(near_pi)
        for i in map(tuple, idx):
            m = r[i]
            a = np.sqrt(np.maximum(np.diag((m + np.eye(3)) / 2.0), 0.0))
            j = int(np.argmax(a))
            ax = np.zeros(3)
            ax[j] = a[j]
            ax[(j + 1) % 3] = m[j, (j + 1) % 3] / (2.0 * max(a[j], _EPS))
            ax[(j + 2) % 3] = m[j, (j + 2) % 3] / (2.0 * max(a[j], _EPS))
            n = np.linalg.norm(ax)
            out[i] = ax / max(n, _EPS) * theta[i]
    return out


def wrap_axis_angle(v):
    """Canonicalize axis-angle vectors to norm <= pi.

    Vectors already in range are returned bit-identically; larger angles are
    wrapped modulo 2*pi onto the equivalent short rotation.
    """
    v = np.asarray(v)
    norms = np.linalg.norm(v.astype(np.float64), axis=-1)
    if norms.max(initial=0.0) <= np.pi:
        return v
    out = v.astype(np.float64).copy()
    over = norms > np.pi
    theta = norms[over]
    wrapped = np.mod(theta + np.pi, 2.0 * np.pi) - np.pi  # in (-pi, pi]
    out[over] *= (wrapped / theta)[..., None]
    return out.astype(v.dtype) if v.dtype != np.float64 else out


def canonicalize_pose(frames, layout):
    """Wrap every joint rotation slice of a (N, D) pose array; root untouched."""
    frames = np.asarray(frames)
    n = layout.n_joints
    rot = frames[:, layout.joint_rotations].reshape(len(frames), n, 3)
    wrapped = wrap_axis_angle(rot)
    if wrapped is rot:
        return frames
    out = frames.copy()
    out[:, layout.joint_rotations] = wrapped.reshape(len(frames), 3 * n)
    return out


def forward_kinematics(frames, body=None, layout=None, return_rotations=False):
    """Joint world positions for a pose sequence.

    frames: (N, D) with [root_translation, axis-angle per joint].
    Returns positions (N, J, 3) float64; optionally also the global joint
    rotation matrices (N, J, 3, 3).
    """
    from .types import DEFAULT_LAYOUT
    body = body or default_body()
    layout = layout or DEFAULT_LAYOUT
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[1] != layout.frame_dim:
        raise ContractError("pose frames must be (N, %d), got %s"
                            % (layout.frame_dim, frames.shape))
    if layout.n_joints != body.n_joints:
        raise ContractError("layout has %d joints, skeleton has %d"
                            % (layout.n_joints, body.n_joints))
    n = frames.shape[0]
    j = body.n_joints
    local = rotation_matrices(frames[:, layout.joint_rotations].reshape(n, j, 3))
    pos = np.empty((n, j, 3), dtype=np.float64)
    glob = np.empty((n, j, 3, 3), dtype=np.float64)
    root = frames[:, layout.root_translation]
    for i in range(j):
        p = body.parents[i]
        if p < 0:
            pos[:, i] = root
            glob[:, i] = local[:, i]
        else:
            pos[:, i] = pos[:, p] + np.einsum("nab,b->na", glob[:, p], body.offsets[i])
            glob[:, i] = glob[:, p] @ local[:, i]
    if return_rotations:
        return pos, glob
    return pos


def hand_points(frames, body=None, layout=None):
    """World positions of the hand contact joints: (N, J_hand, 3) float64."""
    body = body or default_body()
    pos = forward_kinematics(frames, body=body, layout=layout)
    return pos[:, list(body.hand_indices)]


def transform_object(frames, points):
    """Pose a point cloud: v[n, p] = R(aa_n) @ points[p] + t_n.

    frames: (N, 6) [axis_angle, translation]; points: (P, 3).
    Returns (N, P, 3) float64.
    """
    frames = np.asarray(frames, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[1] != 6:
        raise ContractError("object frames must be (N, 6), got %s" % (frames.shape,))
    if points.ndim != 2 or points.shape[1] != 3:
        raise ContractError("points must be (P, 3), got %s" % (points.shape,))
    rot = rotation_matrices(frames[:, :3])                 # (N, 3, 3)
    return np.einsum("nab,pb->npa", rot, points) + frames[:, None, 3:]


def resample_sequence(frames, target_n):
    """Linear time resampling of (N, D) onto target_n uniformly spaced frames.

    Endpoints are preserved; target_n == N returns a bitwise-equal copy.
    """
    frames = np.asarray(frames)
    if frames.ndim != 2:
        raise ContractError("frames must be 2-D, got shape %s" % (frames.shape,))
    if int(target_n) != target_n or target_n < 2:
        raise ContractError("target_n must be an integer >= 2, got %r" % (target_n,))
    target_n = int(target_n)
    n = frames.shape[0]
    if n < 2:
        raise ContractError("need at least 2 source frames, got %d" % n)
    if target_n == n:
        return frames.copy()
    src_t = np.linspace(0.0, 1.0, n)
    dst_t = np.linspace(0.0, 1.0, target_n)
    work = frames.astype(np.float64)
    out = np.empty((target_n, frames.shape[1]), dtype=np.float64)
    for d in range(frames.shape[1]):
        out[:, d] = np.interp(dst_t, src_t, work[:, d])
    # exact endpoints regardless of interp rounding
    out[0] = work[0]
    out[-1] = work[-1]
    return out.astype(frames.dtype) if frames.dtype != np.float64 else out
