"""Rigid-transform and pinhole-camera helpers shared across layers."""

from __future__ import annotations

import numpy as np

IDENTITY4 = np.eye(4)


def is_rigid_transform(T, rot_tol=1e-5, det_tol=1e-4, row_tol=1e-9):
    """Check that T is a 4x4 rigid transform (orthonormal rotation, det +1)."""
    T = np.asarray(T)
    if T.shape != (4, 4) or not np.all(np.isfinite(T)):
        return False
    R = T[:3, :3]
    if np.max(np.abs(R.T @ R - np.eye(3))) > rot_tol:
        return False
    if abs(np.linalg.det(R) - 1.0) > det_tol:
        return False
    return np.max(np.abs(T[3] - np.array([0.0, 0.0, 0.0, 1.0]))) <= row_tol


def apply_transform(T, points):
    """Apply a 4x4 rigid transform to an (N, 3) array of points."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        return pts.reshape(0, 3)
    return pts @ T[:3, :3].T + T[:3, 3]


def invert_transform(T):
    R = T[:3, :3]
    out = np.eye(4)
    out[:3, :3] = R.T
    out[:3, 3] = -R.T @ T[:3, 3]
    return out


def rotation_z(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def look_pose(position, yaw, pitch):
    """World-from-camera pose for a camera at `position` with heading/tilt.

    Camera convention: +z optical axis, +x image right, +y image down.
    World convention: z up. yaw rotates about world z (0 = +x heading),
    pitch tilts the optical axis (negative = looking down).
    """
    cp, sp = np.cos(pitch), np.sin(pitch)
    cy, sy = np.cos(yaw), np.sin(yaw)
    forward = np.array([cp * cy, cp * sy, sp])
    up = np.array([0.0, 0.0, 1.0])
    if abs(forward @ up) > 0.999:
        up = np.array([1.0, 0.0, 0.0])
    right = np.cross(forward, up)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    T = np.eye(4)
    T[:3, 0] = right
    T[:3, 1] = down
    T[:3, 2] = forward
    T[:3, 3] = np.asarray(position, dtype=np.float64)
    return T


def project_points(points_world, pose, intrinsics):
    """Project world points into a camera; returns (u, v, depth) arrays.

    `pose` is world-from-camera; depth is the camera-frame z coordinate
    (positive in front of the camera). No bounds check is applied here.
    """
    pts = np.atleast_2d(np.asarray(points_world, dtype=np.float64))
    R = pose[:3, :3]
    t = pose[:3, 3]
    cam = (pts - t) @ R  # camera-frame coordinates
    fx, fy, cx, cy = intrinsics
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = fx * cam[:, 0] / z + cx
        v = fy * cam[:, 1] / z + cy
    return u, v, z


def voxel_downsample(points, voxel_size):
    """One mean point per occupied voxel; deterministic for a fixed input order."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.shape[0] == 0:
        return pts.reshape(0, 3)
    keys = np.floor(pts / voxel_size).astype(np.int64)
    order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0]))
    keys_sorted = keys[order]
    pts_sorted = pts[order]
    boundaries = np.any(np.diff(keys_sorted, axis=0) != 0, axis=1)
    starts = np.concatenate(([0], np.nonzero(boundaries)[0] + 1))
    ends = np.concatenate((starts[1:], [len(pts_sorted)]))
    out = np.empty((len(starts), 3))
    sums = np.add.reduceat(pts_sorted, starts, axis=0)
    counts = (ends - starts).astype(np.float64)
    out = sums / counts[:, None]
    return out
