"""Rotation algebra shared by the simulator, controller and environment.

Quaternions are ``[w, x, y, z]`` arrays (scalar first, Hamilton product) that
rotate body-frame vectors into the world frame.  Every function broadcasts
over leading axes, so a ``(E, N, 4)`` batch is handled the same way as a
single ``(4,)`` quaternion.
"""

from __future__ import annotations

import numpy as np

UNIT_TOL = 1e-6
PARALLEL_TOL = 1e-6

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


class ContractError(ValueError):
    """An input violated a documented precondition."""


def cross(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cross product over the last axis (``np.cross`` without its dispatch overhead)."""
    a0, a1, a2 = a[..., 0], a[..., 1], a[..., 2]
    b0, b1, b2 = b[..., 0], b[..., 1], b[..., 2]
    return np.stack([a1 * b2 - a2 * b1, a2 * b0 - a0 * b2, a0 * b1 - a1 * b0], axis=-1)


def normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def canonical(q: np.ndarray) -> np.ndarray:
    """Pick the representative with ``w >= 0`` of the double cover."""
    q = np.asarray(q, dtype=float)
    return np.where(q[..., :1] < 0.0, -q, q)


def quat_conj(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product ``a ⊗ b``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrix ``(..., 3, 3)`` of a unit quaternion."""
    q = np.asarray(q, dtype=float)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1.0 - 2.0 * (yy + zz)
    R[..., 0, 1] = 2.0 * (xy - wz)
    R[..., 0, 2] = 2.0 * (xz + wy)
    R[..., 1, 0] = 2.0 * (xy + wz)
    R[..., 1, 1] = 1.0 - 2.0 * (xx + zz)
    R[..., 1, 2] = 2.0 * (yz - wx)
    R[..., 2, 0] = 2.0 * (xz - wy)
    R[..., 2, 1] = 2.0 * (yz + wx)
    R[..., 2, 2] = 1.0 - 2.0 * (xx + yy)
    return R


def rotmat_to_quat(R: np.ndarray) -> np.ndarray:
    """Inverse of :func:`quat_to_rotmat`, returned with ``w >= 0``.

    Uses Shepperd's method: the largest of the four diagonal combinations is
    chosen as pivot so the square root never sees a tiny argument.
    """
    R = np.asarray(R, dtype=float)
    shape = R.shape[:-2]
    R = R.reshape(-1, 3, 3)
    m00, m11, m22 = R[:, 0, 0], R[:, 1, 1], R[:, 2, 2]
    trace = m00 + m11 + m22
    cand = np.stack([trace, m00, m11, m22], axis=-1)
    pivot = np.argmax(cand, axis=-1)
    q = np.empty((R.shape[0], 4))

    i = pivot == 0
    s = np.sqrt(1.0 + trace[i]) * 2.0
    q[i] = np.stack(
        [0.25 * s, (R[i, 2, 1] - R[i, 1, 2]) / s, (R[i, 0, 2] - R[i, 2, 0]) / s, (R[i, 1, 0] - R[i, 0, 1]) / s],
        axis=-1,
    )
    i = pivot == 1
    s = np.sqrt(1.0 + m00[i] - m11[i] - m22[i]) * 2.0
    q[i] = np.stack(
        [(R[i, 2, 1] - R[i, 1, 2]) / s, 0.25 * s, (R[i, 0, 1] + R[i, 1, 0]) / s, (R[i, 0, 2] + R[i, 2, 0]) / s],
        axis=-1,
    )
    i = pivot == 2
    s = np.sqrt(1.0 + m11[i] - m00[i] - m22[i]) * 2.0
    q[i] = np.stack(
        [(R[i, 0, 2] - R[i, 2, 0]) / s, (R[i, 0, 1] + R[i, 1, 0]) / s, 0.25 * s, (R[i, 1, 2] + R[i, 2, 1]) / s],
        axis=-1,
    )
    i = pivot == 3
    s = np.sqrt(1.0 + m22[i] - m00[i] - m11[i]) * 2.0
    q[i] = np.stack(
        [(R[i, 1, 0] - R[i, 0, 1]) / s, (R[i, 0, 2] + R[i, 2, 0]) / s, (R[i, 1, 2] + R[i, 2, 1]) / s, 0.25 * s],
        axis=-1,
    )
    return canonical(normalize(q)).reshape(shape + (4,))


def rotate_vec(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate body-frame ``v`` into the world frame."""
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    w = q[..., :1]
    u = q[..., 1:]
    t = 2.0 * cross(u, v)
    return v + w * t + cross(u, t)


def from_axis_angle(axis, angle) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
    half = 0.5 * np.asarray(angle, dtype=float)[..., None]
    return np.concatenate([np.cos(half), np.sin(half) * axis], axis=-1)


def from_euler(roll, pitch, yaw) -> np.ndarray:
    """Quaternion for intrinsic z-y'-x'' angles (yaw, then pitch, then roll)."""
    roll, pitch, yaw = (np.asarray(a, dtype=float) for a in (roll, pitch, yaw))
    cr, sr = np.cos(roll / 2), np.sin(roll / 2)
    cp, sp = np.cos(pitch / 2), np.sin(pitch / 2)
    cy, sy = np.cos(yaw / 2), np.sin(yaw / 2)
    return np.stack(
        [
            cr * cp * cy + sr * sp * sy,
            sr * cp * cy - cr * sp * sy,
            cr * sp * cy + sr * cp * sy,
            cr * cp * sy - sr * sp * cy,
        ],
        axis=-1,
    )


def to_euler(q: np.ndarray) -> np.ndarray:
    """``(roll, pitch, yaw)`` of a unit quaternion, inverse of :func:`from_euler`."""
    q = np.asarray(q, dtype=float)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    roll = np.arctan2(2 * (w * x + y * z), 1 - 2 * (x * x + y * y))
    pitch = np.arcsin(np.clip(2 * (w * y - z * x), -1.0, 1.0))
    yaw = np.arctan2(2 * (w * z + x * y), 1 - 2 * (y * y + z * z))
    return np.stack([roll, pitch, yaw], axis=-1)


def yaw_of(q: np.ndarray) -> np.ndarray:
    return to_euler(q)[..., 2]


def _check_unit(q: np.ndarray, name: str) -> None:
    err = np.abs(np.linalg.norm(q, axis=-1) - 1.0)
    if np.any(err > UNIT_TOL):
        raise ContractError(f"{name} is not a unit quaternion (norm error {err.max():.3g})")


def quat_error_angle(q_goal: np.ndarray, q_load: np.ndarray) -> np.ndarray:
    """Rotation angle in ``[0, pi]`` of ``q_goal ⊗ conj(q_load)``."""
    q_goal = np.asarray(q_goal, dtype=float)
    q_load = np.asarray(q_load, dtype=float)
    _check_unit(q_goal, "q_goal")
    _check_unit(q_load, "q_load")
    d = canonical(quat_mul(canonical(q_goal), quat_conj(canonical(q_load))))
    vec = np.linalg.norm(d[..., 1:], axis=-1)
    return 2.0 * np.arctan2(vec, d[..., 0])


def line_plane_intersection(p_mav, t_dir, p_load, n):
    """Point where the line ``p_mav + s * t_dir`` pierces the plane through
    ``p_load`` with normal ``n``.

    Lines with ``|n · t_dir| < 1e-6`` do not intersect; their rows are NaN in
    the returned array and ``False`` in the returned mask.
    """
    p_mav = np.asarray(p_mav, dtype=float)
    t_dir = np.asarray(t_dir, dtype=float)
    p_load = np.asarray(p_load, dtype=float)
    n = np.asarray(n, dtype=float)
    denom = np.sum(n * t_dir, axis=-1)
    ok = np.abs(denom) >= PARALLEL_TOL
    d = np.sum(n * p_load, axis=-1)
    s = (d - np.sum(n * p_mav, axis=-1)) / np.where(ok, denom, 1.0)
    point = p_mav + s[..., None] * t_dir
    point = np.where(ok[..., None], point, np.nan)
    return point, ok
