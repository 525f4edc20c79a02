"""Quaternion and rigid-transform math, with the Jacobians the hand-written
adjoint passes need.

Quaternions are stored (w, x, y, z). All functions accept batched inputs with
the quaternion/vector axis last.
"""

from __future__ import annotations

import numpy as np


def quat_normalize(q: np.ndarray) -> np.ndarray:
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    out = q.copy()
    out[..., 1:] = -out[..., 1:]
    return out


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a*b; composing rotations applies b first, then a."""
    aw, ax, ay, az = (a[..., i] for i in range(4))
    bw, bx, by, bz = (b[..., i] for i in range(4))
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrices from quaternions, normalizing internally.

    Normalizing here makes the map R(q) well defined for any nonzero q, so
    finite differences on raw quaternion components are comparable with the
    analytic Jacobian.
    """
    q = quat_normalize(np.asarray(q, dtype=float))
    w, x, y, z = (q[..., i] for i in range(4))
    xx, yy, zz = x * x, y * y, z * z
    wx, wy, wz = w * x, w * y, w * z
    xy, xz, yz = x * y, x * z, y * z
    m = np.empty(q.shape[:-1] + (3, 3), dtype=float)
    m[..., 0, 0] = 1 - 2 * (yy + zz)
    m[..., 0, 1] = 2 * (xy - wz)
    m[..., 0, 2] = 2 * (xz + wy)
    m[..., 1, 0] = 2 * (xy + wz)
    m[..., 1, 1] = 1 - 2 * (xx + zz)
    m[..., 1, 2] = 2 * (yz - wx)
    m[..., 2, 0] = 2 * (xz - wy)
    m[..., 2, 1] = 2 * (yz + wx)
    m[..., 2, 2] = 1 - 2 * (xx + yy)
    return m


def _matrix_jacobian_wrt_unit_quat(q: np.ndarray) -> np.ndarray:
    """d R / d q_hat for unit quaternions, shape (..., 4, 3, 3)."""
    w, x, y, z = (q[..., i] for i in range(4))
    zero = np.zeros_like(w)
    # dR/dw, dR/dx, dR/dy, dR/dz of the standard unit-quaternion matrix.
    dw = np.stack(
        [
            np.stack([zero, -2 * z, 2 * y], axis=-1),
            np.stack([2 * z, zero, -2 * x], axis=-1),
            np.stack([-2 * y, 2 * x, zero], axis=-1),
        ],
        axis=-2,
    )
    dx = np.stack(
        [
            np.stack([zero, 2 * y, 2 * z], axis=-1),
            np.stack([2 * y, -4 * x, -2 * w], axis=-1),
            np.stack([2 * z, 2 * w, -4 * x], axis=-1),
        ],
        axis=-2,
    )
    dy = np.stack(
        [
            np.stack([-4 * y, 2 * x, 2 * w], axis=-1),
            np.stack([2 * x, zero, 2 * z], axis=-1),
            np.stack([-2 * w, 2 * z, -4 * y], axis=-1),
        ],
        axis=-2,
    )
    dz = np.stack(
        [
            np.stack([-4 * z, -2 * w, 2 * x], axis=-1),
            np.stack([2 * w, -4 * z, 2 * y], axis=-1),
            np.stack([2 * x, 2 * y, zero], axis=-1),
        ],
        axis=-2,
    )
    return np.stack([dw, dx, dy, dz], axis=-3)


def quat_matrix_backward(q: np.ndarray, grad_matrix: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. R(q) back to the raw (unnormalized) quaternion.

    Chains through the internal normalization of quat_to_matrix.
    """
    q = np.asarray(q, dtype=float)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    qh = q / norm
    jac = _matrix_jacobian_wrt_unit_quat(qh)  # (..., 4, 3, 3)
    grad_unit = np.einsum("...qij,...ij->...q", jac, grad_matrix)
    # d q_hat / d q = (I - q_hat q_hat^T) / |q|
    proj = grad_unit - qh * np.sum(grad_unit * qh, axis=-1, keepdims=True)
    return proj / norm


def quat_multiply_backward(
    a: np.ndarray, b: np.ndarray, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of quat_multiply(a, b) w.r.t. a and b."""
    aw, ax, ay, az = (a[..., i] for i in range(4))
    bw, bx, by, bz = (b[..., i] for i in range(4))
    gw, gx, gy, gz = (grad_out[..., i] for i in range(4))
    ga = np.stack(
        [
            gw * bw + gx * bx + gy * by + gz * bz,
            -gw * bx + gx * bw - gy * bz + gz * by,
            -gw * by + gx * bz + gy * bw - gz * bx,
            -gw * bz - gx * by + gy * bx + gz * bw,
        ],
        axis=-1,
    )
    gb = np.stack(
        [
            gw * aw + gx * ax + gy * ay + gz * az,
            -gw * ax + gx * aw + gy * az - gz * ay,
            -gw * ay - gx * az + gy * aw + gz * ax,
            -gw * az + gx * ay - gy * ax + gz * aw,
        ],
        axis=-1,
    )
    return ga, gb


def rotvec_to_quat(rv: np.ndarray) -> np.ndarray:
    """Axis-angle vector to quaternion; stable near zero angle."""
    rv = np.asarray(rv, dtype=float)
    angle = np.linalg.norm(rv, axis=-1, keepdims=True)
    half = 0.5 * angle
    small = angle < 1e-8
    with np.errstate(invalid="ignore", divide="ignore"):
        k = np.where(small, 0.5 - angle**2 / 48.0, np.sin(half) / np.where(angle == 0, 1.0, angle))
    w = np.cos(half)
    return np.concatenate([w, k * rv], axis=-1)


def rotvec_to_quat_backward(rv: np.ndarray, grad_q: np.ndarray) -> np.ndarray:
    """Gradient of rotvec_to_quat w.r.t. the rotation vector."""
    rv = np.asarray(rv, dtype=float)
    angle = np.linalg.norm(rv, axis=-1, keepdims=True)
    half = 0.5 * angle
    small = (angle < 1e-6)[..., 0]
    safe = np.where(angle == 0, 1.0, angle)
    k = np.where(small[..., None], 0.5 - angle**2 / 48.0, np.sin(half) / safe)
    # dk/d|rv| and dw/d|rv|
    dk = np.where(
        small[..., None],
        -angle / 24.0,
        (0.5 * np.cos(half) * safe - np.sin(half)) / safe**2,
    )
    gw = grad_q[..., :1]
    gv = grad_q[..., 1:]
    unit = np.where(small[..., None], np.zeros_like(rv), rv / safe)
    grad = k * gv
    grad = grad + unit * (np.sum(gv * rv, axis=-1, keepdims=True) * dk - 0.5 * np.sin(half) * gw)
    return grad


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate vectors v by quaternions q (batched)."""
    m = quat_to_matrix(q)
    return np.einsum("...ij,...j->...i", m, v)


def quat_slerp_linear(a: np.ndarray, b: np.ndarray, t: float) -> np.ndarray:
    """Normalized linear quaternion interpolation with hemisphere correction."""
    a = quat_normalize(np.asarray(a, dtype=float))
    b = quat_normalize(np.asarray(b, dtype=float))
    sign = np.where(np.sum(a * b, axis=-1, keepdims=True) < 0.0, -1.0, 1.0)
    mixed = (1.0 - t) * a + t * (sign * b)
    return quat_normalize(mixed)


def look_at(eye: np.ndarray, target: np.ndarray, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """World-from-camera rigid transform for a camera at `eye` looking at
    `target`; camera convention is x right, y down, z forward."""
    eye = np.asarray(eye, dtype=float)
    target = np.asarray(target, dtype=float)
    fwd = target - eye
    fwd = fwd / np.linalg.norm(fwd)
    upv = np.asarray(up, dtype=float)
    right = np.cross(fwd, upv)
    nr = np.linalg.norm(right)
    if nr < 1e-9:
        upv = np.array([0.0, 0.0, 1.0]) if abs(fwd[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
        right = np.cross(fwd, upv)
        nr = np.linalg.norm(right)
    right = right / nr
    down = np.cross(fwd, right)
    pose = np.eye(4)
    pose[:3, 0] = right
    pose[:3, 1] = down
    pose[:3, 2] = fwd
    pose[:3, 3] = eye
    return pose
