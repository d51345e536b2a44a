"""Rotation helpers: quaternions, axis-angle, and their derivatives."""

import numpy as np


def quat_normalize(q):
    """Normalize quaternions along the last axis."""
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_to_rotmat(q):
    """Convert (w, x, y, z) quaternions of shape (..., 4) to rotation matrices (..., 3, 3).

    Quaternions are normalized internally, so raw (unnormalized) parameters
    are fine as input.
    """
    q = quat_normalize(np.asarray(q, dtype=np.float64))
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
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


def quat_to_rotmat_backward(q, d_R):
    """Gradient of quat_to_rotmat w.r.t. the raw quaternion.

    q: (..., 4) raw quaternions, d_R: (..., 3, 3) upstream gradient.
    Returns (..., 4). Includes the normalization Jacobian.
    """
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    u = q / n
    w, x, y, z = u[..., 0], u[..., 1], u[..., 2], u[..., 3]
    zero = np.zeros_like(w)

    def mat(rows):
        return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)

    dR_dw = 2 * mat([[zero, -z, y], [z, zero, -x], [-y, x, zero]])
    dR_dx = 2 * mat([[zero, y, z], [y, -2 * x, -w], [z, w, -2 * x]])
    dR_dy = 2 * mat([[-2 * y, x, w], [x, zero, z], [-w, z, -2 * y]])
    dR_dz = 2 * mat([[-2 * z, -w, x], [w, -2 * z, y], [x, y, zero]])

    d_u = np.stack(
        [np.sum(d_R * d, axis=(-2, -1)) for d in (dR_dw, dR_dx, dR_dy, dR_dz)],
        axis=-1,
    )
    # u = q / |q|  =>  du/dq = (I - u u^T) / |q|
    return (d_u - u * np.sum(d_u * u, axis=-1, keepdims=True)) / n


def axis_angle_to_rotmat(aa):
    """Rodrigues formula for axis-angle vectors of shape (..., 3)."""
    aa = np.asarray(aa, dtype=np.float64)
    theta2 = np.sum(aa * aa, axis=-1)
    theta = np.sqrt(theta2)
    small = theta < 1e-8
    # sin(t)/t and (1-cos(t))/t^2 with series fallback near zero
    with np.errstate(invalid="ignore", divide="ignore"):
        A = np.where(small, 1.0 - theta2 / 6.0, np.sin(theta) / np.where(small, 1.0, theta))
        B = np.where(small, 0.5 - theta2 / 24.0, (1.0 - np.cos(theta)) / np.where(small, 1.0, theta2))
    kx, ky, kz = aa[..., 0], aa[..., 1], aa[..., 2]
    zero = np.zeros_like(kx)
    K = np.stack(
        [
            np.stack([zero, -kz, ky], axis=-1),
            np.stack([kz, zero, -kx], axis=-1),
            np.stack([-ky, kx, zero], axis=-1),
        ],
        axis=-2,
    )
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + A[..., None, None] * K + B[..., None, None] * (K @ K)


IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])
