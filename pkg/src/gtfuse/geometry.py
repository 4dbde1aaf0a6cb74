"""Rotation, quaternion and rigid-pose helpers.

Conventions used throughout the package:

* Rotation matrices act on column vectors; ``R_A_B`` maps coordinates in
  frame B to frame A.
* Quaternions are Hamilton, scalar first ``(w, x, y, z)``. A unit quaternion
  ``q`` corresponds to the matrix returned by :func:`quat_to_rot`, and
  ``quat_to_rot(a * b) == quat_to_rot(a) @ quat_to_rot(b)``.
* Rotation residuals and perturbations are right-multiplied:
  ``R <- R @ so3_exp(delta)``.

Most functions accept stacked inputs with arbitrary leading axes, e.g.
``(n, 3)`` vectors or ``(n, 3, 3)`` matrices.
"""
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateScrew

SMALL_ANGLE = 1e-6
SCREW_ANGLE_FLOOR = 1e-4


def hat(v):
    """Skew-symmetric matrix of ``v`` so that ``hat(a) @ b == cross(a, b)``."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def vee(m):
    """Inverse of :func:`hat`, using the antisymmetric part of ``m``."""
    m = np.asarray(m, dtype=float)
    return 0.5 * np.stack(
        [m[..., 2, 1] - m[..., 1, 2],
         m[..., 0, 2] - m[..., 2, 0],
         m[..., 1, 0] - m[..., 0, 1]], axis=-1)


def _exp_coeffs(theta):
    """sin(t)/t and (1-cos t)/t^2 with a Taylor branch near zero."""
    small = theta < SMALL_ANGLE
    t = np.where(small, 1.0, theta)
    t2 = theta * theta
    a = np.where(small, 1.0 - t2 / 6.0, np.sin(t) / t)
    b = np.where(small, 0.5 - t2 / 24.0, (1.0 - np.cos(t)) / (t * t))
    return a, b


def so3_exp(phi):
    """Rodrigues exponential of rotation vector(s) ``phi``."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)
    a, b = _exp_coeffs(theta)
    K = hat(phi)
    I = np.broadcast_to(np.eye(3), K.shape)
    return I + a[..., None, None] * K + b[..., None, None] * (K @ K)


def so3_log(R):
    """Principal logarithm of rotation matrix (matrices) ``R``.

    The result has norm in ``[0, pi]``. At exactly ``pi`` the axis is taken
    from the column of ``R + I`` with the largest diagonal entry, and its
    sign is chosen so that this largest component is positive. So a
    half-turn about z returns ``(0, 0, pi)``.
    """
    R = np.asarray(R, dtype=float)
    w = vee(R)  # sin(theta) * axis
    s = np.linalg.norm(w, axis=-1)
    c = 0.5 * (np.trace(R, axis1=-2, axis2=-1) - 1.0)
    c = np.clip(c, -1.0, 1.0)
    theta = np.arctan2(s, c)

    out = np.empty(R.shape[:-1])
    small = theta < SMALL_ANGLE
    near_pi = (np.pi - theta) < 1e-3
    regular = ~(small | near_pi)

    if np.any(small):
        # theta/sin(theta) ~ 1 + theta^2/6
        out[small] = w[small] * (1.0 + theta[small, None] ** 2 / 6.0)
    if np.any(regular):
        out[regular] = w[regular] * (theta[regular] / s[regular])[..., None]
    if np.any(near_pi):
        out[near_pi] = _log_near_pi(R[near_pi], w[near_pi], theta[near_pi])
    return out


def _log_near_pi(R, w, theta):
    # R + R^T = 2 cos(t) I + 2 (1 - cos(t)) a a^T; use the largest diagonal
    # entry of the symmetric part to extract the axis robustly.
    c = np.cos(theta)
    S = 0.5 * (R + np.swapaxes(R, -1, -2)) - c[:, None, None] * np.eye(3)
    S = S / (1.0 - c)[:, None, None]  # = a a^T
    diag = np.diagonal(S, axis1=-2, axis2=-1)
    k = np.argmax(diag, axis=-1)
    idx = np.arange(len(k))
    col = S[idx, :, k]
    axis = col / np.sqrt(np.maximum(diag[idx, k], 1e-300))[:, None]
    axis /= np.linalg.norm(axis, axis=-1, keepdims=True)
    # Match the sign carried by the antisymmetric part when it is resolvable,
    # otherwise keep the positive largest component.
    dot = np.einsum("ni,ni->n", axis, w)
    flip = dot < 0
    axis[flip] *= -1.0
    return axis * theta[:, None]


def right_jacobian(phi):
    """Right Jacobian ``Jr`` of SO(3): ``Exp(phi + d) ~ Exp(phi) Exp(Jr d)``."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)
    small = theta < 1e-4
    t = np.where(small, 1.0, theta)
    t2 = theta * theta
    b = np.where(small, 0.5 - t2 / 24.0, (1.0 - np.cos(t)) / (t * t))
    c = np.where(small, 1.0 / 6.0 - t2 / 120.0, (t - np.sin(t)) / (t * t * t))
    K = hat(phi)
    I = np.broadcast_to(np.eye(3), K.shape)
    return I - b[..., None, None] * K + c[..., None, None] * (K @ K)


def right_jacobian_inv(phi):
    """Inverse of :func:`right_jacobian`."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)
    small = theta < 1e-4
    t = np.where(small, 1.0, theta)
    t2 = theta * theta
    # 1/t^2 - (1 + cos t) / (2 t sin t)
    e = np.where(small, 1.0 / 12.0 + t2 / 720.0,
                 1.0 / (t * t) - (1.0 + np.cos(t)) / (2.0 * t * np.sin(t)))
    K = hat(phi)
    I = np.broadcast_to(np.eye(3), K.shape)
    return I + 0.5 * K + e[..., None, None] * (K @ K)


def project_rotation(M):
    """Nearest rotation matrix to ``M`` in the Frobenius sense."""
    U, _, Vt = np.linalg.svd(M)
    d = np.sign(np.linalg.det(U @ Vt))
    U = U.copy()
    U[..., :, 2] *= np.asarray(d)[..., None]
    return U @ Vt


def is_rotation(R, tol=1e-9):
    R = np.asarray(R, dtype=float)
    ortho = np.abs(np.swapaxes(R, -1, -2) @ R - np.eye(3)).max()
    return bool(ortho <= tol and np.all(np.abs(np.linalg.det(R) - 1.0) <= tol))


# ---------------------------------------------------------------- quaternions

def quat_mul(a, b):
    """Hamilton product ``a * b`` of scalar-first quaternions."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_left(q):
    """Matrix ``L(q)`` with ``L(q) @ b == quat_mul(q, b)``."""
    w, x, y, z = np.moveaxis(np.asarray(q, dtype=float), -1, 0)
    rows = [
        [w, -x, -y, -z],
        [x, w, -z, y],
        [y, z, w, -x],
        [z, -y, x, w],
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def quat_right(q):
    """Matrix ``R(q)`` with ``R(q) @ a == quat_mul(a, q)``."""
    w, x, y, z = np.moveaxis(np.asarray(q, dtype=float), -1, 0)
    rows = [
        [w, -x, -y, -z],
        [x, w, z, -y],
        [y, -z, w, x],
        [z, y, -x, w],
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def quat_canonical(q):
    """Unit-normalize and flip to the ``w >= 0`` hemisphere."""
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    return np.where(q[..., :1] < 0, -q, q)


def quat_to_rot(q):
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
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


def rot_to_quat(R):
    """Unit quaternion (``w >= 0``) of rotation matrix (matrices) ``R``."""
    phi = so3_log(R)
    theta = np.linalg.norm(phi, axis=-1)
    half = 0.5 * theta
    small = theta < SMALL_ANGLE
    t = np.where(small, 1.0, theta)
    k = np.where(small, 0.5 - theta ** 2 / 48.0, np.sin(half) / t)
    q = np.concatenate([np.cos(half)[..., None], phi * k[..., None]], axis=-1)
    return quat_canonical(q)


# ---------------------------------------------------------------------- poses

@dataclass(frozen=True)
class Pose:
    """Rigid transform ``x -> R @ x + p``."""

    R: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        R = np.array(self.R, dtype=float).reshape(3, 3)
        p = np.array(self.p, dtype=float).reshape(3)
        R.flags.writeable = False
        p.flags.writeable = False
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "p", p)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    def __matmul__(self, other):
        return pose_compose(self, other)

    def inverse(self):
        return pose_inverse(self)

    def apply(self, x):
        return np.asarray(x) @ self.R.T + self.p

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.p
        return T


def pose_compose(a, b):
    return Pose(a.R @ b.R, a.R @ b.p + a.p)


def pose_inverse(a):
    return Pose(a.R.T, -a.R.T @ a.p)


@dataclass(frozen=True)
class ScrewInvariants:
    theta: float
    d: float


def screw_invariants(rel, floor=SCREW_ANGLE_FLOOR):
    """Rotation angle and translation along the screw axis of ``rel``.

    Both are unchanged when ``rel`` is conjugated by any rigid transform.
    Raises :class:`DegenerateScrew` when the angle is below ``floor``.
    """
    R, p = rel.R, rel.p
    c = np.clip(0.5 * (np.trace(R) - 1.0), -1.0, 1.0)
    w = vee(R)  # = sin(theta) * axis
    s = np.linalg.norm(w)
    theta = float(np.arctan2(s, c))
    if theta < floor:
        raise DegenerateScrew(f"rotation angle {theta:.3g} rad below floor {floor:g}")
    if np.pi - theta < 1e-6:
        axis = _log_near_pi(R[None], w[None], np.array([theta]))[0] / theta
        d = float(axis @ p)
    else:
        d = float(w @ p / s)
    return ScrewInvariants(theta, d)


def rotation_angle(R):
    """Geodesic angle of rotation matrix (matrices) ``R``."""
    return np.linalg.norm(so3_log(R), axis=-1)
