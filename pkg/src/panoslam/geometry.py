"""Rigid transforms and small Lie-group helpers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation


def skew(v) -> np.ndarray:
    """Cross-product matrix(es) of vector(s) (..., 3) -> (..., 3, 3)."""
    v = np.asarray(v, dtype=float)
    z = np.zeros(v.shape[:-1])
    return np.stack(
        [
            np.stack([z, -v[..., 2], v[..., 1]], axis=-1),
            np.stack([v[..., 2], z, -v[..., 0]], axis=-1),
            np.stack([-v[..., 1], v[..., 0], z], axis=-1),
        ],
        axis=-2,
    )


def so3_exp(w) -> np.ndarray:
    """Rodrigues formula for a rotation vector."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w)
    K = skew(w)
    if theta < 1e-8:
        return np.eye(3) + K + 0.5 * K @ K
    return np.eye(3) + np.sin(theta) / theta * K + (1.0 - np.cos(theta)) / theta**2 * K @ K


def so3_log(R) -> np.ndarray:
    return Rotation.from_matrix(R).as_rotvec()


def rotation_angle(R) -> float:
    """Angle of a rotation matrix in radians."""
    return float(np.linalg.norm(so3_log(R)))


def orthonormalize(R) -> np.ndarray:
    """Nearest rotation matrix in the Frobenius sense.

    Composition lets rounding error leak out of SO(3), and the
    constant-velocity prediction amplifies it from frame to frame, so poses
    are projected back after every product.
    """
    U, _, Vt = np.linalg.svd(np.asarray(R, dtype=float))
    Rn = U @ Vt
    if np.linalg.det(Rn) < 0:
        U[:, -1] *= -1
        Rn = U @ Vt
    return Rn


def rot_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def normalize(v, axis=-1) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v, axis=axis, keepdims=True)


@dataclass(frozen=True)
class Pose:
    """Rigid transform world -> camera: ``x_c = R @ x_w + t``."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "R", np.array(self.R, dtype=float).reshape(3, 3))
        object.__setattr__(self, "t", np.array(self.t, dtype=float).reshape(3))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_camera_in_world(cls, R_wc, c_w) -> "Pose":
        """Build from camera orientation and center expressed in the world."""
        R_wc = np.asarray(R_wc, dtype=float)
        c_w = np.asarray(c_w, dtype=float)
        return cls(R_wc.T, -R_wc.T @ c_w)

    @classmethod
    def from_quat(cls, q_xyzw, t) -> "Pose":
        return cls(Rotation.from_quat(q_xyzw).as_matrix(), t)

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.R.T @ self.t

    @property
    def R_wc(self) -> np.ndarray:
        return self.R.T

    def inverse(self) -> "Pose":
        return Pose(self.R.T, -self.R.T @ self.t)

    def __matmul__(self, other: "Pose") -> "Pose":
        return Pose(orthonormalize(self.R @ other.R), self.R @ other.t + self.t)

    def apply(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return X @ self.R.T + self.t

    def as_matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def quat_camera_in_world(self) -> np.ndarray:
        """Quaternion (x, y, z, w) of the camera-to-world rotation."""
        return Rotation.from_matrix(self.R.T).as_quat()

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.R)) and np.all(np.isfinite(self.t)))

    def retract(self, xi) -> "Pose":
        """Left perturbation: x_c' = Exp(w) x_c + rho, with xi = (rho, w)."""
        xi = np.asarray(xi, dtype=float)
        dR = so3_exp(xi[3:])
        return Pose(orthonormalize(dR @ self.R), dR @ self.t + xi[:3])

    def scaled(self, s: float) -> "Pose":
        """Same rotation, world rescaled by ``s`` (camera center scales too)."""
        return Pose(self.R, self.t * s)


def relative_pose(T1: Pose, T2: Pose) -> Pose:
    """T12 = T2 * T1^-1, mapping camera-1 coordinates into camera 2."""
    return T2 @ T1.inverse()


def tangent_basis(b) -> np.ndarray:
    """Orthonormal tangent basis (..., 2, 3) at unit vector(s) ``b``.

    Gram-Schmidt against the coordinate axis of least absolute component,
    which keeps the construction deterministic and well conditioned.
    """
    b = np.asarray(b, dtype=float)
    axis = np.argmin(np.abs(b), axis=-1)
    a = np.zeros(b.shape)
    np.put_along_axis(a, axis[..., None], 1.0, axis=-1)
    e1 = a - np.sum(a * b, axis=-1, keepdims=True) * b
    e1 = e1 / np.linalg.norm(e1, axis=-1, keepdims=True)
    e2 = np.cross(b, e1)
    return np.stack([e1, e2], axis=-2)
