"""Rigid-body transforms: PoseSE3, SO(3)/SE(3) exponential and logarithm maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

ORTHO_TOL = 1e-9
_SMALL_ANGLE = 1e-8


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(omega: np.ndarray) -> np.ndarray:
    return Rotation.from_rotvec(np.asarray(omega, dtype=float)).as_matrix()


def so3_log(rot: np.ndarray) -> np.ndarray:
    return Rotation.from_matrix(rot).as_rotvec()


def rot_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def orthonormalize(rot: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix in the Frobenius sense."""
    u, _, vt = np.linalg.svd(rot)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def orthonormality_error(rot: np.ndarray) -> float:
    return float(np.abs(rot.T @ rot - np.eye(3)).max())


def _v_matrix(omega: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(omega)
    w = skew(omega)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + 0.5 * w + w @ w / 6.0
    a = (1.0 - np.cos(theta)) / theta**2
    b = (theta - np.sin(theta)) / theta**3
    return np.eye(3) + a * w + b * (w @ w)


def _v_inverse(omega: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(omega)
    w = skew(omega)
    if theta < _SMALL_ANGLE:
        return np.eye(3) - 0.5 * w + w @ w / 12.0
    half = 0.5 * theta
    c = (1.0 - half * np.cos(half) / np.sin(half)) / theta**2
    return np.eye(3) - 0.5 * w + c * (w @ w)


@dataclass(frozen=True, eq=False)
class PoseSE3:
    """Rigid transform p' = R·p + t.

    As a pose it maps sensor coordinates to world coordinates; as a relative
    motion (``RigidTransform``) it maps frame t coordinates into frame t-1.
    """

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.array(self.rotation, dtype=float).reshape(3, 3)
        trans = np.array(self.translation, dtype=float).reshape(3)
        rot.flags.writeable = False
        trans.flags.writeable = False
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @classmethod
    def identity(cls) -> PoseSE3:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, mat: np.ndarray) -> PoseSE3:
        mat = np.asarray(mat, dtype=float)
        return cls(mat[:3, :3], mat[:3, 3])

    @classmethod
    def from_translation(cls, t) -> PoseSE3:
        return cls(np.eye(3), t)

    @classmethod
    def exp(cls, xi: np.ndarray) -> PoseSE3:
        """SE(3) exponential of xi = (omega, rho)."""
        xi = np.asarray(xi, dtype=float)
        return cls(so3_exp(xi[:3]), _v_matrix(xi[:3]) @ xi[3:])

    def log(self) -> np.ndarray:
        omega = so3_log(self.rotation)
        return np.concatenate([omega, _v_inverse(omega) @ self.translation])

    def as_matrix(self) -> np.ndarray:
        mat = np.eye(4)
        mat[:3, :3] = self.rotation
        mat[:3, 3] = self.translation
        return mat

    def as_kitti_row(self) -> np.ndarray:
        return self.as_matrix()[:3, :].reshape(12)

    def inverse(self) -> PoseSE3:
        rt = self.rotation.T
        return PoseSE3(rt, -rt @ self.translation)

    def compose(self, other: PoseSE3) -> PoseSE3:
        rot = self.rotation @ other.rotation
        if orthonormality_error(rot) > ORTHO_TOL:
            rot = orthonormalize(rot)
        return PoseSE3(rot, self.rotation @ other.translation + self.translation)

    __matmul__ = compose

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def retract(self, delta: np.ndarray) -> PoseSE3:
        """Local update used by the optimizers: R·Exp(omega), t + rho."""
        delta = np.asarray(delta, dtype=float)
        rot = self.rotation @ so3_exp(delta[:3])
        if orthonormality_error(rot) > ORTHO_TOL:
            rot = orthonormalize(rot)
        return PoseSE3(rot, self.translation + delta[3:])

    def orthonormalized(self) -> PoseSE3:
        return PoseSE3(orthonormalize(self.rotation), self.translation)

    def allclose(self, other: PoseSE3, atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, atol=atol, rtol=0.0)
            and np.allclose(self.translation, other.translation, atol=atol, rtol=0.0)
        )

    def __repr__(self) -> str:
        yaw = np.degrees(np.arctan2(self.rotation[1, 0], self.rotation[0, 0]))
        t = np.round(self.translation, 4).tolist()
        return f"PoseSE3(t={t}, yaw={yaw:.3f}deg)"


RigidTransform = PoseSE3


def chordal_distance(r1: np.ndarray, r2: np.ndarray) -> float:
    return float(np.linalg.norm(r1 - r2))


def skew_batch(v: np.ndarray) -> np.ndarray:
    """(n, 3) vectors -> (n, 3, 3) cross-product matrices."""
    v = np.asarray(v, dtype=float)
    out = np.zeros((len(v), 3, 3))
    out[:, 0, 1], out[:, 0, 2] = -v[:, 2], v[:, 1]
    out[:, 1, 0], out[:, 1, 2] = v[:, 2], -v[:, 0]
    out[:, 2, 0], out[:, 2, 1] = -v[:, 1], v[:, 0]
    return out


def se3_log_batch(rot: np.ndarray, trans: np.ndarray) -> np.ndarray:
    """Logarithm of n transforms at once; returns (n, 6) rows (omega, rho)."""
    omega = Rotation.from_matrix(rot).as_rotvec()
    theta = np.linalg.norm(omega, axis=1)
    w = skew_batch(omega)
    ww = w @ w
    c = np.full(len(theta), 1.0 / 12.0)
    small = theta < 1e-4
    c[small] += theta[small] ** 2 / 720.0
    big = ~small
    half = 0.5 * theta[big]
    c[big] = (1.0 - half * np.cos(half) / np.sin(half)) / theta[big] ** 2
    v_inv = np.eye(3) - 0.5 * w + c[:, None, None] * ww
    rho = np.einsum("nij,nj->ni", v_inv, trans)
    return np.hstack([omega, rho])
