"""Closed-form rigid alignment of point sets with known correspondences."""

import numpy as np

from src.slam.errors import DegenerateGeometry
from src.slam.geometry import RigidTransform

_RANK_TOL = 1e-10


def align_svd(p_t, p_prev) -> RigidTransform:
    """Rotation and translation minimizing mean ||p_prev - Rot·p_t - tr||².

    Centroids and the cross-covariance SVD give the global minimizer in one
    step; a determinant guard rules out reflections.
    """
    p_t = np.asarray(p_t, dtype=float).reshape(-1, 3)
    p_prev = np.asarray(p_prev, dtype=float).reshape(-1, 3)
    if len(p_t) != len(p_prev):
        raise ValueError(f"point sets differ in length: {len(p_t)} vs {len(p_prev)}")
    if len(p_t) < 3:
        raise DegenerateGeometry(f"need at least 3 correspondences, got {len(p_t)}")

    mu_t = p_t.mean(axis=0)
    mu_prev = p_prev.mean(axis=0)
    cov = (p_t - mu_t).T @ (p_prev - mu_prev)
    u, s, vt = np.linalg.svd(cov)
    if s[0] <= 0 or s[1] <= _RANK_TOL * s[0]:
        raise DegenerateGeometry("correspondences are coincident or collinear")
    d = 1.0 if np.linalg.det(vt.T @ u.T) > 0 else -1.0
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(rot, mu_prev - rot @ mu_t)


def alignment_cost(p_t, p_prev, transform: RigidTransform) -> float:
    diff = np.asarray(p_prev) - transform.apply(p_t)
    return float(np.mean(np.sum(diff**2, axis=1)))


def align_svd_batch(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized minimal-sample alignment for RANSAC.

    src, dst: (k, m, 3). Returns rotations (k, 3, 3), translations (k, 3) and a
    mask of samples whose source points are not collinear.
    """
    mu_s = src.mean(axis=1, keepdims=True)
    mu_d = dst.mean(axis=1, keepdims=True)
    cov = np.einsum("kmi,kmj->kij", src - mu_s, dst - mu_d)
    u, s, vt = np.linalg.svd(cov)
    valid = (s[:, 0] > 0) & (s[:, 1] > 1e-6 * s[:, 0])
    d = np.sign(np.linalg.det(np.einsum("kji,klj->kil", vt, u)))
    d[d == 0] = 1.0
    fix = np.ones((len(src), 3))
    fix[:, 2] = d
    rot = np.einsum("kji,kj,klj->kil", vt, fix, u)
    trans = mu_d[:, 0] - np.einsum("kij,kj->ki", rot, mu_s[:, 0])
    return rot, trans, valid
