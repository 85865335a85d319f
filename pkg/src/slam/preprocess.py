"""Ground removal: RANSAC plane fit followed by inlier rejection.

Without this step the concentric laser rings on the road surface dominate the
rasterized image and produce unstable corners.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from src.slam.dataset_io import PointCloud
from src.slam.errors import DegenerateCloud, NoGround
from src.slam.schemas import RansacConfig

log = logging.getLogger(__name__)

_COLLINEAR_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class PlaneModel:
    """Plane n·p + d = 0 with unit normal, oriented so that n.z >= 0."""

    normal: np.ndarray
    d: float

    @classmethod
    def canonical(cls, normal: np.ndarray, d: float) -> PlaneModel:
        normal = np.asarray(normal, dtype=float)
        norm = np.linalg.norm(normal)
        normal, d = normal / norm, float(d) / norm
        if normal[2] < 0:
            normal, d = -normal, -d
        return cls(normal, d)

    def signed_distance(self, xyz: np.ndarray) -> np.ndarray:
        return xyz @ self.normal + self.d


def _least_squares_plane(xyz: np.ndarray) -> PlaneModel:
    centroid = xyz.mean(axis=0)
    _, _, vt = np.linalg.svd(xyz - centroid, full_matrices=False)
    normal = vt[-1]
    return PlaneModel.canonical(normal, -normal @ centroid)


def _check_not_degenerate(xyz: np.ndarray) -> None:
    if len(xyz) < 3:
        raise DegenerateCloud(f"need at least 3 points to fit a plane, got {len(xyz)}")
    sv = np.linalg.svd(xyz - xyz.mean(axis=0), compute_uv=False)
    if sv[1] <= _COLLINEAR_TOL * max(sv[0], 1.0):
        raise DegenerateCloud("all points are collinear")


def fit_ground_plane(cloud: PointCloud, cfg: RansacConfig) -> PlaneModel:
    xyz = cloud.xyz
    _check_not_degenerate(xyz)

    pool = np.flatnonzero(xyz[:, 2] < cfg.hypothesis_max_z)
    if len(pool) < 3:
        pool = np.arange(len(xyz))

    rng = np.random.default_rng(cfg.seed)
    samples = pool[rng.integers(0, len(pool), size=(cfg.iterations, 3))]

    best_count, best_mask = 0, None
    for i0, i1, i2 in samples:
        p0 = xyz[i0]
        normal = np.cross(xyz[i1] - p0, xyz[i2] - p0)
        norm = np.linalg.norm(normal)
        if norm < 1e-12:
            continue
        normal /= norm
        mask = np.abs(xyz @ normal - normal @ p0) <= cfg.inlier_dist_m
        count = int(mask.sum())
        if count > best_count:
            best_count, best_mask = count, mask

    if best_mask is None or best_count < 3:
        raise NoGround("no non-degenerate plane hypothesis found")
    fraction = best_count / len(xyz)
    if fraction < cfg.min_inlier_fraction:
        raise NoGround(
            f"best plane holds {fraction:.1%} of points, "
            f"below the {cfg.min_inlier_fraction:.1%} minimum"
        )
    return _least_squares_plane(xyz[best_mask])


def remove_ground(cloud: PointCloud, plane: PlaneModel, inlier_dist_m: float) -> PointCloud:
    keep = np.abs(plane.signed_distance(cloud.xyz)) > inlier_dist_m
    return cloud.subset(keep)


def preprocess_cloud(cloud: PointCloud, cfg: RansacConfig) -> tuple[PointCloud, PlaneModel | None]:
    """Fit and strip the ground; frames without a usable plane pass through unchanged."""
    if not cfg.enabled:
        return cloud, None
    try:
        plane = fit_ground_plane(cloud, cfg)
    except (NoGround, DegenerateCloud) as exc:
        log.warning("[preprocess] frame %d: %s, keeping all points", cloud.frame_index, exc)
        return cloud, None
    stripped = remove_ground(cloud, plane, cfg.inlier_dist_m)
    log.debug(
        "[preprocess] frame %d: removed %d ground points, %d remain",
        cloud.frame_index, len(cloud) - len(stripped), len(stripped),
    )
    return stripped, plane
