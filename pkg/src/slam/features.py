"""ORB features on height images: blur, FAST-9, intensity-centroid orientation,
steered BRIEF, Hamming matching and 3D RANSAC verification."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from src.slam import brief_pattern
from src.slam.alignment import align_svd, align_svd_batch
from src.slam.errors import DegenerateGeometry, IoError, PatchOutOfBounds, TooFewMatches
from src.slam.geometry import RigidTransform
from src.slam.schemas import FeatureConfig, MatchRansacConfig

log = logging.getLogger(__name__)

DESCRIPTOR_BYTES = brief_pattern.N_BITS // 8

# Bresenham circle of radius 3, clockwise from 12 o'clock, as (dx, dy)
FAST_RING = np.array([
    (0, -3), (1, -3), (2, -2), (3, -1), (3, 0), (3, 1), (2, 2), (1, 3),
    (0, 3), (-1, 3), (-2, 2), (-3, 1), (-3, 0), (-3, -1), (-2, -2), (-1, -3),
])
FAST_ARC = 9


@dataclass(frozen=True)
class Keypoint:
    u: float  # column
    v: float  # row
    response: float
    angle: float = 0.0


@dataclass(frozen=True)
class Match:
    idx_a: int
    idx_b: int
    hamming: int


@dataclass(frozen=True, eq=False)
class FrameFeatures:
    """Keypoints of one frame as parallel arrays.

    ``descriptors`` holds one packed 256-bit descriptor (32 bytes) per row;
    ``points`` the back-projected sensor-frame position of each keypoint.
    """

    uv: np.ndarray
    response: np.ndarray
    angle: np.ndarray
    descriptors: np.ndarray
    points: np.ndarray

    @classmethod
    def empty(cls) -> FrameFeatures:
        return cls(np.zeros((0, 2)), np.zeros(0), np.zeros(0),
                   np.zeros((0, DESCRIPTOR_BYTES), dtype=np.uint8), np.zeros((0, 3)))

    def __len__(self) -> int:
        return len(self.uv)

    def subset(self, idx) -> FrameFeatures:
        return FrameFeatures(self.uv[idx], self.response[idx], self.angle[idx],
                             self.descriptors[idx], self.points[idx])

    def keypoints(self) -> list[Keypoint]:
        return [Keypoint(float(u), float(v), float(r), float(a))
                for (u, v), r, a in zip(self.uv, self.response, self.angle)]


# -- smoothing ---------------------------------------------------------------

def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(np.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=float)
    kernel = np.exp(-(x**2) / (2.0 * sigma**2))
    return kernel / kernel.sum()


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    kernel = gaussian_kernel(sigma)
    out = ndimage.correlate1d(img.astype(float), kernel, axis=0, mode="reflect")
    out = ndimage.correlate1d(out, kernel, axis=1, mode="reflect")
    return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)


# -- FAST-9 ------------------------------------------------------------------

def _segment_scores(img: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Largest t for which each pixel still passes the 9-of-16 segment test, plus one."""
    center = img[rows, cols]
    ring = np.stack([img[rows + dy, cols + dx] for dx, dy in FAST_RING])
    best = np.full(len(rows), np.iinfo(np.int32).min, dtype=np.int32)
    for diff in (ring - center, center - ring):
        wrapped = np.concatenate([diff, diff[: FAST_ARC - 1]])
        arc_min = wrapped[:16].copy()
        for j in range(1, FAST_ARC):
            np.minimum(arc_min, wrapped[j:j + 16], out=arc_min)
        np.maximum(best, arc_min.max(axis=0), out=best)
    return best


def fast_response(img: np.ndarray, threshold: int) -> np.ndarray:
    """Corner score image: max threshold at which a pixel is a corner, -1 elsewhere."""
    img = img.astype(np.int32)
    h, w = img.shape
    response = np.full((h, w), -1, dtype=np.int32)
    if h < 7 or w < 7:
        return response
    inner = img[3:h - 3, 3:w - 3]
    brighter = np.zeros(inner.shape, dtype=np.int8)
    darker = np.zeros(inner.shape, dtype=np.int8)
    # any arc of 9 covers at least two of the four compass pixels
    for k in (0, 4, 8, 12):
        dx, dy = FAST_RING[k]
        ring = img[3 + dy:h - 3 + dy, 3 + dx:w - 3 + dx]
        brighter += ring > inner + threshold
        darker += ring < inner - threshold
    rows, cols = np.nonzero((brighter >= 2) | (darker >= 2))
    rows += 3
    cols += 3
    if not len(rows):
        return response
    score = _segment_scores(img, rows, cols)
    corner = score > threshold
    response[rows[corner], cols[corner]] = score[corner] - 1
    return response


def non_max_suppression(response: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Keep corners that beat all 8 neighbours; equal scores go to the earlier pixel in raster order."""
    rows, cols = np.nonzero(response >= 0)
    padded = np.pad(response, 1, constant_values=-1)
    score = response[rows, cols]
    keep = np.ones(len(rows), dtype=bool)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            other = padded[rows + 1 + dy, cols + 1 + dx]
            later = dy > 0 or (dy == 0 and dx > 0)
            keep &= (score >= other) if later else (score > other)
    return rows[keep], cols[keep]


def _detect(img: np.ndarray, threshold: int, border: int):
    response = fast_response(img, threshold)
    rows, cols = non_max_suppression(response)
    h, w = img.shape
    inside = (rows >= border) & (rows < h - border) & (cols >= border) & (cols < w - border)
    rows, cols = rows[inside], cols[inside]
    return rows, cols, response[rows, cols]


def detect_fast_arrays(img: np.ndarray, threshold: int, target_count: int, border: int = 3):
    if threshold < 1:
        raise ValueError(f"FAST threshold must be >= 1, got {threshold}")
    rows, cols, resp = _detect(img, threshold, border)
    if len(rows) < 0.5 * target_count and threshold > 1:
        log.debug("[features] %d corners at threshold %d, retrying at %d",
                  len(rows), threshold, max(1, threshold // 2))
        rows, cols, resp = _detect(img, max(1, threshold // 2), border)
    # strongest first; ties in raster order
    order = np.lexsort((cols, rows, -resp))[:target_count]
    return rows[order], cols[order], resp[order]


def detect_fast(img: np.ndarray, threshold: int, target_count: int, border: int = 3) -> list[Keypoint]:
    rows, cols, resp = detect_fast_arrays(img, threshold, target_count, border)
    return [Keypoint(float(c), float(r), float(s)) for r, c, s in zip(rows, cols, resp)]


# -- orientation and descriptor -----------------------------------------------

def _disc_offsets(radius: int) -> tuple[np.ndarray, np.ndarray]:
    dy, dx = np.mgrid[-radius:radius + 1, -radius:radius + 1]
    inside = dx**2 + dy**2 <= radius**2
    return dx[inside], dy[inside]


def _check_patch(shape, rows, cols, radius: int) -> None:
    h, w = shape
    rows, cols = np.asarray(rows), np.asarray(cols)
    if np.any((rows - radius < 0) | (rows + radius >= h) | (cols - radius < 0) | (cols + radius >= w)):
        raise PatchOutOfBounds(f"patch of radius {radius} leaves the {w}x{h} image")


def orientations(img: np.ndarray, rows: np.ndarray, cols: np.ndarray, radius: int) -> np.ndarray:
    _check_patch(img.shape, rows, cols, radius)
    dx, dy = _disc_offsets(radius)
    patch = img[rows[:, None] + dy, cols[:, None] + dx].astype(float)
    m10 = patch @ dx.astype(float)
    m01 = patch @ dy.astype(float)
    angle = np.arctan2(m01, m10)
    angle[(m10 == 0) & (m01 == 0)] = 0.0
    return np.mod(angle, 2.0 * np.pi)


def compute_orientation(img: np.ndarray, kp: Keypoint, radius: int) -> float:
    rows = np.array([int(round(kp.v))])
    cols = np.array([int(round(kp.u))])
    return float(orientations(img, rows, cols, radius)[0])


def brief_descriptors(img: np.ndarray, rows: np.ndarray, cols: np.ndarray,
                      angles: np.ndarray) -> np.ndarray:
    _check_patch(img.shape, rows, cols, brief_pattern.MAX_OFFSET)
    steered = brief_pattern.STEERED[brief_pattern.angle_bin(angles)]  # (n, 256, 4)
    r, c = rows[:, None], cols[:, None]
    first = img[r + steered[:, :, 0], c + steered[:, :, 1]]
    second = img[r + steered[:, :, 2], c + steered[:, :, 3]]
    return np.packbits(first < second, axis=1)


def compute_brief(img: np.ndarray, kp: Keypoint) -> np.ndarray:
    rows = np.array([int(round(kp.v))])
    cols = np.array([int(round(kp.u))])
    return brief_descriptors(img, rows, cols, np.array([kp.angle]))[0]


def extract_features(intensity: np.ndarray, cfg: FeatureConfig):
    """Blur, detect, orient and describe. Returns (rows, cols, response, angle, descriptors)."""
    blurred = gaussian_blur(intensity, cfg.blur_sigma)
    border = max(cfg.border, cfg.orientation_radius, brief_pattern.MAX_OFFSET)
    rows, cols, resp = detect_fast_arrays(blurred, cfg.fast_threshold, cfg.target_count, border)
    angles = orientations(blurred, rows, cols, cfg.orientation_radius)
    desc = brief_descriptors(blurred, rows, cols, angles)
    return rows, cols, resp, angles, desc


# -- matching ----------------------------------------------------------------

def hamming_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    bits_a = np.unpackbits(np.asarray(a, dtype=np.uint8).reshape(-1, DESCRIPTOR_BYTES), axis=1)
    bits_b = np.unpackbits(np.asarray(b, dtype=np.uint8).reshape(-1, DESCRIPTOR_BYTES), axis=1)
    fa, fb = bits_a.astype(np.float32), bits_b.astype(np.float32)
    dist = fa @ (1.0 - fb).T + (1.0 - fa) @ fb.T
    return np.rint(dist).astype(np.int32)


def _ratio_nearest(dist: np.ndarray, ratio: float) -> tuple[np.ndarray, np.ndarray]:
    """Nearest column per row and whether it passes the ratio test."""
    nearest = np.argmin(dist, axis=1)
    d1 = dist[np.arange(len(dist)), nearest]
    if dist.shape[1] < 2:
        return nearest, np.ones(len(dist), dtype=bool)
    d2 = np.partition(dist, 1, axis=1)[:, 1]
    return nearest, d1 < ratio * d2


def match_arrays(a: np.ndarray, b: np.ndarray, ratio: float):
    """Mutual nearest neighbours that pass the ratio test in both directions."""
    if not 0 < ratio < 1:
        raise ValueError(f"ratio must be in (0, 1), got {ratio}")
    if len(a) == 0 or len(b) == 0:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty, np.zeros(0, dtype=np.int32)
    dist = hamming_matrix(a, b)
    ab, ok_ab = _ratio_nearest(dist, ratio)
    ba, ok_ba = _ratio_nearest(dist.T, ratio)
    idx_a = np.flatnonzero(ok_ab & (ba[ab] == np.arange(len(ab))) & ok_ba[ab])
    idx_b = ab[idx_a]
    return idx_a, idx_b, dist[idx_a, idx_b]


def match_descriptors(a, b, ratio: float) -> list[Match]:
    idx_a, idx_b, ham = match_arrays(np.asarray(a, dtype=np.uint8), np.asarray(b, dtype=np.uint8), ratio)
    return [Match(int(i), int(j), int(h)) for i, j, h in zip(idx_a, idx_b, ham)]


# -- geometric verification --------------------------------------------------

def ransac_rigid_arrays(src: np.ndarray, dst: np.ndarray, cfg: MatchRansacConfig):
    """Consensus over correspondences src[i] <-> dst[i]. Returns (inlier mask, transform)."""
    n = len(src)
    if n < 3:
        raise TooFewMatches(f"need at least 3 matches, got {n}")
    rng = np.random.default_rng(cfg.seed)
    samples = rng.integers(0, n, size=(cfg.iterations, 3))
    distinct = ((samples[:, 0] != samples[:, 1]) & (samples[:, 1] != samples[:, 2])
                & (samples[:, 0] != samples[:, 2]))
    rot, trans, valid = align_svd_batch(src[samples], dst[samples])
    valid &= distinct

    best_mask, best_count = None, 0
    for k in np.flatnonzero(valid):
        residual = np.linalg.norm(src @ rot[k].T + trans[k] - dst, axis=1)
        mask = residual < cfg.inlier_dist_m
        count = int(mask.sum())
        if count > best_count:
            best_mask, best_count = mask, count
    if best_mask is None or best_count < 3:
        raise TooFewMatches("no consistent minimal sample")
    try:
        transform = align_svd(src[best_mask], dst[best_mask])
    except DegenerateGeometry as exc:
        raise TooFewMatches(f"consensus set is degenerate: {exc}") from exc
    return best_mask, transform


def ransac_rigid_filter(pts_a, pts_b, matches: list[Match],
                        cfg: MatchRansacConfig) -> tuple[list[Match], RigidTransform]:
    """Keep matches consistent with one rigid motion T, |T·a - b| < inlier_dist_m.

    Matches are put in a canonical order first so the result does not depend on
    the order they were passed in.
    """
    if len(matches) < 3:
        raise TooFewMatches(f"need at least 3 matches, got {len(matches)}")
    ordered = sorted(matches, key=lambda m: (m.idx_a, m.idx_b))
    pts_a = np.asarray(pts_a, dtype=float)
    pts_b = np.asarray(pts_b, dtype=float)
    src = pts_a[[m.idx_a for m in ordered]]
    dst = pts_b[[m.idx_b for m in ordered]]
    mask, transform = ransac_rigid_arrays(src, dst, cfg)
    return [m for m, keep in zip(ordered, mask) if keep], transform


def write_keypoints(features: FrameFeatures, path) -> None:
    lines = [f"{kp.u:.1f} {kp.v:.1f} {kp.response:.1f} {kp.angle:.6f}" for kp in features.keypoints()]
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + ("\n" if lines else ""))
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
