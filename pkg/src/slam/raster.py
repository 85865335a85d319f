"""Virtual pinhole camera: point cloud -> height image, and pixel -> 3D point.

The camera looks along the sensor z axis. Each point is moved into camera
coordinates with the extrinsics (P_c = R·(P_l + t)), projected with the
intrinsics, and dropped into the nearest pixel. When several points share a
pixel the highest one wins. Its exact z is kept in a float height buffer next
to the 8-bit intensity plane the feature detector consumes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.spatial.transform import Rotation

from src.slam.dataset_io import PointCloud
from src.slam.errors import BehindCamera, EmptyPixel, IoError
from src.slam.geometry import orthonormality_error
from src.slam.schemas import CameraConfig, RasterConfig

log = logging.getLogger(__name__)

EMPTY = 0


@dataclass(frozen=True, eq=False)
class CameraModel:
    f: float
    t_u: float
    t_v: float
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        rot = np.array(self.R, dtype=float).reshape(3, 3)
        trans = np.array(self.t, dtype=float).reshape(3)
        if orthonormality_error(rot) > 1e-9 or np.linalg.det(rot) <= 0:
            raise ValueError("camera rotation must be a proper rotation matrix")
        if self.f <= 0 or self.width <= 0 or self.height <= 0:
            raise ValueError("focal length and image size must be positive")
        rot.flags.writeable = False
        trans.flags.writeable = False
        object.__setattr__(self, "R", rot)
        object.__setattr__(self, "t", trans)

    @classmethod
    def from_config(cls, cfg: CameraConfig) -> CameraModel:
        rot = Rotation.from_euler("xyz", cfg.rotation_deg, degrees=True).as_matrix()
        return cls(cfg.f, cfg.t_u, cfg.t_v, rot, np.array(cfg.translation), cfg.width, cfg.height)

    @property
    def center(self) -> tuple[int, int]:
        """Pixel (col, row) that the optical center (0, 0) is mapped onto."""
        return self.width // 2, self.height // 2


@dataclass(frozen=True, eq=False)
class RasterFrame:
    """Height image. ``intensity`` is 0 and ``height_buffer`` NaN where no point landed."""

    intensity: np.ndarray
    height_buffer: np.ndarray
    frame_index: int = 0
    skipped: int = 0

    def __post_init__(self):
        self.intensity.flags.writeable = False
        self.height_buffer.flags.writeable = False

    @property
    def occupied(self) -> np.ndarray:
        return ~np.isnan(self.height_buffer)


def lidar_to_camera(p: np.ndarray, cam: CameraModel) -> np.ndarray:
    """P_c = R·(p + t); accepts a single point or an (N, 3) array."""
    return (np.asarray(p, dtype=float) + cam.t) @ cam.R.T


def project_points(p_l: np.ndarray, cam: CameraModel) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized projection. Returns (u, v, depth); u and v are NaN where depth <= 0."""
    pc = lidar_to_camera(np.atleast_2d(p_l), cam)
    depth = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        front = depth > 0
        u = np.where(front, cam.f * pc[:, 0] / depth + cam.t_u, np.nan)
        v = np.where(front, cam.f * pc[:, 1] / depth + cam.t_v, np.nan)
    return u, v, depth


def project(p_l: np.ndarray, cam: CameraModel) -> tuple[float, float, float]:
    u, v, depth = project_points(p_l, cam)
    if not depth[0] > 0:
        raise BehindCamera(f"point {np.asarray(p_l).tolist()} has camera depth {depth[0]:.3f}")
    return float(u[0]), float(v[0]), float(depth[0])


def quantize_height(z: np.ndarray, zmap: RasterConfig) -> np.ndarray:
    scaled = np.floor(255.0 * (np.asarray(z) - zmap.z_min) / (zmap.z_max - zmap.z_min) + 0.5)
    return np.clip(scaled, 1, 255).astype(np.uint8)


def to_pixel(u: np.ndarray, v: np.ndarray, cam: CameraModel) -> tuple[np.ndarray, np.ndarray]:
    cx, cy = cam.center
    return np.floor(u + 0.5).astype(np.int64) + cx, np.floor(v + 0.5).astype(np.int64) + cy


def rasterize(cloud: PointCloud, cam: CameraModel, zmap: RasterConfig) -> RasterFrame:
    xyz = cloud.xyz
    intensity = np.zeros((cam.height, cam.width), dtype=np.uint8)
    height = np.full((cam.height, cam.width), np.nan)
    if not len(xyz):
        return RasterFrame(intensity, height, cloud.frame_index)

    u, v, depth = project_points(xyz, cam)
    front = depth > 0
    cols = np.full(len(xyz), -1, dtype=np.int64)
    rows = np.full(len(xyz), -1, dtype=np.int64)
    cols[front], rows[front] = to_pixel(u[front], v[front], cam)
    inside = front & (cols >= 0) & (cols < cam.width) & (rows >= 0) & (rows < cam.height)

    idx = np.flatnonzero(inside)
    pix = rows[idx] * cam.width + cols[idx]
    z = xyz[idx, 2]
    # per pixel: highest z first, ties keep the first-seen point
    order = np.lexsort((idx, -z, pix))
    pix_sorted = pix[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = pix_sorted[1:] != pix_sorted[:-1]
    winners = order[first]

    height.flat[pix[winners]] = z[winners]
    intensity.flat[pix[winners]] = quantize_height(z[winners], zmap)

    skipped = int(len(xyz) - len(idx))
    if skipped:
        log.debug("[raster] frame %d: %d points outside the image or behind the camera",
                  cloud.frame_index, skipped)
    return RasterFrame(intensity, height, cloud.frame_index, skipped)


def back_project_points(cols, rows, z, cam: CameraModel) -> np.ndarray:
    """Invert projection for pixels whose height z is known. Returns (N, 3)."""
    cx, cy = cam.center
    cols, rows, z = (np.atleast_1d(np.asarray(a, dtype=float)) for a in (cols, rows, z))
    a = (cols - cx - cam.t_u) / cam.f
    b = (rows - cy - cam.t_v) / cam.f
    ray = np.column_stack([a, b, np.ones_like(a)]) @ cam.R  # R^T applied row-wise
    depth = (z + cam.t[2]) / ray[:, 2]
    pts = depth[:, None] * ray - cam.t
    pts[:, 2] = z
    return pts


def back_project(u, v, frame: RasterFrame, cam: CameraModel) -> np.ndarray:
    """3D sensor-frame point for grid pixel (u=col, v=row)."""
    col, row = int(round(u)), int(round(v))
    if not (0 <= col < cam.width and 0 <= row < cam.height):
        raise EmptyPixel(f"pixel ({col}, {row}) is outside the image")
    z = frame.height_buffer[row, col]
    if np.isnan(z):
        raise EmptyPixel(f"pixel ({col}, {row}) is empty")
    return back_project_points(col, row, z, cam)[0]


def lookup_heights(frame: RasterFrame, cols: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """Height at each pixel, falling back to the highest occupied 8-neighbour.

    Corners found on the blurred image can sit one pixel outside an object;
    those borrow the neighbouring height. NaN where the whole 3x3 block is empty.
    """
    hb = frame.height_buffer
    padded = np.pad(hb, 1, constant_values=np.nan)
    cols = np.asarray(cols, dtype=np.int64)
    rows = np.asarray(rows, dtype=np.int64)
    z = hb[rows, cols].copy()
    missing = np.isnan(z)
    if missing.any():
        r, c = rows[missing] + 1, cols[missing] + 1
        block = np.stack([padded[r + dr, c + dc] for dr in (-1, 0, 1) for dc in (-1, 0, 1)])
        best = np.where(np.isnan(block), -np.inf, block).max(axis=0)
        z[missing] = np.where(np.isinf(best), np.nan, best)
    return z


def write_pgm(frame: RasterFrame, path) -> None:
    """Binary (P5) PGM dump of the intensity plane."""
    try:
        Image.fromarray(np.ascontiguousarray(frame.intensity)).save(Path(path), format="PPM")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
