"""Synthetic sequence generator: boxes and walls on a ground plane, scanned
along a closed rounded-square drive.

World geometry is sampled once as a dense point set (box tops with a
height texture, box sides, ground). Each frame keeps the points within the
sensor range, moves them into the sensor frame and adds range noise. The
output directory looks like a KITTI sequence: ``velodyne/NNNNNN.bin``,
``poses.txt`` (sensor poses relative to the first frame) and a ``slam.env``
with settings suited to the generated world.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from tqdm import tqdm

from src.slam.dataset_io import Trajectory, write_trajectory
from src.slam.errors import IoError
from src.slam.geometry import PoseSE3, rot_z

log = logging.getLogger(__name__)

GROUND_Z = -1.7  # sensor mounting height above the road


@dataclass(frozen=True)
class SynthConfig:
    frames: int = 200
    side_m: float = 80.0
    corner_radius_m: float = 10.0
    n_boxes: int = 60
    n_walls: int = 8
    sensor_range_m: float = 30.0
    corridor_m: float = 4.0
    point_spacing_m: float = 0.1
    ground_spacing_m: float = 0.25
    noise_m: float = 0.01
    ground_noise_m: float = 0.02
    seed: int = 0


# -- trajectory --------------------------------------------------------------

class RoundedSquare:
    """Closed path: four straights joined by quarter circles, driven counter-clockwise.

    Arc length 0 is the start of the bottom straight at (r, 0), heading +x.
    """

    def __init__(self, side: float, radius: float):
        if not 0 < radius < side / 2:
            raise ValueError("corner radius must be positive and below half the side")
        self.side, self.radius = side, radius
        self.straight = side - 2 * radius
        self.arc = 0.5 * np.pi * radius
        self.length = 4 * (self.straight + self.arc)

    def pose(self, s: float) -> tuple[np.ndarray, float]:
        """Position (x, y) and heading at arc length s."""
        s = s % self.length
        edge = int(s // (self.straight + self.arc))
        local = s - edge * (self.straight + self.arc)
        heading0 = edge * 0.5 * np.pi
        r, side = self.radius, self.side
        starts = [np.array([r, 0.0]), np.array([side, r]), np.array([side - r, side]), np.array([0.0, side - r])]
        direction = np.array([np.cos(heading0), np.sin(heading0)])
        normal = np.array([-direction[1], direction[0]])
        if local <= self.straight:
            return starts[edge] + local * direction, heading0
        angle = (local - self.straight) / r
        end = starts[edge] + self.straight * direction
        center = end + r * normal
        pos = center - r * normal * np.cos(angle) + r * direction * np.sin(angle)
        return pos, heading0 + angle

    def dense(self, step: float = 0.5) -> np.ndarray:
        return np.array([self.pose(s)[0] for s in np.arange(0.0, self.length, step)])


# -- world -------------------------------------------------------------------

@dataclass(frozen=True)
class Box:
    center: tuple[float, float]
    size: tuple[float, float]
    yaw: float
    height: float


def _place_boxes(path: RoundedSquare, cfg: SynthConfig, rng: np.random.Generator) -> list[Box]:
    track = path.dense()
    boxes: list[Box] = []
    wanted = cfg.n_boxes + cfg.n_walls
    attempts = 0
    while len(boxes) < wanted and attempts < 50 * wanted:
        attempts += 1
        wall = len(boxes) >= cfg.n_boxes
        s = rng.uniform(0.0, path.length)
        pos, heading = path.pose(s)
        side = rng.choice([-1.0, 1.0])
        normal = np.array([-np.sin(heading), np.cos(heading)])
        if wall:
            size = (rng.uniform(8.0, 14.0), rng.uniform(0.4, 0.8))
            yaw = heading + rng.normal(0.0, 0.1)
            offset = rng.uniform(12.0, 20.0)
            height = rng.uniform(2.5, 4.0)
        else:
            size = (rng.uniform(2.0, 6.0), rng.uniform(2.0, 6.0))
            yaw = rng.uniform(0.0, np.pi)
            offset = rng.uniform(cfg.corridor_m + 2.0, 18.0)
            height = rng.uniform(1.0, 5.0)
        center = pos + side * offset * normal
        reach = 0.5 * np.hypot(*size)
        if np.min(np.linalg.norm(track - center, axis=1)) < cfg.corridor_m + reach:
            continue
        if any(np.hypot(*(center - np.array(b.center))) < reach + 0.5 * np.hypot(*b.size) + 1.0 for b in boxes):
            continue
        boxes.append(Box((float(center[0]), float(center[1])), (float(size[0]), float(size[1])),
                         float(yaw), float(height)))
    if len(boxes) < wanted:
        log.warning("[synth] placed %d of %d landmarks", len(boxes), wanted)
    return boxes


def box_points(box: Box, spacing: float, rng: np.random.Generator) -> np.ndarray:
    length, width = box.size
    xs = np.arange(-length / 2, length / 2 + 1e-9, spacing)
    ys = np.arange(-width / 2, width / 2 + 1e-9, spacing)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")

    # roof texture: 0.5 m cells with their own height
    cells_x = int(np.ceil(length / 0.5)) + 1
    cells_y = int(np.ceil(width / 0.5)) + 1
    texture = rng.uniform(0.0, 1.5, size=(cells_x, cells_y))
    ix = ((gx + length / 2) / 0.5).astype(int)
    iy = ((gy + width / 2) / 0.5).astype(int)
    top_z = GROUND_Z + box.height + texture[ix, iy]
    top = np.column_stack([gx.ravel(), gy.ravel(), top_z.ravel()])

    zs = np.arange(GROUND_Z, GROUND_Z + box.height, 2 * spacing)
    sides = []
    for x_edge in (-length / 2, length / 2):
        yy, zz = np.meshgrid(ys, zs, indexing="ij")
        sides.append(np.column_stack([np.full(yy.size, x_edge), yy.ravel(), zz.ravel()]))
    for y_edge in (-width / 2, width / 2):
        xx, zz = np.meshgrid(xs, zs, indexing="ij")
        sides.append(np.column_stack([xx.ravel(), np.full(xx.size, y_edge), zz.ravel()]))
    local = np.vstack([top] + sides)
    world = local.copy()
    world[:, :2] = local[:, :2] @ rot_z(box.yaw)[:2, :2].T + np.array(box.center)
    return world


def build_world(path: RoundedSquare, cfg: SynthConfig) -> tuple[np.ndarray, np.ndarray, list[Box]]:
    """Returns (object points, ground points, boxes) in world coordinates."""
    rng = np.random.default_rng(cfg.seed)
    boxes = _place_boxes(path, cfg, rng)
    objects = np.vstack([box_points(b, cfg.point_spacing_m, rng) for b in boxes])

    margin = cfg.sensor_range_m + 5.0
    gx = np.arange(-margin, cfg.side_m + margin, cfg.ground_spacing_m)
    xx, yy = np.meshgrid(gx, gx, indexing="ij")
    ground = np.column_stack([xx.ravel(), yy.ravel(), np.full(xx.size, GROUND_Z)])
    return objects, ground, boxes


def scripted_poses(path: RoundedSquare, frames: int) -> list[PoseSE3]:
    poses = []
    for i in range(frames):
        pos, heading = path.pose(i * path.length / frames)
        poses.append(PoseSE3(rot_z(heading), np.array([pos[0], pos[1], 0.0])))
    return poses


def scan(objects: np.ndarray, ground: np.ndarray, pose: PoseSE3, cfg: SynthConfig,
         rng: np.random.Generator) -> np.ndarray:
    """Sensor-frame (N, 4) float32 cloud for one frame."""
    center = pose.translation[:2]
    chunks = []
    for pts, sigma in ((objects, cfg.noise_m), (ground, cfg.ground_noise_m)):
        near = np.linalg.norm(pts[:, :2] - center, axis=1) <= cfg.sensor_range_m
        local = pose.inverse().apply(pts[near])
        local[:, 2] += rng.normal(0.0, sigma, size=len(local))
        chunks.append(local)
    xyz = np.vstack(chunks)
    out = np.zeros((len(xyz), 4), dtype=np.float32)
    out[:, :3] = xyz
    return out


SLAM_ENV = """\
# settings for the generated world
dataset_format=kitti-bin
loop.exclusion=10
loop.dist_threshold_m=10
loop.min_inliers=30
mapping.window=5
"""


def generate(out_dir, cfg: SynthConfig = SynthConfig(), quiet: bool = False) -> dict:
    out_dir = Path(out_dir)
    velodyne = out_dir / "velodyne"
    try:
        velodyne.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {velodyne}: {exc}") from exc

    print(f"[synth] Building world ({cfg.n_boxes} boxes, {cfg.n_walls} walls)...")
    path = RoundedSquare(cfg.side_m, cfg.corner_radius_m)
    objects, ground, boxes = build_world(path, cfg)
    poses = scripted_poses(path, cfg.frames)
    origin_inv = poses[0].inverse()

    for i, pose in enumerate(tqdm(poses, desc="[synth] frames", disable=quiet)):
        cloud = scan(objects, ground, pose, cfg, np.random.default_rng([cfg.seed, i]))
        try:
            cloud.tofile(velodyne / f"{i:06d}.bin")
        except OSError as exc:
            raise IoError(f"cannot write frame {i}: {exc}") from exc

    write_trajectory(Trajectory(tuple((i, origin_inv @ p) for i, p in enumerate(poses))),
                     out_dir / "poses.txt")
    env = SLAM_ENV + f"dataset={out_dir.resolve()}\ngroundtruth={(out_dir / 'poses.txt').resolve()}\n"
    (out_dir / "slam.env").write_text(env, encoding="utf-8")

    print(f"[synth] Done -- {cfg.frames} frames, {len(boxes)} landmarks, "
          f"path {path.length:.1f} m -> {out_dir}")
    return {"frames": cfg.frames, "landmarks": len(boxes), "path_length_m": path.length,
            "dir": str(out_dir)}
