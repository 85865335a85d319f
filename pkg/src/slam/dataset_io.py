"""Point-cloud and pose-file readers, trajectory writer, absolute trajectory error."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from src.slam.errors import FormatError, InsufficientOverlap, IoError
from src.slam.geometry import PoseSE3, orthonormality_error, orthonormalize

log = logging.getLogger(__name__)

KITTI_RECORD_BYTES = 16
POINT_FORMATS = ("kitti-bin", "ascii-xyz")
ROTATION_LOAD_TOL = 1e-3


@dataclass(frozen=True, eq=False)
class PointCloud:
    """One LIDAR sweep: an (N, 4) array of x, y, z, reflectance in the sensor frame."""

    points: np.ndarray
    frame_index: int = 0
    dropped_nonfinite: int = 0

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 4)
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)
        if self.frame_index < 0:
            raise ValueError(f"frame_index must be >= 0, got {self.frame_index}")

    @classmethod
    def from_xyz(cls, xyz: np.ndarray, frame_index: int = 0) -> PointCloud:
        xyz = np.asarray(xyz, dtype=float).reshape(-1, 3)
        return cls(np.column_stack([xyz, np.zeros(len(xyz))]), frame_index)

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, mask: np.ndarray) -> PointCloud:
        return PointCloud(self.points[mask], self.frame_index)


@dataclass(frozen=True)
class Trajectory:
    poses: tuple[tuple[int, PoseSE3], ...] = ()

    def __post_init__(self):
        poses = tuple((int(i), p) for i, p in self.poses)
        indices = [i for i, _ in poses]
        if any(b <= a for a, b in zip(indices, indices[1:])):
            raise ValueError("trajectory frame indices must be strictly increasing")
        object.__setattr__(self, "poses", poses)

    def __len__(self) -> int:
        return len(self.poses)

    def as_dict(self) -> dict[int, PoseSE3]:
        return dict(self.poses)

    def positions(self) -> np.ndarray:
        return np.array([p.translation for _, p in self.poses]).reshape(-1, 3)


@dataclass(frozen=True)
class AteStats:
    rmse: float
    sd: float
    mean: float
    median: float
    max: float = 0.0
    count: int = 0

    def as_dict(self) -> dict:
        return {
            "rmse": self.rmse,
            "sd": self.sd,
            "mean": self.mean,
            "median": self.median,
            "max": self.max,
            "count": self.count,
        }


def _read_bytes(path: Path) -> bytes:
    try:
        return path.read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc.strerror or exc}") from exc


def _read_lines(path: Path) -> list[str]:
    try:
        return _read_bytes(path).decode("utf-8").splitlines()
    except UnicodeDecodeError as exc:
        raise FormatError(f"{path} is not a text file") from exc


def _parse_ascii_xyz(path: Path) -> np.ndarray:
    rows = []
    for lineno, line in enumerate(_read_lines(path)):
        fields = line.split()
        if not fields:
            continue
        if len(fields) not in (3, 4):
            raise FormatError(f"expected 'x y z', got {len(fields)} fields", line=lineno)
        try:
            values = [float(v) for v in fields]
        except ValueError as exc:
            raise FormatError(f"non-numeric value in {line!r}", line=lineno) from exc
        rows.append(values if len(values) == 4 else values + [0.0])
    return np.array(rows, dtype=float).reshape(-1, 4)


def load_point_cloud(path, fmt: str = "kitti-bin", frame_index: int = 0) -> PointCloud:
    """Read one sweep. Non-finite records are dropped and counted."""
    path = Path(path)
    if fmt == "kitti-bin":
        raw = _read_bytes(path)
        if len(raw) % KITTI_RECORD_BYTES:
            raise FormatError(
                f"{path}: {len(raw)} bytes is not a multiple of the "
                f"{KITTI_RECORD_BYTES}-byte point record"
            )
        points = np.frombuffer(raw, dtype="<f4").reshape(-1, 4).astype(float)
    elif fmt == "ascii-xyz":
        points = _parse_ascii_xyz(path)
    else:
        raise FormatError(f"unknown point-cloud format {fmt!r}, expected one of {POINT_FORMATS}")

    finite = np.isfinite(points).all(axis=1)
    dropped = int((~finite).sum())
    if dropped:
        log.debug("[dataset] %s: dropped %d non-finite points", path.name, dropped)
    return PointCloud(points[finite], frame_index, dropped_nonfinite=dropped)


def parse_pose_line(line: str, lineno: int) -> PoseSE3:
    fields = line.split()
    if len(fields) != 12:
        raise FormatError(f"expected 12 numbers, got {len(fields)}", line=lineno)
    try:
        values = np.array([float(v) for v in fields])
    except ValueError as exc:
        raise FormatError(f"non-numeric value in {line.strip()!r}", line=lineno) from exc
    if not np.isfinite(values).all():
        raise FormatError("non-finite pose entry", line=lineno)
    mat = values.reshape(3, 4)
    rot = mat[:, :3]
    err = orthonormality_error(rot)
    if err > ROTATION_LOAD_TOL or np.linalg.det(rot) <= 0:
        raise FormatError(f"rotation block is not a rotation (error {err:.2e})", line=lineno)
    if err > 1e-12:
        rot = orthonormalize(rot)
    return PoseSE3(rot, mat[:, 3])


def load_groundtruth(path) -> Trajectory:
    """KITTI pose file: one row-major 3x4 [R|t] per line, frame index = line number."""
    path = Path(path)
    lines = _read_lines(path)
    while lines and not lines[-1].strip():
        lines.pop()
    return Trajectory(tuple((i, parse_pose_line(line, i)) for i, line in enumerate(lines)))


def format_pose_line(pose: PoseSE3) -> str:
    return " ".join(f"{v:.17g}" for v in pose.as_kitti_row())


def write_trajectory(traj: Trajectory, path) -> None:
    """Write poses in frame order; loading back assigns indices 0..n-1."""
    if not len(traj):
        raise FormatError("refusing to write an empty trajectory")
    path = Path(path)
    text = "\n".join(format_pose_line(p) for _, p in traj.poses) + "\n"
    try:
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc.strerror or exc}") from exc


def align_rigid(source: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares rotation and translation (no scale) taking source onto target.

    Unlike tracking's alignment this never rejects collinear inputs: a straight
    trajectory still has a well-defined minimal residual.
    """
    mu_s = source.mean(axis=0)
    mu_t = target.mean(axis=0)
    cov = (source - mu_s).T @ (target - mu_t)
    u, _, vt = np.linalg.svd(cov)
    d = np.sign(np.linalg.det(vt.T @ u.T)) or 1.0
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return rot, mu_t - rot @ mu_s


def ate_residuals(estimate: Trajectory, truth: Trajectory) -> tuple[np.ndarray, np.ndarray]:
    est, gt = estimate.as_dict(), truth.as_dict()
    common = sorted(set(est) & set(gt))
    if len(common) < 3:
        raise InsufficientOverlap(f"only {len(common)} common frames, need at least 3")
    src = np.array([est[i].translation for i in common])
    dst = np.array([gt[i].translation for i in common])
    rot, trans = align_rigid(src, dst)
    residuals = np.linalg.norm(src @ rot.T + trans - dst, axis=1)
    return np.array(common), residuals


def compute_ate(estimate: Trajectory, truth: Trajectory) -> AteStats:
    _, residuals = ate_residuals(estimate, truth)
    return AteStats(
        rmse=float(np.sqrt(np.mean(residuals**2))),
        sd=float(np.std(residuals)),
        mean=float(np.mean(residuals)),
        median=float(np.median(residuals)),
        max=float(np.max(residuals)),
        count=int(len(residuals)),
    )


def list_frames(sequence_dir, fmt: str = "kitti-bin") -> list[Path]:
    """Sorted point-cloud files of a sequence directory (``velodyne/`` if present)."""
    root = Path(sequence_dir)
    if not root.is_dir():
        raise IoError(f"dataset directory not found: {root}")
    if (root / "velodyne").is_dir():
        root = root / "velodyne"
    suffix = ".bin" if fmt == "kitti-bin" else ".txt"
    return sorted(p for p in root.iterdir() if p.suffix == suffix)
