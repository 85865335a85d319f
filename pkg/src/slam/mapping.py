"""Local map: keyframe window, map-point registration and culling, windowed
bundle adjustment.

Observations are stored per keyframe as grid pixels (the keypoint's column
and row). The optimizer works in image-plane coordinates centred on the
optical axis, i.e. the grid pixel minus ``CameraModel.center``, which is
what ``project`` returns before rounding.

Bundle adjustment refines every window pose except the oldest (gauge) and
the horizontal position of every local map-point. Map-point heights are
LIDAR measurements and stay fixed, which also pins the scale that
reprojection residuals alone leave free.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from src.slam.dataset_io import format_pose_line
from src.slam.errors import BehindCamera, DuplicateKeyFrame, IoError, SingularNormalEquations
from src.slam.features import FrameFeatures
from src.slam.geometry import ORTHO_TOL, PoseSE3, orthonormality_error, skew_batch
from src.slam.optim import levenberg_marquardt
from src.slam.raster import CameraModel
from src.slam.schemas import MappingConfig

log = logging.getLogger(__name__)


@dataclass(eq=False)
class KeyFrame:
    id: int
    frame_index: int
    pose: PoseSE3  # sensor -> world
    features: FrameFeatures
    point_ids: np.ndarray = None  # map-point id per feature, -1 until registered

    def __post_init__(self):
        if self.point_ids is None:
            self.point_ids = np.full(len(self.features), -1, dtype=np.int64)

    @property
    def descriptors(self) -> np.ndarray:
        return self.features.descriptors

    @property
    def observations(self) -> list[tuple[int, float, float]]:
        return [(int(pid), float(u), float(v))
                for pid, (u, v) in zip(self.point_ids, self.features.uv) if pid >= 0]

    def world_points(self) -> np.ndarray:
        return self.pose.apply(self.features.points)

    def snapshot(self) -> KeyFrame:
        return replace(self, point_ids=self.point_ids.copy())


@dataclass(eq=False)
class MapPoint:
    id: int
    position: np.ndarray
    descriptor: np.ndarray
    observers: set[int] = field(default_factory=set)


@dataclass(eq=False)
class LocalMap:
    window_size: int = 5
    window: list[int] = field(default_factory=list)
    keyframes: dict[int, KeyFrame] = field(default_factory=dict)
    points: dict[int, MapPoint] = field(default_factory=dict)
    archived_keyframes: list[KeyFrame] = field(default_factory=list)
    archived_points: list[MapPoint] = field(default_factory=list)
    next_point_id: int = 0

    def __post_init__(self):
        if self.window_size < 1:
            raise ValueError("window_size must be >= 1")

    def all_points(self) -> list[MapPoint]:
        return self.archived_points + [self.points[k] for k in sorted(self.points)]


# -- registration and culling ------------------------------------------------

def _popcount_rows(xor: np.ndarray) -> np.ndarray:
    return np.unpackbits(xor, axis=1).sum(axis=1)


def _associate(world: np.ndarray, desc: np.ndarray, lmap: LocalMap,
               cfg: MappingConfig) -> np.ndarray:
    """Map-point id per feature, or -1. Greedy one-to-one on (hamming, distance)."""
    assigned = np.full(len(world), -1, dtype=np.int64)
    if not lmap.points or not len(world):
        return assigned
    ids = np.array(sorted(lmap.points), dtype=np.int64)
    positions = np.stack([lmap.points[i].position for i in ids])
    descriptors = np.stack([lmap.points[i].descriptor for i in ids])

    neighbours = cKDTree(positions).query_ball_point(world, r=cfg.distance_gate_m)
    counts = np.fromiter((len(n) for n in neighbours), dtype=np.int64, count=len(world))
    if not counts.sum():
        return assigned
    fi = np.repeat(np.arange(len(world)), counts)
    pj = np.concatenate([np.asarray(n, dtype=np.int64) for n in neighbours if n])
    ham = _popcount_rows(desc[fi] ^ descriptors[pj])
    dist = np.linalg.norm(world[fi] - positions[pj], axis=1)
    ok = ham <= cfg.hamming_gate
    fi, pj, ham, dist = fi[ok], pj[ok], ham[ok], dist[ok]

    taken = np.zeros(len(ids), dtype=bool)
    for k in np.lexsort((pj, fi, dist, ham)):
        f, p = fi[k], pj[k]
        if assigned[f] < 0 and not taken[p]:
            assigned[f] = ids[p]
            taken[p] = True
    return assigned


def register_keyframe(lmap: LocalMap, kf: KeyFrame, cfg: MappingConfig = MappingConfig()) -> LocalMap:
    """Match the keyframe's features against the local map; unmatched ones become new points."""
    archived = {k.id for k in lmap.archived_keyframes}
    if kf.id in lmap.keyframes or kf.id in archived:
        raise DuplicateKeyFrame(f"keyframe {kf.id} is already registered")

    world = kf.world_points()
    desc = kf.descriptors
    point_ids = _associate(world, desc, lmap, cfg)
    matched = int((point_ids >= 0).sum())
    for pid in point_ids[point_ids >= 0]:
        lmap.points[int(pid)].observers.add(kf.id)
    for i in np.flatnonzero(point_ids < 0):
        pid = lmap.next_point_id
        lmap.next_point_id += 1
        lmap.points[pid] = MapPoint(pid, world[i].copy(), desc[i].copy(), {kf.id})
        point_ids[i] = pid

    kf.point_ids = point_ids
    lmap.keyframes[kf.id] = kf
    lmap.window.append(kf.id)
    log.debug("[mapping] keyframe %d: %d matched, %d new map-points",
              kf.id, matched, len(point_ids) - matched)
    return lmap


def cull(lmap: LocalMap) -> LocalMap:
    """Evict keyframes beyond the newest n, then points no window keyframe sees."""
    while len(lmap.window) > lmap.window_size:
        oldest = lmap.window.pop(0)
        lmap.archived_keyframes.append(lmap.keyframes.pop(oldest).snapshot())
    in_window = set(lmap.window)
    for pid in sorted(lmap.points):
        if not lmap.points[pid].observers & in_window:
            point = lmap.points.pop(pid)
            lmap.archived_points.append(
                MapPoint(point.id, point.position.copy(), point.descriptor.copy(), set(point.observers))
            )
    return lmap


def apply_corrections(lmap: LocalMap, corrections: dict[int, PoseSE3]) -> None:
    """Move window keyframes and their points by per-keyframe corrections new∘old⁻¹."""
    for kid, corr in corrections.items():
        if kid in lmap.keyframes:
            kf = lmap.keyframes[kid]
            kf.pose = corr @ kf.pose
    for pid in sorted(lmap.points):
        point = lmap.points[pid]
        observers = [k for k in lmap.window if k in point.observers and k in corrections]
        if observers:
            point.position = corrections[observers[-1]].apply(point.position)


# -- reprojection ------------------------------------------------------------

def observation_from_pixel(col, row, cam: CameraModel) -> np.ndarray:
    cx, cy = cam.center
    return np.column_stack([np.asarray(col, dtype=float) - cx, np.asarray(row, dtype=float) - cy])


def _project_world(rot: np.ndarray, trans: np.ndarray, pts: np.ndarray, cam: CameraModel):
    """Batched projection of world points through sensor->world poses.

    rot (n,3,3), trans (n,3), pts (n,3). Returns image coords (n,2), sensor-frame
    points (n,3) and camera-frame points (n,3).
    """
    p_s = np.einsum("nji,nj->ni", rot, pts - trans)
    p_c = (p_s + cam.t) @ cam.R.T
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = cam.f * p_c[:, :2] / p_c[:, 2:3] + np.array([cam.t_u, cam.t_v])
    return uv, p_s, p_c


def _projection_jacobians(rot: np.ndarray, p_s: np.ndarray, p_c: np.ndarray, cam: CameraModel):
    """d(projection) w.r.t. rotation increment, translation increment and world point."""
    x, y, z = p_c[:, 0], p_c[:, 1], p_c[:, 2]
    j_pi = np.zeros((len(p_c), 2, 3))
    j_pi[:, 0, 0] = cam.f / z
    j_pi[:, 1, 1] = cam.f / z
    j_pi[:, 0, 2] = -cam.f * x / z**2
    j_pi[:, 1, 2] = -cam.f * y / z**2
    j_cam = j_pi @ cam.R
    j_point = np.einsum("nij,nkj->nik", j_cam, rot)  # j_cam · Rᵀ
    j_rot = j_cam @ skew_batch(p_s)
    return j_rot, -j_point, j_point


def reproject_residual(kf_pose: PoseSE3, point_w, obs, cam: CameraModel) -> np.ndarray:
    """Observed image coordinates minus the projection of a world point."""
    uv, _, p_c = _project_world(kf_pose.rotation[None], kf_pose.translation[None],
                                np.asarray(point_w, dtype=float).reshape(1, 3), cam)
    if not p_c[0, 2] > 0:
        raise BehindCamera(f"camera depth {p_c[0, 2]:.3f}")
    return np.asarray(obs, dtype=float).reshape(2) - uv[0]


@dataclass(frozen=True)
class BAJacobians:
    """Derivatives of the projection (the residual's derivatives are their negation).

    ``translation`` and ``rotation`` are taken w.r.t. the pose increment
    (R·Exp(omega), t + rho); ``point`` w.r.t. the world position.
    """

    translation: np.ndarray
    point: np.ndarray
    rotation: np.ndarray

    @property
    def A(self) -> np.ndarray:
        return self.translation

    @property
    def B(self) -> np.ndarray:
        return self.point


def ba_jacobians(kf_pose: PoseSE3, point_w, cam: CameraModel) -> BAJacobians:
    rot = kf_pose.rotation[None]
    _, p_s, p_c = _project_world(rot, kf_pose.translation[None],
                                 np.asarray(point_w, dtype=float).reshape(1, 3), cam)
    if not p_c[0, 2] > 0:
        raise BehindCamera(f"camera depth {p_c[0, 2]:.3f}")
    j_rot, j_trans, j_point = _projection_jacobians(rot, p_s, p_c, cam)
    return BAJacobians(j_trans[0], j_point[0], j_rot[0])


# -- bundle adjustment -------------------------------------------------------

@dataclass(frozen=True)
class BAResult:
    poses: dict[int, PoseSE3]
    points: dict[int, np.ndarray]
    initial_cost: float
    final_cost: float
    iterations: int = 0
    accepted_steps: int = 0
    n_observations: int = 0
    singular: bool = False


def _huber_scale(err: np.ndarray, delta: float | None) -> tuple[np.ndarray, np.ndarray]:
    """Per-observation residual scale (exact Huber cost) and Jacobian weight."""
    if delta is None:
        ones = np.ones(len(err))
        return ones, ones
    s = np.linalg.norm(err, axis=1)
    big = s > delta
    scale = np.ones(len(err))
    weight = np.ones(len(err))
    scale[big] = np.sqrt((2.0 * delta * s[big] - delta**2)) / s[big]
    weight[big] = np.sqrt(delta / s[big])
    return scale, weight


def local_bundle_adjust(lmap: LocalMap, cam: CameraModel, cfg: MappingConfig = MappingConfig(),
                        poses: dict[int, PoseSE3] | None = None) -> BAResult:
    """Levenberg-Marquardt over the window poses and local map-points.

    ``poses`` overrides the keyframe poses (e.g. a database snapshot). The map
    itself is not modified; see ``apply_ba_result``.
    """
    if not lmap.window:
        raise ValueError("bundle adjustment needs a nonempty window")
    kf_ids = list(lmap.window)
    poses = {k: (poses or {}).get(k, lmap.keyframes[k].pose) for k in kf_ids}
    pt_ids = np.array(sorted(lmap.points), dtype=np.int64)

    obs_k, obs_p, obs_uv = [], [], []
    for k, kid in enumerate(kf_ids):
        kf = lmap.keyframes[kid]
        sel = np.flatnonzero(np.isin(kf.point_ids, pt_ids))
        obs_k.append(np.full(len(sel), k))
        obs_p.append(np.searchsorted(pt_ids, kf.point_ids[sel]))
        obs_uv.append(observation_from_pixel(kf.features.uv[sel, 0], kf.features.uv[sel, 1], cam))
    obs_k, obs_p, obs_uv = np.concatenate(obs_k), np.concatenate(obs_p), np.concatenate(obs_uv)

    rot0 = np.stack([poses[k].rotation for k in kf_ids])
    trans0 = np.stack([poses[k].translation for k in kf_ids])
    pts0 = np.stack([lmap.points[p].position for p in pt_ids]) if len(pt_ids) else np.zeros((0, 3))

    _, _, p_c = _project_world(rot0[obs_k], trans0[obs_k], pts0[obs_p], cam)
    front = p_c[:, 2] > 0
    if not front.all():
        log.warning("[mapping] dropping %d observations behind the camera", int((~front).sum()))
        obs_k, obs_p, obs_uv = obs_k[front], obs_p[front], obs_uv[front]
    if not len(obs_k):
        raise ValueError("bundle adjustment needs at least one observation")

    n_obs, n_kf, n_pt = len(obs_k), len(kf_ids), len(pt_ids)
    n_pose_params = 6 * (n_kf - 1)
    free_obs = obs_k > 0
    delta = cfg.huber_delta

    def errors(state):
        rot, trans, pts = state
        uv, p_s, p_c = _project_world(rot[obs_k], trans[obs_k], pts[obs_p], cam)
        err = obs_uv - uv
        err[p_c[:, 2] <= 0] = np.inf
        return err, p_s, p_c

    def residuals(state):
        err, _, _ = errors(state)
        scale, _ = _huber_scale(err, delta)
        return (err * scale[:, None]).ravel()

    def jacobian(state):
        rot, _, _ = state
        err, p_s, p_c = errors(state)
        _, weight = _huber_scale(err, delta)
        j_rot, j_trans, j_point = _projection_jacobians(rot[obs_k], p_s, p_c, cam)
        w = -weight[:, None, None]
        rows2 = 2 * np.arange(n_obs)[:, None] + np.arange(2)[None, :]  # (n, 2)

        pose_vals = (np.concatenate([j_rot, j_trans], axis=2) * w)[free_obs]  # (m, 2, 6)
        pose_rows = np.repeat(rows2[free_obs][:, :, None], 6, axis=2)
        pose_cols = np.broadcast_to(6 * (obs_k[free_obs] - 1)[:, None, None] + np.arange(6),
                                    pose_vals.shape)
        pt_vals = (j_point[:, :, :2] * w)
        pt_rows = np.repeat(rows2[:, :, None], 2, axis=2)
        pt_cols = np.broadcast_to(n_pose_params + 2 * obs_p[:, None, None] + np.arange(2), pt_vals.shape)

        data = np.concatenate([pose_vals.ravel(), pt_vals.ravel()])
        rows = np.concatenate([pose_rows.ravel(), pt_rows.ravel()])
        cols = np.concatenate([pose_cols.ravel(), pt_cols.ravel()])
        return sparse.coo_matrix((data, (rows, cols)), shape=(2 * n_obs, n_pose_params + 2 * n_pt))

    def retract(state, step):
        rot, trans, pts = state
        rot, trans, pts = rot.copy(), trans.copy(), pts.copy()
        if n_kf > 1:
            dp = step[:n_pose_params].reshape(-1, 6)
            rot[1:] = rot[1:] @ Rotation.from_rotvec(dp[:, :3]).as_matrix()
            trans[1:] += dp[:, 3:]
        pts[:, :2] += step[n_pose_params:].reshape(-1, 2)
        return rot, trans, pts

    try:
        result = levenberg_marquardt((rot0, trans0, pts0), residuals, jacobian, retract,
                                     cfg.max_iters, cfg.lambda_init)
    except SingularNormalEquations as exc:
        log.warning("[mapping] local BA skipped: %s", exc)
        cost = float(np.sum(residuals((rot0, trans0, pts0)) ** 2))
        return BAResult(dict(poses), {int(p): pts0[i] for i, p in enumerate(pt_ids)},
                        cost, cost, n_observations=n_obs, singular=True)

    rot, trans, pts = result.state
    new_poses = {}
    for k, kid in enumerate(kf_ids):
        if k == 0:
            new_poses[kid] = poses[kid]
            continue
        pose = PoseSE3(rot[k], trans[k])
        new_poses[kid] = pose.orthonormalized() if orthonormality_error(pose.rotation) > ORTHO_TOL else pose
    log.debug("[mapping] local BA: %d obs, cost %.4g -> %.4g in %d iterations",
              n_obs, result.initial_cost, result.final_cost, result.iterations)
    return BAResult(new_poses, {int(p): pts[i].copy() for i, p in enumerate(pt_ids)},
                    result.initial_cost, result.final_cost, result.iterations,
                    result.accepted_steps, n_obs)


def apply_ba_result(lmap: LocalMap, result: BAResult) -> None:
    for kid, pose in result.poses.items():
        if kid in lmap.keyframes:
            lmap.keyframes[kid].pose = pose
    for pid, pos in result.points.items():
        if pid in lmap.points:
            lmap.points[pid].position = pos


# -- export ------------------------------------------------------------------

def write_map(points: list[MapPoint], path) -> None:
    lines = [f"{p.id} {p.position[0]:.6f} {p.position[1]:.6f} {p.position[2]:.6f}" for p in points]
    try:
        Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def write_keyframe_poses(poses: dict[int, PoseSE3], path) -> None:
    lines = [f"{kid} {format_pose_line(poses[kid])}" for kid in sorted(poses)]
    try:
        Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
