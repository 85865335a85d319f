"""Frame-to-frame motion from matched, back-projected features; keyframe decision."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from src.slam.alignment import align_svd, alignment_cost  # noqa: F401  (re-exported)
from src.slam.errors import NoHistory, TooFewMatches
from src.slam.features import FrameFeatures, extract_features, match_arrays, ransac_rigid_arrays
from src.slam.geometry import PoseSE3, RigidTransform
from src.slam.raster import CameraModel, RasterFrame, back_project_points, lookup_heights
from src.slam.schemas import FeatureConfig, MatchRansacConfig, TrackingConfig

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrackerConfig:
    features: FeatureConfig = FeatureConfig()
    ransac: MatchRansacConfig = MatchRansacConfig()
    tracking: TrackingConfig = TrackingConfig()


@dataclass(frozen=True, eq=False)
class TrackState:
    current_pose: PoseSE3 = PoseSE3.identity()
    last_keyframe_id: int = -1
    frames_since_keyframe: int = 0
    last_relative_motion: RigidTransform | None = None
    prev_features: FrameFeatures | None = None
    keyframe_features: FrameFeatures | None = None

    def __post_init__(self):
        if self.frames_since_keyframe < 0:
            raise ValueError("frames_since_keyframe must be >= 0")


@dataclass(frozen=True)
class TrackQuality:
    feature_count: int = 0
    matched_count: int = 0
    inlier_count: int = 0
    keyframe_matches: int = 0
    fallback_used: bool = False
    bootstrap: bool = False


def frame_features(frame: RasterFrame, cam: CameraModel, cfg: FeatureConfig) -> FrameFeatures:
    """Extract ORB features and lift each keypoint to a sensor-frame 3D point."""
    rows, cols, resp, angles, desc = extract_features(frame.intensity, cfg)
    z = lookup_heights(frame, cols, rows)
    keep = ~np.isnan(z)
    if not keep.all():
        log.debug("[tracking] frame %d: %d keypoints without height support",
                  frame.frame_index, int((~keep).sum()))
    rows, cols, resp, angles, desc, z = (a[keep] for a in (rows, cols, resp, angles, desc, z))
    points = back_project_points(cols, rows, z, cam)
    uv = np.column_stack([cols, rows]).astype(float)
    return FrameFeatures(uv, resp.astype(float), angles, desc, points)


def estimate_motion(current: FrameFeatures, previous: FrameFeatures, cfg: TrackerConfig,
                    seed: int = 0) -> tuple[RigidTransform | None, int, int]:
    """Motion mapping current-frame points into the previous frame, or None if too few inliers."""
    idx_a, idx_b, _ = match_arrays(current.descriptors, previous.descriptors, cfg.features.ratio)
    matched = len(idx_a)
    if matched < 3:
        return None, matched, 0
    ransac_cfg = cfg.ransac.model_copy(update={"seed": cfg.ransac.seed + seed})
    try:
        mask, relative = ransac_rigid_arrays(current.points[idx_a], previous.points[idx_b], ransac_cfg)
    except TooFewMatches:
        return None, matched, 0
    inliers = int(mask.sum())
    if inliers < cfg.tracking.min_inliers:
        return None, matched, inliers
    return relative, matched, inliers


def fallback_motion(state: TrackState) -> RigidTransform:
    """Constant-velocity assumption: repeat the last observed motion."""
    if state.last_relative_motion is None:
        raise NoHistory("no previous motion to extrapolate")
    return state.last_relative_motion


def count_common(features: FrameFeatures, keyframe_features: FrameFeatures | None, ratio: float) -> int:
    if keyframe_features is None:
        return 0
    return len(match_arrays(features.descriptors, keyframe_features.descriptors, ratio)[0])


def track_frame(state: TrackState, frame: RasterFrame, cam: CameraModel,
                cfg: TrackerConfig) -> tuple[TrackState, RigidTransform | None, TrackQuality]:
    feats = frame_features(frame, cam, cfg.features)
    return track_features(state, feats, frame.frame_index, cfg)


def track_features(state: TrackState, feats: FrameFeatures, frame_index: int,
                   cfg: TrackerConfig) -> tuple[TrackState, RigidTransform | None, TrackQuality]:
    if state.prev_features is None:
        new_state = replace(state, prev_features=feats, frames_since_keyframe=0)
        return new_state, None, TrackQuality(feature_count=len(feats), bootstrap=True)

    relative, matched, inliers = estimate_motion(feats, state.prev_features, cfg, seed=frame_index)
    fallback = relative is None
    if fallback:
        try:
            relative = fallback_motion(state)
        except NoHistory:
            relative = PoseSE3.identity()
        log.debug("[tracking] frame %d: %d inliers of %d matches, constant-velocity fallback",
                  frame_index, inliers, matched)

    common = count_common(feats, state.keyframe_features, cfg.features.ratio)
    new_state = replace(
        state,
        current_pose=state.current_pose @ relative,
        frames_since_keyframe=state.frames_since_keyframe + 1,
        last_relative_motion=state.last_relative_motion if fallback else relative,
        prev_features=feats,
    )
    quality = TrackQuality(len(feats), matched, inliers, common, fallback)
    return new_state, relative, quality


def keyframe_decision(state: TrackState, matches_with_last_kf: int,
                      cfg: TrackingConfig = TrackingConfig()) -> bool:
    return (state.frames_since_keyframe >= cfg.keyframe_min_frames
            and matches_with_last_kf <= cfg.keyframe_max_common)


def mark_keyframe(state: TrackState, keyframe_id: int) -> TrackState:
    return replace(state, last_keyframe_id=keyframe_id, frames_since_keyframe=0,
                   keyframe_features=state.prev_features)


def rebase(state: TrackState, old_anchor: PoseSE3, new_anchor: PoseSE3) -> TrackState:
    """Move the tracking head with a corrected keyframe pose."""
    offset = old_anchor.inverse() @ state.current_pose
    return replace(state, current_pose=new_anchor @ offset)


def coast(state: TrackState) -> tuple[TrackState, RigidTransform]:
    """Advance through a frame that produced no usable observation."""
    try:
        relative = fallback_motion(state)
    except NoHistory:
        relative = PoseSE3.identity()
    new_state = replace(state, current_pose=state.current_pose @ relative,
                        frames_since_keyframe=state.frames_since_keyframe + 1)
    return new_state, relative
