"""Run the full SLAM pipeline over one sequence.

Per frame: load -> ground removal -> rasterize -> features -> tracking.
Per keyframe: register -> cull -> local BA (mapping), then loop search and
pose-graph optimization (loop closure).

In deterministic mode every stage runs synchronously on the calling thread.
In concurrent mode mapping and loop closure each get a worker thread fed by
a bounded queue of keyframe ids; all three share the keyframe database.
"""

from __future__ import annotations

import logging
import queue
import threading
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from tqdm import tqdm

from src.pipeline.schemas import (
    EXTRA_TIMING_CATEGORIES,
    POSE_COLUMNS,
    TIMING_CATEGORIES,
    FrameRecord,
    PipelineConfig,
)
from src.slam.dataset_io import (
    AteStats,
    Trajectory,
    compute_ate,
    list_frames,
    load_groundtruth,
    load_point_cloud,
    write_trajectory,
)
from src.slam.errors import ConfigError, FormatError, InsufficientOverlap, IoError
from src.slam.geometry import PoseSE3
from src.slam.keyframe_db import KeyFrameDatabase, UpdateSource
from src.slam.loop_closure import (
    PoseGraph,
    add_loop_and_optimize,
    find_nearest_keyframes,
    format_loop_line,
    verify_candidate,
    write_loop_log,
)
from src.slam.mapping import (
    KeyFrame,
    LocalMap,
    apply_ba_result,
    apply_corrections,
    cull,
    local_bundle_adjust,
    register_keyframe,
    write_keyframe_poses,
    write_map,
)
from src.slam.preprocess import preprocess_cloud
from src.slam.raster import CameraModel, rasterize
from src.slam.tracking import (
    TrackerConfig,
    TrackState,
    coast,
    frame_features,
    keyframe_decision,
    mark_keyframe,
    rebase,
    track_features,
)

log = logging.getLogger(__name__)


class StageTimer:
    """Collects wall-clock durations per stage category."""

    def __init__(self):
        self._lock = threading.Lock()
        self._records: list[tuple[str, float]] = []

    @contextmanager
    def __call__(self, category: str):
        start = time.perf_counter()
        try:
            yield
        finally:
            elapsed_ms = 1000.0 * (time.perf_counter() - start)
            with self._lock:
                self._records.append((category, elapsed_ms))

    def table(self) -> pd.DataFrame:
        """Mean, SD and count per category; the mandatory categories are always present."""
        with self._lock:
            df = pd.DataFrame(self._records, columns=["category", "ms"])
        stats = df.groupby("category")["ms"].agg(mean_ms="mean", sd_ms=lambda s: s.std(ddof=0), count="count")
        order = list(TIMING_CATEGORIES) + [c for c in EXTRA_TIMING_CATEGORIES if c in stats.index]
        stats = stats.reindex(order).fillna({"mean_ms": 0.0, "sd_ms": 0.0, "count": 0})
        stats["count"] = stats["count"].astype(int)
        return stats.reset_index()


class MappingStage:
    def __init__(self, db: KeyFrameDatabase, cam: CameraModel, cfg: PipelineConfig, timer: StageTimer):
        self.db, self.cam, self.cfg, self.timer = db, cam, cfg.mapping, timer
        self.lmap = LocalMap(window_size=cfg.mapping.window)
        self.epoch = 0
        self.ba_runs = 0
        self.ba_dropped = 0

    def _sync(self, epoch: int) -> None:
        """Follow loop-closure corrections of window keyframes."""
        if epoch == self.epoch:
            return
        corrections = {k: self.db.pose(k) @ self.lmap.keyframes[k].pose.inverse() for k in self.lmap.window}
        apply_corrections(self.lmap, corrections)
        self.epoch = epoch

    def process(self, kf_id: int) -> None:
        epoch = self.db.loop_epoch
        self._sync(epoch)
        with self.timer("registration"):
            register_keyframe(self.lmap, self.db.get(kf_id), self.cfg)
            cull(self.lmap)
        if not self.cfg.ba_enabled or len(self.lmap.window) < 2 or not self.lmap.points:
            return
        with self.timer("local_ba"):
            result = local_bundle_adjust(self.lmap, self.cam, self.cfg)
            self.ba_runs += 1
            if result.singular:
                return
            if self.db.apply_poses(result.poses, UpdateSource.MAPPING, epoch):
                apply_ba_result(self.lmap, result)
            else:
                self.ba_dropped += 1


class LoopStage:
    def __init__(self, db: KeyFrameDatabase, cfg: PipelineConfig, timer: StageTimer):
        self.db, self.cfg, self.timer = db, cfg.loop, timer
        self.graph = PoseGraph({})
        self.log_lines: list[str] = []
        self.accepted = 0

    def process(self, kf_id: int) -> None:
        with self.timer("loop_closure"):
            _, keyframes = self.db.snapshot()
            poses = {k: kf.pose for k, kf in keyframes.items()}
            self.graph = self.graph.with_poses(poses).add_keyframe(kf_id, poses[kf_id])
            if not self.cfg.enabled:
                return
            candidates = find_nearest_keyframes(self.graph, kf_id, self.cfg.dist_threshold_m,
                                                self.cfg.exclusion)
            if not candidates:
                return
            for cand in candidates:
                result = verify_candidate(keyframes[kf_id], keyframes[cand], self.cfg)
                self.log_lines.append(format_loop_line(result))
                if not result.accepted:
                    continue
                log.info("[loop] keyframe %d closes on %d with %d inliers", kf_id, cand, result.inliers)
                self.graph = add_loop_and_optimize(self.graph, result, self.cfg)
                self.db.apply_poses(dict(self.graph.nodes), UpdateSource.LOOP)
                self.accepted += 1
                break


class _Worker(threading.Thread):
    """Consumes ids from a bounded queue until a None sentinel; forwards them downstream."""

    def __init__(self, name: str, inbox: queue.Queue, handle, outbox: queue.Queue | None = None):
        super().__init__(name=name, daemon=True)
        self.inbox, self.handle, self.outbox = inbox, handle, outbox
        self.error: BaseException | None = None

    def run(self) -> None:
        while True:
            item = self.inbox.get()
            if item is not None and self.error is None:
                try:
                    self.handle(item)
                except BaseException as exc:  # re-raised on the main thread after join
                    self.error = exc
                    log.error("[%s] stopped: %s", self.name, exc)
            if self.outbox is not None and (item is None or self.error is None):
                self.outbox.put(item)
            if item is None:
                return


@dataclass
class RunResult:
    trajectory: Trajectory
    keyframe_poses: dict[int, PoseSE3]
    frames: pd.DataFrame
    timing: pd.DataFrame
    metrics: dict
    loop_log: list[str]
    ate: AteStats | None = None
    files: dict[str, Path] = field(default_factory=dict)


def _frame_paths(cfg: PipelineConfig) -> list[Path]:
    if cfg.dataset is None:
        raise ConfigError("no dataset configured (set dataset=<sequence dir>)")
    paths = list_frames(cfg.dataset, cfg.dataset_format)
    if not paths:
        raise IoError(f"no point clouds found in {cfg.dataset}")
    if cfg.max_frames:
        paths = paths[: cfg.max_frames]
    return paths


def run_pipeline(cfg: PipelineConfig, quiet: bool = False, write: bool = True) -> RunResult:
    cfg = cfg.seeded()
    paths = _frame_paths(cfg)
    truth = load_groundtruth(cfg.groundtruth) if cfg.groundtruth else None

    print("\n" + "=" * 55)
    print("  LIDAR SLAM -- PIPELINE")
    print("=" * 55)
    print(f"  Dataset : {cfg.dataset}  ({len(paths)} frames, {cfg.mode})\n")

    wall0, cpu0 = time.perf_counter(), time.process_time()
    cam = CameraModel.from_config(cfg.camera)
    tracker_cfg = TrackerConfig(cfg.features, cfg.match, cfg.tracking)
    timer = StageTimer()
    db = KeyFrameDatabase()
    mapping = MappingStage(db, cam, cfg, timer)
    loop = LoopStage(db, cfg, timer)

    workers: list[_Worker] = []
    if cfg.mode == "concurrent":
        kf_queue: queue.Queue = queue.Queue(maxsize=cfg.queue_size)
        loop_queue: queue.Queue = queue.Queue(maxsize=cfg.queue_size)
        workers = [_Worker("mapping", kf_queue, mapping.process, loop_queue),
                   _Worker("loop", loop_queue, loop.process)]
        for w in workers:
            w.start()

        def dispatch(kf_id: int) -> None:
            kf_queue.put(kf_id)
    else:
        def dispatch(kf_id: int) -> None:
            mapping.process(kf_id)
            loop.process(kf_id)

    state = TrackState()
    anchor_id, anchor_pose = -1, PoseSE3.identity()
    offsets: list[tuple[int, int, PoseSE3]] = []
    records: list[FrameRecord] = []

    for i, path in enumerate(tqdm(paths, desc="[tracking] frames", disable=quiet)):
        if anchor_id >= 0:
            db_pose = db.pose(anchor_id)
            if db_pose is not anchor_pose:
                state = rebase(state, anchor_pose, db_pose)
                anchor_pose = db_pose

        try:
            cloud = load_point_cloud(path, cfg.dataset_format, frame_index=i)
            with timer("preprocess"):
                cloud, _ = preprocess_cloud(cloud, cfg.ground)
            with timer("image_projection"):
                frame = rasterize(cloud, cam, cfg.raster)
            with timer("feature_extraction_matching"):
                feats = frame_features(frame, cam, cfg.features)
        except (FormatError, IoError) as exc:
            log.warning("[tracking] frame %d skipped: %s", i, exc)
            state, _ = coast(state)
            offsets.append((i, anchor_id, anchor_pose.inverse() @ state.current_pose))
            records.append(FrameRecord(frame=i, anchor_keyframe=anchor_id, fallback=True, skipped=True))
            continue

        with timer("pose_estimation"):
            state, _, quality = track_features(state, feats, i, tracker_cfg)

        is_kf = quality.bootstrap or keyframe_decision(state, quality.keyframe_matches, cfg.tracking)
        if is_kf:
            kf_id = db.next_id()
            db.insert(KeyFrame(kf_id, i, state.current_pose, feats))
            state = mark_keyframe(state, kf_id)
            anchor_id, anchor_pose = kf_id, db.pose(kf_id)
            dispatch(kf_id)

        offsets.append((i, anchor_id, anchor_pose.inverse() @ state.current_pose))
        records.append(FrameRecord(
            frame=i, anchor_keyframe=anchor_id, is_keyframe=is_kf, features=quality.feature_count,
            matches=quality.matched_count, inliers=quality.inlier_count, fallback=quality.fallback_used,
        ))

    if workers:
        kf_queue.put(None)
        for w in workers:
            w.join()
        for w in workers:
            if w.error is not None:
                raise w.error

    # final trajectory: optimized keyframe pose composed with each frame's stored offset
    kf_poses = db.poses()
    trajectory = Trajectory(tuple(
        (i, (kf_poses[a] @ off) if a >= 0 else off) for i, a, off in offsets
    ))

    frames_df = pd.DataFrame([r.model_dump() for r in records])
    rows = np.array([pose.as_kitti_row() for _, pose in trajectory.poses]).reshape(-1, 12)
    frames_df = pd.concat([frames_df, pd.DataFrame(rows, columns=list(POSE_COLUMNS))], axis=1)
    timing = timer.table()

    wall = time.perf_counter() - wall0
    cpu = time.process_time() - cpu0
    archived_points = mapping.lmap.all_points()
    metrics = {
        "frames": len(paths),
        "keyframes": len(db),
        "fallback_frames": int(frames_df["fallback"].sum()),
        "skipped_frames": int(frames_df["skipped"].sum()),
        "map_points": len(archived_points),
        "local_ba_runs": mapping.ba_runs,
        "local_ba_dropped": mapping.ba_dropped,
        "loops_accepted": loop.accepted,
        "loops_rejected": len(loop.log_lines) - loop.accepted,
        "wall_time_s": round(wall, 3),
        "cpu_time_s": round(cpu, 3),
        "cpu_load_percent": round(100.0 * cpu / wall, 1) if wall > 0 else 0.0,
    }

    ate = None
    if truth is not None:
        try:
            ate = compute_ate(trajectory, truth)
            metrics.update({f"ate_{k}": v for k, v in ate.as_dict().items()})
        except InsufficientOverlap as exc:
            log.warning("[evaluate] no ATE: %s", exc)

    result = RunResult(trajectory, kf_poses, frames_df, timing, metrics, list(loop.log_lines), ate)
    if write:
        result.files = write_outputs(result, archived_points, cfg.output_dir)
    _print_summary(result, cfg)
    return result


def write_outputs(result: RunResult, map_points, output_dir) -> dict[str, Path]:
    out = Path(output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {out}: {exc}") from exc
    files = {
        "trajectory": out / "trajectory.txt",
        "keyframes": out / "keyframes.txt",
        "map": out / "map.txt",
        "metrics": out / "metrics.txt",
        "frames": out / "frames.csv",
        "timing": out / "timing.csv",
        "loops": out / "loops.txt",
    }
    write_trajectory(result.trajectory, files["trajectory"])
    write_keyframe_poses(result.keyframe_poses, files["keyframes"])
    write_map(map_points, files["map"])
    write_loop_log(result.loop_log, files["loops"])
    try:
        files["metrics"].write_text("".join(f"{k}={v}\n" for k, v in result.metrics.items()),
                                    encoding="utf-8")
        result.frames.to_csv(files["frames"], index=False)
        result.timing.to_csv(files["timing"], index=False, float_format="%.3f")
    except OSError as exc:
        raise IoError(f"cannot write outputs to {out}: {exc}") from exc
    return files


def _print_summary(result: RunResult, cfg: PipelineConfig) -> None:
    m = result.metrics
    print("\n" + "=" * 55)
    print("  PIPELINE COMPLETE")
    print("=" * 55)
    print(f"  Frames    : {m['frames']:>8,}  (fallback {m['fallback_frames']:,})")
    print(f"  Keyframes : {m['keyframes']:>8,}")
    print(f"  Map points: {m['map_points']:>8,}")
    print(f"  Loops     : {m['loops_accepted']:>8,}  accepted")
    print(f"  Took      : {m['wall_time_s']}s  (CPU load {m['cpu_load_percent']}%)")
    if result.ate is not None:
        print(f"  ATE RMSE  : {result.ate.rmse:.4f} m  (SD {result.ate.sd:.4f})")
    print(f"  Output    : {cfg.output_dir}")
    print("-" * 55)
    for row in result.timing.itertuples(index=False):
        print(f"  {row.category:<28} {row.mean_ms:>9.2f} ms  (SD {row.sd_ms:.2f}, n={row.count})")
    print("=" * 55 + "\n")


def evaluate(estimate_path, truth_path, label: str = "-", method: str = "lidar-slam") -> AteStats:
    """Compare two KITTI pose files and print the statistics in a results-table layout."""
    stats = compute_ate(load_groundtruth(estimate_path), load_groundtruth(truth_path))
    table = pd.DataFrame([{
        "Sequence": label, "Method": method,
        "RMSE": stats.rmse, "SD": stats.sd, "Mean": stats.mean,
        "Median": stats.median, "Max": stats.max,
    }])
    print("\n" + table.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
    print(f"\n  ({stats.count} frames compared)\n")
    return stats
