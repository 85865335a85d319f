"""Thread-safe store of every keyframe created during a run.

Tracking inserts keyframes; mapping and loop closure publish pose batches.
Readers get snapshots, so optimization never sees a half-applied batch.
Loop-closure batches take precedence: a mapping batch computed from a
snapshot older than the latest loop correction is discarded.
"""

from __future__ import annotations

import logging
import threading
from enum import Enum

from src.slam.errors import DuplicateKeyFrame
from src.slam.geometry import PoseSE3
from src.slam.mapping import KeyFrame

log = logging.getLogger(__name__)


class UpdateSource(str, Enum):
    MAPPING = "mapping"
    LOOP = "loop"


class KeyFrameDatabase:
    def __init__(self):
        self._lock = threading.RLock()
        self._keyframes: dict[int, KeyFrame] = {}
        self._loop_epoch = 0

    def __len__(self) -> int:
        with self._lock:
            return len(self._keyframes)

    @property
    def loop_epoch(self) -> int:
        with self._lock:
            return self._loop_epoch

    def next_id(self) -> int:
        with self._lock:
            return max(self._keyframes, default=-1) + 1

    def insert(self, kf: KeyFrame) -> None:
        with self._lock:
            if kf.id in self._keyframes:
                raise DuplicateKeyFrame(f"keyframe {kf.id} already in database")
            self._keyframes[kf.id] = kf.snapshot()

    def get(self, kf_id: int) -> KeyFrame:
        with self._lock:
            return self._keyframes[kf_id].snapshot()

    def pose(self, kf_id: int) -> PoseSE3:
        with self._lock:
            return self._keyframes[kf_id].pose

    def poses(self) -> dict[int, PoseSE3]:
        with self._lock:
            return {k: self._keyframes[k].pose for k in sorted(self._keyframes)}

    def snapshot(self) -> tuple[int, dict[int, KeyFrame]]:
        """Loop epoch and copies of all keyframes, taken atomically."""
        with self._lock:
            return self._loop_epoch, {k: kf.snapshot() for k, kf in sorted(self._keyframes.items())}

    def apply_poses(self, updates: dict[int, PoseSE3], source: UpdateSource,
                    epoch: int | None = None) -> bool:
        """Apply a batch of pose updates atomically. Returns False if the batch was stale."""
        with self._lock:
            if source is UpdateSource.MAPPING and epoch is not None and epoch != self._loop_epoch:
                log.debug("[keyframes] dropped %d mapping updates from epoch %d (now %d)",
                          len(updates), epoch, self._loop_epoch)
                return False
            unknown = set(updates) - set(self._keyframes)
            if unknown:
                raise KeyError(f"unknown keyframes {sorted(unknown)}")
            newest = max(updates, default=None)
            if source is UpdateSource.LOOP and newest is not None:
                # keyframes inserted after the loop snapshot follow the newest corrected one
                corr = updates[newest] @ self._keyframes[newest].pose.inverse()
                for kf_id in sorted(self._keyframes):
                    if kf_id > newest:
                        self._keyframes[kf_id].pose = corr @ self._keyframes[kf_id].pose
            for kf_id, pose in updates.items():
                self._keyframes[kf_id].pose = pose
            if source is UpdateSource.LOOP:
                self._loop_epoch += 1
            return True
