import threading

import numpy as np
import pytest

from src.slam.errors import DuplicateKeyFrame
from src.slam.features import FrameFeatures
from src.slam.geometry import PoseSE3, rot_z
from src.slam.keyframe_db import KeyFrameDatabase, UpdateSource
from src.slam.mapping import KeyFrame


def _db(n: int) -> KeyFrameDatabase:
    db = KeyFrameDatabase()
    for k in range(n):
        db.insert(KeyFrame(k, 10 * k, PoseSE3.from_translation([5.0 * k, 0, 0]), FrameFeatures.empty()))
    return db


class TestKeyFrameDatabase:
    def test_insert_and_next_id(self):
        db = _db(3)
        assert len(db) == 3
        assert list(db.poses()) == [0, 1, 2]
        assert db.next_id() == 3

    def test_duplicate_insert(self):
        db = _db(1)
        with pytest.raises(DuplicateKeyFrame):
            db.insert(KeyFrame(0, 0, PoseSE3.identity(), FrameFeatures.empty()))

    def test_reads_are_snapshots(self):
        db = _db(2)
        kf = db.get(1)
        kf.pose = PoseSE3.identity()
        kf.point_ids[:] = 5
        assert np.allclose(db.pose(1).translation, [5, 0, 0])

    def test_mapping_update(self):
        db = _db(3)
        new = PoseSE3.from_translation([5.5, 0, 0])
        assert db.apply_poses({1: new}, UpdateSource.MAPPING, epoch=db.loop_epoch)
        assert db.pose(1) is new
        assert db.loop_epoch == 0

    def test_stale_mapping_batch_is_dropped(self):
        db = _db(3)
        epoch, _ = db.snapshot()
        loop_pose = PoseSE3.from_translation([4.0, 1.0, 0])
        db.apply_poses({1: loop_pose}, UpdateSource.LOOP)
        assert db.loop_epoch == epoch + 1
        assert not db.apply_poses({1: PoseSE3.identity()}, UpdateSource.MAPPING, epoch=epoch)
        assert db.pose(1) is loop_pose

    def test_loop_correction_carries_newer_keyframes(self):
        db = _db(4)
        corrected = PoseSE3(rot_z(np.pi / 2), [5.0, 0.0, 0.0])
        db.apply_poses({0: db.pose(0), 1: corrected}, UpdateSource.LOOP)
        # keyframe 2 sat 5 m ahead of keyframe 1; it keeps that offset in the corrected frame
        assert np.allclose(db.pose(2).translation, [5.0, 5.0, 0.0])
        assert np.allclose(db.pose(3).translation, [5.0, 10.0, 0.0])
        assert np.allclose(db.pose(0).translation, [0.0, 0.0, 0.0])

    def test_unknown_keyframe(self):
        with pytest.raises(KeyError):
            _db(1).apply_poses({4: PoseSE3.identity()}, UpdateSource.MAPPING)

    def test_concurrent_writers_keep_batches_whole(self):
        db = _db(6)
        db.apply_poses({k: PoseSE3.from_translation([-1.0, k, 0]) for k in range(6)}, UpdateSource.MAPPING)
        errors, torn = [], []

        def writer(offset: float):
            try:
                for _ in range(200):
                    db.apply_poses({k: PoseSE3.from_translation([offset, k, 0]) for k in range(6)},
                                   UpdateSource.MAPPING)
            except Exception as exc:  # pragma: no cover
                errors.append(exc)

        def reader():
            for _ in range(200):
                _, snap = db.snapshot()
                if len({kf.pose.translation[0] for kf in snap.values()}) != 1:
                    torn.append(snap)

        threads = [threading.Thread(target=writer, args=(float(i),)) for i in range(3)]
        threads.append(threading.Thread(target=reader))
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert not errors
        assert not torn
