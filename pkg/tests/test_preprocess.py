import numpy as np
import pytest

from src.slam.dataset_io import PointCloud
from src.slam.errors import DegenerateCloud, NoGround
from src.slam.preprocess import PlaneModel, fit_ground_plane, preprocess_cloud, remove_ground
from src.slam.schemas import RansacConfig
from tests.conftest import ground_grid


def _angle_deg(a, b) -> float:
    return float(np.degrees(np.arccos(np.clip(abs(np.dot(a, b)), -1.0, 1.0))))


class TestFitGroundPlane:
    def test_flat_plane_at_origin(self, rng):
        xyz = np.column_stack([rng.uniform(-5, 5, 100), rng.uniform(-5, 5, 100), np.zeros(100)])
        # hypotheses are drawn from points below the sensor; z = 0 falls back to all points
        plane = fit_ground_plane(PointCloud.from_xyz(xyz), RansacConfig())
        assert np.allclose(plane.normal, [0, 0, 1], atol=1e-9)
        assert plane.d == pytest.approx(0.0, abs=1e-9)

    def test_road_plane_with_outliers(self, rng):
        ground = np.column_stack([rng.uniform(-20, 20, 1000), rng.uniform(-20, 20, 1000), np.full(1000, -1.7)])
        outliers = rng.uniform([-20, -20, -1.0], [20, 20, 3.0], size=(100, 3))
        plane = fit_ground_plane(PointCloud.from_xyz(np.vstack([ground, outliers])), RansacConfig())
        assert _angle_deg(plane.normal, [0, 0, 1]) <= 0.5
        assert plane.d == pytest.approx(1.7, abs=0.02)

    def test_normal_points_up(self, rng):
        xyz = np.column_stack([rng.uniform(-5, 5, 50), rng.uniform(-5, 5, 50), np.full(50, -1.0)])
        assert fit_ground_plane(PointCloud.from_xyz(xyz), RansacConfig()).normal[2] > 0

    def test_two_points_are_degenerate(self):
        with pytest.raises(DegenerateCloud):
            fit_ground_plane(PointCloud.from_xyz([[0, 0, 0], [1, 1, 1]]), RansacConfig())

    def test_collinear_points_are_degenerate(self):
        xyz = np.column_stack([np.arange(10.0), np.zeros(10), np.zeros(10)])
        with pytest.raises(DegenerateCloud):
            fit_ground_plane(PointCloud.from_xyz(xyz), RansacConfig())

    def test_scattered_cloud_has_no_ground(self, rng):
        xyz = rng.uniform(0.0, 20.0, size=(2000, 3))
        with pytest.raises(NoGround):
            fit_ground_plane(PointCloud.from_xyz(xyz), RansacConfig())

    def test_seeded_fit_is_reproducible(self, rng):
        xyz = np.vstack([ground_grid(10.0, 0.5) + rng.normal(0, 0.02, size=(1600, 3)) * [0, 0, 1],
                         rng.uniform([-10, -10, 0], [10, 10, 3], size=(300, 3))])
        cloud = PointCloud.from_xyz(xyz)
        a = fit_ground_plane(cloud, RansacConfig(seed=5))
        b = fit_ground_plane(cloud, RansacConfig(seed=5))
        assert np.array_equal(a.normal, b.normal) and a.d == b.d


class TestRemoveGround:
    def test_everything_on_plane_is_removed(self, rng):
        xyz = np.column_stack([rng.uniform(-5, 5, 30), rng.uniform(-5, 5, 30), np.full(30, -1.7)])
        plane = PlaneModel.canonical(np.array([0, 0, 1.0]), 1.7)
        assert len(remove_ground(PointCloud.from_xyz(xyz), plane, 0.15)) == 0

    def test_nothing_near_plane_is_unchanged(self, rng):
        xyz = rng.uniform([-5, -5, 0], [5, 5, 3], size=(40, 3))
        plane = PlaneModel.canonical(np.array([0, 0, 1.0]), 1.7)
        out = remove_ground(PointCloud.from_xyz(xyz), plane, 0.15)
        assert np.array_equal(out.xyz, xyz)

    def test_points_on_boxes_survive(self, rng):
        ground = ground_grid(20.0, 0.5)
        boxes = np.vstack([
            rng.uniform([2, 2, -1.2], [4, 4, 1.0], size=(200, 3)),
            rng.uniform([-6, 1, -1.2], [-3, 5, 2.0], size=(200, 3)),
        ])
        cloud = PointCloud.from_xyz(np.vstack([ground, boxes]))
        stripped, plane = preprocess_cloud(cloud, RansacConfig())
        assert plane is not None
        assert len(stripped) == len(boxes)
        assert np.array_equal(stripped.xyz, boxes)


class TestPreprocess:
    def test_disabled_passes_through(self, scene_cloud):
        out, plane = preprocess_cloud(scene_cloud, RansacConfig(enabled=False))
        assert out is scene_cloud and plane is None

    def test_no_ground_passes_through(self, rng):
        cloud = PointCloud.from_xyz(rng.uniform(0.0, 20.0, size=(2000, 3)))
        out, plane = preprocess_cloud(cloud, RansacConfig())
        assert plane is None
        assert np.array_equal(out.xyz, cloud.xyz)

    def test_noisy_road_over_many_seeds(self):
        good_normal = good_obstacles = 0
        for seed in range(100):
            rng = np.random.default_rng(seed)
            ground = ground_grid(20.0, 0.8)
            ground[:, 2] += rng.normal(0.0, 0.02, size=len(ground))
            obstacles = rng.uniform([-15, -15, -1.4], [15, 15, 2.0], size=(400, 3))
            cloud = PointCloud.from_xyz(np.vstack([ground, obstacles]))
            stripped, plane = preprocess_cloud(cloud, RansacConfig(seed=seed))
            good_normal += plane is not None and _angle_deg(plane.normal, [0, 0, 1]) <= 1.0
            kept = stripped.xyz[len(stripped) - len(obstacles):] if len(stripped) >= len(obstacles) else None
            good_obstacles += kept is not None and np.array_equal(kept, obstacles)
        assert good_normal >= 99
        assert good_obstacles >= 99

