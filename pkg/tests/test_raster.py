import numpy as np
import pytest
from PIL import Image

from src.slam.dataset_io import PointCloud
from src.slam.errors import BehindCamera, EmptyPixel
from src.slam.raster import (
    back_project,
    back_project_points,
    lidar_to_camera,
    lookup_heights,
    project,
    project_points,
    quantize_height,
    rasterize,
    to_pixel,
    write_pgm,
)
from src.slam.schemas import RasterConfig

ZMAP = RasterConfig()


class TestProjection:
    def test_default_extrinsics(self, cam):
        assert np.allclose(lidar_to_camera([0, 0, 0], cam), [-25, -25, 70])
        assert np.allclose(lidar_to_camera([25, 25, 0], cam), [0, 0, 70])

    def test_pinhole_example(self, plain_cam):
        u, v, depth = project(np.array([7.0, 0.0, 70.0]), plain_cam)
        assert u == pytest.approx(50.0)
        assert v == pytest.approx(0.0)
        assert depth == pytest.approx(70.0)

    def test_point_on_axis(self, plain_cam):
        assert project(np.array([0.0, 0.0, 10.0]), plain_cam)[:2] == (0.0, 0.0)

    def test_behind_camera(self, plain_cam):
        with pytest.raises(BehindCamera):
            project(np.array([1.0, 1.0, -5.0]), plain_cam)

    def test_vectorized_marks_points_behind(self, plain_cam):
        u, v, _ = project_points(np.array([[1.0, 0, 10], [1.0, 0, -10]]), plain_cam)
        assert np.isfinite(u[0]) and np.isnan(u[1]) and np.isnan(v[1])


class TestRasterize:
    def test_empty_cloud(self, cam):
        frame = rasterize(PointCloud.from_xyz(np.zeros((0, 3))), cam, ZMAP)
        assert frame.intensity.shape == (750, 750)
        assert not frame.intensity.any()
        assert not frame.occupied.any()

    def test_point_below_camera_centre_lands_mid_image(self, cam):
        frame = rasterize(PointCloud.from_xyz([[25.0, 25.0, 0.0]]), cam, ZMAP)
        assert frame.height_buffer[375, 375] == 0.0
        assert frame.intensity[375, 375] == quantize_height(0.0, ZMAP)
        assert int(frame.occupied.sum()) == 1

    def test_highest_point_wins(self, cam):
        frame = rasterize(PointCloud.from_xyz([[25.0, 25.0, 1.0], [25.0, 25.0, 3.0], [25.0, 25.0, 2.0]]), cam, ZMAP)
        assert frame.height_buffer[375, 375] == 3.0

    def test_intensity_quantization(self):
        z = np.array([-2.0, -5.0, 8.0, 20.0, 3.0])
        assert quantize_height(z, ZMAP).tolist() == [1, 1, 255, 255, 128]

    def test_intensity_zero_exactly_where_empty(self, cam, scene_cloud):
        frame = rasterize(scene_cloud, cam, ZMAP)
        assert np.array_equal(frame.intensity == 0, ~frame.occupied)
        occ = frame.occupied
        assert np.array_equal(frame.intensity[occ], quantize_height(frame.height_buffer[occ], ZMAP))

    def test_order_of_points_does_not_matter(self, cam, scene_xyz, rng):
        a = rasterize(PointCloud.from_xyz(scene_xyz), cam, ZMAP)
        b = rasterize(PointCloud.from_xyz(scene_xyz[rng.permutation(len(scene_xyz))]), cam, ZMAP)
        assert np.array_equal(a.intensity, b.intensity)
        assert np.array_equal(a.height_buffer, b.height_buffer, equal_nan=True)

    def test_points_outside_image_are_counted(self, cam):
        frame = rasterize(PointCloud.from_xyz([[25.0, 25.0, 0.0], [500.0, 0.0, 0.0], [0, 0, -100.0]]), cam, ZMAP)
        assert frame.skipped == 2


class TestBackProjection:
    def test_round_trip_error_bound(self, cam, rng):
        xyz = rng.uniform(-30.0, 30.0, size=(100_000, 3))
        u, v, depth = project_points(xyz, cam)
        cols, rows = to_pixel(u, v, cam)
        back = back_project_points(cols, rows, xyz[:, 2], cam)
        bound = 0.5 * depth / cam.f + 1e-9
        err = np.abs(back - xyz)
        assert np.all(err[:, 0] <= bound)
        assert np.all(err[:, 1] <= bound)
        assert np.array_equal(back[:, 2], xyz[:, 2])

    def test_back_project_pixel(self, cam):
        frame = rasterize(PointCloud.from_xyz([[25.0, 25.0, 2.0]]), cam, ZMAP)
        assert np.allclose(back_project(375, 375, frame, cam), [25.0, 25.0, 2.0])

    def test_empty_pixel(self, cam):
        frame = rasterize(PointCloud.from_xyz([[25.0, 25.0, 2.0]]), cam, ZMAP)
        with pytest.raises(EmptyPixel):
            back_project(10, 10, frame, cam)
        with pytest.raises(EmptyPixel):
            back_project(-1, 10, frame, cam)

    def test_lookup_borrows_highest_neighbour(self, cam):
        frame = rasterize(PointCloud.from_xyz([[25.0, 25.0, 1.0], [25.0 + 70 / 500, 25.0, 2.0]]), cam, ZMAP)
        z = lookup_heights(frame, np.array([375, 374, 375, 100]), np.array([375, 376, 374, 100]))
        assert z[0] == 1.0
        assert z[1] == 1.0
        assert z[2] == 2.0
        assert np.isnan(z[3])


def test_pgm_dump_matches_intensity(tmp_path, cam, scene_cloud):
    frame = rasterize(scene_cloud, cam, ZMAP)
    path = tmp_path / "frame.pgm"
    write_pgm(frame, path)
    assert path.read_bytes().startswith(b"P5")
    with Image.open(path) as img:
        assert np.array_equal(np.asarray(img), frame.intensity)
