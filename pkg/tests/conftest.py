import numpy as np
import pytest

from src.pipeline.synth import GROUND_Z, Box, box_points
from src.slam.dataset_io import PointCloud
from src.slam.features import DESCRIPTOR_BYTES, FrameFeatures
from src.slam.raster import CameraModel
from src.slam.schemas import CameraConfig


@pytest.fixture
def cam() -> CameraModel:
    return CameraModel.from_config(CameraConfig())


@pytest.fixture
def plain_cam() -> CameraModel:
    """Camera with no extrinsic offset, for hand-computed projections."""
    return CameraModel(500.0, 0.0, 0.0, np.eye(3), np.zeros(3), 750, 750)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


def box_scene(seed: int = 0, n_boxes: int = 14, extent: float = 22.0) -> np.ndarray:
    """Sensor-frame xyz of textured boxes around the origin, no ground."""
    rng = np.random.default_rng(seed)
    boxes, attempts = [], 0
    while len(boxes) < n_boxes and attempts < 1000:
        attempts += 1
        center = rng.uniform(-extent, extent, size=2)
        if np.hypot(*center) < 4.0:
            continue
        size = rng.uniform(2.0, 5.0, size=2)
        if any(np.hypot(*(center - np.array(b.center))) < 0.5 * (np.hypot(*size) + np.hypot(*b.size)) + 1.0
               for b in boxes):
            continue
        boxes.append(Box((float(center[0]), float(center[1])), (float(size[0]), float(size[1])),
                         float(rng.uniform(0, np.pi)), float(rng.uniform(1.0, 4.0))))
    return np.vstack([box_points(b, 0.1, rng) for b in boxes])


def ground_grid(extent: float = 25.0, spacing: float = 0.5) -> np.ndarray:
    g = np.arange(-extent, extent, spacing)
    xx, yy = np.meshgrid(g, g, indexing="ij")
    return np.column_stack([xx.ravel(), yy.ravel(), np.full(xx.size, GROUND_Z)])


@pytest.fixture(scope="session")
def scene_xyz() -> np.ndarray:
    return box_scene(seed=7)


@pytest.fixture
def scene_cloud(scene_xyz) -> PointCloud:
    return PointCloud.from_xyz(scene_xyz)


def random_descriptors(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.integers(0, 256, size=(n, DESCRIPTOR_BYTES), dtype=np.uint8)


def make_features(points: np.ndarray, descriptors: np.ndarray, uv: np.ndarray | None = None) -> FrameFeatures:
    n = len(points)
    uv = np.zeros((n, 2)) if uv is None else uv
    return FrameFeatures(uv, np.ones(n), np.zeros(n), descriptors, np.asarray(points, dtype=float))
