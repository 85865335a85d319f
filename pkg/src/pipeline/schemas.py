"""Run configuration: one pydantic model per stage, composed into PipelineConfig."""

from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, Field

from src.slam.schemas import (
    CameraConfig,
    FeatureConfig,
    LoopConfig,
    MappingConfig,
    MatchRansacConfig,
    RansacConfig,
    RasterConfig,
    TrackingConfig,
)

TIMING_CATEGORIES = (
    "image_projection",
    "feature_extraction_matching",
    "pose_estimation",
    "registration",
    "local_ba",
)
EXTRA_TIMING_CATEGORIES = ("preprocess", "loop_closure")
# KITTI row-major [R|t] order of the pose columns in frames.csv
POSE_COLUMNS = ("r00", "r01", "r02", "tx", "r10", "r11", "r12", "ty", "r20", "r21", "r22", "tz")


class PipelineConfig(BaseModel):
    dataset: Optional[Path] = Field(None, description="sequence directory (velodyne/ is used if present)")
    dataset_format: Literal["kitti-bin", "ascii-xyz"] = "kitti-bin"
    groundtruth: Optional[Path] = None
    output_dir: Path = Path("output")
    mode: Literal["deterministic", "concurrent"] = "deterministic"
    seed: int = 0
    max_frames: Optional[int] = Field(None, ge=1)
    queue_size: int = Field(4, ge=1, description="bounded queue length between stages (concurrent mode)")

    camera: CameraConfig = CameraConfig()
    raster: RasterConfig = RasterConfig()
    ground: RansacConfig = RansacConfig()
    features: FeatureConfig = FeatureConfig()
    match: MatchRansacConfig = MatchRansacConfig()
    tracking: TrackingConfig = TrackingConfig()
    mapping: MappingConfig = MappingConfig()
    loop: LoopConfig = LoopConfig()

    model_config = {"extra": "forbid", "frozen": True}

    def seeded(self) -> "PipelineConfig":
        """Copy with the run seed folded into every stage seed."""
        if not self.seed:
            return self
        return self.model_copy(update={
            "ground": self.ground.model_copy(update={"seed": self.ground.seed + self.seed}),
            "match": self.match.model_copy(update={"seed": self.match.seed + self.seed}),
            "loop": self.loop.model_copy(update={"seed": self.loop.seed + self.seed}),
        })


class FrameRecord(BaseModel):
    """One row of the per-frame tracking report."""

    frame: int
    anchor_keyframe: int
    is_keyframe: bool = False
    features: int = 0
    matches: int = 0
    inliers: int = 0
    fallback: bool = False
    skipped: bool = False
