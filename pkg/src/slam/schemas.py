"""Pydantic models for the tunable parameters of each engine stage."""

from typing import Optional

from pydantic import BaseModel, Field, model_validator

_FROZEN = {"extra": "forbid", "frozen": True}


class RansacConfig(BaseModel):
    """Ground-plane RANSAC."""

    enabled: bool = True
    iterations: int = Field(200, ge=1)
    inlier_dist_m: float = Field(0.15, gt=0)
    min_inlier_fraction: float = Field(0.10, gt=0, le=1)
    # hypotheses are drawn only from points below this sensor-frame height
    hypothesis_max_z: float = 0.0
    seed: int = 0

    model_config = _FROZEN


class CameraConfig(BaseModel):
    f: float = Field(500.0, gt=0, description="focal length in pixels")
    t_u: float = 0.0
    t_v: float = 0.0
    rotation_deg: tuple[float, float, float] = Field(
        (0.0, 0.0, 0.0), description="extrinsic rotation as xyz Euler angles in degrees"
    )
    translation: tuple[float, float, float] = (-25.0, -25.0, 70.0)
    width: int = Field(750, gt=0)
    height: int = Field(750, gt=0)

    model_config = _FROZEN


class RasterConfig(BaseModel):
    z_min: float = -2.0
    z_max: float = 8.0

    model_config = _FROZEN

    @model_validator(mode="after")
    def _ordered(self):
        if not self.z_min < self.z_max:
            raise ValueError(f"z_min ({self.z_min}) must be below z_max ({self.z_max})")
        return self


class FeatureConfig(BaseModel):
    blur_sigma: float = Field(1.0, gt=0)
    fast_threshold: int = Field(20, ge=1)
    target_count: int = Field(1000, ge=1)
    ratio: float = Field(0.75, gt=0, lt=1)
    orientation_radius: int = Field(15, ge=1)
    border: int = Field(19, ge=3)

    model_config = _FROZEN


class MatchRansacConfig(BaseModel):
    """Geometric verification of descriptor matches in 3D."""

    iterations: int = Field(200, ge=1)
    inlier_dist_m: float = Field(0.3, gt=0)
    seed: int = 0

    model_config = _FROZEN


class TrackingConfig(BaseModel):
    min_inliers: int = Field(20, ge=3)
    keyframe_min_frames: int = Field(5, ge=1)
    keyframe_max_common: int = Field(100, ge=0)

    model_config = _FROZEN


class MappingConfig(BaseModel):
    window: int = Field(5, ge=1)
    hamming_gate: int = Field(50, ge=0, le=256)
    distance_gate_m: float = Field(0.5, gt=0)
    ba_enabled: bool = True
    max_iters: int = Field(10, ge=1)
    lambda_init: float = Field(1e-3, gt=0)
    huber_delta: Optional[float] = Field(None, gt=0)

    model_config = _FROZEN


class LoopConfig(BaseModel):
    enabled: bool = True
    dist_threshold_m: float = Field(10.0, gt=0)
    exclusion: int = Field(50, ge=0)
    min_inliers: int = Field(30, ge=3)
    ratio: float = Field(0.75, gt=0, lt=1)
    inlier_dist_m: float = Field(0.3, gt=0)
    iterations: int = Field(500, ge=1)
    seed: int = 0
    max_iters: int = Field(50, ge=1)

    model_config = _FROZEN
