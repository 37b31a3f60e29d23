from __future__ import annotations

from typing import Annotated, Literal

from pydantic import BaseModel, BeforeValidator, ConfigDict, Field, model_validator

from box6d.services.core import CameraIntrinsics, ScaleInterval


def _split_vector(value: object) -> object:
    if isinstance(value, str):
        return tuple(part.strip() for part in value.split(",") if part.strip())
    return value


Vec3 = Annotated[tuple[float, float, float], BeforeValidator(_split_vector)]
Pair = Annotated[tuple[float, float], BeforeValidator(_split_vector)]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class CameraConfig(_Section):
    fx: float = Field(default=500.0, gt=0)
    fy: float = Field(default=500.0, gt=0)
    cx: float = 320.0
    cy: float = 240.0
    width: int = Field(default=640, gt=0)
    height: int = Field(default=480, gt=0)

    @model_validator(mode="after")
    def _principal_point_inside(self) -> CameraConfig:
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        return self

    def to_intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(
            fx=self.fx, fy=self.fy, cx=self.cx, cy=self.cy, width=self.width, height=self.height
        )


class SceneConfig(_Section):
    n_boxes: int = Field(default=1, ge=1, le=255)
    dims_min: Vec3 = (0.1, 0.1, 0.1)
    dims_max: Vec3 = (0.6, 0.6, 0.6)
    stack_layout: Literal["single", "stack", "pile"] = "single"
    occlusion_level: float = Field(default=0.0, ge=0.0, le=1.0)
    depth_noise_sigma: float = Field(default=0.0, ge=0.0)
    camera: CameraConfig = CameraConfig()
    seed: int = Field(default=0, ge=0, lt=2**64)
    background_depth: float | None = Field(default=2.5, gt=0)
    depth_range: Pair = (1.0, 1.8)
    dropout_fraction: float = Field(default=0.01, ge=0.0, le=1.0)
    quantize_mm: bool = True
    occluder_max_width: float = Field(default=0.3, gt=0)
    max_tilt_deg: float = Field(default=10.0, ge=0.0, le=45.0)
    yaw_range_deg: Pair = (20.0, 70.0)
    pitch_range_deg: Pair = (15.0, 35.0)
    relabel_axes: bool = False

    @model_validator(mode="after")
    def _check_ranges(self) -> SceneConfig:
        for axis, (lo, hi) in enumerate(zip(self.dims_min, self.dims_max, strict=True)):
            if not 0 < lo < hi:
                raise ValueError(f"dims_range axis {axis}: need 0 < min < max, got {lo}..{hi}")
        near, far = self.depth_range
        if not 0 < near <= far:
            raise ValueError(f"depth_range: need 0 < near <= far, got {near}..{far}")
        for name, limit in (("yaw_range_deg", 90.0), ("pitch_range_deg", 60.0)):
            low, high = getattr(self, name)
            if not 0 <= low <= high <= limit:
                raise ValueError(f"{name}: need 0 <= low <= high <= {limit:g}, got {low}..{high}")
        return self


class DatasetConfig(_Section):
    n_scenes: int = Field(default=10, ge=0)
    seed: int = Field(default=0, ge=0, lt=2**64)


class SegmentConfig(_Section):
    plane_threshold: float = Field(default=0.008, gt=0)
    cluster_distance: float = Field(default=0.015, gt=0)
    min_pixels: int = Field(default=200, ge=1)
    plane_iterations: int = Field(default=200, ge=1)
    plane_sample_size: int = Field(default=5000, ge=3)
    min_plane_fraction: float = Field(default=0.2, ge=0.0, le=1.0)
    nms_iou: float = Field(default=0.7, gt=0.0, le=1.0)
    remove_plane: bool = True
    seed: int = Field(default=0, ge=0)


class PoseConfig(_Section):
    score_delta: float = Field(default=0.010, gt=0)
    warm_start: bool = False
    confidence_tie: float = Field(default=0.02, ge=0, le=1)
    face_threshold: float = Field(default=0.006, gt=0)
    face_iterations: int = Field(default=200, ge=1)
    face_sample_size: int = Field(default=4000, ge=3)
    min_face_points: int = Field(default=40, ge=3)
    min_face_fraction: float = Field(default=0.02, ge=0.0, le=1.0)
    seed: int = Field(default=0, ge=0)


class IcpConfig(_Section):
    max_iterations: int = Field(default=50, ge=1)
    rotation_tol_deg: float = Field(default=0.01, gt=0)
    translation_tol: float = Field(default=0.0001, gt=0)
    max_correspondence_distance: float = Field(default=0.1, gt=0)
    divergence_patience: int = Field(default=5, ge=1)


class FilterConfig(_Section):
    enabled: bool = True
    tau_d: float = Field(default=0.015, gt=0)
    max_median_residual: float = Field(default=0.02, gt=0)
    max_protrusion: float = Field(default=0.2, gt=0, le=1)
    min_coverage: float = Field(default=0.3, gt=0, le=1)
    max_free_space_violation: float = Field(default=0.1, gt=0, le=1)


class SearchConfig(_Section):
    tau_px: float = Field(default=10.0, gt=0)
    tau_scale: float = Field(default=0.01, gt=0)
    t_max: int = Field(default=20, ge=1)
    bounds_lo: Vec3 = (0.05, 0.05, 0.05)
    bounds_hi: Vec3 = (2.0, 2.0, 2.0)
    early_stop_enabled: bool = True
    vertex_align_tol: float = Field(default=5.0, gt=0)
    min_observable_angle_deg: float = Field(default=5.0, ge=0, lt=90)
    min_axis_separation_deg: float = Field(default=30.0, ge=0, lt=90)
    depth_span_tol: float = Field(default=0.005, ge=0)

    @model_validator(mode="after")
    def _check_bounds(self) -> SearchConfig:
        ScaleInterval(lo=self.bounds_lo, hi=self.bounds_hi)
        return self

    @property
    def bounds_init(self) -> ScaleInterval:
        return ScaleInterval(lo=self.bounds_lo, hi=self.bounds_hi)


class AblationConfig(_Section):
    repeats: int = Field(default=50, ge=1)
    fixed_template_scale: Vec3 = (0.35, 0.35, 0.35)
    use_gt_masks: bool = True


class PipelineConfig(_Section):
    scenegen: SceneConfig = SceneConfig()
    dataset: DatasetConfig = DatasetConfig()
    segment: SegmentConfig = SegmentConfig()
    pose: PoseConfig = PoseConfig()
    icp: IcpConfig = IcpConfig()
    depthfilter: FilterConfig = FilterConfig()
    dimsearch: SearchConfig = SearchConfig()
    ablation: AblationConfig = AblationConfig()


TraceReason = Literal["extent-converged", "interval-converged", "max-iters", "early-stopped"]
RowReason = Literal[
    "extent-converged", "interval-converged", "max-iters", "early-stopped", "fixed", "oracle", "missed", "failed"
]


class ResultRow(_Section):
    scene_id: str
    instance_id: int
    iou3d: float
    rot_err_deg: float
    trans_err_cm: float
    iterations: int
    wall_time_s: float
    trace_reason: RowReason

    model_config = ConfigDict(
        extra="forbid",
        frozen=True,
        json_schema_extra={
            "example": {
                "scene_id": "scene_0000",
                "instance_id": 1,
                "iou3d": 0.93,
                "rot_err_deg": 0.8,
                "trans_err_cm": 0.4,
                "iterations": 2,
                "wall_time_s": 0.512,
                "trace_reason": "early-stopped",
            }
        },
    )
