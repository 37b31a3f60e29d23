from __future__ import annotations

from dataclasses import dataclass, field
import itertools
import math

import numpy as np
from numpy.typing import ArrayLike, NDArray

from box6d.exceptions import InvalidArgumentError

FloatArray = NDArray[np.float64]

ORTHONORMAL_TOL = 1e-9


def _vec3(value: ArrayLike, name: str) -> FloatArray:
    arr = np.array(value, dtype=np.float64).reshape(-1)
    if arr.shape != (3,):
        raise InvalidArgumentError(f"{name} must have 3 components, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, slots=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidArgumentError(f"focal lengths must be positive: fx={self.fx}, fy={self.fy}")
        if self.width <= 0 or self.height <= 0:
            raise InvalidArgumentError(f"image size must be positive: {self.width}x{self.height}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidArgumentError(f"principal point ({self.cx}, {self.cy}) outside the image")

    @property
    def matrix(self) -> FloatArray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width


@dataclass(frozen=True, slots=True, eq=False)
class Pose:
    """Rigid transform of a box frame expressed in the camera frame."""

    rotation: FloatArray
    translation: FloatArray

    def __post_init__(self) -> None:
        rotation = np.asarray(self.rotation, dtype=np.float64)
        if rotation.shape != (3, 3) or not np.all(np.isfinite(rotation)):
            raise InvalidArgumentError(f"rotation must be a finite 3x3 matrix, got shape {rotation.shape}")
        if not np.allclose(rotation.T @ rotation, np.eye(3), atol=ORTHONORMAL_TOL):
            raise InvalidArgumentError("rotation is not orthonormal")
        if abs(np.linalg.det(rotation) - 1.0) > ORTHONORMAL_TOL:
            raise InvalidArgumentError("rotation is not proper (det != +1)")
        rotation = rotation.copy()
        rotation.setflags(write=False)
        translation = _vec3(self.translation, "translation")
        if not np.all(np.isfinite(translation)):
            raise InvalidArgumentError("translation must be finite")
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @classmethod
    def identity(cls) -> Pose:
        return cls(rotation=np.eye(3), translation=np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix: ArrayLike) -> Pose:
        m = np.asarray(matrix, dtype=np.float64)
        return cls(rotation=m[:3, :3], translation=m[:3, 3])

    def as_matrix(self) -> FloatArray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> Pose:
        return Pose(rotation=self.rotation.T, translation=-self.rotation.T @ self.translation)

    def compose(self, other: Pose) -> Pose:
        return compose(self, other)

    def transform(self, points: ArrayLike) -> FloatArray:
        """Map box-frame points (N,3) into the camera frame."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def to_local(self, points: ArrayLike) -> FloatArray:
        pts = np.asarray(points, dtype=np.float64)
        return (pts - self.translation) @ self.rotation


def compose(a: Pose, b: Pose) -> Pose:
    return Pose(rotation=a.rotation @ b.rotation, translation=a.rotation @ b.translation + a.translation)


def rotation_angle_deg(ra: ArrayLike, rb: ArrayLike) -> float:
    """Geodesic angle between two rotations, in degrees."""
    relative = np.asarray(ra, dtype=np.float64).T @ np.asarray(rb, dtype=np.float64)
    cos_angle = np.clip((np.trace(relative) - 1.0) / 2.0, -1.0, 1.0)
    return math.degrees(math.acos(cos_angle))


@dataclass(frozen=True, slots=True)
class ScaleVec:
    sx: float
    sy: float
    sz: float

    def __post_init__(self) -> None:
        for name in ("sx", "sy", "sz"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise InvalidArgumentError(f"scale {name} must be positive and finite, got {value}")

    @classmethod
    def from_array(cls, values: ArrayLike) -> ScaleVec:
        sx, sy, sz = (float(v) for v in _vec3(values, "scale"))
        return cls(sx, sy, sz)

    def as_array(self) -> FloatArray:
        return np.array([self.sx, self.sy, self.sz])


@dataclass(frozen=True, slots=True)
class BoxDims:
    """Full edge lengths of a box in meters."""

    dx: float
    dy: float
    dz: float

    def __post_init__(self) -> None:
        for name in ("dx", "dy", "dz"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise InvalidArgumentError(f"dimension {name} must be positive and finite, got {value}")

    @classmethod
    def from_array(cls, values: ArrayLike) -> BoxDims:
        dx, dy, dz = (float(v) for v in _vec3(values, "dims"))
        return cls(dx, dy, dz)

    def as_array(self) -> FloatArray:
        return np.array([self.dx, self.dy, self.dz])

    @property
    def half(self) -> FloatArray:
        return 0.5 * self.as_array()

    @property
    def volume(self) -> float:
        return self.dx * self.dy * self.dz


# The canonical category template is the unit cube centred on its centroid.
TEMPLATE_EDGE = 1.0


def scaled_template(s: ScaleVec) -> BoxDims:
    return BoxDims(TEMPLATE_EDGE * s.sx, TEMPLATE_EDGE * s.sy, TEMPLATE_EDGE * s.sz)


def dims_to_scale(dims: BoxDims) -> ScaleVec:
    return ScaleVec(dims.dx / TEMPLATE_EDGE, dims.dy / TEMPLATE_EDGE, dims.dz / TEMPLATE_EDGE)


@dataclass(frozen=True, slots=True, eq=False)
class DepthImage:
    """Row-major depth raster in meters; 0.0 marks a missing return."""

    width: int
    height: int
    data: FloatArray

    def __post_init__(self) -> None:
        data = np.array(self.data, dtype=np.float64)
        if data.size != self.width * self.height:
            raise InvalidArgumentError(
                f"depth data has {data.size} values, expected {self.width}x{self.height}"
            )
        data = data.reshape(self.height, self.width)
        if not np.all(np.isfinite(data)) or np.any(data < 0):
            raise InvalidArgumentError("depth values must be finite and non-negative")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @classmethod
    def empty(cls, width: int, height: int) -> DepthImage:
        return cls(width=width, height=height, data=np.zeros((height, width)))

    @property
    def valid(self) -> NDArray[np.bool_]:
        return self.data > 0


@dataclass(frozen=True, slots=True, eq=False)
class InstanceMask:
    """Row-major label raster: 0 is background, k >= 1 is instance k."""

    width: int
    height: int
    data: NDArray[np.int32]

    def __post_init__(self) -> None:
        data = np.asarray(self.data)
        if data.size != self.width * self.height:
            raise InvalidArgumentError(
                f"mask data has {data.size} values, expected {self.width}x{self.height}"
            )
        data = data.reshape(self.height, self.width).astype(np.int32, copy=True)
        if np.any(data < 0):
            raise InvalidArgumentError("mask labels must be non-negative")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @classmethod
    def empty(cls, width: int, height: int) -> InstanceMask:
        return cls(width=width, height=height, data=np.zeros((height, width), dtype=np.int32))

    def instance_ids(self) -> list[int]:
        return [int(v) for v in np.unique(self.data) if v != 0]

    def select(self, instance: int | None = None) -> NDArray[np.bool_]:
        """Boolean raster of one instance, or of every labeled pixel when instance is None."""
        if instance is None:
            return self.data != 0
        return self.data == instance

    def count(self, instance: int) -> int:
        return int(np.count_nonzero(self.data == instance))


@dataclass(frozen=True, slots=True, eq=False)
class ScaleInterval:
    lo: FloatArray
    hi: FloatArray

    def __post_init__(self) -> None:
        lo = _vec3(self.lo, "lo")
        hi = _vec3(self.hi, "hi")
        if np.any(lo <= 0) or np.any(lo > hi):
            raise InvalidArgumentError(f"invalid scale interval lo={lo.tolist()} hi={hi.tolist()}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def width(self) -> FloatArray:
        return self.hi - self.lo

    @property
    def midpoint(self) -> FloatArray:
        return 0.5 * (self.lo + self.hi)


@dataclass(frozen=True, slots=True)
class DepthStats:
    median_abs_residual: float
    protrusion_fraction: float
    coverage: float
    free_space_violation: float = 0.0

    def __post_init__(self) -> None:
        if self.median_abs_residual < 0:
            raise InvalidArgumentError("median residual must be non-negative")
        for name in ("protrusion_fraction", "coverage", "free_space_violation"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise InvalidArgumentError(f"{name} must lie in [0, 1], got {value}")


@dataclass(frozen=True, slots=True, eq=False)
class Hypothesis:
    pose: Pose
    confidence: float
    depth_stats: DepthStats | None = None
    label: int = 0
    fallback: bool = False

    def __post_init__(self) -> None:
        if not 0.0 <= self.confidence <= 1.0:
            raise InvalidArgumentError(f"confidence must lie in [0, 1], got {self.confidence}")


@dataclass(frozen=True, slots=True, eq=False)
class PointCloud:
    points: FloatArray = field(default_factory=lambda: np.zeros((0, 3)))

    def __post_init__(self) -> None:
        points = np.array(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(points)):
            raise InvalidArgumentError("point cloud contains non-finite values")
        points.setflags(write=False)
        object.__setattr__(self, "points", points)

    def __len__(self) -> int:
        return int(self.points.shape[0])

    @property
    def centroid(self) -> FloatArray:
        return self.points.mean(axis=0)


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based generator; each stream tuple is an independent substream of the seed."""
    sequence = np.random.SeedSequence(entropy=seed, spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.Philox(sequence))


def _octahedral_rotations() -> tuple[FloatArray, ...]:
    rotations = []
    for perm in itertools.permutations(range(3)):
        for signs in itertools.product((1.0, -1.0), repeat=3):
            m = np.zeros((3, 3))
            for row, (col, sign) in enumerate(zip(perm, signs, strict=True)):
                m[row, col] = sign
            if np.linalg.det(m) > 0:
                m.setflags(write=False)
                rotations.append(m)
    return tuple(rotations)


# The 24 proper rotations mapping the cube onto itself; the identity comes first.
OCTAHEDRAL_ROTATIONS: tuple[FloatArray, ...] = _octahedral_rotations()


@dataclass(frozen=True, slots=True, eq=False)
class BoxInstance:
    """A posed box with its instance label (ground truth or prediction)."""

    instance_id: int
    pose: Pose
    dims: BoxDims
    confidence: float = 1.0
