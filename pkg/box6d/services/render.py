from __future__ import annotations

from dataclasses import dataclass
import itertools
import math

import numpy as np
from numpy.typing import ArrayLike, NDArray

from box6d.exceptions import BehindCameraError, EmptyMaskError, InvalidArgumentError
from box6d.services.core import BoxDims, CameraIntrinsics, DepthImage, FloatArray, InstanceMask, Pose

NEAR_PLANE = 1e-6

# Corner k has local signs (sx, sy, sz) with k = 4*ix + 2*iy + iz, sign -1 for bit 0 and +1 for bit 1.
CORNER_SIGNS: FloatArray = np.array(
    [[2 * ix - 1, 2 * iy - 1, 2 * iz - 1] for ix, iy, iz in itertools.product((0, 1), repeat=3)],
    dtype=np.float64,
)

BOX_FACES: tuple[tuple[int, int, int, int], ...] = (
    (0, 1, 3, 2),  # -x
    (4, 5, 7, 6),  # +x
    (0, 1, 5, 4),  # -y
    (2, 3, 7, 6),  # +y
    (0, 2, 6, 4),  # -z
    (1, 3, 7, 5),  # +z
)

BOX_TRIANGLES: tuple[tuple[int, int, int], ...] = tuple(
    tri for a, b, c, d in BOX_FACES for tri in ((a, b, c), (a, c, d))
)

BOX_EDGES: tuple[tuple[int, int], ...] = tuple(
    (i, j) for i in range(8) for j in range(i + 1, 8) if bin(i ^ j).count("1") == 1
)


@dataclass(frozen=True, slots=True, eq=False)
class RenderedView:
    depth: DepthImage
    mask: InstanceMask

    @property
    def is_empty(self) -> bool:
        return not bool(np.any(self.mask.data))


@dataclass(frozen=True, slots=True, eq=False)
class AxisExtents:
    """Pixel extents of a silhouette along the image directions of the three box axes."""

    e: FloatArray
    observable: NDArray[np.bool_]

    def __post_init__(self) -> None:
        e = np.array(self.e, dtype=np.float64).reshape(3)
        if np.any(e < 0):
            raise InvalidArgumentError("extents must be non-negative")
        observable = np.array(self.observable, dtype=bool).reshape(3)
        e.setflags(write=False)
        observable.setflags(write=False)
        object.__setattr__(self, "e", e)
        object.__setattr__(self, "observable", observable)


def project_point(K: CameraIntrinsics, p: ArrayLike) -> FloatArray:
    x, y, z = (float(v) for v in np.asarray(p, dtype=np.float64).reshape(3))
    if z <= 0:
        raise BehindCameraError(z)
    return np.array([K.fx * x / z + K.cx, K.fy * y / z + K.cy])


def project_points(K: CameraIntrinsics, points: ArrayLike) -> FloatArray:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if np.any(pts[:, 2] <= 0):
        raise BehindCameraError(float(pts[:, 2].min()))
    return np.column_stack((K.fx * pts[:, 0] / pts[:, 2] + K.cx, K.fy * pts[:, 1] / pts[:, 2] + K.cy))


def box_corners(dims: BoxDims, pose: Pose | None = None) -> FloatArray:
    corners = CORNER_SIGNS * dims.half
    return corners if pose is None else pose.transform(corners)


def render_view(dims: BoxDims, pose: Pose, K: CameraIntrinsics) -> RenderedView:
    """Z-buffered rasterization of the posed 12-triangle box mesh."""
    if not np.all(np.isfinite(dims.as_array())) or min(dims.dx, dims.dy, dims.dz) <= 0:
        raise InvalidArgumentError(f"degenerate box dimensions: {dims}")

    zbuffer = np.full(K.shape, np.inf)
    corners = box_corners(dims, pose)
    if np.all(corners[:, 2] > NEAR_PLANE):
        for tri in BOX_TRIANGLES:
            _rasterize_triangle(corners[list(tri)], K, zbuffer)
    # Triangles crossing the near plane are dropped; boxes straddling the camera are out of scope.

    covered = np.isfinite(zbuffer)
    depth = np.where(covered, zbuffer, 0.0)
    return RenderedView(
        depth=DepthImage(width=K.width, height=K.height, data=depth),
        mask=InstanceMask(width=K.width, height=K.height, data=covered.astype(np.int32)),
    )


def _rasterize_triangle(vertices: FloatArray, K: CameraIntrinsics, zbuffer: FloatArray) -> None:
    uv = project_points(K, vertices)
    a, b, c = uv
    area = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
    if abs(area) < 1e-12:
        return
    if area < 0:
        b, c = c, b

    u_lo = max(math.ceil(uv[:, 0].min()), 0)
    u_hi = min(math.floor(uv[:, 0].max()), K.width - 1)
    v_lo = max(math.ceil(uv[:, 1].min()), 0)
    v_hi = min(math.floor(uv[:, 1].max()), K.height - 1)
    if u_lo > u_hi or v_lo > v_hi:
        return

    us, vs = np.meshgrid(
        np.arange(u_lo, u_hi + 1, dtype=np.float64), np.arange(v_lo, v_hi + 1, dtype=np.float64)
    )
    inside = np.ones(us.shape, dtype=bool)
    for p, q in ((a, b), (b, c), (c, a)):
        dx, dy = q[0] - p[0], q[1] - p[1]
        edge = dx * (vs - p[1]) - dy * (us - p[0])
        top_left = dy < 0 or (dy == 0 and dx > 0)
        inside &= (edge > 0) | ((edge == 0) & top_left)
    if not inside.any():
        return

    # Exact depth from the ray / triangle-plane intersection; rays have unit z.
    normal = np.cross(vertices[1] - vertices[0], vertices[2] - vertices[0])
    offset = float(normal @ vertices[0])
    ray_x = (us[inside] - K.cx) / K.fx
    ray_y = (vs[inside] - K.cy) / K.fy
    denom = normal[0] * ray_x + normal[1] * ray_y + normal[2]
    usable = np.abs(denom) > 1e-12
    if not usable.any():
        return
    z = np.full(denom.shape, np.inf)
    z[usable] = offset / denom[usable]
    z[z <= NEAR_PLANE] = np.inf

    rows = vs[inside].astype(np.intp)
    cols = us[inside].astype(np.intp)
    zbuffer[rows, cols] = np.minimum(zbuffer[rows, cols], z)


def axis_image_directions(
    pose: Pose,
    K: CameraIntrinsics,
    dims: BoxDims | None = None,
    *,
    min_angle_deg: float = 5.0,
    min_separation_deg: float = 0.0,
) -> list[FloatArray | None]:
    """Unit image direction of each box axis at the projected center, or None where it is unobservable.

    An axis within ``min_angle_deg`` of the viewing ray is unobservable. Axes are then admitted from the
    most to the least fronto-parallel while their silhouette extents stay separable: the coupling matrix
    ``|d_a . d_c|`` of the admitted axes must keep a determinant of at least ``sin^2(min_separation_deg)``.
    """
    center = pose.translation
    if center[2] <= 0:
        raise BehindCameraError(float(center[2]))
    ray = center / np.linalg.norm(center)
    half = dims.half if dims is not None else np.full(3, 0.5)

    directions: list[FloatArray | None] = [
        _axis_image_direction(K, center, pose.rotation[:, axis], half[axis], ray, min_angle_deg) for axis in range(3)
    ]
    floor = math.sin(math.radians(min_separation_deg)) ** 2
    admitted: list[int] = []
    for axis in sorted(range(3), key=lambda a: abs(float(pose.rotation[:, a] @ ray))):
        direction = directions[axis]
        if direction is None:
            continue
        trial = [directions[a] for a in (*admitted, axis)]
        coupling = np.abs(np.array([[float(p @ q) for q in trial] for p in trial]))
        if float(np.linalg.det(coupling)) < floor:
            directions[axis] = None
            continue
        admitted.append(axis)
    return directions


def coupling_matrix(directions: list[FloatArray | None]) -> FloatArray:
    """``|d_a . d_c|`` over the observable axes; unobservable rows and columns are identity."""
    matrix = np.eye(3)
    for a, c in itertools.product(range(3), repeat=2):
        da, dc = directions[a], directions[c]
        if a != c and da is not None and dc is not None:
            matrix[a, c] = abs(float(da @ dc))
    return matrix


def extents(
    mask: InstanceMask,
    pose: Pose,
    K: CameraIntrinsics,
    dims: BoxDims | None = None,
    *,
    instance: int | None = None,
    min_angle_deg: float = 5.0,
    min_separation_deg: float = 0.0,
    directions: list[FloatArray | None] | None = None,
) -> AxisExtents:
    """Span of the full silhouette along each observable axis's image direction, in pixels."""
    selected = mask.select(instance)
    if not selected.any():
        raise EmptyMaskError(instance)
    rows, cols = np.nonzero(selected)
    pixels = np.column_stack((cols, rows)).astype(np.float64)

    if directions is None:
        directions = axis_image_directions(
            pose, K, dims, min_angle_deg=min_angle_deg, min_separation_deg=min_separation_deg
        )
    values = np.zeros(3)
    observable = np.zeros(3, dtype=bool)
    for axis, direction in enumerate(directions):
        if direction is None:
            continue
        projected = pixels @ direction
        values[axis] = projected.max() - projected.min()
        observable[axis] = True
    return AxisExtents(e=values, observable=observable)


def _axis_image_direction(
    K: CameraIntrinsics,
    center: FloatArray,
    axis: FloatArray,
    half_length: float,
    ray: FloatArray,
    min_angle_deg: float,
) -> FloatArray | None:
    angle = math.degrees(math.acos(min(1.0, abs(float(axis @ ray)))))
    if angle < min_angle_deg:
        return None
    # Keep both endpoints in front of the camera for very deep boxes.
    reach = min(half_length, 0.5 * float(center[2]))
    delta = project_point(K, center + reach * axis) - project_point(K, center - reach * axis)
    length = float(np.linalg.norm(delta))
    if length < 1e-3:
        return None
    return delta / length
