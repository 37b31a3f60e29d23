from __future__ import annotations

from collections.abc import Iterator
from dataclasses import dataclass
import logging
import math
import time
from typing import Literal, Protocol

import numpy as np
from numpy.typing import NDArray

from box6d.exceptions import (
    Box6DError,
    DegenerateCloudError,
    DegenerateExtentError,
    DimensionSearchError,
    EmptyCloudError,
    EmptyMaskError,
    InvalidArgumentError,
    PoseEstimationError,
)
from box6d.schemas import SearchConfig, TraceReason
from box6d.services.core import (
    BoxDims,
    CameraIntrinsics,
    DepthImage,
    FloatArray,
    InstanceMask,
    PointCloud,
    Pose,
    ScaleVec,
    rotation_angle_deg,
    scaled_template,
)
from box6d.services.pose import backproject, box_frame, nearest_symmetric_rotation
from box6d.services.render import (
    CORNER_SIGNS,
    AxisExtents,
    axis_image_directions,
    box_corners,
    coupling_matrix,
    extents,
    project_point,
    render_view,
)

logger = logging.getLogger(__name__)

Decision = Literal["grow", "shrink", "frozen", "converged", "proportional"]

MIN_EDGE_PX = 2.0
# Order statistic taken as the far end of the points along an axis.
FAR_RANK = 5
MAD_TO_SIGMA = 1.4826


class PoseEstimate(Protocol):
    """Pose of the template with the given dimensions; ``previous`` is the last refreshed pose."""

    def __call__(self, dims: BoxDims, previous: Pose | None) -> Pose: ...


@dataclass(frozen=True, slots=True, eq=False)
class IterationRecord:
    iteration: int
    scale: ScaleVec
    pose: Pose
    e_cad: AxisExtents
    e_obs: AxisExtents
    observable: tuple[bool, bool, bool]
    decisions: tuple[Decision, Decision, Decision]

    @property
    def extent_error(self) -> float:
        return _extent_error(self.e_cad, self.e_obs)


@dataclass(frozen=True, slots=True, eq=False)
class SearchTrace:
    records: tuple[IterationRecord, ...]
    reason: TraceReason | None
    iterations_used: int
    wall_time_s: float
    final_extent_error: float = math.nan


@dataclass(frozen=True, slots=True, eq=False)
class SearchResult:
    scale: ScaleVec
    pose: Pose
    trace: SearchTrace

    def __iter__(self) -> Iterator[object]:
        return iter((self.scale, self.pose, self.trace))


def _extent_error(e_cad: AxisExtents, e_obs: AxisExtents) -> float:
    observable = e_cad.observable & e_obs.observable
    if not observable.any():
        return 0.0
    return float(np.abs(e_cad.e - e_obs.e)[observable].max())


def _image_direction(K: CameraIntrinsics, origin: FloatArray, direction: FloatArray) -> tuple[FloatArray, float] | None:
    end = origin + direction
    if origin[2] <= 0 or end[2] <= 0:
        return None
    delta = project_point(K, end) - project_point(K, origin)
    length = float(np.linalg.norm(delta))
    if length < 1e-9:
        return None
    return delta / length, length


def _undirected_angle_deg(a: FloatArray, b: FloatArray) -> float:
    return math.degrees(math.acos(min(1.0, abs(float(a @ b)))))


def touches_border(mask: InstanceMask) -> bool:
    data = mask.data
    return bool(data[0].any() or data[-1].any() or data[:, 0].any() or data[:, -1].any())


def nearest_vertex(dims: BoxDims, pose: Pose) -> tuple[int, FloatArray]:
    """Index and camera-frame position of the box corner closest to the camera."""
    corners = box_corners(dims, pose)
    nearest = int(np.argmin(np.linalg.norm(corners, axis=1)))
    return nearest, corners[nearest]


def inward_axes(nearest: int, pose: Pose) -> FloatArray:
    """Unit edge directions leaving corner ``nearest`` into the box, one column per axis."""
    return pose.rotation * -CORNER_SIGNS[nearest]


def axes_aligned_around_vertex(
    dims: BoxDims,
    pose: Pose,
    prev_pose: Pose | None,
    K: CameraIntrinsics,
    tol_deg: float,
    *,
    observed_frame: Pose | None = None,
) -> bool:
    """The edges at the nearest vertex line up with the observed box axes on screen.

    Edge ``a`` is compared with observed axis ``a`` after the observed frame is snapped to the
    cube-symmetric variant closest to ``pose``; edges shorter than two pixels are not judged.
    With a previous pose the rotation must also have settled. Without an observed frame the
    previous pose is required and the edges are compared with the box's own axes at its center.
    """
    if prev_pose is not None and rotation_angle_deg(pose.rotation, prev_pose.rotation) >= tol_deg:
        return False
    if prev_pose is None and observed_frame is None:
        return False
    corners = box_corners(dims, pose)
    if np.any(corners[:, 2] <= 0):
        return False
    nearest, vertex = nearest_vertex(dims, pose)

    if observed_frame is not None:
        reference_axes = nearest_symmetric_rotation(observed_frame.rotation, pose.rotation)
        anchor = vertex
    else:
        reference_axes = pose.rotation
        anchor = pose.translation
    step = 0.01 * float(np.linalg.norm(anchor))

    edges = inward_axes(nearest, pose) * dims.as_array()
    judged = 0
    for axis in range(3):
        found = _image_direction(K, vertex, edges[:, axis])
        if found is None or found[1] < MIN_EDGE_PX:
            continue
        reference = _image_direction(K, anchor, step * reference_axes[:, axis])
        if reference is None or _undirected_angle_deg(found[0], reference[0]) > tol_deg:
            return False
        judged += 1
    return judged > 0


def axis_reach(points: FloatArray, vertex: FloatArray, direction: FloatArray) -> float:
    """How far the points run from ``vertex`` along ``direction``, ignoring the few farthest."""
    if len(points) == 0:
        return 0.0
    along = (points - vertex) @ direction
    k = min(FAR_RANK, len(along) - 1)
    return max(0.0, float(-np.partition(-along, k)[k]))


def _edge_vector(K: CameraIntrinsics, vertex: FloatArray, direction: FloatArray, length: float) -> FloatArray:
    end = vertex + length * direction
    if vertex[2] <= 0 or end[2] <= 0 or length <= 0:
        return np.zeros(2)
    return project_point(K, end) - project_point(K, vertex)


def decoupled_lengths(
    e: AxisExtents, directions: list[FloatArray | None], routed_edges: list[FloatArray]
) -> FloatArray:
    """On-screen edge length of each observable axis with the other axes' share of the silhouette removed.

    A silhouette's span along ``d_a`` is the sum of ``|d_a . g_c|`` over the projected edges ``g_c``.
    Edges of unobservable axes are given in ``routed_edges``; the rest are solved for.
    """
    rhs = np.zeros(3)
    for axis, direction in enumerate(directions):
        if direction is None:
            continue
        rhs[axis] = e.e[axis] - sum(abs(float(direction @ g)) for g in routed_edges)
    return np.linalg.solve(coupling_matrix(directions), rhs)


def metric_edge_length(K: CameraIntrinsics, vertex: FloatArray, direction: FloatArray, pixels: float) -> float | None:
    """Metric length of an edge leaving ``vertex`` along ``direction`` that spans ``pixels`` on screen.

    None when the edge cannot be that long in front of the camera.
    """
    vx, vy, vz = (float(c) for c in vertex)
    ux, uy, uz = (float(c) for c in direction)
    gain = math.hypot(K.fx * (ux * vz - vx * uz), K.fy * (uy * vz - vy * uz))
    denominator = gain - pixels * vz * uz
    if pixels <= 0 or denominator <= 0:
        return None
    return pixels * vz * vz / denominator


def noise_sigma(depth: DepthImage, selected: NDArray[np.bool_]) -> float:
    """Robust depth noise level from second differences along rows inside ``selected``."""
    inside = selected & depth.valid
    run = inside[:, :-2] & inside[:, 1:-1] & inside[:, 2:]
    if not run.any():
        return 0.0
    z = depth.data
    second = z[:, :-2] - 2.0 * z[:, 1:-1] + z[:, 2:]
    # Second differences of white noise have variance 6 sigma^2.
    return float(MAD_TO_SIGMA * np.median(np.abs(second[run])) / math.sqrt(6.0))


def proportional_update(s: ScaleVec, e_obs: AxisExtents, e_cad: AxisExtents) -> ScaleVec:
    """One-step rescale by the observed/rendered extent ratio on observable axes."""
    scale = s.as_array()
    observable = e_obs.observable & e_cad.observable
    for axis in np.nonzero(observable)[0]:
        if e_cad.e[axis] <= 0:
            raise DegenerateExtentError(int(axis))
        scale[axis] *= e_obs.e[axis] / e_cad.e[axis]
    return ScaleVec.from_array(scale)


@dataclass(frozen=True, slots=True, eq=False)
class _Measurement:
    e_cad: AxisExtents
    e_obs: AxisExtents
    vertex: FloatArray
    inward: FloatArray
    len_cad: FloatArray
    len_obs: FloatArray
    reach_cad: FloatArray
    reach_obs: FloatArray
    clipped: bool

    @property
    def kept(self) -> NDArray[np.bool_]:
        return self.e_cad.observable & self.e_obs.observable


class _DimensionSearch:
    """Shared project-compare-rescale loop behind both public entry points."""

    def __init__(
        self,
        obs_mask: InstanceMask,
        obs_depth: DepthImage,
        instance: int,
        K: CameraIntrinsics,
        pose_estimator: PoseEstimate,
        cfg: SearchConfig,
    ) -> None:
        self._mask = obs_mask
        self._depth = obs_depth
        self._instance = instance
        self._K = K
        self._estimate = pose_estimator
        self._cfg = cfg
        self._selected = obs_mask.select(instance)
        if not self._selected.any():
            raise EmptyMaskError(instance)
        try:
            self._cloud: PointCloud | None = backproject(obs_depth, obs_mask, instance, K)
        except EmptyCloudError:
            self._cloud = None
        self._band = cfg.depth_span_tol + 3.0 * noise_sigma(obs_depth, self._selected)
        self._records: list[IterationRecord] = []
        self._started = time.perf_counter()

    def _trace(self, reason: TraceReason | None, final_error: float = math.nan) -> SearchTrace:
        return SearchTrace(
            records=tuple(self._records),
            reason=reason,
            iterations_used=len(self._records),
            wall_time_s=time.perf_counter() - self._started,
            final_extent_error=final_error,
        )

    def _pose(self, dims: BoxDims, previous: Pose | None) -> Pose:
        try:
            return self._estimate(dims, previous)
        except PoseEstimationError as exc:
            if exc.trace is None:
                exc.trace = self._trace(None)
            raise
        except Box6DError as exc:
            raise PoseEstimationError(f"pose estimation failed: {exc}", trace=self._trace(None)) from exc

    def _measure(self, dims: BoxDims, pose: Pose) -> _Measurement:
        K, cfg = self._K, self._cfg
        view = render_view(dims, pose, K)
        if view.is_empty:
            raise DimensionSearchError("rendered template is empty (outside the view)", trace=self._trace(None))
        directions = axis_image_directions(
            pose,
            K,
            dims,
            min_angle_deg=cfg.min_observable_angle_deg,
            min_separation_deg=cfg.min_axis_separation_deg,
        )
        e_cad = extents(view.mask, pose, K, dims, directions=directions)
        e_obs = extents(self._mask, pose, K, dims, instance=self._instance, directions=directions)

        nearest, vertex = nearest_vertex(dims, pose)
        inward = inward_axes(nearest, pose)
        rendered = backproject(view.depth, view.mask, 1, K).points
        observed = self._cloud.points if self._cloud is not None else np.empty((0, 3))
        reach_cad = np.array([axis_reach(rendered, vertex, inward[:, a]) for a in range(3)])
        reach_obs = np.array([axis_reach(observed, vertex, inward[:, a]) for a in range(3)])

        routed = [a for a in range(3) if directions[a] is None]
        cad_edges = [_edge_vector(K, vertex, inward[:, r], reach_cad[r]) for r in routed]
        obs_edges = [_edge_vector(K, vertex, inward[:, r], reach_obs[r]) for r in routed]
        return _Measurement(
            e_cad=e_cad,
            e_obs=e_obs,
            vertex=vertex,
            inward=inward,
            len_cad=decoupled_lengths(e_cad, directions, cad_edges),
            len_obs=decoupled_lengths(e_obs, directions, obs_edges),
            reach_cad=reach_cad,
            reach_obs=reach_obs,
            clipped=touches_border(view.mask),
        )

    def _observed_frame(self) -> Pose | None:
        if self._cloud is None:
            return None
        try:
            return box_frame(self._cloud).pose
        except (EmptyCloudError, DegenerateCloudError, InvalidArgumentError):
            return None

    def _depth_decision(self, reach_obs: float, reach_cad: float) -> Decision:
        """Bisection step for an axis judged by how deep the points run rather than by the silhouette."""
        if reach_obs < self._band and reach_cad < self._band:
            return "frozen"
        if abs(reach_obs - reach_cad) < self._cfg.depth_span_tol:
            return "frozen"
        return "grow" if reach_obs > reach_cad else "shrink"

    def run(self, *, early_stop: bool) -> SearchResult:
        cfg = self._cfg
        bounds = cfg.bounds_init
        lo, hi = bounds.lo.copy(), bounds.hi.copy()
        scale = np.clip(np.ones(3), lo, hi)
        observed_frame = self._observed_frame() if early_stop else None
        previous: Pose | None = None

        for iteration in range(1, cfg.t_max + 1):
            s = ScaleVec.from_array(scale)
            dims = scaled_template(s)
            pose = self._pose(dims, previous)
            m = self._measure(dims, pose)
            kept = m.kept
            error = _extent_error(m.e_cad, m.e_obs)
            logger.debug(
                "Iteration %d: s=%s e_cad=%s e_obs=%s error=%.2f px",
                iteration,
                np.round(scale, 4).tolist(),
                np.round(m.e_cad.e, 1).tolist(),
                np.round(m.e_obs.e, 1).tolist(),
                error,
            )

            depth_decisions = {
                axis: self._depth_decision(m.reach_obs[axis], m.reach_cad[axis]) for axis in range(3) if not kept[axis]
            }
            if error <= cfg.tau_px and all(d == "frozen" for d in depth_decisions.values()):
                settled = tuple("converged" if kept[axis] else "frozen" for axis in range(3))
                self._record(iteration, s, pose, m, settled)
                return SearchResult(s, pose, self._trace("extent-converged", error))

            # A silhouette cut off by the image border understates the template.
            if (
                early_stop
                and not m.clipped
                and axes_aligned_around_vertex(
                    dims, pose, previous, self._K, cfg.vertex_align_tol, observed_frame=observed_frame
                )
            ):
                return self._finish_early(iteration, s, pose, m, bounds.lo, bounds.hi)

            decisions: list[Decision] = []
            for axis in range(3):
                if kept[axis]:
                    # A tie counts as overfill and shrinks the box.
                    decision: Decision = "grow" if m.len_obs[axis] - m.len_cad[axis] > 0 else "shrink"
                else:
                    decision = depth_decisions[axis]
                if decision == "grow":
                    lo[axis] = scale[axis]
                elif decision == "shrink":
                    hi[axis] = scale[axis]
                if decision != "frozen":
                    scale[axis] = 0.5 * (lo[axis] + hi[axis])
                decisions.append(decision)
            self._record(iteration, s, pose, m, tuple(decisions))

            active = [axis for axis in range(3) if decisions[axis] != "frozen"]
            if all(hi[axis] - lo[axis] < cfg.tau_scale for axis in active):
                return SearchResult(s, pose, self._trace("interval-converged", error))
            previous = pose

        last = self._records[-1]
        return SearchResult(last.scale, last.pose, self._trace("max-iters", last.extent_error))

    def _finish_early(
        self,
        iteration: int,
        s: ScaleVec,
        pose: Pose,
        m: _Measurement,
        lo: FloatArray,
        hi: FloatArray,
    ) -> SearchResult:
        """One proportional step on metric edge lengths, then a final pose refresh."""
        kept = m.kept
        obs = m.e_obs.e.copy()
        cad = m.e_cad.e.copy()
        for axis in np.nonzero(kept)[0]:
            direction = m.inward[:, axis]
            metric_obs = metric_edge_length(self._K, m.vertex, direction, float(m.len_obs[axis]))
            metric_cad = metric_edge_length(self._K, m.vertex, direction, float(m.len_cad[axis]))
            if metric_obs is not None and metric_cad is not None:
                obs[axis], cad[axis] = metric_obs, metric_cad
        scale = proportional_update(
            s, AxisExtents(e=obs, observable=kept), AxisExtents(e=cad, observable=kept)
        ).as_array()

        decisions: list[Decision] = []
        for axis in range(3):
            if kept[axis]:
                decisions.append("proportional")
            elif m.reach_cad[axis] > self._band:
                scale[axis] *= m.reach_obs[axis] / m.reach_cad[axis]
                decisions.append("proportional")
            else:
                decisions.append("frozen")
        self._record(iteration, s, pose, m, tuple(decisions))

        rescaled = ScaleVec.from_array(np.clip(scale, lo, hi))
        dims = scaled_template(rescaled)
        refreshed = self._pose(dims, pose)
        final = self._measure(dims, refreshed)
        error = _extent_error(final.e_cad, final.e_obs)
        logger.debug("Early stop: s=%s error=%.2f px", np.round(rescaled.as_array(), 4).tolist(), error)
        return SearchResult(rescaled, refreshed, self._trace("early-stopped", error))

    def _record(
        self,
        iteration: int,
        s: ScaleVec,
        pose: Pose,
        m: _Measurement,
        decisions: tuple[Decision, ...],
    ) -> None:
        self._records.append(
            IterationRecord(
                iteration=iteration,
                scale=s,
                pose=pose,
                e_cad=m.e_cad,
                e_obs=m.e_obs,
                observable=tuple(bool(o) for o in m.kept),
                decisions=decisions,
            )
        )


def binary_search_dims(
    obs_mask: InstanceMask,
    obs_depth: DepthImage,
    instance: int,
    K: CameraIntrinsics,
    pose_estimator: PoseEstimate,
    cfg: SearchConfig | None = None,
) -> SearchResult:
    """Per-axis bisection of the template scale driven by rendered vs observed extents."""
    search = _DimensionSearch(obs_mask, obs_depth, instance, K, pose_estimator, cfg or SearchConfig())
    return search.run(early_stop=False)


def estimate_dimensions(
    obs_mask: InstanceMask,
    obs_depth: DepthImage,
    instance: int,
    K: CameraIntrinsics,
    pose_estimator: PoseEstimate,
    cfg: SearchConfig | None = None,
) -> SearchResult:
    """Bisection with a one-step proportional finish once the pose has settled."""
    cfg = cfg or SearchConfig()
    search = _DimensionSearch(obs_mask, obs_depth, instance, K, pose_estimator, cfg)
    return search.run(early_stop=cfg.early_stop_enabled)


TRACE_COLUMNS = (
    "iteration",
    "sx",
    "sy",
    "sz",
    "tx",
    "ty",
    "tz",
    "e_cad_x",
    "e_cad_y",
    "e_cad_z",
    "e_obs_x",
    "e_obs_y",
    "e_obs_z",
    "decision_x",
    "decision_y",
    "decision_z",
)


def trace_rows(trace: SearchTrace) -> list[dict[str, object]]:
    rows = []
    for record in trace.records:
        row: dict[str, object] = {"iteration": record.iteration}
        row.update(zip(("sx", "sy", "sz"), record.scale.as_array().tolist(), strict=True))
        row.update(zip(("tx", "ty", "tz"), record.pose.translation.tolist(), strict=True))
        row.update(zip(("e_cad_x", "e_cad_y", "e_cad_z"), record.e_cad.e.tolist(), strict=True))
        row.update(zip(("e_obs_x", "e_obs_y", "e_obs_z"), record.e_obs.e.tolist(), strict=True))
        row.update(zip(("decision_x", "decision_y", "decision_z"), record.decisions, strict=True))
        rows.append(row)
    return rows
