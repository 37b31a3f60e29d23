from __future__ import annotations

import logging

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from box6d.schemas import SegmentConfig
from box6d.services.core import CameraIntrinsics, DepthImage, FloatArray, InstanceMask, make_rng

logger = logging.getLogger(__name__)

PLANE_STREAM = 5


def _organized_points(depth: DepthImage, K: CameraIntrinsics) -> FloatArray:
    rows, cols = np.indices(depth.data.shape, dtype=np.float64)
    z = depth.data
    return np.stack(((cols - K.cx) * z / K.fx, (rows - K.cy) * z / K.fy, z), axis=-1)


def fit_dominant_plane(points: FloatArray, cfg: SegmentConfig) -> tuple[FloatArray, float] | None:
    """RANSAC plane (unit normal n, offset d with n.x + d = 0) refined by least squares on its inliers."""
    return fit_plane(
        points,
        threshold=cfg.plane_threshold,
        iterations=cfg.plane_iterations,
        sample_size=cfg.plane_sample_size,
        rng=make_rng(cfg.seed, PLANE_STREAM),
    )


def fit_plane(
    points: FloatArray, *, threshold: float, iterations: int, sample_size: int, rng: np.random.Generator
) -> tuple[FloatArray, float] | None:
    if len(points) < 3:
        return None
    if len(points) > sample_size:
        sample = points[rng.choice(len(points), size=sample_size, replace=False)]
    else:
        sample = points

    triples = sample[rng.integers(0, len(sample), size=(iterations, 3))]
    normals = np.cross(triples[:, 1] - triples[:, 0], triples[:, 2] - triples[:, 0])
    norms = np.linalg.norm(normals, axis=1)
    usable = norms > 1e-12
    if not usable.any():
        return None
    normals = normals[usable] / norms[usable, None]
    offsets = -np.einsum("ij,ij->i", normals, triples[usable, 0])
    support = (np.abs(sample @ normals.T + offsets) < threshold).sum(axis=0)
    best = int(np.argmax(support))
    normal, offset = normals[best], float(offsets[best])

    inliers = points[np.abs(points @ normal + offset) < threshold]
    if len(inliers) >= 3:
        centroid = inliers.mean(axis=0)
        _, _, vt = np.linalg.svd(inliers - centroid, full_matrices=False)
        normal = vt[2]
        offset = -float(normal @ centroid)
    return normal, offset


def _bbox_iou(a: tuple[int, int, int, int], b: tuple[int, int, int, int]) -> float:
    r0, c0 = max(a[0], b[0]), max(a[1], b[1])
    r1, c1 = min(a[2], b[2]), min(a[3], b[3])
    inter = max(0, r1 - r0 + 1) * max(0, c1 - c0 + 1)
    area_a = (a[2] - a[0] + 1) * (a[3] - a[1] + 1)
    area_b = (b[2] - b[0] + 1) * (b[3] - b[1] + 1)
    return inter / (area_a + area_b - inter)


def segment_instances(depth: DepthImage, K: CameraIntrinsics, cfg: SegmentConfig | None = None) -> InstanceMask:
    """Plane removal, organized Euclidean clustering, size filter, overlap suppression.

    Labels are 1..k in decreasing component size. Boxes touching face to face with coplanar
    fronts, such as a stacked column, come out as one instance; stacks need ground-truth or
    supplied masks.
    """
    cfg = cfg or SegmentConfig()
    height, width = depth.data.shape
    keep = depth.valid.copy()
    if not keep.any():
        return InstanceMask.empty(width, height)

    points = _organized_points(depth, K)
    if cfg.remove_plane:
        plane = fit_dominant_plane(points[keep], cfg)
        if plane is not None:
            normal, offset = plane
            on_plane = keep & (np.abs(points @ normal + offset) < cfg.plane_threshold)
            if np.count_nonzero(on_plane) >= cfg.min_plane_fraction * np.count_nonzero(keep):
                logger.debug("Removed dominant plane with %d pixels", int(np.count_nonzero(on_plane)))
                keep &= ~on_plane

    index = np.full(keep.shape, -1, dtype=np.int64)
    n_nodes = int(np.count_nonzero(keep))
    if n_nodes == 0:
        return InstanceMask.empty(width, height)
    index[keep] = np.arange(n_nodes)

    sources, targets = [], []
    for (ra, ca), (rb, cb) in (
        ((slice(None), slice(None, -1)), (slice(None), slice(1, None))),
        ((slice(None, -1), slice(None)), (slice(1, None), slice(None))),
    ):
        linked = keep[ra, ca] & keep[rb, cb]
        gap = np.linalg.norm(points[ra, ca] - points[rb, cb], axis=-1)
        linked &= gap < cfg.cluster_distance
        sources.append(index[ra, ca][linked])
        targets.append(index[rb, cb][linked])
    src = np.concatenate(sources)
    dst = np.concatenate(targets)
    graph = coo_matrix((np.ones(len(src), dtype=np.int8), (src, dst)), shape=(n_nodes, n_nodes))
    _, component_of = connected_components(graph, directed=False)

    components = np.full(keep.shape, -1, dtype=np.int64)
    components[keep] = component_of
    sizes = np.bincount(component_of)
    large = [int(c) for c in np.nonzero(sizes >= cfg.min_pixels)[0]]

    # Larger first; the first pixel position breaks ties so labels never depend on graph internals.
    first_pixel = {c: int(np.flatnonzero(components == c)[0]) for c in large}
    ordered = sorted(large, key=lambda c: (-sizes[c], first_pixel[c]))

    kept: list[tuple[int, tuple[int, int, int, int]]] = []
    for c in ordered:
        rows, cols = np.nonzero(components == c)
        box = (int(rows.min()), int(cols.min()), int(rows.max()), int(cols.max()))
        if all(_bbox_iou(box, other) <= cfg.nms_iou for _, other in kept):
            kept.append((c, box))

    labels = np.zeros(keep.shape, dtype=np.int32)
    for label, (c, _) in enumerate(kept, start=1):
        labels[components == c] = label
    logger.debug("Segmenter produced %d instances from %d components", len(kept), len(sizes))
    return InstanceMask(width=width, height=height, data=labels)


def proposal_confidences(mask: InstanceMask) -> dict[int, float]:
    """Proposal score = instance pixel count relative to the largest instance."""
    counts = {k: mask.count(k) for k in mask.instance_ids()}
    if not counts:
        return {}
    largest = max(counts.values())
    return {k: count / largest for k, count in counts.items()}
