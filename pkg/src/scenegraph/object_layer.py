"""Query-time object formation: oriented boxes, the object cache, and metrics.

Objects are never formed at mapping time. A query resolves masks through the
visual memory, back-projects them, fits an oriented bounding box per instance,
and stores the result in the cache. Repeat queries (including queries that
found nothing) are answered from the cache without oracle calls.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .frame_ingest import PointCloud

AXES_ORTHO_TOL = 1e-6
CONTAINMENT_EPS = 1e-9


class DegenerateGeometry(ValueError):
    pass


@dataclass
class OrientedBBox:
    center: np.ndarray        # (3,)
    axes: np.ndarray          # 3x3, columns are box axes, orthonormal
    half_extents: np.ndarray  # (3,), positive

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.axes = np.asarray(self.axes, dtype=np.float64)
        self.half_extents = np.asarray(self.half_extents, dtype=np.float64)
        if np.max(np.abs(self.axes.T @ self.axes - np.eye(3))) > AXES_ORTHO_TOL:
            raise DegenerateGeometry("box axes are not orthonormal")
        if np.any(self.half_extents <= 0):
            raise DegenerateGeometry("box half extents must be positive")

    def corners(self):
        signs = np.array(
            [[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)],
            dtype=np.float64,
        )
        return self.center + (signs * self.half_extents) @ self.axes.T

    def contains(self, points, eps=CONTAINMENT_EPS):
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        local = np.abs((pts - self.center) @ self.axes)
        return np.all(local <= self.half_extents + eps, axis=1)

    def volume(self):
        return float(8.0 * np.prod(self.half_extents))

    def transformed(self, T):
        return OrientedBBox(
            center=T[:3, :3] @ self.center + T[:3, 3],
            axes=T[:3, :3] @ self.axes,
            half_extents=self.half_extents.copy(),
        )


@dataclass
class CachedObject:
    object_id: int
    query_text: str
    points: PointCloud
    box: OrientedBBox
    source_keyframes: list
    source_submaps: list


def _canonical_axes(axes):
    """Deterministic sign convention, then restore right-handedness."""
    axes = axes.copy()
    for col in range(3):
        lead = np.argmax(np.abs(axes[:, col]))
        if axes[lead, col] < 0:
            axes[:, col] = -axes[:, col]
    if np.linalg.det(axes) < 0:
        axes[:, 2] = -axes[:, 2]
    return axes


def _min_area_rect_axes(points2d):
    """2D rotating-calipers directions; returns (u, area extents) of best rect."""
    hull2 = ConvexHull(points2d)
    verts = points2d[hull2.vertices]
    best = None
    n = len(verts)
    for i in range(n):
        edge = verts[(i + 1) % n] - verts[i]
        length = np.hypot(edge[0], edge[1])
        if length < 1e-15:
            continue
        d = edge / length
        perp = np.array([-d[1], d[0]])
        a = verts @ d
        b = verts @ perp
        area = (a.max() - a.min()) * (b.max() - b.min())
        if best is None or area < best[0] - 1e-15:
            best = (area, d, perp)
    if best is None:
        raise DegenerateGeometry("degenerate 2D hull")
    return best[1], best[2]


def _hull_flush_axes(points):
    """Min-volume orientation search over hull-face-flush boxes.

    Used when the covariance spectrum is isotropic and PCA directions are
    meaningless (e.g. the corners of a cube). Each 3D hull facet normal is
    tried as one box axis with the in-plane pair from 2D rotating calipers.
    """
    try:
        hull = ConvexHull(points)
    except QhullError as exc:
        raise DegenerateGeometry("degenerate point set for hull search") from exc
    verts = points[hull.vertices]
    seen = []
    best = None
    for eq in hull.equations:
        normal = eq[:3] / np.linalg.norm(eq[:3])
        if any(abs(normal @ s) > 1.0 - 1e-9 for s in seen):
            continue
        seen.append(normal)
        ref = np.array([1.0, 0.0, 0.0])
        if abs(normal @ ref) > 0.9:
            ref = np.array([0.0, 1.0, 0.0])
        u0 = np.cross(normal, ref)
        u0 /= np.linalg.norm(u0)
        v0 = np.cross(normal, u0)
        plane_pts = np.stack([verts @ u0, verts @ v0], axis=1)
        d2, p2 = _min_area_rect_axes(plane_pts)
        u = d2[0] * u0 + d2[1] * v0
        v = p2[0] * u0 + p2[1] * v0
        proj = verts @ np.stack([u, v, normal], axis=1)
        spans = proj.max(axis=0) - proj.min(axis=0)
        volume = float(np.prod(spans))
        if best is None or volume < best[0] - 1e-12:
            best = (volume, np.stack([u, v, normal], axis=1))
    _, axes = best
    order = np.argsort(-np.abs((verts - verts.mean(axis=0)) @ axes).max(axis=0))
    return axes[:, order]


def fit_oriented_bbox(points, trim_quantile=0.005, min_containment=0.99):
    """PCA-aligned box with per-axis quantile trimming.

    Axes are the covariance eigenvectors (descending eigenvalue,
    right-handed). When the spectrum is isotropic and PCA cannot orient the
    box, a hull-face-flush minimum-volume search resolves the orientation.
    Extents come from min/max projections of the quantile-trimmed points and
    are then expanded, if needed, until at least `min_containment` of the
    input points fall inside.
    """
    if isinstance(points, PointCloud):
        pts = points.points
    else:
        pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise DegenerateGeometry("expected an (N, 3) point array")
    n = pts.shape[0]
    if n < 3:
        raise DegenerateGeometry("need at least 3 points to fit a box")
    center0 = pts.mean(axis=0)
    centered = pts - center0
    cov = centered.T @ centered / n
    evals, evecs = np.linalg.eigh(cov)
    if evals[-1] <= 0:
        raise DegenerateGeometry("all points coincide")
    if evals[1] <= evals[-1] * 1e-12:
        raise DegenerateGeometry("points are collinear")
    axes = evecs[:, ::-1]
    spread = (evals[-1] - evals[0]) / evals[-1]
    if spread < 1e-9:
        axes = _hull_flush_axes(pts)
    axes = _canonical_axes(axes)

    proj = centered @ axes
    lo = np.empty(3)
    hi = np.empty(3)
    for k in range(3):
        col = proj[:, k]
        q_lo = np.quantile(col, trim_quantile)
        q_hi = np.quantile(col, 1.0 - trim_quantile)
        kept = col[(col >= q_lo) & (col <= q_hi)]
        if kept.size == 0:
            kept = col
        lo[k] = kept.min()
        hi[k] = kept.max()
    local_center = (lo + hi) / 2.0
    half = np.maximum((hi - lo) / 2.0, 1e-9)

    # Expand uniformly until the containment floor holds (trimming three axes
    # independently can otherwise drop a few percent of the points).
    norm_coord = np.max(np.abs(proj - local_center) / half, axis=1)
    rank = int(np.ceil(min_containment * n)) - 1
    scale = np.partition(norm_coord, rank)[rank]
    if scale > 1.0:
        half = half * scale

    return OrientedBBox(
        center=center0 + axes @ local_center,
        axes=axes,
        half_extents=half,
    )


def osr_match(estimated, truth):
    """Mutual centroid containment, boundary inclusive."""
    return bool(
        estimated.contains(truth.center[None, :])[0]
        and truth.contains(estimated.center[None, :])[0]
    )


def iou_3d(a, b, resolution=64):
    """Volume IoU by fixed-resolution voxel sampling of the union's AABB."""
    corners = np.vstack([a.corners(), b.corners()])
    lo = corners.min(axis=0)
    hi = corners.max(axis=0)
    steps = (hi - lo) / resolution
    ticks = [lo[k] + (np.arange(resolution) + 0.5) * steps[k] for k in range(3)]
    gx, gy, gz = np.meshgrid(*ticks, indexing="ij")
    samples = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    in_a = a.contains(samples, eps=0.0)
    in_b = b.contains(samples, eps=0.0)
    union = np.count_nonzero(in_a | in_b)
    if union == 0:
        return 0.0
    inter = np.count_nonzero(in_a & in_b)
    return float(inter) / float(union)


def evaluate_objects(estimates, truths, resolution=64):
    """Greedy 1-1 matching by descending IoU; osR and mean IoU over truths."""
    if not truths:
        return {"osR": 0.0, "mean_IoU": 0.0}
    if not estimates:
        return {"osR": 0.0, "mean_IoU": 0.0}
    est_boxes = [e.box if isinstance(e, CachedObject) else e for e in estimates]
    truth_boxes = [t.box if isinstance(t, CachedObject) else t for t in truths]
    ious = np.array(
        [[iou_3d(e, t, resolution) for t in truth_boxes] for e in est_boxes]
    )
    matched_e = set()
    matched_t = set()
    pairs = []
    while len(matched_e) < len(est_boxes) and len(matched_t) < len(truth_boxes):
        best = None
        for i in range(len(est_boxes)):
            if i in matched_e:
                continue
            for j in range(len(truth_boxes)):
                if j in matched_t:
                    continue
                if best is None or ious[i, j] > best[0]:
                    best = (ious[i, j], i, j)
        _, i, j = best
        matched_e.add(i)
        matched_t.add(j)
        pairs.append((i, j))
    recalled = sum(
        1 for i, j in pairs if osr_match(est_boxes[i], truth_boxes[j])
    )
    mean_iou = sum(ious[i, j] for i, j in pairs) / len(truth_boxes)
    return {"osR": recalled / len(truth_boxes), "mean_IoU": float(mean_iou)}


@dataclass
class ObjectCache:
    """Query-text-keyed store of extracted objects; nonentity is cached too."""

    _entries: dict = field(default_factory=dict)
    _next_id: int = 0

    @staticmethod
    def key_for(text):
        return text.strip().lower()

    def __contains__(self, text):
        return self.key_for(text) in self._entries

    def get(self, text):
        return self._entries[self.key_for(text)]

    def put(self, text, objects):
        self._entries[self.key_for(text)] = objects

    def allocate_id(self):
        oid = self._next_id
        self._next_id += 1
        return oid

    def queries(self):
        return sorted(self._entries)

    def all_objects(self):
        for key in sorted(self._entries):
            yield from self._entries[key]


def merge_instance_candidates(candidates):
    """Group per-mask candidates that describe one physical object.

    Candidates are (keyframe_id, PointCloud, OrientedBBox) triples. Two
    candidates from different keyframes merge when their boxes pass the
    mutual-centroid containment test; merged groups get one refit box.
    """
    n = len(candidates)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            if candidates[i][0] == candidates[j][0]:
                continue
            if osr_match(candidates[i][2], candidates[j][2]):
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[max(ri, rj)] = min(ri, rj)

    groups = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)

    merged = []
    for root in sorted(groups):
        members = groups[root]
        if len(members) == 1:
            kid, cloud, box = candidates[members[0]]
            merged.append(([kid], cloud, box))
            continue
        kids = [candidates[m][0] for m in members]
        pts = np.vstack([candidates[m][1].points for m in members])
        kf = np.concatenate([candidates[m][1].keyframe_ids for m in members])
        cloud = PointCloud(points=pts, keyframe_ids=kf)
        box = fit_oriented_bbox(cloud)
        merged.append((kids, cloud, box))
    return merged
