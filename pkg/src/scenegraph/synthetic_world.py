"""Deterministic synthetic scenes with full ground truth.

Scenes are floor polygons (at z=0) plus yaw-rotated boxes, rendered by
ray-casting into depth, confidence, ground-mask, and exact per-instance masks.
Keyframe embeddings mix concept-codebook vectors by pixel share with Gaussian
noise, so cosine retrieval, place statistics, and region splits are
analytically controllable. Everything derives from the scene seed: the same
spec always produces a byte-identical session.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .frame_ingest import MANIFEST_NAME, SessionManifest, format_manifest, record_filename, write_frame_packet
from .object_layer import OrientedBBox
from .transforms import look_pose, rotation_z

BACKGROUND_LABEL = "__background__"
CODEBOOK_NAME = "codebook.json"
SCENE_SPEC_NAME = "scene_spec.json"
GROUND_TRUTH_NAME = "ground_truth.json"


class SceneError(ValueError):
    pass


@dataclass
class FloorSpec:
    label: str
    polygon: np.ndarray  # (K, 2) vertices in the z=0 plane


@dataclass
class BoxSpec:
    center: np.ndarray
    half_extents: np.ndarray
    yaw: float
    labels: list  # [(label, instance_id), ...]

    def rotation(self):
        return rotation_z(self.yaw)

    def oriented_box(self):
        return OrientedBBox(
            center=self.center,
            axes=self.rotation(),
            half_extents=self.half_extents,
        )


@dataclass
class CameraSpec:
    position: np.ndarray
    yaw: float
    pitch: float

    def pose(self):
        return look_pose(self.position, self.yaw, self.pitch)


@dataclass
class SceneSpec:
    seed: int = 0
    height: int = 64
    width: int = 64
    embedding_dim: int = 64
    intrinsics: tuple = None
    embedding_noise: float = 0.05
    min_mask_pixels: int = 10
    submap_size: int = 16
    floors: list = field(default_factory=list)
    boxes: list = field(default_factory=list)
    cameras: list = field(default_factory=list)

    def __post_init__(self):
        if self.intrinsics is None:
            self.intrinsics = (
                float(self.width),
                float(self.width),
                (self.width - 1) / 2.0,
                (self.height - 1) / 2.0,
            )

    def add_floor(self, label, polygon):
        self.floors.append(
            FloorSpec(label=label, polygon=np.asarray(polygon, dtype=np.float64))
        )

    def add_box(self, labels, center, half_extents, yaw=0.0):
        if isinstance(labels, str):
            labels = [(labels, f"{labels}_{len(self.boxes):03d}")]
        self.boxes.append(
            BoxSpec(
                center=np.asarray(center, dtype=np.float64),
                half_extents=np.asarray(half_extents, dtype=np.float64),
                yaw=float(yaw),
                labels=[(str(l), str(i)) for l, i in labels],
            )
        )

    def add_camera(self, position, yaw, pitch):
        self.cameras.append(
            CameraSpec(
                position=np.asarray(position, dtype=np.float64),
                yaw=float(yaw),
                pitch=float(pitch),
            )
        )

    def add_orbit(self, center, radius, height, count, pitch, start=0.0):
        """Ring of cameras looking inward at `center`."""
        cx, cy = float(center[0]), float(center[1])
        for k in range(count):
            angle = start + 2.0 * np.pi * k / count
            px = cx + radius * np.cos(angle)
            py = cy + radius * np.sin(angle)
            yaw = np.arctan2(cy - py, cx - px)
            self.add_camera((px, py, height), yaw, pitch)

    def concept_labels(self):
        labels = {f.label for f in self.floors}
        for box in self.boxes:
            labels.update(l for l, _ in box.labels)
        labels.add(BACKGROUND_LABEL)
        return sorted(labels)

    def to_dict(self):
        return {
            "seed": self.seed,
            "image_size": [self.height, self.width],
            "embedding_dim": self.embedding_dim,
            "intrinsics": list(self.intrinsics),
            "embedding_noise": self.embedding_noise,
            "min_mask_pixels": self.min_mask_pixels,
            "submap_size": self.submap_size,
            "floors": [
                {"label": f.label, "polygon": f.polygon.tolist()} for f in self.floors
            ],
            "boxes": [
                {
                    "center": b.center.tolist(),
                    "half_extents": b.half_extents.tolist(),
                    "yaw": b.yaw,
                    "labels": [[l, i] for l, i in b.labels],
                }
                for b in self.boxes
            ],
            "cameras": [
                {"position": c.position.tolist(), "yaw": c.yaw, "pitch": c.pitch}
                for c in self.cameras
            ],
        }

    @classmethod
    def from_dict(cls, data):
        spec = cls(
            seed=int(data.get("seed", 0)),
            height=int(data.get("image_size", [64, 64])[0]),
            width=int(data.get("image_size", [64, 64])[1]),
            embedding_dim=int(data.get("embedding_dim", 64)),
            intrinsics=tuple(data["intrinsics"]) if "intrinsics" in data else None,
            embedding_noise=float(data.get("embedding_noise", 0.05)),
            min_mask_pixels=int(data.get("min_mask_pixels", 10)),
            submap_size=int(data.get("submap_size", 16)),
        )
        for f in data.get("floors", []):
            spec.add_floor(f["label"], f["polygon"])
        for b in data.get("boxes", []):
            spec.add_box(
                [(l, i) for l, i in b["labels"]],
                b["center"],
                b["half_extents"],
                b.get("yaw", 0.0),
            )
        for c in data.get("cameras", []):
            spec.add_camera(c["position"], c["yaw"], c["pitch"])
        for orbit in data.get("orbits", []):
            spec.add_orbit(
                orbit["center"],
                orbit["radius"],
                orbit["height"],
                orbit["count"],
                orbit["pitch"],
                orbit.get("start", 0.0),
            )
        return spec


def points_in_polygon(points, polygon):
    """Even-odd rule point-in-polygon test, vectorized over points."""
    pts = np.atleast_2d(points)
    inside = np.zeros(len(pts), dtype=bool)
    n = len(polygon)
    for k in range(n):
        x1, y1 = polygon[k]
        x2, y2 = polygon[(k + 1) % n]
        crosses = ((y1 > pts[:, 1]) != (y2 > pts[:, 1])) & (
            pts[:, 0]
            < (x2 - x1) * (pts[:, 1] - y1) / (y2 - y1 + 1e-300) + x1
        )
        inside ^= crosses
    return inside


def build_codebook(labels, dim, seed):
    """Mutually orthonormal concept vectors (QR of a seeded Gaussian)."""
    if len(labels) > dim:
        raise SceneError(f"{len(labels)} concepts exceed embedding dim {dim}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x0C0DE]))
    raw = rng.standard_normal((dim, len(labels)))
    q, r = np.linalg.qr(raw)
    q = q * np.sign(np.diag(r))[None, :]
    return {label: q[:, k].copy() for k, label in enumerate(sorted(labels))}


def concept_vector(codebook, text, dim):
    """Codebook lookup with a deterministic pseudo-vector for unknown text."""
    key = text.strip().lower()
    if key in codebook:
        return codebook[key]
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    vec = rng.standard_normal(dim)
    return vec / np.linalg.norm(vec)


class SceneRenderer:
    """Ray-casts a scene spec; caches per-keyframe hit buffers."""

    def __init__(self, spec):
        self.spec = spec
        self._cache = {}

    def render(self, camera_index):
        if camera_index in self._cache:
            return self._cache[camera_index]
        spec = self.spec
        cam = spec.cameras[camera_index]
        pose = cam.pose()
        fx, fy, cx, cy = spec.intrinsics
        u = np.arange(spec.width, dtype=np.float64)
        v = np.arange(spec.height, dtype=np.float64)
        uu, vv = np.meshgrid(u, v)
        dirs_cam = np.stack(
            [(uu - cx) / fx, (vv - cy) / fy, np.ones_like(uu)], axis=-1
        ).reshape(-1, 3)
        dirs = dirs_cam @ pose[:3, :3].T
        origin = pose[:3, 3]

        n_pix = dirs.shape[0]
        best_t = np.full(n_pix, np.inf)
        hit_kind = np.full(n_pix, -1, dtype=np.int64)   # 0 floor, 1 box
        hit_index = np.full(n_pix, -1, dtype=np.int64)

        dz = dirs[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            t_floor = -origin[2] / dz
        valid = (dz != 0) & (t_floor > 1e-9) & np.isfinite(t_floor)
        if np.any(valid):
            hits = origin[None, :2] + t_floor[valid, None] * dirs[valid, :2]
            for fi, floor in enumerate(spec.floors):
                inside = points_in_polygon(hits, floor.polygon)
                sel = np.nonzero(valid)[0][inside]
                better = t_floor[sel] < best_t[sel]
                sel = sel[better]
                best_t[sel] = t_floor[sel]
                hit_kind[sel] = 0
                hit_index[sel] = fi

        for bi, box in enumerate(spec.boxes):
            R = box.rotation()
            o_local = R.T @ (origin - box.center)
            d_local = dirs @ R
            t_near = np.full(n_pix, -np.inf)
            t_far = np.full(n_pix, np.inf)
            miss = np.zeros(n_pix, dtype=bool)
            for axis in range(3):
                d_ax = d_local[:, axis]
                o_ax = o_local[axis]
                h = box.half_extents[axis]
                parallel = np.abs(d_ax) < 1e-12
                miss |= parallel & (np.abs(o_ax) > h)
                with np.errstate(divide="ignore", invalid="ignore"):
                    t1 = (-h - o_ax) / d_ax
                    t2 = (h - o_ax) / d_ax
                lo = np.minimum(t1, t2)
                hi = np.maximum(t1, t2)
                safe = ~parallel
                t_near[safe] = np.maximum(t_near[safe], lo[safe])
                t_far[safe] = np.minimum(t_far[safe], hi[safe])
            t_hit = np.where(t_near > 1e-9, t_near, np.where(t_far > 1e-9, t_far, np.inf))
            ok = (~miss) & (t_far >= t_near) & np.isfinite(t_hit) & (t_hit < best_t)
            best_t[ok] = t_hit[ok]
            hit_kind[ok] = 1
            hit_index[ok] = bi

        shape = (spec.height, spec.width)
        depth = np.where(np.isfinite(best_t), best_t, 0.0).reshape(shape)
        result = {
            "depth": depth.astype(np.float32),
            "hit_kind": hit_kind.reshape(shape),
            "hit_index": hit_index.reshape(shape),
            "pose": pose,
        }
        self._cache[camera_index] = result
        return result


class SyntheticMaskOracle:
    """Exact instance masks for (keyframe, label), desk-scale nonentity-aware.

    Counts its calls so tests can assert cache and stop-rule behavior.
    """

    def __init__(self, spec, renderer=None):
        self.spec = spec
        self.renderer = renderer or SceneRenderer(spec)
        self.calls = []

    def __call__(self, keyframe_id, text):
        self.calls.append((keyframe_id, text))
        label = text.strip().lower()
        instances = {}
        for bi, box in enumerate(self.spec.boxes):
            for box_label, instance in box.labels:
                if box_label.strip().lower() == label:
                    instances.setdefault(instance, []).append(bi)
        if not instances:
            return []
        buffers = self.renderer.render(keyframe_id)
        masks = []
        for instance in sorted(instances):
            members = instances[instance]
            mask = (buffers["hit_kind"] == 1) & np.isin(
                buffers["hit_index"], members
            )
            if mask.sum() >= self.spec.min_mask_pixels:
                masks.append(mask.astype(np.uint8))
        return masks


@dataclass
class GroundTruth:
    objects: list        # [{label, instance, box: OrientedBBox}]
    regions: list        # [{label, polygon (K,2) ndarray}]
    traversable: list    # list of polygons

    def objects_for(self, label):
        key = label.strip().lower()
        return [o for o in self.objects if o["label"].strip().lower() == key]

    def place_label(self, centroid_xy):
        for region in self.regions:
            if points_in_polygon(np.atleast_2d(centroid_xy), region["polygon"])[0]:
                return region["label"]
        return None

    def to_dict(self):
        return {
            "objects": [
                {
                    "label": o["label"],
                    "instance": o["instance"],
                    "center": o["box"].center.tolist(),
                    "axes": o["box"].axes.tolist(),
                    "half_extents": o["box"].half_extents.tolist(),
                }
                for o in self.objects
            ],
            "regions": [
                {"label": r["label"], "polygon": r["polygon"].tolist()}
                for r in self.regions
            ],
            "traversable": [p.tolist() for p in self.traversable],
        }

    @classmethod
    def from_dict(cls, data):
        objects = [
            {
                "label": o["label"],
                "instance": o["instance"],
                "box": OrientedBBox(
                    center=np.array(o["center"]),
                    axes=np.array(o["axes"]),
                    half_extents=np.array(o["half_extents"]),
                ),
            }
            for o in data["objects"]
        ]
        regions = [
            {"label": r["label"], "polygon": np.array(r["polygon"])}
            for r in data["regions"]
        ]
        traversable = [np.array(p) for p in data.get("traversable", [])]
        return cls(objects=objects, regions=regions, traversable=traversable)


def _instance_truth_box(members):
    """Ground-truth box of an instance: exact for one box, AABB for groups."""
    if len(members) == 1:
        return members[0].oriented_box()
    corners = np.vstack([b.oriented_box().corners() for b in members])
    lo = corners.min(axis=0)
    hi = corners.max(axis=0)
    return OrientedBBox(
        center=(lo + hi) / 2.0,
        axes=np.eye(3),
        half_extents=np.maximum((hi - lo) / 2.0, 1e-9),
    )


def build_ground_truth(spec):
    instances = {}
    for box in spec.boxes:
        for label, instance in box.labels:
            instances.setdefault((label, instance), []).append(box)
    objects = [
        {"label": label, "instance": instance, "box": _instance_truth_box(members)}
        for (label, instance), members in sorted(instances.items())
    ]
    regions = [
        {"label": f.label, "polygon": f.polygon.copy()} for f in spec.floors
    ]
    return GroundTruth(
        objects=objects,
        regions=regions,
        traversable=[f.polygon.copy() for f in spec.floors],
    )


def keyframe_embedding(spec, buffers, rng):
    """Pixel-share concept mixture plus Gaussian noise, renormalized."""
    codebook = spec_codebook(spec)
    counts = {}
    hit_kind = buffers["hit_kind"]
    hit_index = buffers["hit_index"]
    total = hit_kind.size
    for fi, floor in enumerate(spec.floors):
        c = int(np.count_nonzero((hit_kind == 0) & (hit_index == fi)))
        if c:
            counts[floor.label] = counts.get(floor.label, 0) + c
    for bi, box in enumerate(spec.boxes):
        c = int(np.count_nonzero((hit_kind == 1) & (hit_index == bi)))
        if c:
            for label, _ in box.labels:
                counts[label] = counts.get(label, 0) + c
    sky = int(np.count_nonzero(hit_kind == -1))
    if sky:
        counts[BACKGROUND_LABEL] = counts.get(BACKGROUND_LABEL, 0) + sky
    mix = np.zeros(spec.embedding_dim)
    for label in sorted(counts):
        mix += (counts[label] / total) * codebook[label]
    norm = np.linalg.norm(mix)
    if norm < 1e-12:
        mix = codebook[BACKGROUND_LABEL].copy()
    else:
        mix /= norm
    noisy = mix + rng.normal(0.0, spec.embedding_noise, size=spec.embedding_dim)
    return noisy / np.linalg.norm(noisy)


_CODEBOOK_CACHE = {}


def spec_codebook(spec):
    key = (spec.seed, spec.embedding_dim, tuple(spec.concept_labels()))
    if key not in _CODEBOOK_CACHE:
        _CODEBOOK_CACHE[key] = build_codebook(
            spec.concept_labels(), spec.embedding_dim, spec.seed
        )
    return _CODEBOOK_CACHE[key]


def generate_session(spec, out_dir):
    """Render the scene and write a frame-packet session with ground truth.

    Returns (session path, GroundTruth, SyntheticMaskOracle).
    """
    if not spec.cameras:
        raise SceneError("scene spec has no cameras")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    renderer = SceneRenderer(spec)
    manifest = SessionManifest(
        version=1,
        height=spec.height,
        width=spec.width,
        embedding_dim=spec.embedding_dim,
        submap_size=spec.submap_size,
    )
    (out_dir / MANIFEST_NAME).write_text(format_manifest(manifest))

    seen_pixels = np.zeros(len(spec.boxes), dtype=np.int64)
    ss = np.random.SeedSequence([spec.seed, 0x5E55])
    children = ss.spawn(len(spec.cameras))
    for kf, cam_seed in enumerate(children):
        buffers = renderer.render(kf)
        rng = np.random.default_rng(cam_seed)
        embedding = keyframe_embedding(spec, buffers, rng)
        ground = ((buffers["hit_kind"] == 0)).astype(np.uint8)
        conf = (buffers["depth"] > 0).astype(np.float32)
        for bi in range(len(spec.boxes)):
            seen_pixels[bi] += np.count_nonzero(
                (buffers["hit_kind"] == 1) & (buffers["hit_index"] == bi)
            )
        record = write_frame_packet(
            keyframe_id=kf,
            timestamp=kf / 10.0,
            pose=buffers["pose"],
            intrinsics=np.array(spec.intrinsics),
            depth=buffers["depth"],
            depth_confidence=conf,
            ground_mask=ground,
            embedding=embedding,
        )
        (out_dir / record_filename(kf)).write_bytes(record)

    unseen = sorted(
        {
            label
            for bi, box in enumerate(spec.boxes)
            if seen_pixels[bi] == 0
            for label, _ in box.labels
        }
    )
    if unseen:
        raise SceneError(f"objects never visible from any camera: {', '.join(unseen)}")

    codebook = spec_codebook(spec)
    (out_dir / CODEBOOK_NAME).write_text(
        json.dumps(
            {
                "dim": spec.embedding_dim,
                "labels": {k: v.tolist() for k, v in sorted(codebook.items())},
            },
            sort_keys=True,
        )
    )
    (out_dir / SCENE_SPEC_NAME).write_text(json.dumps(spec.to_dict(), sort_keys=True))
    truth = build_ground_truth(spec)
    (out_dir / GROUND_TRUTH_NAME).write_text(json.dumps(truth.to_dict(), sort_keys=True))
    return out_dir, truth, SyntheticMaskOracle(spec, renderer)


def load_scene(session_dir):
    """Rebuild (spec, truth, oracle, codebook) from a generated session."""
    session_dir = Path(session_dir)
    spec_path = session_dir / SCENE_SPEC_NAME
    if not spec_path.is_file():
        return None
    spec = SceneSpec.from_dict(json.loads(spec_path.read_text()))
    truth_path = session_dir / GROUND_TRUTH_NAME
    truth = (
        GroundTruth.from_dict(json.loads(truth_path.read_text()))
        if truth_path.is_file()
        else build_ground_truth(spec)
    )
    codebook = spec_codebook(spec)
    return spec, truth, SyntheticMaskOracle(spec), codebook


def region_precision_recall(predicted_ids, true_ids):
    pred = set(predicted_ids)
    true = set(true_ids)
    if not pred:
        return 0.0, 0.0 if true else 1.0
    precision = len(pred & true) / len(pred)
    recall = len(pred & true) / len(true) if true else 1.0
    return precision, recall


def evaluate_regions(graph, predicted_labels, truth):
    """Desk-scale region metrics over place nodes.

    predicted_labels maps tile_id -> label. Per true region label, precision
    and recall are computed over place nodes; semantic accuracy is the
    fraction of places whose predicted label matches the truth.
    """
    true_labels = {
        tid: truth.place_label(graph.nodes[tid].centroid[:2])
        for tid in graph.sorted_ids()
    }
    labels = sorted({l for l in true_labels.values() if l is not None})
    per_label = {}
    for label in labels:
        pred_ids = [t for t, l in predicted_labels.items() if l == label]
        true_ids = [t for t, l in true_labels.items() if l == label]
        precision, recall = region_precision_recall(pred_ids, true_ids)
        per_label[label] = {"precision": precision, "recall": recall}
    scored = [
        (tid, l) for tid, l in true_labels.items() if l is not None
    ]
    correct = sum(1 for tid, l in scored if predicted_labels.get(tid) == l)
    accuracy = correct / len(scored) if scored else 0.0
    macro_p = float(np.mean([v["precision"] for v in per_label.values()])) if per_label else 0.0
    macro_r = float(np.mean([v["recall"] for v in per_label.values()])) if per_label else 0.0
    return {
        "precision": macro_p,
        "recall": macro_r,
        "semantic_accuracy": accuracy,
        "per_label": per_label,
    }
