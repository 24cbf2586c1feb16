"""Frame-packet ingestion: container codec, validation, submaps, back-projection.

A session directory holds a plain-text manifest plus one little-endian binary
record per keyframe ({keyframe_id:08}.fpk). Records carry pose, intrinsics,
depth, depth confidence, a binary ground mask, and one unit semantic
embedding. Everything downstream consumes the validated FramePacket.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .transforms import apply_transform, is_rigid_transform

MANIFEST_NAME = "manifest.txt"
MANIFEST_KEYS = ("version", "H", "W", "D", "S")
HEADER_FORMAT = "<Qd16d4d"
HEADER_SIZE = struct.calcsize(HEADER_FORMAT)
EMBEDDING_NORM_TOL = 1e-3


class IngestError(ValueError):
    """Raised for malformed records, manifests, or invariant violations."""


@dataclass
class SessionManifest:
    version: int
    height: int
    width: int
    embedding_dim: int
    submap_size: int

    def record_size(self):
        hw = self.height * self.width
        return HEADER_SIZE + 4 * hw + 4 * hw + hw + 4 * self.embedding_dim


@dataclass
class FramePacket:
    keyframe_id: int
    timestamp: float
    pose: np.ndarray          # 4x4 world-from-camera
    intrinsics: np.ndarray    # (fx, fy, cx, cy)
    depth: np.ndarray         # HxW float32, meters
    depth_confidence: np.ndarray  # HxW float32 in [0, 1]
    ground_mask: np.ndarray   # HxW uint8 in {0, 1}
    embedding: np.ndarray     # D float64, unit norm

    @property
    def shape(self):
        return self.depth.shape

    def with_pose(self, pose):
        return replace(self, pose=pose)


@dataclass
class Submap:
    submap_id: int
    keyframe_ids: list
    base_transform: np.ndarray = field(default_factory=lambda: np.eye(4))


@dataclass
class PointCloud:
    points: np.ndarray                 # (N, 3) float64, world frame
    keyframe_ids: np.ndarray | None = None  # (N,) int64 source ids

    def __len__(self):
        return self.points.shape[0]


@dataclass
class PoseUpdateEvent:
    submap_id: int
    transform: np.ndarray  # 4x4, pre-composed onto the submap base transform

    def validate(self):
        if not is_rigid_transform(self.transform, rot_tol=1e-5):
            raise IngestError("pose update transform is not rigid")


def format_manifest(manifest):
    lines = [
        f"version={manifest.version}",
        f"H={manifest.height}",
        f"W={manifest.width}",
        f"D={manifest.embedding_dim}",
        f"S={manifest.submap_size}",
    ]
    return "\n".join(lines) + "\n"


def parse_manifest(text):
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if "=" not in line:
            raise IngestError(f"manifest line {lineno}: expected key=value")
        key, _, raw = line.partition("=")
        values[key.strip()] = raw.strip()
    missing = [k for k in MANIFEST_KEYS if k not in values]
    if missing:
        raise IngestError(f"manifest missing keys: {', '.join(missing)}")
    try:
        ints = {k: int(values[k]) for k in MANIFEST_KEYS}
    except ValueError as exc:
        raise IngestError(f"manifest value not an integer: {exc}") from exc
    if ints["version"] != 1:
        raise IngestError(f"unsupported manifest version {ints['version']}")
    for key in ("H", "W", "D", "S"):
        if ints[key] <= 0:
            raise IngestError(f"manifest {key} must be positive")
    return SessionManifest(
        version=ints["version"],
        height=ints["H"],
        width=ints["W"],
        embedding_dim=ints["D"],
        submap_size=ints["S"],
    )


def record_filename(keyframe_id):
    return f"{keyframe_id:08d}.fpk"


def write_frame_packet(keyframe_id, timestamp, pose, intrinsics, depth,
                       depth_confidence, ground_mask, embedding):
    """Serialize one keyframe record. Arrays are cast to the wire types."""
    pose = np.asarray(pose, dtype=np.float64)
    intr = np.asarray(intrinsics, dtype=np.float64)
    header = struct.pack(
        HEADER_FORMAT,
        int(keyframe_id),
        float(timestamp),
        *pose.reshape(16),
        *intr.reshape(4),
    )
    body = (
        np.ascontiguousarray(depth, dtype="<f4").tobytes()
        + np.ascontiguousarray(depth_confidence, dtype="<f4").tobytes()
        + np.ascontiguousarray(ground_mask, dtype=np.uint8).tobytes()
        + np.ascontiguousarray(embedding, dtype="<f4").tobytes()
    )
    return header + body


def parse_frame_packet(record, manifest):
    """Decode and validate one binary record against the session manifest."""
    if len(record) != manifest.record_size():
        raise IngestError(
            f"malformed record: {len(record)} bytes, expected {manifest.record_size()}"
        )
    fields = struct.unpack_from(HEADER_FORMAT, record)
    keyframe_id = fields[0]
    timestamp = fields[1]
    pose = np.array(fields[2:18], dtype=np.float64).reshape(4, 4)
    intrinsics = np.array(fields[18:22], dtype=np.float64)

    hw = manifest.height * manifest.width
    offset = HEADER_SIZE
    depth = np.frombuffer(record, dtype="<f4", count=hw, offset=offset)
    offset += 4 * hw
    conf = np.frombuffer(record, dtype="<f4", count=hw, offset=offset)
    offset += 4 * hw
    mask = np.frombuffer(record, dtype=np.uint8, count=hw, offset=offset)
    offset += hw
    emb = np.frombuffer(record, dtype="<f4", count=manifest.embedding_dim, offset=offset)

    if not np.isfinite(timestamp):
        raise IngestError("non-finite value in timestamp")
    if not np.all(np.isfinite(pose)):
        raise IngestError("non-finite value in pose")
    if not is_rigid_transform(pose):
        raise IngestError("pose rotation block is not orthonormal with det +1")
    if not np.all(np.isfinite(intrinsics)) or intrinsics[0] <= 0 or intrinsics[1] <= 0:
        raise IngestError("invalid intrinsics")
    if not np.all(np.isfinite(depth)):
        raise IngestError("non-finite value in depth")
    if np.any(depth < 0):
        raise IngestError("negative value in depth")
    if not np.all(np.isfinite(conf)):
        raise IngestError("non-finite value in depth_confidence")
    if np.any(conf < 0) or np.any(conf > 1):
        raise IngestError("depth_confidence outside [0, 1]")
    if not np.all((mask == 0) | (mask == 1)):
        raise IngestError("ground_mask holds values outside {0, 1}")
    emb64 = emb.astype(np.float64)
    if not np.all(np.isfinite(emb64)):
        raise IngestError("non-finite value in embedding")
    norm = np.linalg.norm(emb64)
    if norm == 0.0:
        raise IngestError("degenerate embedding (zero norm)")
    if abs(norm - 1.0) > EMBEDDING_NORM_TOL:
        raise IngestError(f"embedding norm {norm:.6f} outside unit band")

    shape = (manifest.height, manifest.width)
    return FramePacket(
        keyframe_id=int(keyframe_id),
        timestamp=float(timestamp),
        pose=pose,
        intrinsics=intrinsics,
        depth=depth.reshape(shape).copy(),
        depth_confidence=conf.reshape(shape).copy(),
        ground_mask=mask.reshape(shape).copy(),
        embedding=emb64 / norm,
    )


def read_session(session_dir):
    """Read manifest and all keyframe records, ordered by keyframe id."""
    session_dir = Path(session_dir)
    manifest_path = session_dir / MANIFEST_NAME
    if not manifest_path.is_file():
        raise IngestError(f"missing {MANIFEST_NAME} in {session_dir}")
    manifest = parse_manifest(manifest_path.read_text())
    packets = []
    for path in sorted(session_dir.glob("*.fpk")):
        packet = parse_frame_packet(path.read_bytes(), manifest)
        if record_filename(packet.keyframe_id) != path.name:
            raise IngestError(
                f"record {path.name} holds keyframe_id {packet.keyframe_id}"
            )
        packets.append(packet)
    return manifest, packets


def assemble_submap(packets, submap_size, submap_id, seen_keyframes):
    """Group up to `submap_size` packets into a fresh submap.

    `seen_keyframes` is the session-wide id registry; duplicates are rejected.
    """
    if not packets:
        raise IngestError("cannot assemble an empty submap")
    if len(packets) > submap_size:
        raise IngestError(f"{len(packets)} packets exceed submap size {submap_size}")
    ids = []
    for packet in packets:
        if packet.keyframe_id in seen_keyframes:
            raise IngestError(f"duplicate keyframe_id {packet.keyframe_id}")
        seen_keyframes.add(packet.keyframe_id)
        ids.append(packet.keyframe_id)
    return Submap(submap_id=submap_id, keyframe_ids=ids)


def backproject(packet, pixel_mask, confidence_threshold):
    """Back-project masked pixels with confident positive depth to world points.

    Pixels are scanned row-major, so output order is deterministic. (u, v)
    follows the pinhole convention: u indexes columns, v rows.
    """
    mask = np.asarray(pixel_mask)
    if mask.shape != packet.shape:
        raise IngestError(
            f"pixel mask shape {mask.shape} does not match frame {packet.shape}"
        )
    depth = packet.depth.astype(np.float64)
    select = (
        (mask != 0)
        & (packet.depth_confidence >= confidence_threshold)
        & (depth > 0)
    )
    v_idx, u_idx = np.nonzero(select)
    if v_idx.size == 0:
        return PointCloud(
            points=np.empty((0, 3)),
            keyframe_ids=np.empty(0, dtype=np.int64),
        )
    fx, fy, cx, cy = packet.intrinsics
    d = depth[v_idx, u_idx]
    cam = np.stack(
        [d * (u_idx - cx) / fx, d * (v_idx - cy) / fy, d], axis=1
    )
    world = apply_transform(packet.pose, cam)
    kf = np.full(len(world), packet.keyframe_id, dtype=np.int64)
    return PointCloud(points=world, keyframe_ids=kf)
