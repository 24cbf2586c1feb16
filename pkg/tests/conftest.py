import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from scenegraph.frame_ingest import SessionManifest, parse_frame_packet, write_frame_packet
from scenegraph.transforms import look_pose


def make_manifest(h=4, w=4, d=8, s=16):
    return SessionManifest(version=1, height=h, width=w, embedding_dim=d, submap_size=s)


def unit_vector(dim, rng=None, index=None):
    if index is not None:
        vec = np.zeros(dim)
        vec[index % dim] = 1.0
        return vec
    vec = rng.standard_normal(dim)
    return vec / np.linalg.norm(vec)


def make_packet(manifest, keyframe_id=0, pose=None, intrinsics=None, depth=None,
                confidence=None, ground=None, embedding=None, rng=None):
    """Assemble a valid packet through the real wire codec."""
    h, w, d = manifest.height, manifest.width, manifest.embedding_dim
    rng = rng or np.random.default_rng(keyframe_id)
    if pose is None:
        pose = np.eye(4)
    if intrinsics is None:
        intrinsics = np.array([float(w), float(w), (w - 1) / 2.0, (h - 1) / 2.0])
    if depth is None:
        depth = rng.uniform(0.5, 4.0, size=(h, w)).astype(np.float32)
    if confidence is None:
        confidence = np.ones((h, w), dtype=np.float32)
    if ground is None:
        ground = np.zeros((h, w), dtype=np.uint8)
    if embedding is None:
        embedding = unit_vector(d, rng)
    record = write_frame_packet(
        keyframe_id, keyframe_id / 10.0, pose, intrinsics, depth, confidence,
        ground, embedding,
    )
    return parse_frame_packet(record, manifest)


@pytest.fixture
def tiny_manifest():
    return make_manifest()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def camera_pose(position, yaw, pitch):
    return look_pose(position, yaw, pitch)
