"""Keyframe-indexed semantic embedding store and retrieval loop.

The store ranks keyframes against query embeddings by cosine score. Retrieval
walks the ranking, skipping keyframes whose frustum already views an object
mapped for the current query, and hands the rest to a 2D mask oracle until a
stop rule fires. Zero masks from the oracle is the nonentity outcome.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .transforms import project_points

UNIT_NORM_TOL = 1e-5


class MemoryError_(ValueError):
    pass


@dataclass
class QueryEmbedding:
    text: str
    vector: np.ndarray

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)
        norm = np.linalg.norm(self.vector)
        if abs(norm - 1.0) > UNIT_NORM_TOL:
            raise MemoryError_(f"query embedding norm {norm:.6f} is not unit")


@dataclass
class RetrievalParams:
    min_score: float = 0.2
    max_keyframes: int = 8
    visibility_fraction: float = 0.5


@dataclass
class VisualMemory:
    """Append-only embedding store, one entry per keyframe."""

    embedding_dim: int
    _ids: list = field(default_factory=list)
    _submaps: dict = field(default_factory=dict)
    _matrix: list = field(default_factory=list)

    def __len__(self):
        return len(self._ids)

    def __contains__(self, keyframe_id):
        return keyframe_id in self._submaps

    def insert_entry(self, keyframe_id, submap_id, embedding):
        if keyframe_id in self._submaps:
            raise MemoryError_(f"duplicate insert for keyframe {keyframe_id}")
        vec = np.asarray(embedding, dtype=np.float64)
        if vec.shape != (self.embedding_dim,):
            raise MemoryError_(
                f"embedding dim {vec.shape} does not match store dim {self.embedding_dim}"
            )
        norm = np.linalg.norm(vec)
        if abs(norm - 1.0) > UNIT_NORM_TOL:
            raise MemoryError_(f"embedding norm {norm:.6f} is not unit")
        self._ids.append(keyframe_id)
        self._submaps[keyframe_id] = submap_id
        self._matrix.append(vec)

    def submap_of(self, keyframe_id):
        return self._submaps[keyframe_id]

    def embedding_of(self, keyframe_id):
        return self._matrix[self._ids.index(keyframe_id)]

    def score_keyframes(self, query):
        """Full ranking by cosine score, ties broken by ascending keyframe id."""
        if not self._ids:
            raise MemoryError_("visual memory is empty")
        matrix = np.vstack(self._matrix)
        scores = matrix @ query.vector
        ids = np.asarray(self._ids)
        order = np.lexsort((ids, -scores))
        return [(int(ids[i]), float(scores[i])) for i in order]


def frustum_views_object(packet, box, visibility_fraction):
    """True iff enough box corners project in-bounds with positive depth."""
    corners = box.corners()
    u, v, z = project_points(corners, packet.pose, packet.intrinsics)
    h, w = packet.shape
    visible = (z > 0) & (u >= 0) & (u < w) & (v >= 0) & (v < h)
    return visible.sum() / 8.0 >= visibility_fraction


def retrieve_instances(store, query, oracle, params, *, packet_provider,
                       box_builder=None, prior_boxes=()):
    """Frustum-gated multi-instance retrieval against a mask oracle.

    Walks keyframes in descending cosine order. A keyframe is skipped without
    an oracle call when its frustum already views a box mapped for this query
    (a prior cached box or one built earlier in this retrieval). Stops when
    the next score drops below min_score, when max_keyframes oracle calls were
    spent, or when the oracle reports zero masks. Returns (keyframe_id, masks)
    pairs for every call that produced masks; an empty list is the nonentity
    outcome.

    `box_builder(keyframe_id, mask)` turns a fresh mask into the mapped-object
    box the gate tests against; it may return None for degenerate masks.
    """
    ranking = store.score_keyframes(query)
    mapped_boxes = list(prior_boxes)
    results = []
    calls = 0
    for keyframe_id, score in ranking:
        if score < params.min_score:
            break
        packet = packet_provider(keyframe_id)
        if any(
            frustum_views_object(packet, box, params.visibility_fraction)
            for box in mapped_boxes
        ):
            continue
        if calls >= params.max_keyframes:
            break
        masks = oracle(keyframe_id, query.text)
        calls += 1
        if not masks:
            break
        results.append((keyframe_id, masks))
        if box_builder is not None:
            for mask in masks:
                box = box_builder(keyframe_id, mask)
                if box is not None:
                    mapped_boxes.append(box)
    return results
