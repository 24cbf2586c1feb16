import numpy as np
import pytest

from scenegraph.object_layer import OrientedBBox
from scenegraph.visual_memory import (
    MemoryError_,
    QueryEmbedding,
    RetrievalParams,
    VisualMemory,
    frustum_views_object,
    retrieve_instances,
)

from conftest import make_manifest, make_packet, unit_vector
from oracles import cosine_ranking


def make_store(dim=8, entries=()):
    store = VisualMemory(embedding_dim=dim)
    for kid, submap, vec in entries:
        store.insert_entry(kid, submap, vec)
    return store


class TestInsert:
    def test_first_insert(self):
        store = make_store()
        store.insert_entry(7, 0, unit_vector(8, index=0))
        assert len(store) == 1 and 7 in store

    def test_duplicate_insert_rejected(self):
        store = make_store(entries=[(7, 0, unit_vector(8, index=0))])
        with pytest.raises(MemoryError_, match="duplicate"):
            store.insert_entry(7, 0, unit_vector(8, index=1))

    def test_wrong_dimension_rejected(self):
        store = make_store()
        with pytest.raises(MemoryError_, match="dim"):
            store.insert_entry(1, 0, unit_vector(16, index=0))


class TestScoreKeyframes:
    def test_exact_match_ranks_first(self, rng):
        vec = unit_vector(8, rng)
        store = make_store(entries=[
            (1, 0, vec),
            (2, 0, unit_vector(8, rng)),
        ])
        ranking = store.score_keyframes(QueryEmbedding("q", vec))
        assert ranking[0][0] == 1
        assert abs(ranking[0][1] - 1.0) < 1e-6

    def test_orthogonal_scores_zero_ordered_by_id(self):
        store = make_store(entries=[
            (5, 0, unit_vector(8, index=1)),
            (2, 0, unit_vector(8, index=2)),
            (9, 0, unit_vector(8, index=3)),
        ])
        ranking = store.score_keyframes(QueryEmbedding("q", unit_vector(8, index=0)))
        assert [k for k, _ in ranking] == [2, 5, 9]
        assert all(abs(s) < 1e-6 for _, s in ranking)

    def test_matches_bruteforce_sort(self, rng):
        dim = 16
        ids = list(rng.permutation(200)[:100])
        vecs = [unit_vector(dim, rng) for _ in ids]
        store = make_store(dim, [(int(i), 0, v) for i, v in zip(ids, vecs)])
        q = QueryEmbedding("q", unit_vector(dim, rng))
        got = store.score_keyframes(q)
        expected = cosine_ranking([int(i) for i in ids], vecs, q.vector)
        assert [k for k, _ in got] == [k for k, _ in expected]
        np.testing.assert_allclose(
            [s for _, s in got], [s for _, s in expected], atol=1e-12
        )

    def test_empty_store_error(self):
        with pytest.raises(MemoryError_, match="empty"):
            make_store().score_keyframes(QueryEmbedding("q", unit_vector(8, index=0)))


def centered_box(center, half=0.2):
    return OrientedBBox(np.asarray(center, float), np.eye(3), np.full(3, half))


class TestFrustum:
    def test_box_in_front_visible(self, tiny_manifest):
        packet = make_packet(tiny_manifest)  # identity pose, +z optical axis
        box = centered_box([0.0, 0.0, 2.0], 0.1)
        assert frustum_views_object(packet, box, 0.5)

    def test_box_behind_invisible(self, tiny_manifest):
        packet = make_packet(tiny_manifest)
        box = centered_box([0.0, 0.0, -2.0], 0.1)
        assert not frustum_views_object(packet, box, 0.5)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_corner_oracle(self, seed, tiny_manifest):
        rng = np.random.default_rng(seed)
        packet = make_packet(tiny_manifest)
        box = centered_box(rng.uniform(-3, 3, 3), rng.uniform(0.05, 0.8))
        fx, fy, cx, cy = packet.intrinsics
        h, w = packet.shape
        visible = 0
        for corner in box.corners():
            cam = packet.pose[:3, :3].T @ (corner - packet.pose[:3, 3])
            if cam[2] <= 0:
                continue
            u = fx * cam[0] / cam[2] + cx
            v = fy * cam[1] / cam[2] + cy
            if 0 <= u < w and 0 <= v < h:
                visible += 1
        assert frustum_views_object(packet, box, 0.5) == (visible / 8.0 >= 0.5)


class RecordingOracle:
    """Scripted oracle: keyframe id -> list of masks; counts calls."""

    def __init__(self, responses, shape=(4, 4)):
        self.responses = responses
        self.shape = shape
        self.calls = []

    def __call__(self, keyframe_id, text):
        self.calls.append(keyframe_id)
        return self.responses.get(keyframe_id, [])


def full_mask(shape=(4, 4)):
    return np.ones(shape, np.uint8)


class TestRetrieveInstances:
    def setup_method(self):
        self.manifest = make_manifest()
        # Keyframes staring at disjoint world regions: camera k looks at +z
        # from x = 10k, so a box mapped for one keyframe is invisible to others.
        self.packets = {}
        for k in range(4):
            pose = np.eye(4)
            pose[0, 3] = 10.0 * k
            self.packets[k] = make_packet(self.manifest, keyframe_id=k, pose=pose)
        self.store = VisualMemory(embedding_dim=8)
        # descending scores: kf0 > kf1 > kf2 > kf3 against query e0
        base = unit_vector(8, index=0)
        other = unit_vector(8, index=1)
        for k, mix in enumerate([1.0, 0.8, 0.6, 0.4]):
            vec = mix * base + np.sqrt(1 - mix * mix) * other
            self.store.insert_entry(k, 0, vec / np.linalg.norm(vec))
        self.query = QueryEmbedding("thing", base)

    def provider(self, kid):
        return self.packets[kid]

    def box_at_keyframe(self, kid):
        return OrientedBBox(
            np.array([10.0 * kid, 0.0, 2.0]), np.eye(3), np.full(3, 0.3)
        )

    def test_single_instance_frustum_skip(self):
        # kf0 and kf1 view the same region; kf1 must be skipped by the gate.
        self.packets[1] = make_packet(self.manifest, keyframe_id=1, pose=np.eye(4))
        oracle = RecordingOracle({0: [full_mask()], 1: [full_mask()]})
        built_boxes = {0: self.box_at_keyframe(0)}
        results = retrieve_instances(
            self.store, self.query, oracle,
            RetrievalParams(min_score=0.5, max_keyframes=8),
            packet_provider=self.provider,
            box_builder=lambda kid, mask: built_boxes.get(kid),
        )
        assert [k for k, _ in results] == [0]
        assert oracle.calls == [0, 2]  # kf1 frustum-skipped, kf2 stopped on zero

    def test_multi_instance_all_retrieved(self):
        oracle = RecordingOracle({k: [full_mask()] for k in range(4)})
        results = retrieve_instances(
            self.store, self.query, oracle,
            RetrievalParams(min_score=0.1, max_keyframes=8),
            packet_provider=self.provider,
            box_builder=lambda kid, mask: self.box_at_keyframe(kid),
        )
        assert [k for k, _ in results] == [0, 1, 2, 3]
        assert oracle.calls == [0, 1, 2, 3]

    def test_absent_concept_single_call(self):
        oracle = RecordingOracle({})
        results = retrieve_instances(
            self.store, self.query, oracle,
            RetrievalParams(min_score=0.0, max_keyframes=8),
            packet_provider=self.provider,
        )
        assert results == []
        assert oracle.calls == [0]  # stop-on-zero after exactly one call

    def test_min_score_stops_iteration(self):
        oracle = RecordingOracle({k: [full_mask()] for k in range(4)})
        results = retrieve_instances(
            self.store, self.query, oracle,
            RetrievalParams(min_score=0.7, max_keyframes=8),
            packet_provider=self.provider,
            box_builder=lambda kid, mask: self.box_at_keyframe(kid),
        )
        assert [k for k, _ in results] == [0, 1]

    def test_max_keyframes_budget(self):
        oracle = RecordingOracle({k: [full_mask()] for k in range(4)})
        retrieve_instances(
            self.store, self.query, oracle,
            RetrievalParams(min_score=0.0, max_keyframes=2),
            packet_provider=self.provider,
            box_builder=lambda kid, mask: self.box_at_keyframe(kid),
        )
        assert oracle.calls == [0, 1]

    def test_never_calls_same_keyframe_twice(self):
        oracle = RecordingOracle({k: [full_mask()] for k in range(4)})
        retrieve_instances(
            self.store, self.query, oracle,
            RetrievalParams(min_score=0.0, max_keyframes=8),
            packet_provider=self.provider,
            box_builder=lambda kid, mask: self.box_at_keyframe(kid),
        )
        assert len(oracle.calls) == len(set(oracle.calls))

    def test_monotone_gate_on_min_score(self):
        calls = {}
        for min_score in (0.0, 0.45, 0.7, 0.9):
            oracle = RecordingOracle({k: [full_mask()] for k in range(4)})
            retrieve_instances(
                self.store, self.query, oracle,
                RetrievalParams(min_score=min_score, max_keyframes=8),
                packet_provider=self.provider,
                box_builder=lambda kid, mask: self.box_at_keyframe(kid),
            )
            calls[min_score] = set(oracle.calls)
        thresholds = sorted(calls)
        for lo, hi in zip(thresholds, thresholds[1:]):
            assert calls[hi] <= calls[lo]

    def test_determinism(self):
        def run():
            oracle = RecordingOracle({k: [full_mask()] for k in range(4)})
            res = retrieve_instances(
                self.store, self.query, oracle,
                RetrievalParams(min_score=0.1, max_keyframes=8),
                packet_provider=self.provider,
                box_builder=lambda kid, mask: self.box_at_keyframe(kid),
            )
            return [(k, [m.tobytes() for m in masks]) for k, masks in res]

        assert run() == run()
