import json

import numpy as np
import pytest

from scenegraph.engine import EngineConfig, SceneGraphEngine
from scenegraph.frame_ingest import read_session
from scenegraph.query_interface import (
    ProtocolError,
    parse_request,
    run_lines,
    run_script,
)
from scenegraph.synthetic_world import (
    SceneSpec,
    concept_vector,
    generate_session,
    spec_codebook,
)
from scenegraph.visual_memory import RetrievalParams


def square(x0, y0, x1, y1):
    return [[x0, y0], [x1, y0], [x1, y1], [x0, y1]]


@pytest.fixture(scope="module")
def scene(tmp_path_factory):
    spec = SceneSpec(seed=3, height=48, width=48, embedding_dim=32,
                     embedding_noise=0.03, submap_size=8)
    spec.add_floor("den", square(-3, -3, 3, 3))
    spec.add_box("mug", center=[0.8, 0.2, 0.2], half_extents=[0.3, 0.3, 0.2])
    spec.add_orbit(center=[0, 0], radius=2.0, height=1.5, count=8, pitch=-0.8)
    out, truth, oracle = generate_session(
        spec, tmp_path_factory.mktemp("scene") / "session"
    )
    return spec, out, truth, oracle


def fresh_engine(scene):
    spec, session, _, _ = scene
    manifest, packets = read_session(session)
    engine = SceneGraphEngine(
        manifest,
        EngineConfig(
            submap_size=manifest.submap_size,
            seed=0,
            retrieval=RetrievalParams(min_score=0.05, max_keyframes=8),
        ),
    )
    codebook = spec_codebook(spec)
    engine.attach_concept_provider(
        lambda text: concept_vector(codebook, text, spec.embedding_dim)
    )
    from scenegraph.synthetic_world import SyntheticMaskOracle

    engine.attach_oracle(SyntheticMaskOracle(spec))
    engine.ingest_all(packets)
    return engine


class TestParseRequest:
    def test_json_form(self):
        req = parse_request('{"op": "find_objects", "text": "mug", "request_id": 5}', 1)
        assert req.op == "find_objects"
        assert req.args == {"text": "mug"}
        assert req.request_id == 5

    def test_keyvalue_form(self):
        req = parse_request('find_objects text="coffee mug" max_keyframes=3', 7)
        assert req.args["text"] == "coffee mug"
        assert req.args["max_keyframes"] == "3"
        assert req.request_id == 7

    def test_malformed_token(self):
        with pytest.raises(ProtocolError, match="key=value"):
            parse_request("find_objects mug", 1)

    def test_malformed_json(self):
        with pytest.raises(ProtocolError, match="JSON"):
            parse_request('{"op": ', 1)


class TestHandleRequests:
    def test_find_objects_then_cache_hit(self, scene):
        engine = fresh_engine(scene)
        lines = ['find_objects text=mug', 'find_objects text=mug']
        responses, code = run_lines(engine, lines)
        assert code == 0
        first = json.loads(responses[0])
        second = json.loads(responses[1])
        assert first["status"] == "ok"
        assert not first["payload"]["cache_hit"]
        assert second["payload"]["cache_hit"]
        assert first["payload"]["objects"] == second["payload"]["objects"]

    def test_nonentity_status(self, scene):
        engine = fresh_engine(scene)
        responses, code = run_lines(engine, ["find_objects text=dragon"])
        assert code == 0
        assert json.loads(responses[0])["status"] == "nonentity"

    def test_plan_path_across_graph(self, scene):
        engine = fresh_engine(scene)
        responses, code = run_lines(
            engine, ['plan_path from=-1.5,-1.5,0 to=1.5,1.5,0']
        )
        assert code == 0
        payload = json.loads(responses[0])["payload"]
        assert len(payload["tile_ids"]) >= 2
        assert payload["cost"] > 0

    def test_unknown_op_is_error(self, scene):
        engine = fresh_engine(scene)
        responses, code = run_lines(engine, ["summon text=ghost"])
        assert code == 1
        body = json.loads(responses[0])
        assert body["status"] == "error"
        assert "summon" in body["payload"]["op"]

    def test_stats_and_list_cache(self, scene):
        engine = fresh_engine(scene)
        responses, code = run_lines(
            engine, ["stats", "find_objects text=mug", "list_cache"]
        )
        assert code == 0
        stats = json.loads(responses[0])["payload"]
        assert stats["keyframes"] == 8
        cache = json.loads(responses[2])["payload"]
        assert cache["object_queries"] == [{"count": 1, "text": "mug"}]

    def test_find_regions(self, scene):
        engine = fresh_engine(scene)
        responses, code = run_lines(engine, ["find_regions text=den"])
        assert code == 0
        body = json.loads(responses[0])
        assert body["status"] == "ok"
        assert body["payload"]["regions"]


class TestScripts:
    def test_empty_script(self, scene, tmp_path):
        engine = fresh_engine(scene)
        path = tmp_path / "empty.txt"
        path.write_text("")
        responses, code = run_script(engine, path)
        assert responses == [] and code == 0

    def test_three_requests_in_order(self, scene, tmp_path):
        engine = fresh_engine(scene)
        path = tmp_path / "s.txt"
        path.write_text("stats\nfind_objects text=mug\nlist_cache\n")
        responses, code = run_script(engine, path)
        assert code == 0
        ids = [json.loads(r)["request_id"] for r in responses]
        assert ids == [1, 2, 3]

    def test_malformed_line_nonzero_exit(self, scene, tmp_path):
        engine = fresh_engine(scene)
        path = tmp_path / "bad.txt"
        path.write_text("stats\nfind_objects mug\nstats\n")
        responses, code = run_script(engine, path)
        assert code == 1
        body = json.loads(responses[1])
        assert body["status"] == "error"
        assert "line 2" in body["payload"]["error"]
        assert json.loads(responses[2])["status"] == "ok"

    def test_replay_byte_identical(self, scene, tmp_path):
        path = tmp_path / "replay.txt"
        path.write_text(
            "stats\n"
            "find_objects text=mug\n"
            "find_objects text=mug\n"
            "find_regions text=den\n"
            "plan_path from=-1.5,-1.5,0 to=1.5,1.5,0\n"
            "list_cache\n"
        )
        transcripts = []
        for _ in range(2):
            engine = fresh_engine(scene)
            responses, code = run_script(engine, path)
            assert code == 0
            transcripts.append("\n".join(responses))
        assert transcripts[0] == transcripts[1]

    def test_cache_only_grows(self, scene):
        engine = fresh_engine(scene)
        run_lines(engine, ["find_objects text=mug"])
        before = set(engine.object_cache.queries())
        run_lines(engine, ["find_objects text=dragon", "find_objects text=mug"])
        after = set(engine.object_cache.queries())
        assert before <= after
