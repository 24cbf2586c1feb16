"""Command-line interface for sessions, queries, planning, and evaluation.

All stochastic components (RANSAC, EM init, Louvain) derive their seeds from
SCENEGRAPH_SEED (default 0), so identical invocations replay identically.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .engine import EngineConfig, SceneGraphEngine
from .frame_ingest import PoseUpdateEvent, read_session
from .object_layer import OrientedBBox, evaluate_objects
from .query_interface import canonical_json, repl, run_script
from .synthetic_world import (
    SceneSpec,
    concept_vector,
    evaluate_regions,
    generate_session,
    load_scene,
)

EVENTS_NAME = "events.jsonl"


def env_seed():
    return int(os.environ.get("SCENEGRAPH_SEED", "0"))


def load_engine(session_dir, submap_size=None, conf_threshold=None, seed=None,
                oracle_cmd=None):
    """Ingest a session directory and replay any persisted pose updates."""
    manifest, packets = read_session(session_dir)
    config = EngineConfig(
        submap_size=submap_size or manifest.submap_size,
        seed=seed if seed is not None else env_seed(),
    )
    if conf_threshold is not None:
        config.confidence_threshold = conf_threshold
    engine = SceneGraphEngine(manifest, config)
    scene = load_scene(session_dir)
    if scene is not None:
        spec, truth, oracle, codebook = scene
        engine.attach_oracle(oracle)
        engine.attach_concept_provider(
            lambda text: concept_vector(codebook, text, spec.embedding_dim)
        )
    if oracle_cmd:
        from .mask_protocol import SubprocessMaskOracle
        import shlex

        engine.attach_oracle(SubprocessMaskOracle(shlex.split(oracle_cmd)))
    engine.ingest_all(packets)
    events_path = Path(session_dir) / EVENTS_NAME
    if events_path.is_file():
        for line in events_path.read_text().splitlines():
            if not line.strip():
                continue
            event = json.loads(line)
            if event.get("type") == "pose_update":
                engine.apply_pose_update(
                    PoseUpdateEvent(
                        submap_id=int(event["submap_id"]),
                        transform=np.array(event["transform"]).reshape(4, 4),
                    )
                )
    return engine


def _print(obj):
    print(canonical_json(obj))


def cmd_gen(args):
    spec = SceneSpec.from_dict(json.loads(Path(args.spec).read_text()))
    out_dir, truth, _ = generate_session(spec, args.out)
    _print(
        {
            "session": str(out_dir),
            "keyframes": len(spec.cameras),
            "objects": len(truth.objects),
            "regions": len(truth.regions),
        }
    )
    return 0


def cmd_ingest(args):
    engine = load_engine(args.session, args.submap_size, args.conf_threshold)
    _print(engine.summary())
    return 0


def cmd_pose_update(args):
    values = [float(x) for x in args.transform.split(",")]
    if len(values) != 16:
        print("error: --transform expects 16 comma-separated floats", file=sys.stderr)
        return 2
    engine = load_engine(args.session)
    result = engine.apply_pose_update(
        PoseUpdateEvent(submap_id=args.submap, transform=np.array(values).reshape(4, 4))
    )
    events_path = Path(args.session) / EVENTS_NAME
    with events_path.open("a") as fh:
        fh.write(
            json.dumps(
                {"type": "pose_update", "submap_id": args.submap, "transform": values}
            )
            + "\n"
        )
    _print(result)
    return 0


def cmd_query_object(args):
    engine = load_engine(args.session, oracle_cmd=args.oracle_cmd)
    params = engine.config.retrieval
    if args.max_keyframes is not None:
        params.max_keyframes = args.max_keyframes
    if args.min_score is not None:
        params.min_score = args.min_score
    objects, cache_hit = engine.query_object(args.text, params=params)
    payload = {
        "cache_hit": cache_hit,
        "status": "ok" if objects else "nonentity",
        "objects": [
            {
                "object_id": o.object_id,
                "center": o.box.center.tolist(),
                "axes": o.box.axes.tolist(),
                "half_extents": o.box.half_extents.tolist(),
                "num_points": len(o.points),
            }
            for o in objects
        ],
    }
    _print(payload)
    if args.dump_ply:
        _write_ply(args.dump_ply, objects)
    return 0


def _write_ply(path, objects):
    points = (
        np.vstack([o.points.points for o in objects])
        if objects
        else np.empty((0, 3))
    )
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(points)}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        fh.write("end_header\n")
        for p in points:
            fh.write(f"{p[0]} {p[1]} {p[2]}\n")


def _truth_boxes(path):
    data = json.loads(Path(path).read_text())
    if isinstance(data, dict):
        data = data["objects"]
    truths = {}
    for entry in data:
        box = OrientedBBox(
            center=np.array(entry["center"]),
            axes=np.array(entry["axes"]),
            half_extents=np.array(entry["half_extents"]),
        )
        truths.setdefault(entry["label"].strip().lower(), []).append(box)
    return truths


def cmd_eval_objects(args):
    engine = load_engine(args.session)
    truths = _truth_boxes(args.truth)
    report = {}
    osr_sum = 0.0
    iou_sum = 0.0
    total = 0
    for label in sorted(truths):
        objects, _ = engine.query_object(label)
        metrics = evaluate_objects([o.box for o in objects], truths[label])
        report[label] = dict(metrics, estimated=len(objects), truth=len(truths[label]))
        osr_sum += metrics["osR"] * len(truths[label])
        iou_sum += metrics["mean_IoU"] * len(truths[label])
        total += len(truths[label])
    _print(
        {
            "per_label": report,
            "osR": osr_sum / total if total else 0.0,
            "mean_IoU": iou_sum / total if total else 0.0,
        }
    )
    return 0


def cmd_plan(args):
    engine = load_engine(args.session)
    start = np.array([float(x) for x in getattr(args, "from").split(",")])
    goal = np.array([float(x) for x in args.to.split(",")])
    path, polyline = engine.plan(start, goal)
    from .places_layer import path_cost

    _print({"tile_ids": path, "cost": path_cost(engine.graph, path), "polyline": polyline})
    return 0


def cmd_export_places(args):
    engine = load_engine(args.session)
    if args.format != "json":
        print(f"error: unsupported format {args.format}", file=sys.stderr)
        return 2
    _print(engine.export_places())
    return 0


def cmd_query_region(args):
    engine = load_engine(args.session)
    result, cache_hit = engine.query_region(args.text)
    _print(
        {
            "cache_hit": cache_hit,
            "status": "ok" if result.regions else "nonentity",
            "threshold": result.threshold,
            "regions": [
                {
                    "place_ids": r.place_ids,
                    "mean_score": r.mean_score,
                    "size": len(r.place_ids),
                }
                for r in result.regions
            ],
        }
    )
    return 0


def cmd_partition(args):
    engine = load_engine(args.session)
    vocab = [
        line.strip() for line in Path(args.vocab).read_text().splitlines() if line.strip()
    ]
    labels, _ = engine.partition(vocab)
    _print({"categories": vocab, "labels": {str(t): l for t, l in sorted(labels.items())}})
    return 0


def cmd_eval_regions(args):
    engine = load_engine(args.session)
    scene = load_scene(args.session)
    if scene is None:
        print("error: session has no ground truth", file=sys.stderr)
        return 2
    _, truth, _, _ = scene
    region_labels = sorted({r["label"] for r in truth.regions})
    if args.mode == "partition":
        labels, _ = engine.partition(region_labels)
        _print(evaluate_regions(engine.graph, labels, truth))
        return 0
    report = {}
    for label in region_labels:
        result, _ = engine.query_region(label)
        predicted = sorted({pid for r in result.regions for pid in r.place_ids})
        true_ids = [
            tid
            for tid in engine.graph.sorted_ids()
            if truth.place_label(engine.graph.nodes[tid].centroid[:2]) == label
        ]
        from .synthetic_world import region_precision_recall

        precision, recall = region_precision_recall(predicted, true_ids)
        report[label] = {
            "precision": precision,
            "recall": recall,
            "regions": len(result.regions),
        }
    _print(report)
    return 0


def cmd_repl(args):
    engine = load_engine(args.session, oracle_cmd=args.oracle_cmd)
    repl(engine)
    return 0


def cmd_script(args):
    engine = load_engine(args.session, oracle_cmd=args.oracle_cmd)
    responses, code = run_script(engine, args.file)
    for line in responses:
        print(line)
    return code


def build_parser():
    parser = argparse.ArgumentParser(
        prog="scenegraph",
        description="Task-driven hierarchical 3D scene graph engine",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic session")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("ingest", help="validate and ingest a session")
    p.add_argument("--session", required=True)
    p.add_argument("--submap-size", type=int, default=None)
    p.add_argument("--conf-threshold", type=float, default=None)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("pose-update", help="apply a loop-closure transform")
    p.add_argument("--session", required=True)
    p.add_argument("--submap", type=int, required=True)
    p.add_argument("--transform", required=True, help="16 csv floats, row-major")
    p.set_defaults(func=cmd_pose_update)

    p = sub.add_parser("query-object", help="open-set object query")
    p.add_argument("--session", required=True)
    p.add_argument("--text", required=True)
    p.add_argument("--max-keyframes", type=int, default=None)
    p.add_argument("--min-score", type=float, default=None)
    p.add_argument("--dump-ply", default=None)
    p.add_argument("--oracle-cmd", default=None,
                   help="external mask-oracle command (JSON-lines protocol)")
    p.set_defaults(func=cmd_query_object)

    p = sub.add_parser("eval-objects", help="evaluate objects against truth boxes")
    p.add_argument("--session", required=True)
    p.add_argument("--truth", required=True)
    p.set_defaults(func=cmd_eval_objects)

    p = sub.add_parser("plan", help="plan a path over the places graph")
    p.add_argument("--session", required=True)
    p.add_argument("--from", dest="from", required=True)
    p.add_argument("--to", required=True)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("export-places", help="dump the places graph")
    p.add_argument("--session", required=True)
    p.add_argument("--format", default="json")
    p.set_defaults(func=cmd_export_places)

    p = sub.add_parser("query-region", help="open-set region query")
    p.add_argument("--session", required=True)
    p.add_argument("--text", required=True)
    p.set_defaults(func=cmd_query_region)

    p = sub.add_parser("partition", help="closed-vocabulary place partition")
    p.add_argument("--session", required=True)
    p.add_argument("--vocab", required=True, help="file with one category per line")
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("eval-regions", help="evaluate regions against ground truth")
    p.add_argument("--session", required=True)
    p.add_argument("--mode", choices=("query", "partition"), default="query")
    p.set_defaults(func=cmd_eval_regions)

    p = sub.add_parser("repl", help="interactive protocol session")
    p.add_argument("--session", required=True)
    p.add_argument("--oracle-cmd", default=None,
                   help="external mask-oracle command (JSON-lines protocol)")
    p.set_defaults(func=cmd_repl)

    p = sub.add_parser("script", help="run a protocol script")
    p.add_argument("--session", required=True)
    p.add_argument("--file", required=True)
    p.add_argument("--oracle-cmd", default=None,
                   help="external mask-oracle command (JSON-lines protocol)")
    p.set_defaults(func=cmd_script)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
