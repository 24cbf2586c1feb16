"""Line-delimited command protocol, script runner, and interactive REPL.

Requests are one per line, either a single JSON object or an op name followed
by key=value pairs. Responses are single-line JSON objects with a stable key
order, so identical sessions replay to byte-identical transcripts. Every
successful find_* result (including nonentity) lands in the cached memory.
"""

from __future__ import annotations

import json
import shlex
import sys
from dataclasses import dataclass, field

import numpy as np

KNOWN_OPS = (
    "find_objects",
    "find_regions",
    "plan_path",
    "list_cache",
    "stats",
    "partition",
)


class ProtocolError(ValueError):
    pass


@dataclass
class ToolRequest:
    op: str
    args: dict = field(default_factory=dict)
    request_id: int = 0


@dataclass
class ToolResponse:
    request_id: int
    status: str          # ok | nonentity | error
    payload: dict

    def to_json(self):
        return canonical_json(
            {
                "request_id": self.request_id,
                "status": self.status,
                "payload": self.payload,
            }
        )


def _to_plain(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, dict):
        return {str(k): _to_plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_to_plain(v) for v in value]
    return value


def canonical_json(obj):
    return json.dumps(
        _to_plain(obj), sort_keys=True, separators=(",", ":"), allow_nan=False
    )


def parse_request(line, default_id):
    """Parse one protocol line (JSON object or op + key=value pairs)."""
    line = line.strip()
    if not line:
        raise ProtocolError("empty request line")
    if line.startswith("{"):
        try:
            data = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ProtocolError(f"invalid JSON request: {exc}") from exc
        if not isinstance(data, dict) or "op" not in data:
            raise ProtocolError("JSON request must be an object with an 'op' key")
        op = str(data.pop("op"))
        request_id = data.pop("request_id", default_id)
        args = data.pop("args", {})
        if not isinstance(args, dict):
            raise ProtocolError("'args' must be an object")
        args.update(data)
        return ToolRequest(op=op, args=args, request_id=int(request_id))
    try:
        tokens = shlex.split(line)
    except ValueError as exc:
        raise ProtocolError(f"unbalanced quoting: {exc}") from exc
    op = tokens[0]
    args = {}
    request_id = default_id
    for token in tokens[1:]:
        if "=" not in token:
            raise ProtocolError(f"expected key=value, got {token!r}")
        key, _, value = token.partition("=")
        if key == "request_id":
            request_id = int(value)
        else:
            args[key] = value
    return ToolRequest(op=op, args=args, request_id=int(request_id))


def _parse_point(value):
    if isinstance(value, (list, tuple)):
        coords = [float(v) for v in value]
    else:
        coords = [float(v) for v in str(value).split(",")]
    if len(coords) != 3:
        raise ProtocolError(f"expected x,y,z point, got {value!r}")
    return np.array(coords)


def _object_payloads(objects):
    return [
        {
            "object_id": obj.object_id,
            "center": obj.box.center.tolist(),
            "axes": obj.box.axes.tolist(),
            "half_extents": obj.box.half_extents.tolist(),
            "num_points": len(obj.points),
            "source_keyframes": [int(k) for k in obj.source_keyframes],
        }
        for obj in objects
    ]


def handle_request(engine, req):
    """Dispatch one request; downstream errors come back as error responses."""
    try:
        if req.op == "find_objects":
            if "text" not in req.args:
                raise ProtocolError("find_objects requires text=")
            params = None
            overrides = {
                k: float(req.args[k])
                for k in ("min_score", "visibility_fraction")
                if k in req.args
            }
            if "max_keyframes" in req.args:
                overrides["max_keyframes"] = int(req.args["max_keyframes"])
            if overrides:
                from .visual_memory import RetrievalParams

                base = engine.config.retrieval
                params = RetrievalParams(
                    min_score=overrides.get("min_score", base.min_score),
                    max_keyframes=overrides.get("max_keyframes", base.max_keyframes),
                    visibility_fraction=overrides.get(
                        "visibility_fraction", base.visibility_fraction
                    ),
                )
            objects, cache_hit = engine.query_object(req.args["text"], params=params)
            status = "ok" if objects else "nonentity"
            payload = {"cache_hit": cache_hit, "objects": _object_payloads(objects)}
            return ToolResponse(req.request_id, status, payload)

        if req.op == "find_regions":
            if "text" not in req.args:
                raise ProtocolError("find_regions requires text=")
            result, cache_hit = engine.query_region(req.args["text"])
            regions = [
                {
                    "place_ids": r.place_ids,
                    "mean_score": r.mean_score,
                    "size": len(r.place_ids),
                }
                for r in result.regions
            ]
            status = "ok" if regions else "nonentity"
            payload = {
                "cache_hit": cache_hit,
                "regions": regions,
                "threshold": result.threshold,
            }
            return ToolResponse(req.request_id, status, payload)

        if req.op == "plan_path":
            if "from" not in req.args or "to" not in req.args:
                raise ProtocolError("plan_path requires from= and to=")
            path, polyline = engine.plan(
                _parse_point(req.args["from"]), _parse_point(req.args["to"])
            )
            payload = {
                "tile_ids": path,
                "cost": _path_cost(engine, path),
                "polyline": polyline,
            }
            return ToolResponse(req.request_id, "ok", payload)

        if req.op == "list_cache":
            payload = {
                "object_queries": [
                    {"text": key, "count": len(engine.object_cache.get(key))}
                    for key in engine.object_cache.queries()
                ],
                "region_queries": sorted(engine.region_cache),
            }
            return ToolResponse(req.request_id, "ok", payload)

        if req.op == "stats":
            return ToolResponse(req.request_id, "ok", engine.summary())

        if req.op == "partition":
            categories = req.args.get("categories")
            if categories is None and "vocab_file" in req.args:
                with open(req.args["vocab_file"]) as fh:
                    categories = [line.strip() for line in fh if line.strip()]
            if isinstance(categories, str):
                categories = [c.strip() for c in categories.split(",") if c.strip()]
            if not categories:
                raise ProtocolError("partition requires categories= or vocab_file=")
            labels, _ = engine.partition(categories)
            payload = {
                "categories": categories,
                "labels": {str(tid): lab for tid, lab in sorted(labels.items())},
            }
            return ToolResponse(req.request_id, "ok", payload)

        raise ProtocolError(f"unknown op {req.op!r}")
    except Exception as exc:  # downstream errors wrap with the op name
        return ToolResponse(
            req.request_id,
            "error",
            {"op": req.op, "error": f"{type(exc).__name__}: {exc}"},
        )


def _path_cost(engine, path):
    from .places_layer import path_cost

    return path_cost(engine.graph, path)


def run_lines(engine, lines):
    """Execute protocol lines; returns (response lines, exit code)."""
    responses = []
    had_error = False
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        try:
            req = parse_request(line, default_id=lineno)
        except ProtocolError as exc:
            resp = ToolResponse(
                lineno, "error", {"op": "parse", "error": f"line {lineno}: {exc}"}
            )
            responses.append(resp.to_json())
            had_error = True
            continue
        resp = handle_request(engine, req)
        if resp.status == "error":
            had_error = True
        responses.append(resp.to_json())
    return responses, (1 if had_error else 0)


def run_script(engine, path):
    with open(path) as fh:
        lines = fh.readlines()
    return run_lines(engine, lines)


def repl(engine, stdin=None, stdout=None):
    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout
    counter = 0
    for raw in stdin:
        line = raw.strip()
        if not line:
            continue
        if line in ("exit", "quit"):
            break
        counter += 1
        try:
            req = parse_request(line, default_id=counter)
            resp = handle_request(engine, req)
        except ProtocolError as exc:
            resp = ToolResponse(counter, "error", {"op": "parse", "error": str(exc)})
        stdout.write(resp.to_json() + "\n")
        stdout.flush()
