"""Mask-oracle plug-in boundary: JSON-lines requests over a subprocess pipe.

Request:  {"keyframe_id": int, "query_text": str}
Response: {"masks": [{"size": [H, W], "counts": [...]}]} or {"error": str}

Masks travel as uncompressed run-length encodings of the row-major flattened
binary image; counts alternate runs of zeros and ones, starting with zeros.
"""

from __future__ import annotations

import json
import subprocess

import numpy as np


class OracleProtocolError(RuntimeError):
    pass


def rle_encode(mask):
    flat = np.asarray(mask).reshape(-1).astype(np.uint8)
    h, w = np.asarray(mask).shape
    if flat.size == 0:
        return {"size": [h, w], "counts": []}
    changes = np.nonzero(np.diff(flat))[0] + 1
    boundaries = np.concatenate(([0], changes, [flat.size]))
    counts = np.diff(boundaries).tolist()
    if flat[0] == 1:
        counts = [0] + counts
    return {"size": [int(h), int(w)], "counts": counts}


def rle_decode(encoded):
    h, w = encoded["size"]
    counts = encoded["counts"]
    total = h * w
    flat = np.zeros(total, dtype=np.uint8)
    pos = 0
    value = 0
    for run in counts:
        if run:
            flat[pos:pos + run] = value
        pos += run
        value ^= 1
    if pos != total:
        raise OracleProtocolError(
            f"RLE covers {pos} pixels, mask has {total}"
        )
    return flat.reshape(h, w)


def encode_request(keyframe_id, query_text):
    return json.dumps(
        {"keyframe_id": int(keyframe_id), "query_text": query_text},
        sort_keys=True,
    )


def decode_request(line):
    data = json.loads(line)
    return int(data["keyframe_id"]), str(data["query_text"])


def encode_response(masks):
    return json.dumps({"masks": [rle_encode(m) for m in masks]}, sort_keys=True)


def encode_error(message):
    return json.dumps({"error": str(message)}, sort_keys=True)


def decode_response(line):
    data = json.loads(line)
    if "error" in data:
        raise OracleProtocolError(data["error"])
    return [rle_decode(m) for m in data.get("masks", [])]


class SubprocessMaskOracle:
    """Mask oracle backed by a one-request-per-line child process."""

    def __init__(self, command):
        self.command = list(command)
        self._proc = None
        self.calls = []

    def _ensure_started(self):
        if self._proc is None or self._proc.poll() is not None:
            self._proc = subprocess.Popen(
                self.command,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                bufsize=1,
            )

    def __call__(self, keyframe_id, query_text):
        self._ensure_started()
        self.calls.append((keyframe_id, query_text))
        self._proc.stdin.write(encode_request(keyframe_id, query_text) + "\n")
        self._proc.stdin.flush()
        line = self._proc.stdout.readline()
        if not line:
            raise OracleProtocolError("oracle process closed its output")
        return decode_response(line)

    def close(self):
        if self._proc is not None and self._proc.poll() is None:
            self._proc.stdin.close()
            self._proc.wait(timeout=10)
        self._proc = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def serve(oracle, stdin, stdout):
    """Run the server side of the protocol over text streams.

    Per-request failures produce error responses; the loop keeps serving.
    """
    for raw in stdin:
        line = raw.strip()
        if not line:
            continue
        try:
            keyframe_id, text = decode_request(line)
            masks = oracle(keyframe_id, text)
            stdout.write(encode_response(masks) + "\n")
        except Exception as exc:
            stdout.write(encode_error(f"{type(exc).__name__}: {exc}") + "\n")
        stdout.flush()
