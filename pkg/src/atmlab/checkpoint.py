"""Model checkpoint file format.

Layout: the magic bytes ``ATMCKPT1``, a 4-byte little-endian header length, a JSON
header (dims, tensor names with byte offsets/element counts/precision), then the raw
little-endian tensor payloads concatenated in header order. Round trips are bit-exact.
"""
from __future__ import annotations

import json
import os

import numpy as np

from .model import Dims, ModelParams, param_names
from .util import CheckpointError

MAGIC = b"ATMCKPT1"


def save_params(path: str, params: ModelParams) -> None:
    params.check_shapes()
    entries = []
    offset = 0
    payloads = []
    for name in param_names(params.dims):
        arr = np.ascontiguousarray(params.tensors[name], dtype=np.float64)
        raw = arr.astype("<f8", copy=False).tobytes()
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "offset": offset,
            "elements": int(arr.size),
            "precision": "f8",
        })
        offset += len(raw)
        payloads.append(raw)
    header = {
        "dims": {
            "vocab_size": params.dims.vocab_size,
            "d_model": params.dims.d_model,
            "n_heads": params.dims.n_heads,
            "context_len": params.dims.context_len,
        },
        "tensors": entries,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(blob).to_bytes(4, "little"))
        fh.write(blob)
        for raw in payloads:
            fh.write(raw)
    os.replace(tmp, path)


def load_params(path: str) -> ModelParams:
    if not os.path.exists(path):
        raise CheckpointError(f"no checkpoint at {path}")
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"bad magic {magic!r} in {path}")
        header_len = int.from_bytes(fh.read(4), "little")
        try:
            header = json.loads(fh.read(header_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"corrupt header in {path}: {exc}") from exc
        dims = Dims(**header["dims"])
        payload = fh.read()
    tensors = {}
    for entry in header["tensors"]:
        if entry["precision"] != "f8":
            raise CheckpointError(f"unsupported precision {entry['precision']!r}")
        start = entry["offset"]
        nbytes = entry["elements"] * 8
        raw = payload[start:start + nbytes]
        if len(raw) != nbytes:
            raise CheckpointError(f"truncated payload for tensor {entry['name']}")
        tensors[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(entry["shape"]).copy()
    params = ModelParams(dims, tensors)
    params.check_shapes()
    return params
