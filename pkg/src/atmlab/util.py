"""Shared plumbing: error types, named RNG streams, JSONL/JSON io, ordered parallel map."""
from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Callable, Iterable, Sequence

import numpy as np


class AtmError(Exception):
    """Base class for all errors raised by this package."""


class SizingError(AtmError):
    """A count/capacity precondition was violated (too few facts, k too large, ...)."""


class ConfigError(AtmError):
    """Run configuration is malformed (unknown keys, bad values, missing paths)."""


class StageDependencyError(AtmError):
    """A pipeline stage was invoked before the stages it depends on."""


class SamplingError(AtmError):
    """Sampling produced only degenerate outputs within the retry budget."""


class CheckpointError(AtmError):
    """Checkpoint file is missing, corrupt, or inconsistent with its header."""


def subrng(seed: int, *labels: Any) -> np.random.Generator:
    """Independent reproducible RNG stream for (seed, labels).

    Labels are hashed with sha256 so streams are stable across processes and
    Python hash randomization. Every source of randomness in the package flows
    through here; there is no ambient entropy.
    """
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for lab in labels:
        digest = hashlib.sha256(str(lab).encode("utf-8")).digest()
        words.append(int.from_bytes(digest[:8], "little"))
    return np.random.default_rng(np.random.SeedSequence(words))


def derive_seed(seed: int, *labels: Any) -> int:
    """Stable 63-bit integer seed for a named sub-stream."""
    digest = hashlib.sha256(
        b"\x00".join([str(int(seed)).encode()] + [str(l).encode() for l in labels])
    ).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def write_jsonl(path: str, records: Iterable[dict]) -> None:
    """One JSON object per line, UTF-8, sorted keys for byte-stable output."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True, ensure_ascii=False))
            fh.write("\n")


def read_jsonl(path: str) -> list[dict]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out


def dump_json(path: str, obj: Any) -> None:
    """Deterministic JSON file: sorted keys, fixed separators, atomic replace."""
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2, ensure_ascii=False)
        fh.write("\n")
    os.replace(tmp, path)


def load_json(path: str) -> Any:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def parallel_map(fn: Callable, items: Sequence, workers: int | None = None) -> list:
    """Map `fn` over `items`, preserving input order.

    Work items must be independent and side-effect free; results are merged in
    input order so the output is identical for any worker count.
    """
    items = list(items)
    if workers is None:
        workers = os.cpu_count() or 1
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
