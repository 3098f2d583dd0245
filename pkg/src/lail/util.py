"""Shared plumbing: stable hashing, seeded substreams, LDJSON files, bounded parallel map."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Callable, Iterable, Iterator, Sequence, TypeVar

import numpy as np

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3
_U64 = 1 << 64

T = TypeVar("T")
R = TypeVar("R")


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a hash. Stable across processes and platforms."""
    h = FNV64_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV64_PRIME) % _U64
    return h


def stable_u64(*parts: object) -> int:
    """Hash a tuple of ints/strings to a u64, independent of PYTHONHASHSEED."""
    buf = "\x1f".join(f"{type(p).__name__}:{p}" for p in parts)
    return fnv1a64(buf.encode("utf-8"))


def rng_for(*parts: object) -> np.random.Generator:
    """Counter-based (Philox) generator keyed by a stable hash of `parts`.

    Substreams for distinct keys are independent, so anything derived from
    one key cannot perturb another (e.g. per-anchor sampling in training).
    """
    return np.random.Generator(np.random.Philox(key=stable_u64(*parts)))


def canonical_json(obj: Any) -> str:
    """Deterministic JSON encoding used for config hashing."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def read_ldjson(path: str, skip_meta: bool = True) -> Iterator[tuple[int, dict]]:
    """Yield (1-based line number, record) for each line of an LDJSON file.

    Lines holding a `_meta` key are provenance records written by the CLI and
    are skipped unless `skip_meta` is false. Blank lines are ignored.
    """
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: malformed JSON: {exc.msg}") from exc
            if not isinstance(record, dict):
                raise ValueError(f"{path}:{lineno}: expected a JSON object")
            if skip_meta and "_meta" in record:
                continue
            yield lineno, record


def write_ldjson_line(fh, record: dict) -> None:
    fh.write(json.dumps(record, ensure_ascii=True) + "\n")


def parallel_map(
    fn: Callable[[T], R],
    items: Sequence[T] | Iterable[T],
    max_workers: int = 1,
) -> list[R]:
    """Apply `fn` to items with at most `max_workers` in flight.

    Results are returned in input order regardless of completion order, so
    callers aggregating them stay deterministic.
    """
    items = list(items)
    if max_workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(fn, items))
