"""Shared helpers: hashing, per-tensor RNG streams, bounded thread pools."""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, Sequence, TypeVar

import numpy as np

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF

T = TypeVar("T")
R = TypeVar("R")


def fnv1a64(data: bytes, state: int = _FNV_OFFSET) -> int:
    """64-bit FNV-1a over ``data``, optionally continuing a running state."""
    h = state
    prime = _FNV_PRIME
    mask = _MASK64
    for b in data:
        h = ((h ^ b) * prime) & mask
    return h


def stream_key(seed: int, name: str) -> int:
    """Derive a 64-bit RNG key from a global seed and a stream name.

    XOR-folding a hash of the name keeps keys stable under reordering of the
    tensor set and independent across tensors.
    """
    return (int(seed) & _MASK64) ^ fnv1a64(name.encode("utf-8"))


def rng_for(seed: int, name: str) -> np.random.Generator:
    """Counter-based generator keyed by (seed, name).

    Philox is counter-based, so the i-th variate of a stream depends only on
    (seed, name, i). Per-tensor streams make output independent of thread
    scheduling and of the order tensors are visited in.
    """
    return np.random.Generator(np.random.Philox(key=stream_key(seed, name)))


def thread_count(requested: int | None = None) -> int:
    """Resolve the worker count: explicit value, OBIM_THREADS, or CPU count."""
    if requested is None:
        env = os.environ.get("OBIM_THREADS", "").strip()
        requested = int(env) if env else (os.cpu_count() or 1)
    n = int(requested)
    if n < 1:
        raise ValueError("thread count must be >= 1")
    return n


def map_ordered(fn: Callable[[T], R], items: Iterable[T], threads: int = 1) -> list[R]:
    """Apply ``fn`` over ``items``, optionally on a pool; order is preserved.

    Caller must ensure ``fn`` is pure per item; results are combined strictly
    in input order so the worker count can never change the outcome.
    """
    seq: Sequence[T] = list(items)
    if threads <= 1 or len(seq) <= 1:
        return [fn(it) for it in seq]
    with ThreadPoolExecutor(max_workers=min(threads, len(seq))) as pool:
        return list(pool.map(fn, seq))
