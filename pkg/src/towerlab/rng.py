"""Deterministic random streams and chunked parallel execution.

Every Monte Carlo ensemble is split into chunks of a fixed size. Chunk ``c``
of an experiment draws from ``SeedSequence([master_seed, tag, c])``, so the
numbers a trial sees depend only on its index, never on the worker count.
"""

from __future__ import annotations

import zlib
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence

import numpy as np

CHUNK = 4096


def _tag_int(tag: str | int) -> int:
    if isinstance(tag, int):
        return tag
    return zlib.crc32(tag.encode("utf-8"))


def stream(master_seed: int, tag: str | int, index: int = 0) -> np.random.Generator:
    """Independent generator for ``(master_seed, tag, index)``."""
    ss = np.random.SeedSequence([int(master_seed) & 0xFFFFFFFFFFFFFFFF, _tag_int(tag), int(index)])
    return np.random.Generator(np.random.PCG64(ss))


def chunk_bounds(n_trials: int, chunk: int = CHUNK) -> list[tuple[int, int, int]]:
    """List of ``(chunk_index, start, stop)`` covering ``range(n_trials)``."""
    out = []
    for c, start in enumerate(range(0, n_trials, chunk)):
        out.append((c, start, min(start + chunk, n_trials)))
    return out


def map_chunks(
    fn: Callable[[int, int, int], object],
    n_trials: int,
    threads: int = 1,
    chunk: int = CHUNK,
) -> list:
    """Run ``fn(chunk_index, start, stop)`` over all chunks.

    Results come back in chunk order whatever ``threads`` is, which keeps
    reductions bit-identical across worker counts.
    """
    bounds = chunk_bounds(n_trials, chunk)
    if threads <= 1 or len(bounds) <= 1:
        return [fn(*b) for b in bounds]
    with ThreadPoolExecutor(max_workers=int(threads)) as pool:
        futures = [pool.submit(fn, *b) for b in bounds]
        return [f.result() for f in futures]


def concat(parts: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate(list(parts)) if len(parts) else np.empty(0)
