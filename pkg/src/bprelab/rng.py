"""Deterministic substreams for parallel Monte Carlo.

Every estimator consumes randomness in fixed-size replicate chunks. Chunk i
of a stream family draws from a counter-based Philox generator keyed by
(seed, salt, i), and chunk results are reduced in index order, so every
estimate is bit-identical for any worker count or scheduling order.
"""

from __future__ import annotations

import zlib
from concurrent.futures import ThreadPoolExecutor

import numpy as np

DEFAULT_CHUNK_SIZE = 20_000


def stream_salt(label: str) -> int:
    """Stable 32-bit identifier for a named stream family."""
    return zlib.crc32(label.encode("utf-8"))


def substream(seed: int, salt: int, index: int) -> np.random.Generator:
    """Independent generator for replicate chunk `index` of family `salt`."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(salt), int(index)))
    return np.random.Generator(np.random.Philox(ss))


def chunk_sizes(total: int, chunk_size: int = DEFAULT_CHUNK_SIZE) -> list[int]:
    """Split `total` replicates into chunks of `chunk_size` (last may be short)."""
    if total < 1:
        raise ValueError("replicate count must be >= 1")
    if chunk_size < 1:
        raise ValueError("chunk size must be >= 1")
    full, rem = divmod(int(total), int(chunk_size))
    sizes = [int(chunk_size)] * full
    if rem:
        sizes.append(rem)
    return sizes


def run_chunks(fn, n_chunks: int, workers: int = 1) -> list:
    """Evaluate fn(i) for i in range(n_chunks); results in index order.

    Callers reduce the returned list sequentially, which keeps floating-point
    aggregation independent of scheduling.
    """
    if workers <= 1:
        return [fn(i) for i in range(n_chunks)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(n_chunks)))
