"""Index-chunked thread execution.

Work is cut into fixed-size contiguous index ranges and the partial results
are reassembled in index order, so the output never depends on ``threads``.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Tuple, TypeVar

from snspdpnr.constants import CHUNK

T = TypeVar("T")


def chunk_ranges(count: int, chunk: int = CHUNK) -> List[Tuple[int, int]]:
    if chunk <= 0:
        raise ValueError("chunk must be positive")
    return [(start, min(start + chunk, count)) for start in range(0, count, chunk)]


def map_chunks(
    func: Callable[[int, int], T],
    count: int,
    threads: int = 1,
    chunk: int = CHUNK,
) -> List[T]:
    """Call ``func(start, stop)`` for every chunk and return the results in index order."""
    if threads < 1:
        raise ValueError("threads must be at least 1")
    ranges = chunk_ranges(count, chunk)
    if threads == 1 or len(ranges) <= 1:
        return [func(start, stop) for start, stop in ranges]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(func, start, stop) for start, stop in ranges]
        return [f.result() for f in futures]
