"""Deterministic parallelism helpers.

Work is split into per-subject chunks whose outputs are merged by index, so
results are bit-identical for any worker count. ``CTC_THREADS`` caps the pool.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

from .errors import ValidationError


def worker_count() -> int:
    """Number of workers allowed by the CTC_THREADS environment variable."""
    raw = os.environ.get("CTC_THREADS", "")
    if not raw:
        return 1
    try:
        count = int(raw)
    except ValueError as exc:
        raise ValidationError(f"CTC_THREADS must be an integer, got {raw!r}") from exc
    if count < 1:
        raise ValidationError(f"CTC_THREADS must be >= 1, got {count}")
    return count


def chunk_ranges(total: int, chunks: int) -> list[tuple[int, int]]:
    """Split range(total) into at most `chunks` contiguous (start, stop) blocks."""
    chunks = max(1, min(chunks, total))
    size, extra = divmod(total, chunks)
    ranges = []
    start = 0
    for i in range(chunks):
        stop = start + size + (1 if i < extra else 0)
        ranges.append((start, stop))
        start = stop
    return ranges


def run_chunked(fn, total: int):
    """Run fn(start, stop) over contiguous index blocks, in order-preserving fashion.

    Returns the list of per-chunk results ordered by start index, regardless of
    the execution schedule.
    """
    workers = worker_count()
    ranges = chunk_ranges(total, workers)
    if len(ranges) == 1 or workers == 1:
        return [fn(start, stop) for start, stop in ranges]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn, start, stop) for start, stop in ranges]
        return [f.result() for f in futures]
