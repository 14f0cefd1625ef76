"""Thread-pool helper honouring ``TODA_BENCH_THREADS``."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor


def max_workers() -> int:
    raw = os.environ.get("TODA_BENCH_THREADS")
    if raw is None or raw.strip() == "":
        return max(1, min(8, os.cpu_count() or 1))
    try:
        value = int(raw)
    except ValueError:
        raise ValueError(f"TODA_BENCH_THREADS must be an integer, got {raw!r}") from None
    if value < 1:
        raise ValueError("TODA_BENCH_THREADS must be >= 1")
    return value


def ordered_map(fn, items) -> list:
    """``[fn(x) for x in items]`` evaluated in parallel, results in input order."""
    items = list(items)
    workers = min(max_workers(), len(items))
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
