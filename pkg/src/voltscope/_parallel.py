from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor


def n_workers(n_jobs: int | None = None) -> int:
    """Worker count: explicit ``n_jobs``, else ``VOLTSCOPE_THREADS``, else 1."""
    if n_jobs is None:
        n_jobs = int(os.environ.get("VOLTSCOPE_THREADS", "1") or 1)
    return max(1, int(n_jobs))


def pmap(fn, items, n_jobs: int | None = None) -> list:
    """Ordered map; each item is processed independently so results don't
    depend on the worker count."""
    items = list(items)
    workers = min(n_workers(n_jobs), len(items)) if items else 1
    if workers <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))
