"""Thread fan-out capped by ``FWDADAPT_THREADS`` (default 1: run inline)."""

import os
from concurrent.futures import ThreadPoolExecutor


def thread_count() -> int:
    try:
        return max(1, int(os.environ.get("FWDADAPT_THREADS", "1")))
    except ValueError:
        return 1


def pmap(fn, items):
    """``[fn(x) for x in items]``, in input order regardless of thread count."""
    items = list(items)
    n = thread_count()
    if n == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
