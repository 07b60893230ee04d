"""Order-preserving task map over worker processes.

BLAS is pinned to one thread everywhere so that floating-point reductions,
and therefore every output byte, do not depend on the worker count.
"""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor

from threadpoolctl import threadpool_limits


def available_workers() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:  # pragma: no cover - non-Linux
        return os.cpu_count() or 1


def _pin_blas():
    threadpool_limits(limits=1)


def run_tasks(fn, tasks, workers: int = 1) -> list:
    """``[fn(t) for t in tasks]``, possibly computed in ``workers`` processes."""
    tasks = list(tasks)
    if workers is None or workers < 1:
        workers = available_workers()
    with threadpool_limits(limits=1):
        if workers == 1 or len(tasks) <= 1:
            return [fn(t) for t in tasks]
        with ProcessPoolExecutor(max_workers=min(workers, len(tasks)), initializer=_pin_blas) as pool:
            return list(pool.map(fn, tasks))
