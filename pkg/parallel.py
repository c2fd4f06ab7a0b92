"""
Ordered worker pool for per-record work (synthesis, prediction, matching)
"""

import threading
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, Optional, TypeVar

import config
from logger import log_event

T = TypeVar("T")
R = TypeVar("R")


class StopRequested(Exception):
    pass


def ordered_map(
    func: Callable[[T], R],
    items: Iterable[T],
    max_workers: Optional[int] = None,
    stop_flag: Optional[threading.Event] = None,
    component: str = "parallel",
) -> list[R]:
    """
    Apply func to every item and return results in input order

    Args:
        func: Per-record function; must not depend on scheduling order
        items: Records to process
        max_workers: Thread count, defaults to settings.workers
        stop_flag: When set, remaining records are abandoned
        component: Log component name of the caller

    Returns:
        list: func(item) for every item, in the order of items
    """
    items = list(items)
    workers = max_workers or config.settings.workers

    def _run(item):
        if stop_flag is not None and stop_flag.is_set():
            raise StopRequested()
        return func(item)

    if workers <= 1 or len(items) <= 1:
        return [_run(item) for item in items]

    log_event(component, "debug", f"Processing {len(items)} records on {workers} threads")
    with ThreadPoolExecutor(max_workers=workers, thread_name_prefix=component) as pool:
        try:
            return list(pool.map(_run, items))
        except StopRequested:
            log_event(component, "warning", "Stopped before all records were processed")
            raise
