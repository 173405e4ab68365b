#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Worker pool helpers
Parallel map over images, streams, classes and folds with ordered results
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, Optional, TypeVar

logger = logging.getLogger(__name__)

T = TypeVar('T')
R = TypeVar('R')

_default_threads = 1


def set_default_threads(threads: Optional[int]) -> int:
    """Set the pool size used when callers pass threads=None (0 means all cores)"""
    global _default_threads
    if threads is None or threads <= 0:
        threads = os.cpu_count() or 1
    _default_threads = threads
    logger.debug(f"Worker pool size set to {threads}")
    return threads


def parallel_map(fn: Callable[[T], R], items: Iterable[T], threads: Optional[int] = None) -> List[R]:
    """
    Apply fn to every item and return results in input order

    Work items only read shared state; results are collected here so output
    order never depends on scheduling.
    """
    items = list(items)
    threads = threads or _default_threads
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]

    with ThreadPoolExecutor(max_workers=min(threads, len(items))) as pool:
        return list(pool.map(fn, items))
