"""Path-block dispatch on a thread pool with order-fixed results."""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Sequence, TypeVar

logger: logging.Logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

DEFAULT_BLOCK_SIZE: int = 128


def default_threads() -> int:
    return os.cpu_count() or 1


def split_blocks(n_items: int, block_size: int = DEFAULT_BLOCK_SIZE) -> List[range]:
    """Contiguous index ranges; the partition depends only on n_items and block_size."""
    if block_size < 1:
        raise ValueError("block_size must be >= 1.")
    return [range(start, min(start + block_size, n_items)) for start in range(0, n_items, block_size)]


def map_blocks(fn: Callable[[T], R], items: Sequence[T], threads: int = 1) -> List[R]:
    """Apply ``fn`` to every item; results come back in input order."""
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    workers = min(threads, len(items))
    logger.debug("Dispatching %d blocks to %d threads", len(items), workers)
    with ThreadPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(fn, items))
