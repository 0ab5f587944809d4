"""
Order-stable fan-out of per-item work (story generation, annotation, evaluation).
Results always come back in input order, whatever the scheduling.
"""

import logging
from concurrent.futures import ProcessPoolExecutor

log = logging.getLogger(__name__)

CHUNKS_PER_WORKER = 4   # Submission granularity for executor.map


def parallel_map(fn, items, workers=1):
    """
    Apply fn to every item and return the results as a list in input order.
    Args:
        fn: Picklable module-level callable
        items: Iterable of picklable arguments
        workers (int): Process count; 1 or less runs inline in this process
    """
    items = list(items)
    if workers is None or workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    chunksize = max(1, len(items) // (workers * CHUNKS_PER_WORKER))
    log.debug("Dispatching %d items to %d workers (chunksize %d)", len(items), workers, chunksize)
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items, chunksize=chunksize))
