"""Thread-pool helper honouring the ``PREDICT_THREADS`` environment variable."""
import os
from concurrent.futures import ThreadPoolExecutor


def thread_count():
    """Worker count: ``PREDICT_THREADS`` if set and positive, else the CPU count."""
    raw = os.environ.get("PREDICT_THREADS", "0").strip() or "0"
    try:
        requested = int(raw)
    except ValueError:
        requested = 0
    if requested > 0:
        return requested
    return os.cpu_count() or 1


def pmap(fn, items):
    """Ordered map over ``items``; results do not depend on the worker count."""
    items = list(items)
    workers = min(thread_count(), len(items))
    if workers <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
