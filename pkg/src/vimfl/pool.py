"""Per-client fan-out. Results always come back in client-id order."""

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, Optional


def resolve_threads(threads: Optional[int] = None) -> int:
    if threads is None:
        threads = int(os.environ.get("VFL_THREADS", "1") or 1)
    return max(1, int(threads))


class ClientPool:
    def __init__(self, threads: Optional[int] = None):
        self.threads = resolve_threads(threads)
        self._ex = ThreadPoolExecutor(self.threads) if self.threads > 1 else None

    def map(self, fn: Callable, items: Iterable) -> List:
        items = list(items)
        if self._ex is None:
            return [fn(it) for it in items]
        return list(self._ex.map(fn, items))

    def close(self):
        if self._ex is not None:
            self._ex.shutdown()
            self._ex = None
