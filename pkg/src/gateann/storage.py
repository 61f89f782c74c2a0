"""Asynchronous record reads over the disk index.

Two backends share one submit/poll contract:

* ``SimSession`` completes every read exactly ``latency_us`` virtual
  microseconds after submission, FIFO, with unlimited device parallelism.
  It is deterministic and is what the tests use.
* ``FileSession`` issues positioned reads from a small thread pool and
  returns records in completion order.

A ``Storage`` holds the shared read-only index image and hands out one
session per query.
"""

from __future__ import annotations

import os
import threading
import time
from collections import deque
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass

import numpy as np

from .builder import DiskLayout, decode_record, open_index_image

DEFAULT_LATENCY_US = 100.0


@dataclass(frozen=True)
class ReadTicket:
    node: int
    submit_time: float


@dataclass
class NodeRecord:
    node: int
    vector: np.ndarray
    neighbors: np.ndarray


@dataclass
class IoStats:
    reads_submitted: int = 0
    reads_completed: int = 0
    virtual_time: float = 0.0


class BackendClosed(RuntimeError):
    pass


class Storage:
    """Shared handle on one disk index file."""

    def __init__(self, path, backend: str = "sim", latency_us: float = DEFAULT_LATENCY_US, workers: int = 4):
        if backend not in ("sim", "file"):
            raise ValueError(f"unknown backend {backend!r}")
        self.path = os.fspath(path)
        self.backend = backend
        self.latency_us = latency_us
        self.layout, self.image = open_index_image(path)
        self._lock = threading.Lock()
        self.totals = IoStats()
        self._fd = None
        self._pool = None
        if backend == "file":
            self._fd = os.open(self.path, os.O_RDONLY)
            self._pool = ThreadPoolExecutor(max_workers=workers, thread_name_prefix="gateann-io")

    @property
    def count(self) -> int:
        return self.layout.count

    @property
    def medoid(self) -> int:
        return self.layout.medoid

    def record(self, node: int) -> NodeRecord:
        """Synchronous read straight from the image (for tests and tools)."""
        vec, nbrs = decode_record(self.layout, self.image[1 + node])
        return NodeRecord(node, vec, nbrs)

    def session(self):
        if self.backend == "sim":
            return SimSession(self, self.latency_us)
        return FileSession(self)

    def _account(self, submitted: int = 0, completed: int = 0):
        with self._lock:
            self.totals.reads_submitted += submitted
            self.totals.reads_completed += completed

    def reset_stats(self):
        with self._lock:
            self.totals = IoStats()

    def close(self):
        if self._pool is not None:
            self._pool.shutdown(wait=True)
            self._pool = None
        if self._fd is not None:
            os.close(self._fd)
            self._fd = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class _Session:
    def __init__(self, storage: Storage):
        self.storage = storage
        self.layout: DiskLayout = storage.layout
        self.stats = IoStats()
        self.high_water = 0
        self.closed = False

    def _check(self, node):
        if self.closed:
            raise BackendClosed("session is closed")
        if not 0 <= node < self.layout.count:
            raise IndexError(f"node {node} out of range [0, {self.layout.count})")

    def _submitted(self):
        self.stats.reads_submitted += 1
        self.storage._account(submitted=1)
        self.high_water = max(self.high_water, self.outstanding)

    def _completed(self, n):
        self.stats.reads_completed += n
        self.storage._account(completed=n)

    def reset_stats(self):
        self.stats = IoStats(virtual_time=self.stats.virtual_time)
        self.high_water = self.outstanding

    def close(self):
        self.closed = True


class SimSession(_Session):
    def __init__(self, storage: Storage, latency_us: float):
        super().__init__(storage)
        self.latency_us = latency_us
        self.clock = 0.0
        self._queue = deque()  # (completion time, ticket), FIFO

    @property
    def outstanding(self) -> int:
        return len(self._queue)

    def advance(self, us: float):
        self.clock += us
        self.stats.virtual_time = self.clock

    def submit(self, node: int) -> ReadTicket:
        self._check(node)
        ticket = ReadTicket(node, self.clock)
        self._queue.append((self.clock + self.latency_us, ticket))
        self._submitted()
        return ticket

    def poll(self, wait: bool = False) -> list:
        """Completed records in submission order.

        With ``wait`` the clock first jumps to the oldest completion if nothing
        has finished yet.
        """
        if wait and self._queue and self._queue[0][0] > self.clock:
            self.clock = self._queue[0][0]
            self.stats.virtual_time = self.clock
        out = []
        while self._queue and self._queue[0][0] <= self.clock:
            _, ticket = self._queue.popleft()
            out.append(self.storage.record(ticket.node))
        self._completed(len(out))
        return out


class FileSession(_Session):
    def __init__(self, storage: Storage):
        super().__init__(storage)
        self._t0 = time.perf_counter()
        self._futures = {}

    @property
    def clock(self) -> float:
        return (time.perf_counter() - self._t0) * 1e6

    @property
    def outstanding(self) -> int:
        return len(self._futures)

    def _read(self, node: int) -> NodeRecord:
        lay = self.layout
        raw = os.pread(self.storage._fd, lay.sector_size, lay.record_offset(node))
        if len(raw) != lay.sector_size:
            raise OSError(f"short read for node {node}")
        vec, nbrs = decode_record(lay, raw)
        return NodeRecord(node, vec, nbrs)

    def submit(self, node: int) -> ReadTicket:
        self._check(node)
        if self.storage._pool is None:
            raise BackendClosed("storage is closed")
        ticket = ReadTicket(node, self.clock)
        fut = self.storage._pool.submit(self._read, node)
        self._futures[fut] = ticket
        self._submitted()
        return ticket

    def poll(self, wait: bool = False) -> list:
        if not self._futures:
            return []
        if wait:
            done, _ = _wait_first(self._futures)
        else:
            done = [f for f in self._futures if f.done()]
        out = []
        # completion order is approximated by the order futures report done
        for fut in done:
            self._futures.pop(fut)
            out.append(fut.result())
        self._completed(len(out))
        self.stats.virtual_time = self.clock
        return out


def _wait_first(futures):
    done, pending = wait(list(futures), return_when=FIRST_COMPLETED)
    return [f for f in futures if f in done], pending
