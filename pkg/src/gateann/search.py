"""Filtered search over the disk index.

Five engines share one frontier and one record-processing path and differ
only in where the predicate is checked:

``beam-post``     synchronous rounds of W reads, filter on the final results
``pipe-post``     up to W reads in flight, filter on the final results
``naive-pre``     filter before the read, failing nodes are dropped unexpanded
``early-filter``  every node is read, failing nodes skip the exact distance
``gated``         filter before the read, failing nodes are tunneled through
                  the in-memory neighbor store using PQ distances
"""

from __future__ import annotations

import bisect
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import pq
from .core import Predicate, SearchParams
from .stores import FilterStore, NeighborStore, build_neighbor_store, load_filter_store
from .storage import Storage

log = logging.getLogger(__name__)

EXPANSION_CAP = 100  # total expansions per query are capped at this many times L


@dataclass
class QueryStats:
    ios: int = 0
    ios_completed: int = 0
    tunnels: int = 0
    dropped: int = 0
    exact_dists: int = 0
    pq_dists: int = 0
    hops: int = 0
    virtual_latency_us: float = 0.0
    cpu_us: float = 0.0
    max_in_flight: int = 0
    reads: list = field(default_factory=list)  # node ids in submission order

    COUNTERS = ("ios", "ios_completed", "tunnels", "dropped", "exact_dists", "pq_dists", "hops")

    def add(self, other: "QueryStats"):
        for name in self.COUNTERS + ("virtual_latency_us", "cpu_us"):
            setattr(self, name, getattr(self, name) + getattr(other, name))
        self.max_in_flight = max(self.max_in_flight, other.max_in_flight)


@dataclass
class SearchResult:
    ids: list
    dists: list
    stats: QueryStats


class Frontier:
    """Candidate list sorted by (distance, id), capped at L entries.

    Nodes are never inserted twice. ``expanded`` holds everything that has been
    dispatched, tunneled or dropped; ``failing`` the filter-failing subset.
    """

    def __init__(self, L: int):
        self.L = L
        self.entries = []
        self.seen = set()
        self.expanded = set()
        self.failing = set()
        self._cursor = 0  # every entry before it is expanded

    def __len__(self):
        return len(self.entries)

    def ids(self) -> list:
        return [n for _, n in self.entries]

    def threshold(self) -> float:
        return self.entries[self.L - 1][0] if len(self.entries) >= self.L else math.inf

    def unseen(self, nodes) -> list:
        seen = self.seen
        return [n for n in nodes if n not in seen]

    def offer(self, nodes, dists) -> list:
        """Insert the nodes that beat the current threshold; returns them."""
        thr = self.threshold()
        kept = []
        entries = self.entries
        for n, d in zip(nodes, dists):
            if n in self.seen or not d < thr:
                continue
            item = (d, n)
            pos = bisect.bisect_left(entries, item)
            entries.insert(pos, item)
            self.seen.add(n)
            kept.append(n)
            if pos < self._cursor:
                self._cursor = pos
        if len(entries) > self.L:
            del entries[self.L:]
        return kept

    def next_candidate(self):
        """Best entry not yet expanded, or None."""
        entries, done = self.entries, self.expanded
        i = self._cursor
        while i < len(entries) and entries[i][1] in done:
            i += 1
        self._cursor = i
        return entries[i][1] if i < len(entries) else None

    def check(self):
        assert len(self.entries) <= self.L
        assert all(a < b for a, b in zip(self.entries, self.entries[1:]))
        assert len({n for _, n in self.entries}) == len(self.entries)


class SearchIndex:
    """Everything a query needs: record storage, PQ codes, and both stores."""

    def __init__(self, storage: Storage, codebook: pq.PQCodebook, codes: np.ndarray,
                 filters: FilterStore, neighbors: NeighborStore | None = None):
        n = storage.count
        if len(codes) != n or filters.count != n or (neighbors is not None and neighbors.count != n):
            raise ValueError(
                f"inconsistent sizes: index {n}, pq {len(codes)}, filter {filters.count}, "
                f"neighbors {None if neighbors is None else neighbors.count}")
        if n == 0:
            raise ValueError("empty index")
        self.storage = storage
        self.codebook = codebook
        self.codes = codes
        self.filters = filters
        self.neighbors = neighbors

    @classmethod
    def load(cls, index_path, pq_path, label_path, R_max: int = 32, backend: str = "sim",
             latency_us: float = 100.0, label_kind: str = "single"):
        storage = Storage(index_path, backend=backend, latency_us=latency_us)
        codebook, codes = pq.read_pq(pq_path)
        filters = load_filter_store(label_path, storage.count, kind=label_kind)
        return cls(storage, codebook, codes, filters, build_neighbor_store(index_path, R_max))

    def with_filters(self, filters: FilterStore) -> "SearchIndex":
        return SearchIndex(self.storage, self.codebook, self.codes, filters, self.neighbors)

    @property
    def medoid(self) -> int:
        return self.storage.medoid


class _Query:
    def __init__(self, index: SearchIndex, q, pred: Predicate, params: SearchParams):
        if params.mode == "gated" and index.neighbors is None:
            raise ValueError("gated search needs a neighbor store")
        self.index = index
        self.q = np.asarray(q, dtype=np.float64)
        self.params = params
        self.mode = params.mode
        self.match = index.filters.matcher(pred)
        self.lut = pq.build_lut(index.codebook, q)
        self.frontier = Frontier(params.L)
        self.stats = QueryStats()
        self.pool = []  # (exact distance, node) of result-eligible reads
        self.session = index.storage.session()
        self.budget = EXPANSION_CAP * params.L

    def score(self, nodes) -> list:
        nodes = self.frontier.unseen(nodes)
        if not nodes:
            return []
        self.stats.pq_dists += len(nodes)
        d = pq.adc_batch(self.lut, self.index.codes[nodes])
        return self.frontier.offer(nodes, d.tolist())

    def out_of_budget(self) -> bool:
        st = self.stats
        if st.ios + st.tunnels + st.dropped >= self.budget:
            log.warning("query stopped at the %d-expansion safety cap", self.budget)
            return True
        return False

    def submit(self, node):
        self.session.submit(node)
        self.stats.ios += 1
        self.stats.reads.append(node)

    def tunnel(self, node):
        fr = self.frontier
        fr.failing.add(node)
        self.stats.tunnels += 1
        self.stats.hops += 1
        self.score(self.index.neighbors.neighbors_of(node).tolist())

    def process(self, rec):
        st = self.stats
        st.ios_completed += 1
        st.hops += 1
        node = rec.node
        if self.mode == "early-filter" and not self.match(node):
            pass
        else:
            diff = rec.vector.astype(np.float64) - self.q
            st.exact_dists += 1
            self.pool.append((float(np.dot(diff, diff)), node))
        self.score(rec.neighbors.tolist())

    def dispatch(self, node) -> bool:
        """Route one frontier candidate; True if a read was submitted."""
        self.frontier.expanded.add(node)
        if self.mode == "gated" and not self.match(node):
            self.tunnel(node)
            return False
        if self.mode == "naive-pre" and node != self.index.medoid and not self.match(node):
            self.frontier.failing.add(node)
            self.stats.dropped += 1
            return False
        self.submit(node)
        return True

    def run(self):
        t0 = time.perf_counter()
        entry = self.index.medoid
        self.score([entry])
        if self.mode == "beam-post":
            self._beam()
        else:
            self._pipelined()
        st = self.stats
        st.virtual_latency_us = self.session.clock
        st.max_in_flight = self.session.high_water
        self.session.close()
        match = self.match
        found = sorted((d, n) for d, n in self.pool if match(n))[:self.params.K]
        st.cpu_us = (time.perf_counter() - t0) * 1e6
        return SearchResult([n for _, n in found], [d for d, _ in found], st)

    def _pipelined(self):
        W = self.params.W
        fr, sess = self.frontier, self.session
        while True:
            while sess.outstanding < W and not self.out_of_budget():
                c = fr.next_candidate()
                if c is None:
                    break
                self.dispatch(c)
            if sess.outstanding == 0:
                break
            for rec in sess.poll(wait=True):
                self.process(rec)

    def _beam(self):
        W = self.params.W
        fr, sess = self.frontier, self.session
        while not self.out_of_budget():
            batch = []
            while len(batch) < W:
                c = fr.next_candidate()
                if c is None:
                    break
                fr.expanded.add(c)
                batch.append(c)
            if not batch:
                break
            for c in batch:
                self.submit(c)
            done = []
            while sess.outstanding:
                done.extend(sess.poll(wait=True))
            for rec in done:
                self.process(rec)


def search(mode: str, index: SearchIndex, q, pred: Predicate, params: SearchParams) -> SearchResult:
    if mode != params.mode:
        params = SearchParams(params.L, params.K, params.W, mode)
    return _Query(index, q, pred, params).run()


@dataclass
class BatchResult:
    results: list
    total: QueryStats
    wall_s: float

    def mean(self, name: str) -> float:
        return getattr(self.total, name) / max(1, len(self.results))


def batch_search(mode: str, index: SearchIndex, queries, preds, params: SearchParams,
                 threads: int = 1) -> BatchResult:
    if len(queries) != len(preds):
        raise ValueError("queries and predicates are not aligned")
    t0 = time.perf_counter()
    if threads <= 1:
        results = [search(mode, index, q, p, params) for q, p in zip(queries, preds)]
    else:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(lambda qp: search(mode, index, qp[0], qp[1], params), zip(queries, preds)))
    wall = time.perf_counter() - t0
    total = QueryStats()
    for r in results:
        total.add(r.stats)
    return BatchResult(results, total, wall)
