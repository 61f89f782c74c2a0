"""Vamana graph construction and the sector-aligned disk index layout.

The hot loops (greedy search, robust prune, the insertion passes) are compiled
with numba; everything runs single-threaded so a seed fixes the graph.
"""

from __future__ import annotations

import logging
import struct
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numba import njit

from .core import DTYPES, FormatError, VectorDataset, dtype_code

log = logging.getLogger(__name__)

DISK_MAGIC = b"GANNDSK1"
_DISK_HEADER = struct.Struct("<8sIQIIII")
MEDOID_SAMPLE = 100_000


@dataclass(frozen=True)
class BuildParams:
    R: int = 32
    L_build: int = 64
    alpha: float = 1.2
    seed: int = 0

    def __post_init__(self):
        if self.R < 2:
            raise ValueError("R must be >= 2")
        if self.L_build < self.R:
            raise ValueError("L_build must be >= R")
        if self.alpha < 1.0:
            raise ValueError("alpha must be >= 1.0")


@dataclass
class InMemGraph:
    adjacency: list  # list of int arrays, distance-sorted
    medoid: int
    R: int

    def __post_init__(self):
        n = len(self.adjacency)
        if not 0 <= self.medoid < n:
            raise ValueError("medoid out of range")
        for i, nbrs in enumerate(self.adjacency):
            nbrs = np.asarray(nbrs)
            if len(nbrs) > self.R:
                raise ValueError(f"node {i} has degree {len(nbrs)} > R={self.R}")
            if len(nbrs) and (nbrs.min() < 0 or nbrs.max() >= n):
                raise ValueError(f"node {i} has an out-of-range neighbor")
            if i in nbrs:
                raise ValueError(f"node {i} has a self loop")
            if len(np.unique(nbrs)) != len(nbrs):
                raise ValueError(f"node {i} has duplicate neighbors")

    @property
    def count(self) -> int:
        return len(self.adjacency)

    def to_padded(self):
        adj = np.zeros((self.count, self.R), dtype=np.int64)
        deg = np.zeros(self.count, dtype=np.int64)
        for i, nbrs in enumerate(self.adjacency):
            deg[i] = len(nbrs)
            adj[i, :len(nbrs)] = nbrs
        return adj, deg


# -- compiled kernels ---------------------------------------------------------------


@njit(cache=True)
def _dist(X, i, q):
    s = 0.0
    for k in range(X.shape[1]):
        d = np.float64(X[i, k]) - np.float64(q[k])
        s += d * d
    return s


@njit(cache=True)
def _dist2(X, i, j):
    s = 0.0
    for k in range(X.shape[1]):
        d = np.float64(X[i, k]) - np.float64(X[j, k])
        s += d * d
    return s


@njit(cache=True)
def _less(da, ia, db, ib):
    return da < db or (da == db and ia < ib)


@njit(cache=True)
def _greedy(X, adj, deg, start, q, L, mark, epoch):
    """Best-first search with an L-bounded list; ties go to the lower id.

    Returns (expanded nodes in expansion order, list ids, list distances).
    `mark[v] == epoch` means v was already considered during this search.
    """
    cd = np.empty(L + 1, dtype=np.float64)
    ci = np.empty(L + 1, dtype=np.int64)
    ce = np.zeros(L + 1, dtype=np.bool_)
    size = 1
    cd[0] = _dist(X, start, q)
    ci[0] = start
    mark[start] = epoch
    visited = []
    cur = 0
    while cur < size:
        node = ci[cur]
        ce[cur] = True
        visited.append(node)
        best = size
        for j in range(deg[node]):
            nb = adj[node, j]
            if mark[nb] == epoch:
                continue
            mark[nb] = epoch
            d = _dist(X, nb, q)
            if size == L and not _less(d, nb, cd[L - 1], ci[L - 1]):
                continue
            pos = size if size < L else L - 1
            while pos > 0 and _less(d, nb, cd[pos - 1], ci[pos - 1]):
                cd[pos] = cd[pos - 1]
                ci[pos] = ci[pos - 1]
                ce[pos] = ce[pos - 1]
                pos -= 1
            cd[pos] = d
            ci[pos] = nb
            ce[pos] = False
            if size < L:
                size += 1
            if pos < best:
                best = pos
        # next unexpanded entry, starting from the earliest insertion point
        cur = min(best, cur + 1)
        while cur < size and ce[cur]:
            cur += 1
    out = np.empty(len(visited), dtype=np.int64)
    for k in range(len(visited)):
        out[k] = visited[k]
    return out, ci[:size].copy(), cd[:size].copy()


@njit(cache=True)
def _prune(X, p, cands, alpha, R):
    """RobustPrune: returns at most R ids, distance-sorted from p."""
    n = len(cands)
    ids = np.empty(n, dtype=np.int64)
    m = 0
    srt = np.sort(cands)
    for k in range(n):
        c = srt[k]
        if c == p or (m > 0 and ids[m - 1] == c):
            continue
        ids[m] = c
        m += 1
    ids = ids[:m]
    dp = np.empty(m, dtype=np.float64)
    for k in range(m):
        dp[k] = _dist2(X, p, ids[k])
    order = np.argsort(dp, kind="mergesort")  # stable: equal distances keep id order
    ids = ids[order]
    dp = dp[order]
    alive = np.ones(m, dtype=np.bool_)
    out = np.empty(min(R, m), dtype=np.int64)
    cnt = 0
    for a in range(m):
        if not alive[a]:
            continue
        out[cnt] = ids[a]
        cnt += 1
        if cnt == R:
            break
        for b in range(a + 1, m):
            if alive[b] and alpha * _dist2(X, ids[a], ids[b]) <= dp[b]:
                alive[b] = False
    return out[:cnt]


@njit(cache=True)
def _set_row(adj, deg, i, row):
    deg[i] = len(row)
    for k in range(len(row)):
        adj[i, k] = row[k]


@njit(cache=True)
def _pass(X, adj, deg, medoid, perm, alpha, R, L, mark, epoch0):
    epoch = epoch0
    for t in range(len(perm)):
        p = perm[t]
        epoch += 1
        visited, _, _ = _greedy(X, adj, deg, medoid, X[p], L, mark, epoch)
        pool = np.empty(len(visited) + deg[p], dtype=np.int64)
        pool[:len(visited)] = visited
        pool[len(visited):] = adj[p, :deg[p]]
        _set_row(adj, deg, p, _prune(X, p, pool, alpha, R))
        for k in range(deg[p]):
            j = adj[p, k]
            present = False
            for h in range(deg[j]):
                if adj[j, h] == p:
                    present = True
                    break
            if present:
                continue
            if deg[j] < R:
                adj[j, deg[j]] = p
                deg[j] += 1
            else:
                pool2 = np.empty(deg[j] + 1, dtype=np.int64)
                pool2[:deg[j]] = adj[j, :deg[j]]
                pool2[deg[j]] = p
                _set_row(adj, deg, j, _prune(X, j, pool2, alpha, R))
    return epoch


@njit(cache=True)
def _sort_rows(X, adj, deg):
    for i in range(adj.shape[0]):
        k = deg[i]
        row = np.sort(adj[i, :k])
        d = np.empty(k, dtype=np.float64)
        for h in range(k):
            d[h] = _dist2(X, i, row[h])
        order = np.argsort(d, kind="mergesort")
        for h in range(k):
            adj[i, h] = row[order[h]]


# -- python API -----------------------------------------------------------------------


def _as_float(dataset) -> np.ndarray:
    data = dataset.data if isinstance(dataset, VectorDataset) else np.asarray(dataset)
    return np.ascontiguousarray(data, dtype=np.float32)


def compute_medoid(dataset: VectorDataset, seed: int = 0) -> int:
    """Id of the vector closest to the (sampled) centroid; ties to the lowest id."""
    data = dataset.data
    n = data.shape[0]
    if n > MEDOID_SAMPLE:
        rng = np.random.default_rng(seed)
        sample = data[np.sort(rng.choice(n, MEDOID_SAMPLE, replace=False))]
    else:
        sample = data
    centroid = sample.astype(np.float64).mean(axis=0)
    d = np.empty(n, dtype=np.float64)
    for lo in range(0, n, 65536):
        diff = data[lo:lo + 65536].astype(np.float64) - centroid
        d[lo:lo + 65536] = np.einsum("ij,ij->i", diff, diff)
    return int(np.argmin(d))


def greedy_search_mem(graph: InMemGraph, dataset: VectorDataset, q, L: int):
    """Exact-distance best-first search from the medoid.

    Returns (visited ids in expansion order, [(distance, id), ...] ascending).
    """
    X = _as_float(dataset)
    adj, deg = graph.to_padded()
    mark = np.zeros(graph.count, dtype=np.int64)
    visited, ids, dists = _greedy(X, adj, deg, graph.medoid, np.asarray(q, dtype=np.float32), L, mark, 1)
    return visited.tolist(), list(zip(dists.tolist(), ids.tolist()))


def robust_prune(dataset: VectorDataset, p: int, cands, alpha: float, R: int) -> list:
    cands = np.asarray(list(cands), dtype=np.int64)
    return _prune(_as_float(dataset), int(p), cands, float(alpha), int(R)).tolist()


def build_vamana(dataset: VectorDataset, params: BuildParams = BuildParams()) -> InMemGraph:
    n = dataset.count
    if n < 2:
        raise ValueError("need at least 2 vectors to build a graph")
    R = params.R
    X = _as_float(dataset)
    rng = np.random.default_rng(params.seed)
    medoid = compute_medoid(dataset, seed=params.seed)

    # random initial graph, duplicates and self loops dropped
    r0 = min(R, n - 1)
    adj = np.zeros((n, R), dtype=np.int64)
    deg = np.zeros(n, dtype=np.int64)
    raw = rng.integers(0, n - 1, size=(n, r0))
    raw += raw >= np.arange(n)[:, None]
    for i in range(n):
        row = np.unique(raw[i])
        adj[i, :len(row)] = row
        deg[i] = len(row)

    mark = np.zeros(n, dtype=np.int64)
    epoch = 0
    for alpha in (1.0, params.alpha):
        perm = rng.permutation(n).astype(np.int64)
        epoch = _pass(X, adj, deg, medoid, perm, float(alpha), R, params.L_build, mark, epoch)
        log.info("vamana pass alpha=%.2f done, mean degree %.1f", alpha, deg.mean())
    _sort_rows(X, adj, deg)
    return InMemGraph([adj[i, :deg[i]].copy() for i in range(n)], medoid, R)


def reachable_fraction(graph: InMemGraph) -> float:
    seen = np.zeros(graph.count, dtype=bool)
    seen[graph.medoid] = True
    todo = deque([graph.medoid])
    while todo:
        v = todo.popleft()
        for u in graph.adjacency[v]:
            if not seen[u]:
                seen[u] = True
                todo.append(u)
    frac = float(seen.mean())
    if frac < 1.0:
        log.info("%d nodes unreachable from the medoid", int((~seen).sum()))
    return frac


# -- disk index ------------------------------------------------------------------------


@dataclass(frozen=True)
class DiskLayout:
    sector_size: int
    count: int
    dim: int
    dtype: np.dtype
    R: int
    medoid: int

    @property
    def vector_bytes(self) -> int:
        return self.dim * self.dtype.itemsize

    def record_offset(self, node: int) -> int:
        return self.sector_size * (1 + node)


def record_payload(dim: int, dtype, R: int) -> int:
    return dim * np.dtype(dtype).itemsize + 4 + 4 * R


def write_disk_index(graph: InMemGraph, dataset: VectorDataset, sector_size: int, path) -> None:
    if graph.count != dataset.count:
        raise ValueError("graph and dataset sizes differ")
    payload = record_payload(dataset.dim, dataset.dtype, graph.R)
    if payload > sector_size:
        raise ValueError(f"node record needs {payload} bytes, sector is {sector_size}")
    X = dataset.data
    header = _DISK_HEADER.pack(DISK_MAGIC, sector_size, dataset.count, dataset.dim,
                               dtype_code(dataset.dtype), graph.R, graph.medoid)
    vbytes = dataset.dim * dataset.dtype.itemsize
    buf = np.zeros((dataset.count, sector_size), dtype=np.uint8)
    buf[:, :vbytes] = np.ascontiguousarray(X.astype(X.dtype.newbyteorder("<"))).view(np.uint8).reshape(dataset.count, vbytes)
    for i, nbrs in enumerate(graph.adjacency):
        words = np.empty(1 + len(nbrs), dtype="<u4")
        words[0] = len(nbrs)
        words[1:] = nbrs
        buf[i, vbytes:vbytes + 4 * len(words)] = words.view(np.uint8)
    with open(path, "wb") as f:
        f.write(header.ljust(sector_size, b"\0"))
        f.write(buf.tobytes())


def read_disk_header(path) -> DiskLayout:
    with open(path, "rb") as f:
        head = f.read(_DISK_HEADER.size)
    return parse_disk_header(head, path)


def parse_disk_header(head: bytes, path="<index>") -> DiskLayout:
    if len(head) < _DISK_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, sector, n, dim, code, R, medoid = _DISK_HEADER.unpack_from(head)
    if magic != DISK_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if code not in DTYPES:
        raise FormatError(f"{path}: unknown dtype code {code}")
    layout = DiskLayout(sector, n, dim, DTYPES[code], R, medoid)
    if record_payload(dim, layout.dtype, R) > sector or medoid >= max(n, 1):
        raise FormatError(f"{path}: inconsistent header")
    return layout


def decode_record(layout: DiskLayout, sector: bytes | np.ndarray):
    """(vector, neighbor ids) from one record sector."""
    raw = np.frombuffer(sector, dtype=np.uint8) if isinstance(sector, (bytes, bytearray, memoryview)) else sector
    vb = layout.vector_bytes
    vec = raw[:vb].view(layout.dtype.newbyteorder("<"))
    k = int(raw[vb:vb + 4].view("<u4")[0])
    if k > layout.R:
        raise FormatError(f"record claims {k} neighbors, R={layout.R}")
    nbrs = raw[vb + 4:vb + 4 + 4 * k].view("<u4")
    return vec, nbrs


def open_index_image(path):
    """Memory-map the whole index as (N + 1, sector) bytes; row 0 is the header."""
    layout = read_disk_header(path)
    size = Path(path).stat().st_size
    if size != layout.sector_size * (layout.count + 1):
        raise FormatError(f"{path}: size {size} does not match {layout.count} records")
    img = np.memmap(path, dtype=np.uint8, mode="r", shape=(layout.count + 1, layout.sector_size))
    return layout, img
