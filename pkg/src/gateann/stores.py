"""Memory-resident filter store and neighbor store.

Both are loaded next to the disk index without touching it: the filter store
comes from its own label file, the neighbor store from one sequential scan
over the index records.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .builder import decode_record, open_index_image
from .core import (BinLabel, Equality, FormatError, Predicate, RangeBin,
                   SingleLabel, Subset, TagSet, is_sorted_subset, scalar_value)

LABEL_MAGIC = b"GANNLBL1"
MULTI_MAGIC = b"GANNLBL2"


class FilterStore:
    """Per-node filter metadata indexed by node id.

    `kind` is "single" or "bin" (one byte per node) or "multi" (CSR rows of
    sorted tag ids).
    """

    def __init__(self, kind: str, labels=None, offsets=None, tags=None, num_classes: int = 0):
        if kind not in ("single", "bin", "multi"):
            raise ValueError(f"unknown filter store kind {kind!r}")
        self.kind = kind
        self.num_classes = num_classes
        if kind == "multi":
            self.offsets = np.ascontiguousarray(offsets, dtype=np.uint64)
            self.tags = np.ascontiguousarray(tags, dtype=np.uint32)
            if self.offsets[0] != 0 or int(self.offsets[-1]) != len(self.tags):
                raise FormatError("row offsets do not cover the tag array")
            if np.any(np.diff(self.offsets.astype(np.int64)) < 0):
                raise FormatError("row offsets must be non-decreasing")
            self._check_rows_sorted()
            self.count = len(self.offsets) - 1
            self._offs = self.offsets.astype(np.int64).tolist()
        else:
            self.labels = np.ascontiguousarray(labels, dtype=np.uint8)
            self.count = len(self.labels)
            self._bytes = self.labels.tobytes()

    def _check_rows_sorted(self):
        if len(self.tags) < 2:
            return
        step = np.diff(self.tags.astype(np.int64))
        # positions where a new row begins are exempt from the ordering check
        row_start = np.zeros(len(self.tags), dtype=bool)
        starts = self.offsets[1:-1].astype(np.int64)
        row_start[starts[starts < len(self.tags)]] = True
        if np.any((step <= 0) & ~row_start[1:]):
            raise FormatError("tag rows must be strictly increasing")

    @property
    def nbytes(self) -> int:
        if self.kind == "multi":
            return self.offsets.nbytes + self.tags.nbytes
        return self.labels.nbytes

    def label(self, node: int) -> int:
        return self._bytes[node]

    def row(self, node: int) -> np.ndarray:
        return self.tags[self._offs[node]:self._offs[node + 1]]

    def meta(self, node: int):
        if self.kind == "single":
            return SingleLabel(self.label(node))
        if self.kind == "bin":
            return BinLabel(self.label(node))
        return TagSet(tuple(self.row(node).tolist()))

    def matcher(self, pred: Predicate):
        """A node-id -> bool callable for one query, O(1) per scalar check."""
        if isinstance(pred, Subset):
            if self.kind != "multi":
                raise TypeError("subset predicate needs a multi-label filter store")
            want = pred.tags
            tags, offs = self.tags, self._offs
            if len(want) == 1:
                t = want[0]

                def check(node):
                    lo, hi = offs[node], offs[node + 1]
                    i = lo + int(np.searchsorted(tags[lo:hi], t))
                    return i < hi and tags[i] == t
                return check
            return lambda node: is_sorted_subset(want, tags[offs[node]:offs[node + 1]].tolist())
        if self.kind == "multi":
            raise TypeError(f"{type(pred).__name__} needs a single-label or bin filter store")
        value = scalar_value(pred)
        b = self._bytes
        return lambda node: b[node] == value

    def mask(self, pred: Predicate) -> np.ndarray:
        """Boolean match vector over all nodes (used by ground truth, not search)."""
        if isinstance(pred, (Equality, RangeBin)):
            if self.kind == "multi":
                raise TypeError("scalar predicate on a multi-label store")
            return self.labels == scalar_value(pred)
        if self.kind != "multi":
            raise TypeError("subset predicate needs a multi-label filter store")
        hit = np.zeros(len(self.tags), dtype=np.int64)
        for t in pred.tags:
            hit += self.tags == t
        cs = np.concatenate([[0], np.cumsum(hit)])
        off = self.offsets.astype(np.int64)
        per_row = cs[off[1:]] - cs[off[:-1]]
        return per_row == len(pred.tags)

    def selectivity(self, pred: Predicate) -> float:
        return float(self.mask(pred).mean())


def write_labels(path, labels, num_classes: int | None = None) -> None:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() > 255):
        raise ValueError("labels must fit in one byte")
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if labels.size else 0
    with open(path, "wb") as f:
        f.write(LABEL_MAGIC)
        f.write(struct.pack("<QH", len(labels), num_classes))
        f.write(labels.astype(np.uint8).tobytes())


def write_multilabels(path, offsets, tags) -> None:
    offsets = np.asarray(offsets, dtype="<u8")
    tags = np.asarray(tags, dtype="<u4")
    with open(path, "wb") as f:
        f.write(MULTI_MAGIC)
        f.write(struct.pack("<QQ", len(offsets) - 1, len(tags)))
        f.write(offsets.tobytes())
        f.write(tags.tobytes())


def load_filter_store(path, expected_count: int | None = None, kind: str = "single") -> FilterStore:
    """Load a label file. `kind` picks "single" or "bin" for one-byte files."""
    raw = Path(path).read_bytes()
    magic = raw[:8]
    try:
        if magic == LABEL_MAGIC:
            n, num_classes = struct.unpack_from("<QH", raw, 8)
            body = raw[18:]
            if len(body) != n:
                raise FormatError(f"{path}: expected {n} label bytes, found {len(body)}")
            store = FilterStore(kind, labels=np.frombuffer(body, dtype=np.uint8), num_classes=num_classes)
        elif magic == MULTI_MAGIC:
            n, nnz = struct.unpack_from("<QQ", raw, 8)
            off = 24
            if len(raw) != off + 8 * (n + 1) + 4 * nnz:
                raise FormatError(f"{path}: size does not match N={n} nnz={nnz}")
            offsets = np.frombuffer(raw, dtype="<u8", count=n + 1, offset=off)
            tags = np.frombuffer(raw, dtype="<u4", count=nnz, offset=off + 8 * (n + 1))
            store = FilterStore("multi", offsets=offsets, tags=tags)
        else:
            raise FormatError(f"{path}: bad magic {magic!r}")
    except struct.error as exc:
        raise FormatError(f"{path}: truncated label file") from exc
    if expected_count is not None and store.count != expected_count:
        raise FormatError(f"{path}: {store.count} nodes, index has {expected_count}")
    return store


# -- neighbor store -------------------------------------------------------------------


def neighbor_store_bytes(N: int, R_max: int) -> int:
    return N * (1 + R_max) * 4


def gib(nbytes: int) -> str:
    return f"{nbytes / 2**30:.1f} GiB"


@dataclass
class NeighborStore:
    """Fixed-stride table: word 0 holds the count, words 1..count the ids."""

    table: np.ndarray  # (N, 1 + R_max) uint32

    def __post_init__(self):
        if self.table.ndim != 2 or self.table.dtype != np.uint32:
            raise ValueError("neighbor table must be a 2-d uint32 array")
        self.table.setflags(write=False)

    @property
    def count(self) -> int:
        return self.table.shape[0]

    @property
    def R_max(self) -> int:
        return self.table.shape[1] - 1

    @property
    def nbytes(self) -> int:
        return self.table.nbytes

    def neighbors_of(self, node: int) -> np.ndarray:
        if not 0 <= node < self.count:
            raise IndexError(f"node {node} out of range [0, {self.count})")
        row = self.table[node]
        return row[1:1 + row[0]]


def allocate_table(N: int, R_max: int) -> np.ndarray:
    """Zeroed (N, 1 + R_max) uint32 table, the exact layout the store uses."""
    if R_max < 1:
        raise ValueError("R_max must be >= 1")
    return np.zeros((N, 1 + R_max), dtype=np.uint32)


def build_neighbor_store(disk_index_path, R_max: int) -> NeighborStore:
    if R_max < 1:
        raise ValueError("R_max must be >= 1")
    layout, img = open_index_image(disk_index_path)
    table = allocate_table(layout.count, R_max)
    block = 8192
    vb = layout.vector_bytes
    for lo in range(0, layout.count, block):
        # sequential block read; np.array forces the pages in now
        rows = np.array(img[1 + lo:1 + min(lo + block, layout.count)])
        k = rows[:, vb:vb + 4].copy().view("<u4")[:, 0]
        if np.any(k > layout.R):
            raise FormatError(f"{disk_index_path}: record with more than R neighbors")
        keep = np.minimum(k, R_max)
        ids = rows[:, vb + 4:vb + 4 + 4 * min(R_max, layout.R)].copy().view("<u4")
        width = ids.shape[1]
        cols = np.arange(width)
        ids = np.where(cols[None, :] < keep[:, None], ids, 0)
        table[lo:lo + len(rows), 0] = keep
        table[lo:lo + len(rows), 1:1 + width] = ids
    del img
    return NeighborStore(table)


def disk_neighbors(disk_index_path, node: int) -> np.ndarray:
    layout, img = open_index_image(disk_index_path)
    _, nbrs = decode_record(layout, np.array(img[1 + node]))
    return nbrs.copy()
