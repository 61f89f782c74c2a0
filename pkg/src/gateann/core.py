"""Shared domain types, predicates, distance kernel and recall metric."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np

VEC_MAGIC = b"GANNVEC1"
_VEC_HEADER = struct.Struct("<8sIIQ")

DTYPE_U8 = 0
DTYPE_F32 = 1
DTYPES = {DTYPE_U8: np.dtype(np.uint8), DTYPE_F32: np.dtype(np.float32)}

MODES = ("beam-post", "pipe-post", "naive-pre", "early-filter", "gated")


class FormatError(ValueError):
    """A file did not match its binary layout."""


def dtype_code(dtype) -> int:
    dtype = np.dtype(dtype)
    for code, dt in DTYPES.items():
        if dt == dtype:
            return code
    raise ValueError(f"unsupported element type {dtype}")


@dataclass(frozen=True)
class VectorDataset:
    """N row-major vectors of one fixed dimension, u8 or f32 elements."""

    data: np.ndarray

    def __post_init__(self):
        data = self.data
        if data.ndim != 2:
            raise ValueError("dataset must be a 2-d array")
        if data.shape[0] < 1 or data.shape[1] < 1:
            raise ValueError("dataset needs count >= 1 and dim >= 1")
        dtype_code(data.dtype)
        data = np.ascontiguousarray(data)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def count(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def __len__(self):
        return self.count

    def __getitem__(self, i):
        return self.data[i]


def write_vectors(ds: VectorDataset, path) -> None:
    with open(path, "wb") as f:
        f.write(_VEC_HEADER.pack(VEC_MAGIC, dtype_code(ds.dtype), ds.dim, ds.count))
        f.write(ds.data.astype(ds.dtype.newbyteorder("<"), copy=False).tobytes())


def read_vectors(path) -> VectorDataset:
    raw = Path(path).read_bytes()
    if len(raw) < _VEC_HEADER.size:
        raise FormatError(f"{path}: truncated vector header")
    magic, code, dim, count = _VEC_HEADER.unpack_from(raw)
    if magic != VEC_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if code not in DTYPES:
        raise FormatError(f"{path}: unknown dtype code {code}")
    dt = DTYPES[code].newbyteorder("<")
    expected = count * dim * dt.itemsize
    if len(raw) - _VEC_HEADER.size != expected:
        raise FormatError(f"{path}: expected {expected} data bytes, found {len(raw) - _VEC_HEADER.size}")
    data = np.frombuffer(raw, dtype=dt, offset=_VEC_HEADER.size).reshape(count, dim)
    return VectorDataset(data.astype(DTYPES[code], copy=False))


# -- predicates and node metadata ---------------------------------------------


@dataclass(frozen=True)
class Equality:
    cls: int


@dataclass(frozen=True)
class RangeBin:
    bin: int


@dataclass(frozen=True)
class Subset:
    tags: tuple

    def __post_init__(self):
        tags = tuple(int(t) for t in self.tags)
        if not tags:
            raise ValueError("subset predicate needs at least one tag")
        if any(a >= b for a, b in zip(tags, tags[1:])):
            raise ValueError("subset tags must be strictly increasing")
        object.__setattr__(self, "tags", tags)


Predicate = Union[Equality, RangeBin, Subset]


@dataclass(frozen=True)
class SingleLabel:
    label: int


@dataclass(frozen=True)
class BinLabel:
    bin: int


@dataclass(frozen=True)
class TagSet:
    tags: tuple = field(default=())

    def __post_init__(self):
        tags = tuple(int(t) for t in self.tags)
        if any(a >= b for a, b in zip(tags, tags[1:])):
            raise ValueError("tag set must be strictly increasing")
        object.__setattr__(self, "tags", tags)


NodeMeta = Union[SingleLabel, BinLabel, TagSet]


def scalar_value(pred) -> int:
    """Label value an Equality/RangeBin predicate compares against."""
    if isinstance(pred, Equality):
        return pred.cls
    if isinstance(pred, RangeBin):
        return pred.bin
    raise TypeError(f"{type(pred).__name__} is not a scalar-label predicate")


def is_sorted_subset(query: Sequence[int], tags: Sequence[int]) -> bool:
    """Merge-scan inclusion test over two strictly increasing sequences."""
    j = 0
    n = len(tags)
    for q in query:
        while j < n and tags[j] < q:
            j += 1
        if j == n or tags[j] != q:
            return False
        j += 1
    return True


def evaluate(pred: Predicate, meta: NodeMeta) -> bool:
    if isinstance(pred, Subset):
        if not isinstance(meta, TagSet):
            raise TypeError("subset predicate needs tag-set metadata")
        return is_sorted_subset(pred.tags, meta.tags)
    if isinstance(meta, SingleLabel):
        return scalar_value(pred) == meta.label
    if isinstance(meta, BinLabel):
        return scalar_value(pred) == meta.bin
    raise TypeError(f"cannot evaluate {type(pred).__name__} against {type(meta).__name__}")


def predicate_to_json(pred: Predicate) -> dict:
    if isinstance(pred, Equality):
        return {"kind": "eq", "cls": pred.cls}
    if isinstance(pred, RangeBin):
        return {"kind": "bin", "bin": pred.bin}
    return {"kind": "subset", "tags": list(pred.tags)}


def predicate_from_json(obj: dict) -> Predicate:
    kind = obj["kind"]
    if kind == "eq":
        return Equality(int(obj["cls"]))
    if kind == "bin":
        return RangeBin(int(obj["bin"]))
    if kind == "subset":
        return Subset(tuple(obj["tags"]))
    raise FormatError(f"unknown predicate kind {kind!r}")


@dataclass(frozen=True)
class SearchParams:
    L: int
    K: int = 10
    W: int = 8
    mode: str = "gated"

    def __post_init__(self):
        if not 1 <= self.K <= self.L:
            raise ValueError(f"need 1 <= K <= L, got K={self.K} L={self.L}")
        if self.W < 1:
            raise ValueError("W must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")


# -- metrics --------------------------------------------------------------------


def l2_sq(a, b) -> float:
    """Squared Euclidean distance, accumulated in float64."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    d = a.astype(np.float64) - b.astype(np.float64)
    return float(np.dot(d, d))


def recall_at_k(result, truth, k: int) -> float:
    """Overlap of the first k results with the (possibly short) true set."""
    truth_set = {int(t) for t in list(truth)[:k]}
    hits = sum(1 for r in list(result)[:k] if int(r) in truth_set)
    return hits / max(1, len(truth_set))
