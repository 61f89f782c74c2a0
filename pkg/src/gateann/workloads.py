"""Synthetic vectors, labels, predicates and queries, plus brute-force ground truth.

All randomness comes from numpy's PCG64 generator (``np.random.default_rng``)
seeded with the caller's integer seed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import (Equality, FormatError, Predicate, RangeBin, Subset,
                   VectorDataset)
from .kmeans import kmeans
from .stores import FilterStore

GT_MAGIC = b"GANNGT01"
NO_ID = 0xFFFFFFFF

# Gaussian-mixture geometry per element type: (center mean, center spread, within-cluster sigma)
_MIXTURE = {np.dtype(np.uint8): (128.0, 40.0, 16.0), np.dtype(np.float32): (0.0, 1.0, 0.4)}


def gen_vectors(N: int, dim: int, dtype="u8", clusters: int = 32, seed: int = 0) -> VectorDataset:
    if N < 1 or dim < 1:
        raise ValueError("N and dim must be >= 1")
    dt = np.dtype(np.uint8) if dtype in ("u8", np.uint8) else np.dtype(np.float32)
    mu, spread, sigma = _MIXTURE[dt]
    rng = np.random.default_rng(seed)
    centers = mu + spread * rng.standard_normal((clusters, dim))
    comp = rng.integers(0, clusters, size=N)
    x = centers[comp] + sigma * rng.standard_normal((N, dim))
    return VectorDataset(_cast(x, dt))


def _cast(x: np.ndarray, dt: np.dtype) -> np.ndarray:
    if dt == np.uint8:
        return np.clip(np.rint(x), 0, 255).astype(np.uint8)
    return x.astype(np.float32)


def gen_uniform_labels(N: int, k: int, seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed).integers(0, k, size=N).astype(np.uint8)


def zipf_probs(k: int, alpha: float) -> np.ndarray:
    w = np.arange(1, k + 1, dtype=np.float64) ** -alpha
    return w / w.sum()


def gen_zipf_labels(N: int, k: int, alpha: float = 1.0, seed: int = 0) -> np.ndarray:
    """Class 0 is the most common one."""
    rng = np.random.default_rng(seed)
    return rng.choice(k, size=N, p=zipf_probs(k, alpha)).astype(np.uint8)


def gen_spatial_labels(dataset: VectorDataset, k: int, alpha_mix: float, seed: int = 0) -> np.ndarray:
    """Nearest k-means center with probability alpha_mix, otherwise uniform."""
    if not 0.0 <= alpha_mix <= 1.0:
        raise ValueError("alpha_mix must be in [0, 1]")
    rng = np.random.default_rng(seed)
    N = dataset.count
    random_labels = rng.integers(0, k, size=N)
    take_center = rng.random(N) < alpha_mix
    if alpha_mix == 0.0:
        return random_labels.astype(np.uint8)
    res = kmeans(dataset.data, k, iters=20, seed=[seed, 1])
    return np.where(take_center, res.assignment, random_labels).astype(np.uint8)


def gen_norm_bins(dataset: VectorDataset, b: int) -> np.ndarray:
    """Equal-frequency bins of the L2 norm; equal norms are ordered by id."""
    x = dataset.data.astype(np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", x, x))
    order = np.argsort(norms, kind="stable")
    bins = np.empty(dataset.count, dtype=np.uint8)
    bins[order] = (np.arange(dataset.count) * b) // dataset.count
    return bins


def gen_multilabel(N: int, vocab: int, zipf_alpha: float = 1.0, mean_tags: float = 3.0, seed: int = 0):
    """CSR tag rows: (offsets u64[N+1], tags u32[nnz]), each row sorted."""
    rng = np.random.default_rng(seed)
    p = zipf_probs(vocab, zipf_alpha)
    counts = np.clip(rng.poisson(mean_tags, size=N), 1, vocab)
    offsets = np.zeros(N + 1, dtype=np.uint64)
    offsets[1:] = np.cumsum(counts)
    tags = np.empty(int(offsets[-1]), dtype=np.uint32)
    for i, c in enumerate(counts):
        lo = int(offsets[i])
        tags[lo:lo + c] = np.sort(rng.choice(vocab, size=c, replace=False, p=p))
    return offsets, tags


# -- label schemes and queries -----------------------------------------------------------


@dataclass(frozen=True)
class LabelScheme:
    """One of: uniform(k), zipf(k, alpha), spatial(k, alpha_mix), norm_bins(b),
    multilabel(vocab, zipf_alpha, mean_tags, tags_per_query)."""

    name: str
    k: int = 10
    alpha: float = 1.0
    alpha_mix: float = 0.0
    mean_tags: float = 3.0
    tags_per_query: int = 1

    def __post_init__(self):
        if self.name not in ("uniform", "zipf", "spatial", "norm_bins", "multilabel"):
            raise ValueError(f"unknown label scheme {self.name!r}")
        if self.k < 1 or self.alpha < 0 or self.mean_tags <= 0 or self.tags_per_query < 1:
            raise ValueError("label scheme parameters must be positive")
        if not 0.0 <= self.alpha_mix <= 1.0:
            raise ValueError("alpha_mix must be in [0, 1]")

    @property
    def store_kind(self) -> str:
        return {"norm_bins": "bin", "multilabel": "multi"}.get(self.name, "single")

    def make_store(self, dataset: VectorDataset, seed: int = 0) -> FilterStore:
        N = dataset.count
        if self.name == "uniform":
            return FilterStore("single", gen_uniform_labels(N, self.k, seed), num_classes=self.k)
        if self.name == "zipf":
            return FilterStore("single", gen_zipf_labels(N, self.k, self.alpha, seed), num_classes=self.k)
        if self.name == "spatial":
            return FilterStore("single", gen_spatial_labels(dataset, self.k, self.alpha_mix, seed), num_classes=self.k)
        if self.name == "norm_bins":
            return FilterStore("bin", gen_norm_bins(dataset, self.k), num_classes=self.k)
        offsets, tags = gen_multilabel(N, self.k, self.alpha, self.mean_tags, seed)
        return FilterStore("multi", offsets=offsets, tags=tags)

    def draw_predicate(self, rng: np.random.Generator, store: FilterStore) -> Predicate:
        if self.name == "norm_bins":
            return RangeBin(int(rng.integers(self.k)))
        if self.name != "multilabel":
            return Equality(int(rng.integers(self.k)))
        # tags of a random node, so at least one node matches
        while True:
            row = store.row(int(rng.integers(store.count)))
            if len(row):
                break
        take = min(len(row), int(rng.integers(1, self.tags_per_query + 1)))
        return Subset(tuple(sorted(rng.choice(row, size=take, replace=False).tolist())))


def parse_scheme(text: str) -> LabelScheme:
    """'uniform:10', 'zipf:10:1.0', 'spatial:10:0.5', 'norm_bins:10', 'multilabel:200:1.0:3:1'."""
    parts = text.split(":")
    name = parts[0].replace("-", "_")
    args = [float(p) for p in parts[1:]]
    if name in ("uniform", "norm_bins"):
        return LabelScheme(name, k=int(args[0]) if args else 10)
    if name == "zipf":
        return LabelScheme(name, k=int(args[0]) if args else 10, alpha=args[1] if len(args) > 1 else 1.0)
    if name == "spatial":
        return LabelScheme(name, k=int(args[0]) if args else 10, alpha_mix=args[1] if len(args) > 1 else 0.0)
    if name == "multilabel":
        defaults = [200, 1.0, 3.0, 1]
        vals = args + defaults[len(args):]
        return LabelScheme(name, k=int(vals[0]), alpha=vals[1], mean_tags=vals[2], tags_per_query=int(vals[3]))
    raise ValueError(f"unknown label scheme {text!r}")


@dataclass
class QuerySet:
    vectors: VectorDataset
    preds: list
    selectivity: np.ndarray  # exact fraction of the dataset matching each predicate


def mean_pairwise_distance(dataset: VectorDataset, rng: np.random.Generator, pairs: int = 2000) -> float:
    i = rng.integers(0, dataset.count, size=pairs)
    j = rng.integers(0, dataset.count, size=pairs)
    diff = dataset.data[i].astype(np.float64) - dataset.data[j].astype(np.float64)
    return float(np.sqrt(np.einsum("ij,ij->i", diff, diff)).mean())


def gen_queries(dataset: VectorDataset, store: FilterStore, scheme: LabelScheme, Q: int, seed: int = 0) -> QuerySet:
    """Held-out queries: dataset points plus Gaussian noise whose expected norm is
    5% of the mean pairwise distance."""
    rng = np.random.default_rng(seed)
    sigma = 0.05 * mean_pairwise_distance(dataset, rng) / np.sqrt(dataset.dim)
    base = dataset.data[rng.integers(0, dataset.count, size=Q)].astype(np.float64)
    vecs = VectorDataset(_cast(base + sigma * rng.standard_normal(base.shape), dataset.dtype))
    preds = [scheme.draw_predicate(rng, store) for _ in range(Q)]
    cache = {}
    sel = np.array([cache.setdefault(p, store.selectivity(p)) for p in preds])
    return QuerySet(vecs, preds, sel)


# -- ground truth ------------------------------------------------------------------------


def ground_truth(dataset: VectorDataset, store: FilterStore, queries, preds, K: int) -> list:
    """Exact filtered top-K per query as lists of (id, distance), ties to lower id."""
    data = dataset.data
    masks = {}
    out = []
    for q, p in zip(queries, preds):
        if p not in masks:
            masks[p] = np.flatnonzero(store.mask(p))
        ids = masks[p]
        if len(ids) == 0:
            out.append([])
            continue
        diff = data[ids].astype(np.float64) - np.asarray(q, dtype=np.float64)
        d = np.einsum("ij,ij->i", diff, diff)
        if len(ids) > K:
            part = np.argpartition(d, K - 1)[:K]
            cut = d[part].max()
            # keep every tie at the cut so the id tie-break is exact
            cand = np.flatnonzero(d <= cut)
        else:
            cand = np.arange(len(ids))
        order = cand[np.lexsort((ids[cand], d[cand]))][:K]
        out.append([(int(ids[i]), float(d[i])) for i in order])
    return out


def write_ground_truth(path, truth: list, K: int) -> None:
    with open(path, "wb") as f:
        f.write(GT_MAGIC)
        f.write(struct.pack("<QI", len(truth), K))
        for row in truth:
            ids = np.full(K, NO_ID, dtype="<u4")
            dists = np.full(K, np.inf, dtype="<f4")
            ids[:len(row)] = [i for i, _ in row]
            dists[:len(row)] = [d for _, d in row]
            f.write(ids.tobytes())
            f.write(dists.tobytes())


def read_ground_truth(path) -> list:
    raw = Path(path).read_bytes()
    if raw[:8] != GT_MAGIC or len(raw) < 20:
        raise FormatError(f"{path}: bad magic or truncated header")
    Q, K = struct.unpack_from("<QI", raw, 8)
    if len(raw) != 20 + Q * K * 8:
        raise FormatError(f"{path}: size does not match Q={Q} K={K}")
    out = []
    off = 20
    for _ in range(Q):
        ids = np.frombuffer(raw, dtype="<u4", count=K, offset=off)
        dists = np.frombuffer(raw, dtype="<f4", count=K, offset=off + 4 * K)
        off += 8 * K
        out.append([(int(i), float(d)) for i, d in zip(ids, dists) if i != NO_ID])
    return out
