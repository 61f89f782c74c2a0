"""Product quantization: codebook training, encoding and asymmetric distances."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import FormatError, VectorDataset, dtype_code, DTYPES
from .kmeans import assign, kmeans

log = logging.getLogger(__name__)

PQ_MAGIC = b"GANNPQ01"
NUM_CENTROIDS = 256


def chunk_dims(dim: int, M: int) -> list:
    """Contiguous split; leftover dimensions go one apiece to the leading chunks."""
    if M < 1 or dim < M:
        raise ValueError(f"cannot split dim={dim} into M={M} chunks")
    base, extra = divmod(dim, M)
    return [base + (1 if m < extra else 0) for m in range(M)]


@dataclass
class PQCodebook:
    dim: int
    dtype: np.dtype
    subdims: list
    centroids: list  # M arrays of shape (256, subdim), float32
    trained_k: int = NUM_CENTROIDS  # < 256 when fewer training points than slots
    offsets: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if sum(self.subdims) != self.dim or min(self.subdims) < 1:
            raise ValueError("subdims must be positive and sum to dim")
        for c, s in zip(self.centroids, self.subdims):
            if c.shape != (NUM_CENTROIDS, s):
                raise ValueError(f"centroid block has shape {c.shape}, expected {(NUM_CENTROIDS, s)}")
        self.offsets = np.concatenate([[0], np.cumsum(self.subdims)]).astype(np.int64)

    @property
    def M(self) -> int:
        return len(self.subdims)

    def chunk(self, v: np.ndarray, m: int) -> np.ndarray:
        return v[..., self.offsets[m]:self.offsets[m + 1]]

    def _check_dim(self, v):
        if np.shape(v)[-1] != self.dim:
            raise ValueError(f"dimension mismatch: got {np.shape(v)[-1]}, codebook has {self.dim}")

    def reconstruct(self, code) -> np.ndarray:
        code = np.asarray(code)
        return np.concatenate([self.centroids[m][code[m]] for m in range(self.M)]).astype(np.float32)


def train(dataset: VectorDataset, M: int = 32, iters: int = 12, sample: int = 65536, seed: int = 0) -> PQCodebook:
    n, dim = dataset.count, dataset.dim
    subdims = chunk_dims(dim, M)
    rng = np.random.default_rng(seed)
    if sample >= n:
        idx = np.arange(n)
    else:
        idx = np.sort(rng.choice(n, size=sample, replace=False))
    X = dataset.data[idx].astype(np.float64)
    k = min(NUM_CENTROIDS, len(idx))
    if k < NUM_CENTROIDS:
        log.warning("only %d training vectors; %d centroid slots are duplicates", k, NUM_CENTROIDS - k)
    centroids = []
    off = 0
    for m, s in enumerate(subdims):
        res = kmeans(X[:, off:off + s], k, iters, seed=[seed, m])
        block = res.centroids
        if k < NUM_CENTROIDS:
            block = block[np.arange(NUM_CENTROIDS) % k]
        centroids.append(block.astype(np.float32))
        off += s
    return PQCodebook(dim, dataset.dtype, subdims, centroids, trained_k=k)


def encode_batch(codebook: PQCodebook, X: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(X)
    codebook._check_dim(X)
    codes = np.empty((X.shape[0], codebook.M), dtype=np.uint8)
    for m in range(codebook.M):
        labels, _ = assign(codebook.chunk(X, m), codebook.centroids[m])
        codes[:, m] = labels
    return codes


def encode(codebook: PQCodebook, v) -> np.ndarray:
    return encode_batch(codebook, np.asarray(v)[None, :])[0]


def build_lut(codebook: PQCodebook, q) -> np.ndarray:
    """(M, 256) float32 table of partial squared distances for one query."""
    q = np.asarray(q, dtype=np.float64)
    codebook._check_dim(q)
    table = np.empty((codebook.M, NUM_CENTROIDS), dtype=np.float32)
    for m in range(codebook.M):
        diff = codebook.centroids[m].astype(np.float64) - codebook.chunk(q, m)
        table[m] = np.einsum("ij,ij->i", diff, diff)
    return table


def adc(lut: np.ndarray, code) -> float:
    code = np.asarray(code)
    if code.shape != (lut.shape[0],):
        raise ValueError(f"code length {code.shape} does not match {lut.shape[0]} chunks")
    return float(lut[np.arange(lut.shape[0]), code].sum(dtype=np.float64))


def adc_batch(lut: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """Distances for a (n, M) block of codes."""
    return lut[np.arange(lut.shape[0]), codes].sum(axis=1, dtype=np.float64)


# -- file format ------------------------------------------------------------------


def write_pq(path, codebook: PQCodebook, codes: np.ndarray) -> None:
    codes = np.ascontiguousarray(codes, dtype=np.uint8)
    if codes.ndim != 2 or codes.shape[1] != codebook.M:
        raise ValueError("codes must be (N, M)")
    with open(path, "wb") as f:
        f.write(PQ_MAGIC)
        f.write(struct.pack("<III", codebook.M, codebook.dim, dtype_code(codebook.dtype)))
        f.write(np.asarray(codebook.subdims, dtype="<u4").tobytes())
        for block in codebook.centroids:
            f.write(block.astype("<f4").tobytes())
        f.write(struct.pack("<Q", codes.shape[0]))
        f.write(codes.tobytes())


def read_pq(path):
    """Returns (codebook, codes)."""
    raw = Path(path).read_bytes()
    if raw[:8] != PQ_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:8]!r}")
    try:
        M, dim, code = struct.unpack_from("<III", raw, 8)
        off = 20
        subdims = np.frombuffer(raw, dtype="<u4", count=M, offset=off).astype(int).tolist()
        off += 4 * M
        centroids = []
        for s in subdims:
            block = np.frombuffer(raw, dtype="<f4", count=NUM_CENTROIDS * s, offset=off)
            centroids.append(block.reshape(NUM_CENTROIDS, s).astype(np.float32))
            off += 4 * NUM_CENTROIDS * s
        (n,) = struct.unpack_from("<Q", raw, off)
        off += 8
        if len(raw) - off != n * M:
            raise FormatError(f"{path}: expected {n * M} code bytes, found {len(raw) - off}")
        codes = np.frombuffer(raw, dtype=np.uint8, offset=off).reshape(n, M).copy()
    except (struct.error, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{path}: truncated PQ file") from exc
    if code not in DTYPES:
        raise FormatError(f"{path}: unknown dtype code {code}")
    return PQCodebook(dim, DTYPES[code], subdims, centroids), codes
