"""Seeded Lloyd k-means with k-means++ initialization.

Used for PQ codebooks (one run per chunk) and for spatially correlated labels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_BLOCK = 4096


@dataclass
class KMeansResult:
    centroids: np.ndarray  # (k, d) float64
    assignment: np.ndarray  # (n,) int64
    errors: list  # mean squared error after each assignment step


def assign(X: np.ndarray, centroids: np.ndarray):
    """Nearest centroid per row (ties to the lowest index) and its squared distance.

    Distances are formed from explicit differences so the argmin agrees with a
    per-centroid scan.
    """
    X = np.asarray(X, dtype=np.float64)
    C = np.asarray(centroids, dtype=np.float64)
    n = X.shape[0]
    labels = np.empty(n, dtype=np.int64)
    dists = np.empty(n, dtype=np.float64)
    # keep the (block, k, d) temporary around 32 MB
    block = max(1, min(_BLOCK, (4 << 20) // max(1, C.shape[0] * C.shape[1])))
    for lo in range(0, n, block):
        diff = X[lo:lo + block, None, :] - C[None, :, :]
        d = np.einsum("ijk,ijk->ij", diff, diff)
        idx = np.argmin(d, axis=1)
        labels[lo:lo + block] = idx
        dists[lo:lo + block] = d[np.arange(len(idx)), idx]
    return labels, dists


def kmeanspp_init(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centroids = np.empty((k, X.shape[1]), dtype=np.float64)
    centroids[0] = X[rng.integers(n)]
    d2 = np.einsum("ij,ij->i", X - centroids[0], X - centroids[0])
    for i in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = rng.choice(n, p=d2 / total)
        else:
            # fewer distinct points than k: duplicates are unavoidable
            idx = rng.integers(n)
        centroids[i] = X[idx]
        diff = X - centroids[i]
        np.minimum(d2, np.einsum("ij,ij->i", diff, diff), out=d2)
    return centroids


def kmeans(X, k: int, iters: int, seed, init: np.ndarray | None = None) -> KMeansResult:
    """Run `iters` Lloyd iterations. Empty clusters are reseeded with the point
    of the largest cluster farthest from its centroid."""
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must be in [1, {n}]")
    rng = np.random.default_rng(seed)
    C = kmeanspp_init(X, k, rng) if init is None else np.array(init, dtype=np.float64)
    errors = []
    labels, dists = assign(X, C)
    errors.append(float(dists.mean()))
    for _ in range(iters):
        counts = np.bincount(labels, minlength=k)
        for j in np.flatnonzero(counts == 0):
            big = int(np.argmax(counts))
            members = np.flatnonzero(labels == big)
            far = members[np.argmax(dists[members])]
            labels[far] = j
            dists[far] = 0.0
            counts[big] -= 1
            counts[j] = 1
        sums = np.stack([np.bincount(labels, weights=X[:, d], minlength=k) for d in range(X.shape[1])], axis=1)
        C = sums / counts[:, None]
        labels, dists = assign(X, C)
        errors.append(float(dists.mean()))
    return KMeansResult(C, labels, errors)
