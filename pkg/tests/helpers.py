"""Small hand-built indexes shared by several test modules."""

from __future__ import annotations

import numpy as np

from gateann import pq
from gateann.builder import BuildParams, InMemGraph, build_vamana, write_disk_index
from gateann.core import VectorDataset
from gateann.search import SearchIndex
from gateann.storage import Storage
from gateann.stores import FilterStore, build_neighbor_store


def write_graph(path, vectors, adjacency, medoid, R=None, sector=4096):
    ds = VectorDataset(np.asarray(vectors))
    R = R or max(2, max(len(a) for a in adjacency))
    graph = InMemGraph([np.asarray(a, dtype=np.int64) for a in adjacency], medoid, R)
    write_disk_index(graph, ds, sector, path)
    return ds, graph


def path_graph_index(tmp_path):
    """A-B-C-D-E-F on a line, entry A, only A and F carry label 1."""
    vecs = np.array([[10 * i, 0] for i in range(6)], dtype=np.uint8)
    adj = [[1]] + [[i - 1, i + 1] for i in range(1, 5)] + [[4]]
    path = tmp_path / "path.disk"
    ds, _ = write_graph(path, vecs, adj, medoid=0)
    cb = pq.train(ds, M=1, iters=10, seed=0)
    codes = pq.encode_batch(cb, ds.data)
    labels = FilterStore("single", np.array([1, 0, 0, 0, 0, 1], np.uint8), num_classes=2)
    index = SearchIndex(Storage(path), cb, codes, labels, build_neighbor_store(path, 4))
    return ds, index


def built_index(directory, N=2000, dim=16, R=16, L_build=32, M=8, clusters=8, seed=3):
    from gateann.workloads import gen_vectors

    ds = gen_vectors(N, dim, "u8", clusters=clusters, seed=seed)
    graph = build_vamana(ds, BuildParams(R, L_build, 1.2, seed))
    path = directory / "index.disk"
    write_disk_index(graph, ds, 4096, path)
    cb = pq.train(ds, M=M, iters=8, seed=seed)
    codes = pq.encode_batch(cb, ds.data)
    return ds, graph, path, cb, codes
