"""Parameter sweeps, paired baseline runs and CSV output."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import pq
from .builder import BuildParams, build_vamana, write_disk_index
from .core import SearchParams, recall_at_k, write_vectors
from .search import SearchIndex, batch_search
from .stores import build_neighbor_store
from .storage import Storage
from .workloads import gen_vectors

log = logging.getLogger(__name__)

# query-time defaults for the desk configuration
DESK_RMAX = 32
DESK_W = 8
DESK_QUERIES = 500
DESK_K = 10

CSV_COLUMNS = ["mode", "L", "W", "Rmax", "selectivity", "recall10", "mean_ios",
               "mean_tunnels", "mean_vlat_us", "wall_qps"]


@dataclass(frozen=True)
class DeskConfig:
    N: int = 200_000
    dim: int = 32
    dtype: str = "u8"
    clusters: int = 32
    R: int = 32
    L_build: int = 64
    alpha: float = 1.2
    M: int = 32
    pq_iters: int = 12
    pq_sample: int = 65536
    sector_size: int = 4096
    seed: int = 0


def prepare_workspace(directory, cfg: DeskConfig = DeskConfig()) -> dict:
    """Generate vectors, build graph + PQ and write them under `directory`.

    Files are reused when a config stamp from an identical earlier run exists.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = {"data": d / "base.vec", "index": d / "index.disk", "pq": d / "pq.bin"}
    stamp = d / "config.json"
    want = json.dumps(asdict(cfg), sort_keys=True)
    if stamp.exists() and stamp.read_text() == want and all(p.exists() for p in paths.values()):
        return paths
    ds = gen_vectors(cfg.N, cfg.dim, cfg.dtype, cfg.clusters, cfg.seed)
    write_vectors(ds, paths["data"])
    t0 = time.perf_counter()
    graph = build_vamana(ds, BuildParams(cfg.R, cfg.L_build, cfg.alpha, cfg.seed))
    write_disk_index(graph, ds, cfg.sector_size, paths["index"])
    log.info("graph built in %.1fs", time.perf_counter() - t0)
    cb = pq.train(ds, cfg.M, cfg.pq_iters, cfg.pq_sample, cfg.seed)
    pq.write_pq(paths["pq"], cb, pq.encode_batch(cb, ds.data))
    stamp.write_text(want)
    return paths


def open_index(paths: dict, filters, R_max: int = DESK_RMAX, backend: str = "sim", latency_us: float = 100.0) -> SearchIndex:
    storage = Storage(paths["index"], backend=backend, latency_us=latency_us)
    codebook, codes = pq.read_pq(paths["pq"])
    return SearchIndex(storage, codebook, codes, filters, build_neighbor_store(paths["index"], R_max))


@dataclass
class SweepRow:
    mode: str
    L: int
    W: int
    Rmax: int
    selectivity: float
    recall10: float
    mean_ios: float
    mean_tunnels: float
    mean_vlat_us: float
    wall_qps: float
    mean_exact: float = field(default=0.0, compare=False)

    def csv_values(self):
        return [self.mode, self.L, self.W, self.Rmax, _fmt(self.selectivity), _fmt(self.recall10),
                _fmt(self.mean_ios), _fmt(self.mean_tunnels), _fmt(self.mean_vlat_us), _fmt(self.wall_qps)]


def _fmt(x: float) -> str:
    return repr(float(x))  # shortest round-tripping, always dot-decimal


def mean_recall(results, truth, K: int = 10) -> float:
    """Mean Recall@K over queries whose truth is non-empty."""
    vals = [recall_at_k(r.ids, [i for i, _ in t], K) for r, t in zip(results, truth) if t]
    return float(np.mean(vals)) if vals else 0.0


def run_sweep(index: SearchIndex, queries, preds, truth, modes, Ls, W: int = 8, K: int = 10,
              selectivity: float = math.nan, threads: int = 1, timing: bool = True, keep=None) -> list:
    """One row per (mode, L), modes outermost. `keep`, if a dict, receives the
    raw BatchResult per (mode, L)."""
    if len(truth) != len(queries):
        raise ValueError("ground truth does not match the query set")
    rows = []
    Rmax = index.neighbors.R_max if index.neighbors is not None else 0
    for mode in modes:
        for L in Ls:
            params = SearchParams(L=L, K=K, W=W, mode=mode)
            br = batch_search(mode, index, queries, preds, params, threads=threads)
            if keep is not None:
                keep[(mode, L)] = br
            n = max(1, len(br.results))
            rows.append(SweepRow(
                mode=mode, L=L, W=W, Rmax=Rmax, selectivity=selectivity,
                recall10=mean_recall(br.results, truth, K),
                mean_ios=br.total.ios / n, mean_tunnels=br.total.tunnels / n,
                mean_vlat_us=br.total.virtual_latency_us / n,
                wall_qps=(n / br.wall_s if br.wall_s > 0 else math.inf) if timing else math.nan,
                mean_exact=br.total.exact_dists / n))
            log.info("%s L=%d recall=%.3f ios=%.1f", mode, L, rows[-1].recall10, rows[-1].mean_ios)
    return rows


def io_reduction_report(rows) -> list:
    """pipe-post / gated mean I/O ratio at matched (selectivity, L, W)."""
    pipe = {(r.selectivity, r.L, r.W): r for r in rows if r.mode == "pipe-post"}
    out = []
    for r in rows:
        if r.mode != "gated":
            continue
        base = pipe.get((r.selectivity, r.L, r.W))
        if base is None:
            continue
        ratio = base.mean_ios / r.mean_ios if r.mean_ios > 0 else math.inf
        out.append({"selectivity": r.selectivity, "L": r.L, "W": r.W,
                    "pipe_ios": base.mean_ios, "gated_ios": r.mean_ios,
                    "ratio": ratio, "expected": 1.0 / r.selectivity})
    return out


def emit_csv(rows, path) -> None:
    with open(path, "w", newline="") as f:
        write_csv(rows, f)


def write_csv(rows, stream) -> None:
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow(r.csv_values())


def read_csv(path) -> list:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != CSV_COLUMNS:
            raise ValueError(f"unexpected CSV header {reader.fieldnames}")
        rows = []
        for rec in reader:
            rows.append(SweepRow(
                mode=rec["mode"], L=int(rec["L"]), W=int(rec["W"]), Rmax=int(rec["Rmax"]),
                selectivity=float(rec["selectivity"]), recall10=float(rec["recall10"]),
                mean_ios=float(rec["mean_ios"]), mean_tunnels=float(rec["mean_tunnels"]),
                mean_vlat_us=float(rec["mean_vlat_us"]), wall_qps=float(rec["wall_qps"])))
        return rows
