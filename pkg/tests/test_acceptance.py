"""End-to-end acceptance checks on the desk configuration.

Each test records a pass/fail line that the terminal summary prints, then
asserts at the stated tolerance.
"""

import time
from collections import Counter

import numpy as np
import pytest

from gateann import pq
from gateann.bench import DESK_K, DESK_QUERIES, DESK_RMAX, DESK_W, mean_recall, open_index
from gateann.builder import decode_record, open_index_image
from gateann.core import Equality, SearchParams, Subset, l2_sq
from gateann.search import batch_search
from gateann.stores import FilterStore, NeighborStore, allocate_table, build_neighbor_store, neighbor_store_bytes
from gateann.workloads import LabelScheme, gen_queries, gen_zipf_labels, ground_truth

from helpers import built_index, path_graph_index

pytestmark = pytest.mark.slow


class Workload:
    """One label scheme on the desk index: store, 500 queries, truth, cached runs."""

    def __init__(self, index, ds, scheme, seed=0):
        self.scheme = scheme
        self.store = scheme.make_store(ds, seed=seed)
        self.index = index.with_filters(self.store)
        self.qs = gen_queries(ds, self.store, scheme, DESK_QUERIES, seed=seed + 1)
        self.truth = ground_truth(ds, self.store, self.qs.vectors.data, self.qs.preds, DESK_K)
        self.sel = float(self.qs.selectivity.mean())
        self._runs = {}

    def run(self, mode, L, W=DESK_W, Q=DESK_QUERIES):
        key = (mode, L, W, Q)
        if key not in self._runs:
            params = SearchParams(L=L, K=DESK_K, W=W, mode=mode)
            self._runs[key] = batch_search(mode, self.index, self.qs.vectors.data[:Q], self.qs.preds[:Q], params)
        return self._runs[key]

    def recall(self, mode, L, W=DESK_W, Q=DESK_QUERIES):
        return mean_recall(self.run(mode, L, W, Q).results, self.truth[:Q], DESK_K)

    def violations(self, br):
        bad = 0
        for r, p in zip(br.results, self.qs.preds):
            m = self.store.matcher(p)
            bad += sum(1 for v in r.stats.reads if not m(v))
        return bad

    def unsound(self, br):
        return sum(1 for r, p in zip(br.results, self.qs.preds) for v in r.ids if not self.store.matcher(p)(v))


@pytest.fixture(scope="module")
def desk_index(desk_paths):
    dummy = FilterStore("single", np.zeros(open_index_image(desk_paths["index"])[0].count, np.uint8))
    return open_index(desk_paths, dummy, R_max=DESK_RMAX)


_WORKLOADS = {}


@pytest.fixture(scope="module")
def workload(desk_index, desk_data):
    def get(text):
        if text not in _WORKLOADS:
            kind, *args = text.split(":")
            if kind == "uniform":
                scheme = LabelScheme("uniform", k=int(args[0]))
            elif kind == "norm_bins":
                scheme = LabelScheme("norm_bins", k=int(args[0]))
            else:
                scheme = LabelScheme("multilabel", k=200, alpha=1.0, mean_tags=3.0, tags_per_query=1)
            _WORKLOADS[text] = Workload(desk_index, desk_data, scheme)
        return _WORKLOADS[text]
    return get


def test_c01_gating_invariant(workload, acceptance):
    t0 = time.perf_counter()
    w = workload("uniform:10")
    per_L = {L: w.violations(w.run("gated", L)) for L in (20, 50, 100, 200)}
    elapsed = time.perf_counter() - t0
    total = sum(per_L.values())
    ok = total == 0 and elapsed < 120
    acceptance(1, "gating invariant", ok,
               f"violations per L {per_L}, s={w.sel:.3f}, {DESK_QUERIES} queries, {elapsed:.0f}s")
    assert total == 0
    assert elapsed < 120


def test_c02_io_reduction(workload, acceptance):
    t0 = time.perf_counter()
    parts, ok = [], True
    for s, k in ((0.05, 20), (0.1, 10), (0.2, 5)):
        w = workload(f"uniform:{k}")
        ratio = w.run("pipe-post", 100).mean("ios") / w.run("gated", 100).mean("ios")
        within = abs(ratio - 1 / s) <= 0.25 * (1 / s)
        ok &= within
        parts.append(f"s={s}: {ratio:.2f}x vs {1 / s:.0f}x")
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 600
    acceptance(2, "I/O reduction ~ 1/s", ok, "; ".join(parts) + f" ({elapsed:.0f}s)")
    assert ok


def test_c03_recall_parity(workload, acceptance):
    w = workload("uniform:10")
    base_L = 100
    pipe_rec = w.recall("pipe-post", base_L)
    pipe_ios = w.run("pipe-post", base_L).mean("ios")
    found = None
    for L in (100, 200, 300, 400):
        rec, ios = w.recall("gated", L), w.run("gated", L).mean("ios")
        if rec >= pipe_rec - 0.02 and ios < 0.5 * pipe_ios:
            found = (L, rec, ios)
            break
    detail = f"pipe-post L={base_L} recall {pipe_rec:.3f} ios {pipe_ios:.1f}; "
    detail += f"gated L={found[0]} recall {found[1]:.3f} ios {found[2]:.1f}" if found else "no gated L <= 400 qualifies"
    acceptance(3, "recall parity", found is not None, detail)
    assert found is not None


def test_c04_naive_prefilter_collapse(workload, acceptance, tmp_path):
    w = workload("uniform:10")
    Ls = (20, 50, 100, 200, 500, 1000)
    Q = 200
    naive = max(w.recall("naive-pre", L, Q=Q) for L in Ls)
    post = max(w.recall("pipe-post", L, Q=Q) for L in Ls)
    ds, index = path_graph_index(tmp_path)
    params = SearchParams(L=6, K=2, W=2)
    a = set(batch_search("naive-pre", index, [ds.data[0]], [Equality(1)], params).results[0].ids)
    b = set(batch_search("gated", index, [ds.data[0]], [Equality(1)], params).results[0].ids)
    ok = naive <= post - 0.10 and a == {0} and b == {0, 5}
    acceptance(4, "naive pre-filter collapse", ok,
               f"max recall naive-pre {naive:.3f} vs pipe-post {post:.3f} (L<=1000, {Q} queries); "
               f"path graph naive {sorted(a)} gated {sorted(b)}")
    assert naive <= post - 0.10
    assert a == {0} and b == {0, 5}


def test_c05_early_filter_ablation(workload, acceptance):
    w = workload("uniform:10")
    s = 0.1
    parts, ok = [], True
    for L in (50, 100, 200):
        pp, ef, g = w.run("pipe-post", L), w.run("early-filter", L), w.run("gated", L)
        io_dev = ef.mean("ios") / pp.mean("ios") - 1
        exact_ratio = ef.mean("exact_dists") / pp.mean("exact_dists")
        gated_frac = g.mean("ios") / min(pp.mean("ios"), ef.mean("ios"))
        good = abs(io_dev) <= 0.02 and abs(exact_ratio - s) <= 0.10 * s and gated_frac < 0.15
        ok &= good
        parts.append(f"L={L}: ios dev {io_dev:+.3%}, exact ratio {exact_ratio:.4f}, gated/post {gated_frac:.3f}")
    acceptance(5, "early-filter ablation", ok, "; ".join(parts))
    assert ok


def test_c06_memory_formula(desk_paths, acceptance):
    mismatches = []
    for N in (10**3, 10**4, 10**5, 10**6):
        for R_max in (8, 16, 32, 48, 64):
            table = allocate_table(N, R_max)
            if NeighborStore(table).nbytes != neighbor_store_bytes(N, R_max) or table.nbytes != N * (1 + R_max) * 4:
                mismatches.append((N, R_max))
            del table
    for R_max in (8, 16, 32):
        store = build_neighbor_store(desk_paths["index"], R_max)
        if store.nbytes != neighbor_store_bytes(store.count, R_max):
            mismatches.append(("desk", R_max))
    t2 = (neighbor_store_bytes(10**8, 16), neighbor_store_bytes(10**9, 16))
    ok = not mismatches and t2 == (6_800_000_000, 68_000_000_000)
    acceptance(6, "neighbor-store memory formula", ok, f"grid mismatches {mismatches}; 1e8/1e9-node sizes {t2}")
    assert ok


def test_c07_selectivity_one_equivalence(desk_index, workload, acceptance):
    w = workload("uniform:10")
    ones = FilterStore("single", np.zeros(desk_index.storage.count, np.uint8), num_classes=1)
    idx = desk_index.with_filters(ones)
    Q = 200
    qv = w.qs.vectors.data[:Q]
    preds = [Equality(0)] * Q
    params = SearchParams(L=100, K=DESK_K, W=DESK_W)
    g = batch_search("gated", idx, qv, preds, params)
    pp = batch_search("pipe-post", idx, qv, preds, params)
    diff_ids = sum(1 for a, b in zip(g.results, pp.results) if a.ids != b.ids)
    diff_reads = sum(1 for a, b in zip(g.results, pp.results) if Counter(a.stats.reads) != Counter(b.stats.reads))
    ok = diff_ids == 0 and diff_reads == 0 and g.total.tunnels == 0
    acceptance(7, "selectivity-1 equivalence", ok,
               f"{Q} queries: result mismatches {diff_ids}, read-multiset mismatches {diff_reads}, tunnels {g.total.tunnels}")
    assert ok


def test_c08_w_insensitivity(workload, acceptance):
    w = workload("uniform:10")
    rec = {W: w.recall("gated", 100, W=W) for W in (1, 2, 4, 8, 16, 32)}
    spread = max(rec.values()) - min(rec.values())
    ok = spread <= 0.01
    acceptance(8, "W-insensitivity", ok,
               f"gated L=100 recall by W {', '.join(f'{k}:{v:.4f}' for k, v in rec.items())}; spread {spread * 100:.2f} pts")
    assert ok


def test_c09_oracle_suite(tmp_path, acceptance):
    ds, graph, path, cb, codes = built_index(tmp_path, N=5000, dim=16, R=16, L_build=32, M=8, seed=11)
    rng = np.random.default_rng(0)
    failures = []
    X = ds.data.astype(np.float64)

    # ADC against a scalar loop over chunks
    worst = 0.0
    for q in rng.integers(0, 256, (20, 16)):
        lut = pq.build_lut(cb, q)
        for i in rng.choice(5000, 50, replace=False):
            total = 0.0
            for m in range(cb.M):
                total += l2_sq(cb.chunk(q, m), cb.centroids[m][codes[i, m]])
            worst = max(worst, abs(pq.adc(lut, codes[i]) - total) / max(total, 1e-12))
    if worst > 1e-4:
        failures.append(f"adc rel err {worst:.2e}")

    # encode against a per-centroid brute-force scan
    brute = np.empty_like(codes)
    for m in range(cb.M):
        sub = X[:, cb.offsets[m]:cb.offsets[m + 1]]
        d = np.stack([((sub - c) ** 2).sum(axis=1) for c in cb.centroids[m].astype(np.float64)], axis=1)
        brute[:, m] = np.argmin(d, axis=1)
    if not np.array_equal(brute, codes):
        failures.append(f"encode mismatches {(brute != codes).sum()}")

    # ground truth against an independent second scan
    scheme = LabelScheme("uniform", k=10)
    store = scheme.make_store(ds, seed=3)
    qs = gen_queries(ds, store, scheme, 20, seed=4)
    truth = ground_truth(ds, store, qs.vectors.data, qs.preds, 10)
    for q, p, t in zip(qs.vectors.data, qs.preds, truth):
        cand = sorted((l2_sq(ds.data[i], q), i) for i in range(5000) if store.labels[i] == p.cls)[:10]
        if t != [(i, d) for d, i in cand]:
            failures.append("ground truth mismatch")
            break

    # disk records round-trip byte-exactly, neighbor store is an exact prefix
    layout, img = open_index_image(path)
    for i in range(5000):
        vec, nbrs = decode_record(layout, np.array(img[1 + i]))
        if vec.tobytes() != ds.data[i].tobytes() or not np.array_equal(nbrs, graph.adjacency[i]):
            failures.append(f"record {i} differs")
            break
    for R_max in (8, 16):
        ns = build_neighbor_store(path, R_max)
        bad = sum(1 for i in range(5000) if not np.array_equal(ns.neighbors_of(i), graph.adjacency[i][:R_max]))
        if bad:
            failures.append(f"prefix violations {bad} at R_max={R_max}")
    ok = not failures
    acceptance(9, "oracle suite", ok, f"N=5000, adc worst rel err {worst:.1e}; " + ("; ".join(failures) or "all exact"))
    assert ok


def test_c10_zipf_head_tail(acceptance):
    N = 10**6
    freq = np.bincount(gen_zipf_labels(N, 10, 1.0, seed=0), minlength=10) / N
    top, rare = freq.max(), freq.min()
    ok = abs(top - 0.3414) <= 0.01 and abs(rare - 0.0341) <= 0.005
    acceptance(10, "Zipf head/tail", ok, f"top {top:.4f} (expected 34.1%), rarest {rare:.4f} (expected 3.4%)")
    assert ok


def test_c11_range_predicate(workload, acceptance):
    w = workload("norm_bins:10")
    br = w.run("gated", 100)
    bad, unsound = w.violations(br), w.unsound(br)
    ok = bad == 0 and unsound == 0 and br.total.ios > 0
    acceptance(11, "range predicate path", ok,
               f"norm bins b=10: violations {bad}, unsound results {unsound}, "
               f"recall {w.recall('gated', 100):.3f} (informational), mean ios {br.mean('ios'):.1f}")
    assert ok


def test_c12_multilabel_subset(workload, acceptance):
    w = workload("multilabel")
    assert all(isinstance(p, Subset) and len(p.tags) == 1 for p in w.qs.preds)
    g, pp = w.run("gated", 100), w.run("pipe-post", 100)
    bad = w.violations(g)
    ratio = pp.mean("ios") / g.mean("ios")
    expected = 1 / w.sel
    ok = bad == 0 and abs(ratio - expected) <= 0.30 * expected
    acceptance(12, "multi-label subset path", ok,
               f"violations {bad}; I/O ratio {ratio:.2f}x vs 1/mean selectivity {expected:.2f}x "
               f"(mean s={w.sel:.4f}); gated recall {w.recall('gated', 100):.3f}")
    assert bad == 0
    assert abs(ratio - expected) <= 0.30 * expected
