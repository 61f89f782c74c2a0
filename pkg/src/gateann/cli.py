"""Command-line entry point.

Every command works inside a workspace directory (``--dir``, default ``.``)
with fixed file names:

    base.vec     vectors            labels.lbl   filter metadata
    index.disk   disk index         queries.vec  query vectors
    pq.bin       PQ codebook/codes  preds.jsonl  one predicate per query
    gt.bin       filtered ground truth

Exit codes: 0 ok, 1 usage error, 2 data/format error, 3 invariant violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import pq
from .bench import io_reduction_report, run_sweep, write_csv
from .builder import BuildParams, build_vamana, reachable_fraction, write_disk_index
from .core import (Equality, FormatError, MODES, SearchParams,
                   predicate_from_json, predicate_to_json, read_vectors, write_vectors)
from .search import SearchIndex, batch_search, search
from .stores import (FilterStore, build_neighbor_store, load_filter_store, write_labels,
                     write_multilabels)
from .storage import Storage
from .workloads import (LabelScheme, gen_queries, gen_vectors, ground_truth, parse_scheme,
                        write_ground_truth)

log = logging.getLogger("gateann")

FILES = {"data": "base.vec", "index": "index.disk", "pq": "pq.bin", "labels": "labels.lbl",
         "queries": "queries.vec", "preds": "preds.jsonl", "gt": "gt.bin"}


class UsageError(Exception):
    pass


def _ints(text: str) -> list:
    try:
        return [int(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _floats(text: str) -> list:
    try:
        return [float(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _scheme(text: str) -> LabelScheme:
    try:
        return parse_scheme(text)
    except (ValueError, IndexError) as exc:
        raise argparse.ArgumentTypeError(str(exc))


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gateann", description="Filtered disk-resident graph ANN search.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seed=True):
        sp.add_argument("--dir", type=Path, default=Path("."), help="workspace directory")
        if seed:
            sp.add_argument("--seed", type=int, default=0)

    def store_flags(sp):
        sp.add_argument("--backend", choices=["sim", "file"], default="sim")
        sp.add_argument("--sim-latency-us", type=float, default=100.0)
        sp.add_argument("--Rmax", type=int, default=32)
        sp.add_argument("--label-kind", choices=["single", "bin"], default="single",
                        help="how to interpret a one-byte label file")

    sp = sub.add_parser("gen-data", help="generate a Gaussian-mixture vector file")
    common(sp)
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--dim", type=int, required=True)
    sp.add_argument("--dtype", choices=["u8", "f32"], default="u8")
    sp.add_argument("--clusters", type=int, default=32)
    sp.add_argument("--out", type=Path)

    sp = sub.add_parser("gen-labels", help="generate filter metadata for base.vec")
    common(sp)
    sp.add_argument("--label-scheme", type=_scheme, default=parse_scheme("uniform:10"),
                    help="uniform:K | zipf:K:ALPHA | spatial:K:MIX | norm_bins:B | multilabel:VOCAB:ALPHA:MEAN:TPQ")
    sp.add_argument("--selectivity", type=float, help="uniform scheme with round(1/s) classes")
    sp.add_argument("--out", type=Path)

    sp = sub.add_parser("build", help="build the disk index and PQ codes")
    common(sp)
    sp.add_argument("--R", type=int, default=32)
    sp.add_argument("--Lbuild", type=int, default=64)
    sp.add_argument("--alpha", type=float, default=1.2)
    sp.add_argument("--M", type=int, default=32, help="PQ chunks")
    sp.add_argument("--pq-iters", type=int, default=12)
    sp.add_argument("--pq-sample", type=int, default=65536)
    sp.add_argument("--sector-size", type=int, default=4096)

    sp = sub.add_parser("gt", help="draw queries + predicates and compute filtered ground truth")
    common(sp)
    sp.add_argument("--queries", type=int, default=500)
    sp.add_argument("--K", type=int, default=10)
    sp.add_argument("--label-scheme", type=_scheme, default=parse_scheme("uniform:10"),
                    help="scheme used to draw predicates; must match labels.lbl")

    sp = sub.add_parser("search", help="run one query and print results and stats as JSON")
    common(sp, seed=False)
    store_flags(sp)
    sp.add_argument("--query", type=int, default=0, help="row of queries.vec")
    sp.add_argument("--mode", choices=MODES, default="gated")
    sp.add_argument("--L", type=int, default=100)
    sp.add_argument("--K", type=int, default=10)
    sp.add_argument("--W", type=int, default=8)

    sp = sub.add_parser("bench", help="sweep modes x L and write CSV")
    common(sp)
    store_flags(sp)
    sp.add_argument("--modes", default="gated,pipe-post")
    sp.add_argument("--L", type=_ints, default=[20, 50, 100, 200])
    sp.add_argument("--W", type=int, default=8)
    sp.add_argument("--K", type=int, default=10)
    sp.add_argument("--sel", "--selectivity", dest="sel", type=_floats,
                    help="uniform labels with round(1/s) classes, one sweep per value")
    sp.add_argument("--label-scheme", type=_scheme, help="label scheme when --sel is not given")
    sp.add_argument("--queries", type=int, default=500)
    sp.add_argument("--threads", type=int, default=1)
    sp.add_argument("--timing", action="store_true", help="fill wall_qps (hardware dependent)")
    sp.add_argument("--out", type=Path, help="CSV path (default stdout)")
    sp.add_argument("--report", action="store_true", help="also print the I/O reduction table to stderr")

    sp = sub.add_parser("verify", help="check structural invariants on the workspace")
    common(sp)
    store_flags(sp)
    sp.add_argument("--queries", type=int, default=100)
    sp.add_argument("--L", type=_ints, default=[20, 50, 100])
    sp.add_argument("--W", type=int, default=8)
    return p


# -- commands ---------------------------------------------------------------------------


def _path(args, key: str) -> Path:
    return args.dir / FILES[key]


def _need(path: Path) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"missing {path}")
    return path


def cmd_gen_data(args) -> int:
    if args.n < 1 or args.dim < 1:
        raise UsageError("--n and --dim must be >= 1")
    args.dir.mkdir(parents=True, exist_ok=True)
    ds = gen_vectors(args.n, args.dim, args.dtype, args.clusters, args.seed)
    out = args.out or _path(args, "data")
    write_vectors(ds, out)
    log.info("wrote %d x %d %s vectors to %s", ds.count, ds.dim, args.dtype, out)
    return 0


def _scheme_for(args) -> LabelScheme:
    if getattr(args, "selectivity", None) is not None:
        if not 0 < args.selectivity <= 1:
            raise UsageError("--selectivity must be in (0, 1]")
        return LabelScheme("uniform", k=max(1, round(1 / args.selectivity)))
    return args.label_scheme


def _save_store(store: FilterStore, path: Path):
    if store.kind == "multi":
        write_multilabels(path, store.offsets, store.tags)
    else:
        write_labels(path, store.labels, store.num_classes)


def cmd_gen_labels(args) -> int:
    scheme = _scheme_for(args)
    ds = read_vectors(_need(_path(args, "data")))
    store = scheme.make_store(ds, seed=args.seed)
    out = args.out or _path(args, "labels")
    _save_store(store, out)
    log.info("wrote %s labels (%s) to %s", scheme.name, store.kind, out)
    return 0


def cmd_build(args) -> int:
    try:
        params = BuildParams(args.R, args.Lbuild, args.alpha, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc))
    ds = read_vectors(_need(_path(args, "data")))
    t0 = time.perf_counter()
    graph = build_vamana(ds, params)
    t_graph = time.perf_counter() - t0
    write_disk_index(graph, ds, args.sector_size, _path(args, "index"))
    cb = pq.train(ds, args.M, args.pq_iters, args.pq_sample, args.seed)
    pq.write_pq(_path(args, "pq"), cb, pq.encode_batch(cb, ds.data))
    meta = {"graph_build_s": t_graph, "total_s": time.perf_counter() - t0,
            "reachable_fraction": reachable_fraction(graph), "medoid": graph.medoid}
    (args.dir / "build.meta.json").write_text(json.dumps(meta, indent=2))
    log.info("index built: medoid %d, %.1fs", graph.medoid, meta["total_s"])
    return 0


def _load_store(args, count: int) -> FilterStore:
    return load_filter_store(_need(_path(args, "labels")), count, kind=getattr(args, "label_kind", "single"))


def cmd_gt(args) -> int:
    ds = read_vectors(_need(_path(args, "data")))
    store = _load_store(args, ds.count)
    scheme = args.label_scheme
    if (store.kind == "multi") != (scheme.name == "multilabel"):
        raise UsageError("--label-scheme does not match the kind of labels.lbl")
    qs = gen_queries(ds, store, scheme, args.queries, seed=args.seed)
    truth = ground_truth(ds, store, qs.vectors.data, qs.preds, args.K)
    write_vectors(qs.vectors, _path(args, "queries"))
    with open(_path(args, "preds"), "w") as f:
        for p, s in zip(qs.preds, qs.selectivity):
            f.write(json.dumps({**predicate_to_json(p), "selectivity": float(s)}) + "\n")
    write_ground_truth(_path(args, "gt"), truth, args.K)
    log.info("wrote %d queries, mean selectivity %.4f", args.queries, float(qs.selectivity.mean()))
    return 0


def _open(args, store: FilterStore | None = None) -> SearchIndex:
    index_path = _need(_path(args, "index"))
    storage = Storage(index_path, backend=args.backend, latency_us=args.sim_latency_us)
    codebook, codes = pq.read_pq(_need(_path(args, "pq")))
    if store is None:
        store = _load_store(args, storage.count)
    return SearchIndex(storage, codebook, codes, store, build_neighbor_store(index_path, args.Rmax))


def _read_preds(path: Path) -> list:
    with open(path) as f:
        return [predicate_from_json(json.loads(line)) for line in f if line.strip()]


def _scheme_of(store: FilterStore) -> LabelScheme:
    """A scheme that draws predicates compatible with an existing label file."""
    if store.kind == "multi":
        return LabelScheme("multilabel")
    return LabelScheme("norm_bins" if store.kind == "bin" else "uniform", k=max(1, store.num_classes))


def cmd_search(args) -> int:
    try:
        params = SearchParams(args.L, args.K, args.W, args.mode)
    except ValueError as exc:
        raise UsageError(str(exc))
    index = _open(args)
    queries = read_vectors(_need(_path(args, "queries")))
    preds = _read_preds(_need(_path(args, "preds")))
    if not 0 <= args.query < queries.count:
        raise UsageError(f"--query must be in [0, {queries.count})")
    res = search(args.mode, index, queries[args.query], preds[args.query], params)
    st = res.stats
    out = {"query": args.query, "mode": args.mode, "ids": res.ids, "dists": res.dists,
           "ios": st.ios, "tunnels": st.tunnels, "exact_dists": st.exact_dists,
           "pq_dists": st.pq_dists, "hops": st.hops, "virtual_latency_us": st.virtual_latency_us}
    sys.stdout.write(json.dumps(out) + "\n")
    index.storage.close()
    return 0


def cmd_bench(args) -> int:
    modes = [m for m in args.modes.split(",") if m]
    for m in modes:
        if m not in MODES:
            raise UsageError(f"unknown mode {m!r}; expected one of {', '.join(MODES)}")
    for L in args.L:
        if not args.K <= L:
            raise UsageError(f"every L must be >= K={args.K}")
    ds = read_vectors(_need(_path(args, "data")))
    if args.sel:
        sweeps = [(s, LabelScheme("uniform", k=max(1, round(1 / s)))) for s in args.sel]
    elif args.label_scheme:
        sweeps = [(math.nan, args.label_scheme)]
    else:
        sweeps = [(math.nan, None)]
    rows = []
    meta = {"hardware_dependent": ["wall_qps"], "sweeps": []}
    for sel, scheme in sweeps:
        if scheme is None:
            store = _load_store(args, ds.count)
            scheme = _scheme_of(store)
        else:
            store = scheme.make_store(ds, seed=args.seed)
        idx = _open(args, store)
        qs = gen_queries(ds, store, scheme, args.queries, seed=args.seed + 1)
        truth = ground_truth(ds, store, qs.vectors.data, qs.preds, args.K)
        measured = float(qs.selectivity.mean())
        part = run_sweep(idx, qs.vectors.data, qs.preds, truth, modes, args.L, W=args.W, K=args.K,
                         selectivity=sel if not math.isnan(sel) else measured,
                         threads=args.threads)
        meta["sweeps"].append({"scheme": scheme.name, "selectivity": measured,
                               "wall_qps": {f"{r.mode}@L{r.L}": r.wall_qps for r in part}})
        if not args.timing:
            part = [replace(r, wall_qps=math.nan) for r in part]
        rows.extend(part)
        idx.storage.close()
    if args.out:
        with open(args.out, "w", newline="") as f:
            write_csv(rows, f)
        Path(str(args.out) + ".meta.json").write_text(json.dumps(meta, indent=2))
    else:
        write_csv(rows, sys.stdout)
    if args.report:
        for r in io_reduction_report(rows):
            sys.stderr.write("s={selectivity:.3f} L={L}: pipe {pipe_ios:.1f} / gated {gated_ios:.1f} = "
                             "{ratio:.2f}x (expected {expected:.2f}x)\n".format(**r))
    return 0


def cmd_verify(args) -> int:
    """Gating, soundness, frontier, prefix and true-predicate equivalence checks."""
    ds = read_vectors(_need(_path(args, "data")))
    index = _open(args)
    store = index.filters
    scheme = _scheme_of(store)
    qs = gen_queries(ds, store, scheme, args.queries, seed=args.seed)
    failures = []
    report = {}

    # neighbor store holds a prefix of every disk adjacency list
    bad_prefix = 0
    for v in range(index.storage.count):
        disk = index.storage.record(v).neighbors
        mem = index.neighbors.neighbors_of(v)
        if not np.array_equal(mem, disk[:index.neighbors.R_max]):
            bad_prefix += 1
    report["neighbor_prefix_violations"] = bad_prefix

    violations = unsound = 0
    for L in args.L:
        params = SearchParams(L, min(10, L), args.W, "gated")
        br = batch_search("gated", index, qs.vectors.data, qs.preds, params)
        for r, p in zip(br.results, qs.preds):
            m = store.matcher(p)
            violations += sum(1 for v in r.stats.reads if not m(v))
            unsound += sum(1 for v in r.ids if not m(v))
            if r.stats.hops != r.stats.ios_completed + r.stats.tunnels or r.stats.max_in_flight > args.W:
                failures.append(f"stats invariant broken at L={L}")
    report["gating_violations"] = violations
    report["unsound_results"] = unsound

    # with a predicate every node satisfies, gated and pipe-post coincide
    ones = FilterStore("single", np.zeros(ds.count, np.uint8), num_classes=1)
    all_true = [Equality(0)] * qs.vectors.count
    idx1 = index.with_filters(ones)
    params = SearchParams(args.L[-1], min(10, args.L[-1]), args.W, "gated")
    g = batch_search("gated", idx1, qs.vectors.data, all_true, params)
    pp = batch_search("pipe-post", idx1, qs.vectors.data, all_true, params)
    mismatched = sum(1 for a, b in zip(g.results, pp.results) if a.ids != b.ids or a.stats.reads != b.stats.reads)
    report["true_predicate_mismatches"] = mismatched

    for key in ("neighbor_prefix_violations", "gating_violations", "unsound_results", "true_predicate_mismatches"):
        if report[key]:
            failures.append(f"{key}={report[key]}")
    sys.stdout.write(json.dumps(report) + "\n")
    log.info("gating invariant: %d violations", violations)
    index.storage.close()
    if failures:
        for f in failures:
            log.error("invariant violated: %s", f)
        return 3
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "gen-labels": cmd_gen_labels, "build": cmd_build, "gt": cmd_gt,
            "search": cmd_search, "bench": cmd_bench, "verify": cmd_verify}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(f"{exc}\n")
        return 1
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        sys.stderr.write(f"usage error: {exc}\n")
        return 1
    except (FormatError, FileNotFoundError, OSError, ValueError, TypeError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
