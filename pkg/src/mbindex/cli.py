"""``mbindex`` command line.

Every command writes ``#``-prefixed header lines (seed, configuration,
capacities) followed by CSV rows to stdout. Output holds no timings, so the
same arguments and seed reproduce it byte for byte.

Exit status: 0 on success, 2 on invalid input or configuration, 1 on any
other failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import __version__
from .ambi import AmbiIndex
from .baselines import hilbert_bulk_load, str_bulk_load
from .core import WindowQuery
from .datagen import DISTRIBUTIONS, generate, knn_workload, tiling_workload, window_workload
from .distsim import COST_HEADER, ClusterConfig, analytic_cost, cost_rows, parallel_build, partition_global, \
    route_knn, route_window
from .estimator import resolve_buffer
from .fmbi import bulk_load, index_stats
from .index import open_index
from .query import knn_query, load_workload, save_workload, window_query
from .storage import DEFAULT_PAGE_SIZE, BufferPool, IoStats, create_dataset, open_dataset, read_all, resolve_capacities

METHODS = ("fmbi", "ambi", "str", "hilbert")
STATIC_BUILDERS = {"fmbi": bulk_load, "str": str_bulk_load, "hilbert": hilbert_bulk_load}
STATS_HEADER = ["method", "N", "d", "C_L", "C_B", "buffer_pages", "leaf_count", "perimeter", "area",
                "build_reads", "build_writes"]
QUERY_HEADER = ["method", "query", "kind", "results", "reads", "writes", "cumulative_io"]


class UsageError(ValueError):
    """Bad arguments, configuration or input file contents."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- helpers -------------------------------------------------------------------

def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("MBI_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"MBI_SEED must be an integer, got {env!r}") from None


def _existing(path, what: str):
    if path is None:
        raise UsageError(f"--{what} is required")
    if not os.path.exists(path):
        raise UsageError(f"{what} file not found: {path}")
    return path


def _header(out, command: str, seed, **config) -> None:
    out.write(f"# mbindex {__version__} {command}\n")
    out.write(f"# seed={seed}\n")
    out.write("# config=" + json.dumps(config, sort_keys=True, default=str) + "\n")


def _writer(out):
    return csv.writer(out, lineterminator="\n")


def _fmt(x):
    if isinstance(x, float):
        return repr(round(x, 12))
    return x


def _buffer(args, dataset, method: str) -> int:
    m = resolve_buffer(dataset.num_pages, args.buffer_pages, args.buffer_pct)
    if method in ("fmbi", "ambi"):
        _, cb = resolve_capacities(dataset.page_size, dataset.d, args.leaf_cap, args.branch_cap)
        if m <= cb:
            raise UsageError(f"buffer of {m} pages must exceed C_B={cb} for {method}")
    return m


def _build(method: str, dataset, pool, args, seed, out_path=None):
    kw = dict(leaf_cap=args.leaf_cap, branch_cap=args.branch_cap)
    if method == "fmbi":
        kw["seed"] = seed
    return STATIC_BUILDERS[method](dataset, pool, out_path, **kw)


def _stats_row(method, idx, buffer_pages, build_io):
    s = index_stats(idx)
    return [method, idx.n, idx.d, idx.leaf_cap, idx.branch_cap, buffer_pages, s.leaf_count, _fmt(s.perimeter),
            _fmt(s.area), build_io.page_reads, build_io.page_writes]


def _kind(q) -> str:
    return "window" if isinstance(q, WindowQuery) else "knn"


def _replay(method, runner, pool, queries, w, start_cost: int = 0) -> int:
    """Run ``queries`` and emit one CSV row per query; returns the final cumulative cost."""
    total = start_cost
    for i, q in enumerate(queries):
        before = pool.io_stats()
        res = runner(q)
        io = pool.io_stats() - before
        total += io.total
        w.writerow([method, i, _kind(q), len(res), io.page_reads, io.page_writes, total])
    return total


def _static_runner(idx):
    return lambda q: window_query(idx, q) if isinstance(q, WindowQuery) else knn_query(idx, q)


def _bounds(args, dataset=None):
    if args.lo is not None and args.hi is not None:
        lo, hi = np.array(args.lo, dtype=float), np.array(args.hi, dtype=float)
        if lo.shape != hi.shape or np.any(lo > hi):
            raise UsageError("--lo/--hi must have equal length and lo <= hi")
        return lo, hi
    if dataset is None:
        raise UsageError("either --dataset or both --lo and --hi are required")
    c = read_all(dataset)["c"]
    return c.min(axis=0), c.max(axis=0)


# -- commands --------------------------------------------------------------------

def cmd_gen(args, out):
    seed = _seed(args)
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    pts = generate(args.distribution, args.n, args.d, seed, mean=args.mean, sigma=args.sigma,
                   clusters=args.clusters, zipf=args.zipf)
    ids = np.arange(args.n, dtype=np.uint64) if args.ids else None
    ds = create_dataset(args.out, pts, ids, page_size=args.page_size)
    _header(out, "gen", seed, distribution=args.distribution, n=args.n, d=args.d, page_size=args.page_size,
            ids=args.ids)
    w = _writer(out)
    w.writerow(["path", "N", "d", "pages", "C_L"])
    w.writerow([args.out, ds.n, ds.d, ds.num_pages, ds.capacity])


def _read_csv(path, d: int):
    coords, ids = [], []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or row[0].lstrip().startswith("#"):
                continue
            if len(row) not in (d, d + 1):
                raise UsageError(f"{path}:{lineno}: expected {d} or {d + 1} columns, got {len(row)}")
            try:
                coords.append([float(v) for v in row[:d]])
                if len(row) == d + 1:
                    ids.append(int(row[d]))
            except ValueError as exc:
                raise UsageError(f"{path}:{lineno}: {exc}") from None
            if not np.all(np.isfinite(coords[-1])):
                raise UsageError(f"{path}:{lineno}: non-finite coordinate")
    if not coords:
        raise UsageError(f"{path}: no data rows")
    if ids and len(ids) != len(coords):
        raise UsageError(f"{path}: ids must be given on every row or on none")
    if ids and min(ids) < 0:
        raise UsageError(f"{path}: ids must be non-negative")
    return np.array(coords), (np.array(ids, dtype=np.uint64) if ids else None)


def cmd_ingest(args, out):
    coords, ids = _read_csv(_existing(args.csv, "csv"), args.d)
    pool = BufferPool(1)
    ds = create_dataset(args.out, coords, ids, page_size=args.page_size, pool=pool)
    _header(out, "ingest", None, csv=args.csv, d=args.d, page_size=args.page_size)
    w = _writer(out)
    w.writerow(["path", "N", "d", "pages", "page_writes"])
    w.writerow([args.out, ds.n, ds.d, ds.num_pages, pool.writes])


def cmd_export(args, out):
    ds = open_dataset(_existing(args.dataset, "dataset"))
    recs = read_all(ds)
    with open(args.out, "w", newline="") as fh:
        w = _writer(fh)
        for r in recs:
            row = [repr(float(v)) for v in r["c"]]
            if ds.with_ids:
                row.append(int(r["id"]))
            w.writerow(row)
    _header(out, "export", None, dataset=args.dataset)
    w = _writer(out)
    w.writerow(["path", "rows"])
    w.writerow([args.out, len(recs)])


def cmd_gen_workload(args, out):
    seed = _seed(args)
    ds = open_dataset(args.dataset) if args.dataset else None
    lo, hi = _bounds(args, ds)
    focus = args.focus / 100.0 if args.focus else None
    if args.kind == "window":
        n_points = ds.n if ds is not None else args.n_points
        if not n_points:
            raise UsageError("window workloads need --dataset or --n-points")
        qs = window_workload(lo, hi, args.n_queries, n_points, seed, focus=focus)
    elif args.kind == "knn":
        qs = knn_workload(lo, hi, args.n_queries, seed, focus=focus)
    else:
        qs = tiling_workload(lo, hi, args.cells, seed)
    save_workload(args.out, qs)
    _header(out, "gen-workload", seed, kind=args.kind, n_queries=len(qs), focus_pct=args.focus)
    w = _writer(out)
    w.writerow(["path", "queries"])
    w.writerow([args.out, len(qs)])


def cmd_build(args, out):
    seed = _seed(args)
    if args.method == "ambi":
        raise UsageError("the adaptive index is built by queries; use 'query --adaptive'")
    ds = open_dataset(_existing(args.dataset, "dataset"))
    m = _buffer(args, ds, args.method)
    pool = BufferPool(m)
    idx = _build(args.method, ds, pool, args, seed, args.out)
    _header(out, "build", seed, method=args.method, dataset=args.dataset, buffer_pages=m,
            C_L=idx.leaf_cap, C_B=idx.branch_cap)
    w = _writer(out)
    w.writerow(STATS_HEADER)
    w.writerow(_stats_row(args.method, idx, m, idx.build_io))


def cmd_query(args, out):
    seed = _seed(args)
    queries = load_workload(_existing(args.workload, "workload"))
    w = _writer(out)
    if args.adaptive:
        ds = open_dataset(_existing(args.dataset, "dataset"))
        m = _buffer(args, ds, "ambi")
        pool = BufferPool(m)
        idx = AmbiIndex(ds, pool, leaf_cap=args.leaf_cap, branch_cap=args.branch_cap, seed=seed)
        _header(out, "query", seed, method="ambi", dataset=args.dataset, workload=args.workload, buffer_pages=m,
                C_L=idx.leaf_cap, C_B=idx.branch_cap)
        w.writerow(QUERY_HEADER)
        _replay("ambi", idx.query, pool, queries, w)
        return
    path = _existing(args.index, "index")
    probe = open_index(path, BufferPool(1))
    m = resolve_buffer(probe.file.num_pages, args.buffer_pages, args.buffer_pct)
    pool = BufferPool(m)
    idx = open_index(path, pool)
    _header(out, "query", seed, method=idx.method, index=path, workload=args.workload, buffer_pages=m,
            C_L=idx.leaf_cap, C_B=idx.branch_cap)
    w.writerow(QUERY_HEADER)
    _replay(idx.method, _static_runner(idx), pool, queries, w)


def cmd_bench(args, out):
    """Build cost plus per-query cost for each method, cumulatively."""
    seed = _seed(args)
    ds = open_dataset(_existing(args.dataset, "dataset"))
    queries = load_workload(_existing(args.workload, "workload")) if args.workload else []
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    bad = [m for m in methods if m not in METHODS]
    if bad or not methods:
        raise UsageError(f"unknown method(s) {bad}; choose from {', '.join(METHODS)}")
    m = resolve_buffer(ds.num_pages, args.buffer_pages, args.buffer_pct)
    for meth in methods:
        _buffer(args, ds, meth)
    cl, cb = resolve_capacities(ds.page_size, ds.d, args.leaf_cap, args.branch_cap)
    _header(out, "bench", seed, methods=methods, dataset=args.dataset, workload=args.workload, buffer_pages=m,
            C_L=cl, C_B=cb, N=ds.n, d=ds.d)
    w = _writer(out)
    w.writerow(QUERY_HEADER)
    for meth in methods:
        if meth == "ambi":
            pool = BufferPool(m)
            idx = AmbiIndex(ds, pool, leaf_cap=args.leaf_cap, branch_cap=args.branch_cap, seed=seed)
            w.writerow([meth, "build", "", "", 0, 0, 0])
            _replay(meth, idx.query, pool, queries, w)
            continue
        idx = _build(meth, ds, BufferPool(m), args, seed)
        cost = idx.build_io.total
        w.writerow([meth, "build", "", "", idx.build_io.page_reads, idx.build_io.page_writes, cost])
        # the query phase starts from a cold buffer of the same size
        idx.pool = pool = BufferPool(m)
        _replay(meth, _static_runner(idx), pool, queries, w, cost)


def cmd_stats(args, out):
    seed = _seed(args)
    w = _writer(out)
    if args.index:
        idx = open_index(_existing(args.index, "index"), BufferPool(1))
        _header(out, "stats", seed, index=args.index)
        w.writerow(STATS_HEADER)
        # a reopened file carries no build accounting
        w.writerow(_stats_row(idx.method, idx, "", IoStats()))
        return
    ds = open_dataset(_existing(args.dataset, "dataset"))
    if args.method == "ambi":
        raise UsageError("stats needs a built index; the adaptive index has none before queries")
    m = _buffer(args, ds, args.method)
    idx = _build(args.method, ds, BufferPool(m), args, seed)
    _header(out, "stats", seed, method=args.method, dataset=args.dataset, buffer_pages=m)
    w.writerow(STATS_HEADER)
    w.writerow(_stats_row(args.method, idx, m, idx.build_io))


def cmd_distsim(args, out):
    seed = _seed(args)
    if args.cluster_config:
        try:
            cfg = ClusterConfig.from_json(args.cluster_config)
        except (KeyError, json.JSONDecodeError) as exc:
            raise UsageError(f"bad cluster config: {exc}") from None
        ms, pct, seed = [cfg.m], cfg.buffer_pct_total, cfg.seed
    else:
        ms, pct = args.m, args.buffer_pct
    ds = open_dataset(_existing(args.dataset, "dataset"))
    queries = load_workload(args.workload) if args.workload else []
    _header(out, "distsim", seed, dataset=args.dataset, m=ms, buffer_pct_total=pct, workers=args.workers,
            adaptive=args.adaptive)
    w = _writer(out)
    w.writerow(["m"] + COST_HEADER + ["analytic"])
    for m in ms:
        if m < 1:
            raise UsageError("m must be >= 1")
        total = resolve_buffer(ds.num_pages, None, pct)
        cluster = partition_global(ds, m, total, seed, args.leaf_cap, args.branch_cap)
        parallel_build(cluster, adaptive=args.adaptive, workers=args.workers)
        for q in queries:
            if isinstance(q, WindowQuery):
                route_window(cluster, q)
            else:
                route_knn(cluster, q)
        for row in cost_rows(cluster):
            if isinstance(row[0], int):
                srv = cluster.servers[row[0]]
                est = analytic_cost(srv.shard_pages, srv.buffer_pages, cluster.branch_cap)
                w.writerow([m] + row + [_fmt(est)])
            else:
                w.writerow([m] + row + [""])


# -- parser ------------------------------------------------------------------------

def _add_index_opts(p, method=True):
    if method:
        p.add_argument("--method", choices=METHODS, default="fmbi")
    p.add_argument("--buffer-pct", type=float, default=1.0, help="buffer size as %% of dataset pages")
    p.add_argument("--buffer-pages", type=int, default=None, help="absolute buffer size (overrides --buffer-pct)")
    p.add_argument("--leaf-cap", type=int, default=None)
    p.add_argument("--branch-cap", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file whose keys set option defaults")
    common.add_argument("--seed", type=int, default=None, help="random seed (falls back to $MBI_SEED, then 0)")

    p = _Parser(prog="mbindex", description="Memory-bounded spatial index tools.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", parents=[common], help="generate a synthetic dataset")
    g.add_argument("--distribution", choices=DISTRIBUTIONS, default="uniform")
    g.add_argument("--n", type=int, default=100_000)
    g.add_argument("--d", type=int, default=2)
    g.add_argument("--page-size", type=int, default=DEFAULT_PAGE_SIZE)
    g.add_argument("--mean", type=float, default=0.5)
    g.add_argument("--sigma", type=float, default=0.15)
    g.add_argument("--clusters", type=int, default=50)
    g.add_argument("--zipf", type=float, default=1.0)
    g.add_argument("--ids", action=argparse.BooleanOptionalAction, default=True, help="store record ids")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    i = sub.add_parser("ingest", parents=[common], help="pack a CSV file (d columns, optional id) into a dataset")
    i.add_argument("--csv", required=True)
    i.add_argument("--d", type=int, required=True)
    i.add_argument("--page-size", type=int, default=DEFAULT_PAGE_SIZE)
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_ingest)

    e = sub.add_parser("export", parents=[common], help="write a dataset back to CSV")
    e.add_argument("--dataset", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_export)

    wl = sub.add_parser("gen-workload", parents=[common], help="generate a JSONL query workload")
    wl.add_argument("--kind", choices=("window", "knn", "tiling"), default="window")
    wl.add_argument("--dataset")
    wl.add_argument("--lo", type=float, nargs="+")
    wl.add_argument("--hi", type=float, nargs="+")
    wl.add_argument("--n-queries", type=int, default=1000)
    wl.add_argument("--n-points", type=int, default=None, help="N used to scale window areas without --dataset")
    wl.add_argument("--focus", type=float, default=None, help="confine queries to this %% of the volume")
    wl.add_argument("--cells", type=int, default=10, help="cells per axis for tiling workloads")
    wl.add_argument("--out", required=True)
    wl.set_defaults(func=cmd_gen_workload)

    b = sub.add_parser("build", parents=[common], help="bulk load an index file")
    b.add_argument("--dataset", required=True)
    b.add_argument("--out", required=True)
    _add_index_opts(b)
    b.set_defaults(func=cmd_build)

    q = sub.add_parser("query", parents=[common], help="replay a workload")
    q.add_argument("--index", help="index file (static methods)")
    q.add_argument("--adaptive", action="store_true", help="build an adaptive index from --dataset while querying")
    q.add_argument("--dataset")
    q.add_argument("--workload", required=True)
    _add_index_opts(q, method=False)
    q.set_defaults(func=cmd_query)

    be = sub.add_parser("bench", parents=[common], help="compare build and query cost across methods")
    be.add_argument("--dataset", required=True)
    be.add_argument("--workload")
    be.add_argument("--methods", default="fmbi,str,hilbert")
    _add_index_opts(be, method=False)
    be.set_defaults(func=cmd_bench)

    s = sub.add_parser("stats", parents=[common], help="leaf count, perimeter and area of an index")
    s.add_argument("--index")
    s.add_argument("--dataset")
    _add_index_opts(s)
    s.set_defaults(func=cmd_stats)

    ds = sub.add_parser("distsim", parents=[common], help="simulate parallel bulk loading")
    ds.add_argument("--dataset", required=True)
    ds.add_argument("--m", type=int, nargs="+", default=[1, 2, 4, 8])
    ds.add_argument("--buffer-pct", type=float, default=5.0, help="total buffer as %% of dataset pages")
    ds.add_argument("--cluster-config", help="JSON text or file with m, buffer_pct_total and seed")
    ds.add_argument("--workload")
    ds.add_argument("--workers", type=int, default=1)
    ds.add_argument("--adaptive", action="store_true")
    ds.add_argument("--leaf-cap", type=int, default=None)
    ds.add_argument("--branch-cap", type=int, default=None)
    ds.set_defaults(func=cmd_distsim)
    return p


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        path = _existing(args.config, "config")
        try:
            with open(path) as fh:
                cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: {exc}") from None
        if not isinstance(cfg, dict):
            raise UsageError(f"{path}: expected a JSON object")
        # config keys become defaults; flags given on the command line still win
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = sorted(k.replace("-", "_") for k in cfg if k.replace("-", "_") not in known)
        if unknown:
            raise UsageError(f"{path}: unknown option(s) {', '.join(unknown)}")
        sub.set_defaults(**{k.replace("-", "_"): v for k, v in cfg.items()})
        args = parser.parse_args(argv)
    return args


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    try:
        args = parse_args(argv)
        args.func(args, out)
    except UsageError as exc:
        print(f"mbindex: error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"mbindex: invalid input: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - top-level reporting
        print(f"mbindex: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
