"""In-process simulation of parallel bulk loading over ``m`` servers.

A coordinator samples ``gamma * m`` pages (``gamma = M // m``), builds a
SplitTree with ``m - 1`` splits and streams the dataset once, appending every
point to the shard of the server whose subspace covers it. Each server then
bulk loads its shard with its own buffer pool. Costs are page-I/O counters;
the parallel cost of a phase is the maximum over servers.
"""
from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .ambi import AmbiIndex
from .core import KnnQuery, WindowQuery, mindist, record_dtype
from .fmbi import PageSource, bulk_load
from .query import QueryResult, knn_query, sort_records, window_query
from .splittree import SplitTree, build_splittree, single_leaf_tree
from .storage import BufferPool, Dataset, DatasetWriter, IoStats, resolve_capacities


@dataclass
class Server:
    sid: int
    shard: Dataset
    buffer_pages: int
    lo: Optional[np.ndarray] = None
    hi: Optional[np.ndarray] = None
    pool: Optional[BufferPool] = None
    index: object = None
    build_io: IoStats = field(default_factory=IoStats)
    query_reads: int = 0

    @property
    def shard_pages(self) -> int:
        return self.shard.num_pages

    @property
    def empty(self) -> bool:
        return self.shard.n == 0


@dataclass
class Cluster:
    m: int
    d: int
    tree: SplitTree
    servers: list
    coordinator_io: IoStats
    leaf_cap: int
    branch_cap: int
    seed: int = 0
    with_ids: bool = True

    def parallel_build_cost(self) -> int:
        return max(s.build_io.total for s in self.servers)


@dataclass
class ClusterConfig:
    m: int
    buffer_pct_total: float
    seed: int = 0

    @classmethod
    def from_json(cls, text_or_path) -> "ClusterConfig":
        if os.path.exists(str(text_or_path)):
            with open(text_or_path) as fh:
                obj = json.load(fh)
        else:
            obj = json.loads(text_or_path)
        cfg = cls(int(obj["m"]), float(obj["buffer_pct_total"]), int(obj.get("seed", 0)))
        if cfg.m < 1:
            raise ValueError("m must be >= 1")
        if not 0 < cfg.buffer_pct_total <= 100:
            raise ValueError("buffer_pct_total must be in (0, 100]")
        return cfg


def partition_global(dataset: Dataset, m: int, buffer_pages: int, seed=None, leaf_cap: Optional[int] = None,
                     branch_cap: Optional[int] = None, shard_dir=None) -> Cluster:
    """Sample, split and stream ``dataset`` into ``m`` shards.

    ``buffer_pages`` is the coordinator's buffer ``M``; it also becomes each
    server's buffer divided evenly (``M // m``). The coordinator holds the
    ``gamma * m`` sampled pages plus one output page per server and one input
    page. Its I/O (one full read plus the shard writes) is reported as
    ``coordinator_io``.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    d = dataset.d
    cl, cb = resolve_capacities(dataset.page_size, d, leaf_cap, branch_cap)
    gamma = buffer_pages // m
    rng = np.random.default_rng(seed)
    src = PageSource.from_dataset(dataset)
    pool = BufferPool(gamma * m + m + 1)
    start = pool.io_stats()
    sample_pages: set = set()
    if m == 1:
        tree = single_leaf_tree(d)
    else:
        if gamma < 1:
            raise ValueError(f"buffer of {buffer_pages} pages is smaller than m={m}")
        want = gamma * m * cl
        k_src = min(len(src), -(-want // src.cap))
        chosen = rng.choice(len(src), size=k_src, replace=False)
        sample_pages = set(int(i) for i in chosen)
        blocks = [src.read(pool, src.pages[i][0]).copy() for i in sorted(sample_pages)]
        sample = np.concatenate(blocks)
        strict = len(sample) == want
        tree = build_splittree(sample[:want] if strict else sample, m, gamma, cl, strict=strict)
    writers = []
    for sid in range(m):
        path = None if shard_dir is None else os.path.join(shard_dir, f"shard_{sid}.mbd")
        writers.append(DatasetWriter(path, d, dataset.page_size, pool, with_ids=True))
    lo = np.full((m, d), np.inf)
    hi = np.full((m, d), -np.inf)

    def route(blk):
        where = tree.locate_many(blk["c"]) if m > 1 else np.zeros(len(blk), dtype=np.int64)
        for sid in np.unique(where):
            part = blk[where == sid]
            writers[sid].append(part)
            lo[sid] = np.minimum(lo[sid], part["c"].min(axis=0))
            hi[sid] = np.maximum(hi[sid], part["c"].max(axis=0))

    if m > 1:
        # sampled pages are still in the coordinator's memory
        route(sample)
    for i, (pid, _) in enumerate(src.pages):
        if i not in sample_pages:
            route(src.read(pool, pid))
    servers = []
    per_server = max(1, buffer_pages // m)
    for sid, w in enumerate(writers):
        shard = w.close()
        srv = Server(sid, shard, per_server)
        if shard.n:
            srv.lo, srv.hi = lo[sid], hi[sid]
        servers.append(srv)
    pool.flush_all()
    return Cluster(m, d, tree, servers, pool.io_stats() - start, cl, cb,
                   0 if seed is None else int(seed), dataset.with_ids)


def parallel_build(cluster: Cluster, adaptive: bool = False, workers: int = 1) -> dict:
    """Build every server's local index; returns a cost report.

    With ``adaptive=True`` servers get an :class:`AmbiIndex` that is built by
    the queries routed to them, so the build phase costs nothing up front.
    """

    def build(srv: Server):
        srv.pool = BufferPool(srv.buffer_pages)
        if srv.empty:
            return srv
        if adaptive:
            srv.index = AmbiIndex(srv.shard, srv.pool, leaf_cap=cluster.leaf_cap, branch_cap=cluster.branch_cap,
                                  seed=cluster.seed + srv.sid)
            return srv
        srv.index = bulk_load(srv.shard, srv.pool, leaf_cap=cluster.leaf_cap, branch_cap=cluster.branch_cap,
                              seed=cluster.seed + srv.sid)
        srv.build_io = srv.index.build_io
        return srv

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            list(ex.map(build, cluster.servers))
    else:
        for srv in cluster.servers:
            build(srv)
    return build_report(cluster)


def build_report(cluster: Cluster) -> dict:
    costs = [s.build_io.total for s in cluster.servers]
    return {
        "m": cluster.m,
        "per_server": [(s.sid, s.shard_pages, s.build_io.page_reads, s.build_io.page_writes) for s in cluster.servers],
        "max_cost": max(costs) if costs else 0,
        "coordinator": cluster.coordinator_io,
    }


def analytic_cost(pages: int, buffer_pages: int, branch_cap: int) -> float:
    """``P_i * (1 + ceil(log_{C_B}(P_i / M_i)))`` page I/Os for one server."""
    if pages <= buffer_pages:
        return float(pages)
    return pages * (1 + math.ceil(math.log(pages / buffer_pages, branch_cap)))


def _run(srv: Server, q) -> QueryResult:
    before = srv.pool.reads
    if isinstance(srv.index, AmbiIndex):
        res = srv.index.query(q)
    elif isinstance(q, WindowQuery):
        res = window_query(srv.index, q)
    else:
        res = knn_query(srv.index, q)
    srv.query_reads += srv.pool.reads - before
    return res


def _box_hits(srv: Server, wlo, whi) -> bool:
    return not srv.empty and bool(np.all(srv.lo <= whi) and np.all(wlo <= srv.hi))


def route_window(cluster: Cluster, w: WindowQuery):
    """Send ``w`` to the servers whose shard box intersects it.

    Returns ``(result, servers_touched)``; ``result.pages_read`` is the
    parallel cost (max over touched servers).
    """
    wlo, whi = w.rect.as_arrays()
    touched, parts, costs, visited = [], [], [], 0
    for srv in cluster.servers:
        if _box_hits(srv, wlo, whi):
            res = _run(srv, w)
            touched.append(srv.sid)
            parts.append(res.records)
            costs.append(res.pages_read)
            visited += res.nodes_visited
    recs = np.concatenate(parts) if parts else np.empty(0, dtype=record_dtype(cluster.d))
    out = QueryResult(sort_records(recs, cluster.with_ids), max(costs, default=0), visited)
    return out, touched


def route_knn(cluster: Cluster, q: KnnQuery):
    """Two-round k-NN.

    Round 1 asks the server whose subspace covers ``q``. Round 2 asks every
    other server whose shard box comes within the current k-th distance.
    Returns ``(result, servers_touched)``.
    """
    center = np.asarray(q.center.coords)
    k = q.k
    home = cluster.tree.locate(center).index if cluster.m > 1 else 0
    touched, parts = [], []
    costs = []

    def ask(srv):
        res = _run(srv, q)
        touched.append(srv.sid)
        costs.append(res.pages_read)
        parts.append(res.records)

    if not cluster.servers[home].empty:
        ask(cluster.servers[home])
    first = np.concatenate(parts) if parts else np.empty(0, dtype=record_dtype(cluster.d))
    if len(first) >= k:
        radius = math.sqrt(float(((first["c"] - center) ** 2).sum(axis=1).max()))
    else:
        radius = math.inf
    for srv in cluster.servers:
        if srv.sid == home or srv.empty:
            continue
        if mindist(center, (srv.lo, srv.hi)) <= radius:
            ask(srv)
    recs = np.concatenate(parts) if parts else np.empty(0, dtype=record_dtype(cluster.d))
    d2 = ((recs["c"] - center) ** 2).sum(axis=1)
    order = np.lexsort((recs["id"], d2))[:k]
    res = QueryResult(recs[order], max(costs, default=0), 0, truncated_k=len(order) < k)
    res.distances = np.sqrt(d2[order])
    return res, touched


def cost_rows(cluster: Cluster) -> list:
    """CSV rows: server id, shard pages, build reads/writes, query reads; then a max row."""
    rows = [[s.sid, s.shard_pages, s.build_io.page_reads, s.build_io.page_writes, s.query_reads]
            for s in cluster.servers]
    rows.append(["max", max(r[1] for r in rows), max(r[2] for r in rows), max(r[3] for r in rows),
                 max(r[4] for r in rows)])
    rows.append(["coordinator", "", cluster.coordinator_io.page_reads, cluster.coordinator_io.page_writes, ""])
    return rows


COST_HEADER = ["server", "shard_pages", "build_reads", "build_writes", "query_reads"]
