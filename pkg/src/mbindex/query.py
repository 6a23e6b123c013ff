"""Exact window and k-NN search over any index tree in the package.

Both searches go through the index's hooks (``expand``, ``needs_refresh``,
``refresh``), so the same code serves static indexes and the adaptive one,
whose unrefined subspaces are refined the moment a query reaches them.
"""
from __future__ import annotations

import heapq
import itertools
import json
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .core import MBB, KnnQuery, Point, WindowQuery, intersects_many, record_dtype
from .index import Index, Leaf, Node, Unrefined
from .storage import IoStats


@dataclass
class QueryResult:
    """Qualifying records plus the query's I/O.

    ``records`` is a structured block (``c`` coordinates, ``id``).
    ``pages_read`` counts buffer misses; ``io`` also includes writes made by
    refinement work the query triggered.
    """

    records: np.ndarray
    pages_read: int = 0
    nodes_visited: int = 0
    io: IoStats = field(default_factory=IoStats)
    truncated_k: bool = False
    distances: np.ndarray = None

    @property
    def ids(self) -> np.ndarray:
        return self.records["id"]

    @property
    def coords(self) -> np.ndarray:
        return self.records["c"]

    @property
    def points(self) -> list:
        return [Point(tuple(r["c"]), int(r["id"])) for r in self.records]

    def __len__(self):
        return len(self.records)


Query = Union[WindowQuery, KnnQuery]


def _window_arrays(w, d: int):
    if isinstance(w, WindowQuery):
        w = w.rect
    if isinstance(w, MBB):
        lo, hi = w.as_arrays()
    else:
        lo, hi = (np.asarray(v, dtype=np.float64) for v in w)
    if lo.shape != (d,) or hi.shape != (d,):
        raise ValueError(f"window must have dimensionality {d}")
    if np.any(lo > hi):
        raise ValueError("invalid window: lo > hi on some axis")
    return lo, hi


def sort_records(blk: np.ndarray, with_ids: bool = True) -> np.ndarray:
    """Result order: by id, or lexicographically by coordinates without ids."""
    if with_ids:
        return blk[np.argsort(blk["id"], kind="stable")]
    c = blk["c"]
    keys = [blk["id"]] + [c[:, j] for j in range(c.shape[1] - 1, -1, -1)]
    return blk[np.lexsort(keys)]


def _sq_dist(q: np.ndarray, c: np.ndarray) -> np.ndarray:
    return ((c - q) ** 2).sum(axis=1)


def _sq_mindist(q: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    r = np.maximum(lo - q, 0.0) + np.maximum(q - hi, 0.0)
    return (r * r).sum(axis=1)


def _resolve(index: Index, node: Node, i: int, query):
    child = node.children[i]
    if isinstance(child, Unrefined):
        index.expand(node, i, query)
        child = node.children[i]
    return child


def window_query(index: Index, w) -> QueryResult:
    """All points inside the closed window ``w`` (a WindowQuery, MBB or ``(lo, hi)``)."""
    wlo, whi = _window_arrays(w, index.d)
    query = WindowQuery(MBB(tuple(wlo), tuple(whi)))
    pool = index.pool
    start = pool.io_stats()
    out: list = []
    visited = 0
    root = index.root
    if len(root):
        rlo, rhi = root.bounds()
        if not (np.all(rlo <= whi) and np.all(wlo <= rhi)):
            root = None
    else:
        root = None

    def visit(node: Node):
        nonlocal visited
        if index.needs_refresh(node):
            node = index.refresh(node, query)
        index.visit_node(node)
        visited += 1
        hits = np.flatnonzero(intersects_many(node.lo, node.hi, wlo, whi))
        for i in hits:
            child = _resolve(index, node, int(i), query)
            if isinstance(child, Leaf):
                blk = index.read_leaf(child)
                c = blk["c"]
                m = np.all((c >= wlo) & (c <= whi), axis=1)
                if m.any():
                    out.append(blk[m])
            elif isinstance(child, Node):
                if np.all(node.lo[i] <= whi) and np.all(wlo <= node.hi[i]):
                    visit(child)

    if root is not None:
        visit(root)
    recs = np.concatenate(out) if out else np.empty(0, dtype=record_dtype(index.d))
    io = pool.io_stats() - start
    return QueryResult(sort_records(recs, index.with_ids), io.page_reads, visited, io)


def knn_query(index: Index, q, k: int = None) -> QueryResult:
    """The ``k`` nearest points to ``q`` (best-first; distance ties by id).

    ``q`` is a KnnQuery, a Point or a coordinate vector (then ``k`` is
    required). ``k > N`` returns every point with ``truncated_k`` set.
    """
    if isinstance(q, KnnQuery):
        center, k = np.asarray(q.center.coords), int(q.k)
    else:
        center = np.asarray(getattr(q, "coords", q), dtype=np.float64)
        if k is None or int(k) < 1:
            raise ValueError("k must be >= 1")
        k = int(k)
    if center.shape != (index.d,):
        raise ValueError(f"query point must have dimensionality {index.d}")
    query = KnnQuery(Point(tuple(center)), k)
    pool = index.pool
    start = pool.io_stats()
    tie = itertools.count()
    heap: list = []
    found: list = []
    visited = 0

    def push_node(node: Node):
        nonlocal visited
        if index.needs_refresh(node):
            node = index.refresh(node, query)
        index.visit_node(node)
        visited += 1
        dist = _sq_mindist(center, node.lo, node.hi)
        for i, dv in enumerate(dist):
            # nodes sort before points at equal distance
            heapq.heappush(heap, (float(dv), 0, 0, next(tie), node, i))

    if len(index.root):
        push_node(index.root)
    while heap and len(found) < k:
        dv, kind, rid, _, a, b = heapq.heappop(heap)
        if kind == 1:
            found.append((dv, a))
            continue
        child = _resolve(index, a, b, query)
        if isinstance(child, Node):
            push_node(child)
        elif isinstance(child, Leaf):
            blk = index.read_leaf(child)
            dist = _sq_dist(center, blk["c"])
            for j in range(len(blk)):
                heapq.heappush(heap, (float(dist[j]), 1, int(blk["id"][j]), next(tie), blk[j], None))
    recs = np.array([r for _, r in found], dtype=record_dtype(index.d)) if found \
        else np.empty(0, dtype=record_dtype(index.d))
    io = pool.io_stats() - start
    res = QueryResult(recs, io.page_reads, visited, io, truncated_k=len(found) < k)
    res.distances = np.sqrt(np.array([dv for dv, _ in found], dtype=np.float64))
    return res


def run_query(index, q: Query) -> QueryResult:
    """Dispatch on query type; adaptive indexes use their own ``query`` method."""
    runner = getattr(index, "query", None)
    if runner is not None:
        return runner(q)
    if isinstance(q, WindowQuery):
        return window_query(index, q)
    if isinstance(q, KnnQuery):
        return knn_query(index, q)
    raise TypeError(f"unsupported query {q!r}")


# -- workload files ----------------------------------------------------------

def parse_query(obj: dict) -> Query:
    kind = obj.get("type")
    if kind == "window":
        return WindowQuery(MBB(tuple(obj["lo"]), tuple(obj["hi"])))
    if kind == "knn":
        return KnnQuery(Point(tuple(obj["center"])), int(obj["k"]))
    raise ValueError(f"unknown query type {kind!r}")


def query_to_json(q: Query) -> dict:
    if isinstance(q, WindowQuery):
        return {"type": "window", "lo": list(q.rect.lo), "hi": list(q.rect.hi)}
    return {"type": "knn", "center": list(q.center.coords), "k": q.k}


def load_workload(path) -> list:
    queries = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                queries.append(parse_query(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad query: {exc}") from exc
    return queries


def save_workload(path, queries) -> None:
    with open(path, "w") as fh:
        for q in queries:
            fh.write(json.dumps(query_to_json(q)) + "\n")
