"""Adaptive bulk loading (AMBI): the index is built as queries arrive.

The first query runs Steps 1 and 2 of the full build while answering itself
from the scan. Buffer pressure is relieved by deactivating the active
subspace farthest from the query; when only subspaces that may hold results
are left, the farthest of them is split further with a minor SplitTree
instead. Whatever is still active at the end is refined; everything else
stays an :class:`~mbindex.index.Unrefined` page list until a later query
reaches it.

Inserts and deletes are lazy: inserts append to a leaf (chaining an overflow
page when it is full) and deletes rewrite the page in place. Affected leaves
are repacked the next time a query visits their parent.
"""
from __future__ import annotations

import math
from typing import Optional

import numpy as np

from .core import MBB, KnnQuery, WindowQuery, box_distance, mindist, record_dtype
from .fmbi import FmbiBuilder, PageSource
from .index import Index, Leaf, Node, Unrefined, iter_nodes, rewrite, write_group, write_leaf, write_node
from .query import QueryResult, knn_query, sort_records, window_query
from .splittree import SplitTree, SubspaceRef, build_splittree
from .storage import BufferPool, Dataset, IoStats, decode_data_page, encode_data_page, new_index_file, \
    resolve_capacities


class AmbiBuilder(FmbiBuilder):
    """Steps 1, 2 and 4 driven by one query (used for the first query and dense refinements)."""

    def __init__(self, pool, out_file, d, leaf_cap, branch_cap, seed, query, collect: bool = True):
        super().__init__(pool, out_file, d, leaf_cap, branch_cap, seed)
        self.query = query
        self.collect = collect
        self.found: list = []
        self.best = np.empty(0, dtype=record_dtype(d))
        self.best_d2 = np.empty(0)
        self.max_id = -1
        self.splits = 0
        self.refined = 0
        if isinstance(query, WindowQuery):
            self._wlo, self._whi = query.rect.as_arrays()
        else:
            self._center = np.asarray(query.center.coords)

    # -- answering from the scan -----------------------------------------
    def _scan(self, blk: np.ndarray) -> None:
        if not len(blk):
            return
        self.max_id = max(self.max_id, int(blk["id"].max()))
        c = blk["c"]
        if isinstance(self.query, WindowQuery):
            if self.collect:
                m = np.all((c >= self._wlo) & (c <= self._whi), axis=1)
                if m.any():
                    self.found.append(blk[m].copy())
            return
        d2 = ((c - self._center) ** 2).sum(axis=1)
        allr = np.concatenate((self.best, blk))
        alld = np.concatenate((self.best_d2, d2))
        keep = np.lexsort((allr["id"], alld))[:self.query.k]
        self.best, self.best_d2 = allr[keep], alld[keep]

    def kth_distance(self) -> float:
        if len(self.best) < self.query.k:
            return math.inf
        return math.sqrt(self.best_d2[-1])

    def result(self, with_ids: bool) -> QueryResult:
        if isinstance(self.query, WindowQuery):
            recs = np.concatenate(self.found) if self.found else np.empty(0, dtype=record_dtype(self.d))
            return QueryResult(sort_records(recs, with_ids))
        res = QueryResult(self.best.copy(), truncated_k=len(self.best) < self.query.k)
        res.distances = np.sqrt(self.best_d2)
        return res

    # -- deactivation heap ------------------------------------------------
    def _key(self, sub: SubspaceRef) -> float:
        if isinstance(self.query, WindowQuery):
            return box_distance(sub.lo, sub.hi, self._wlo, self._whi)
        return mindist(self._center, (sub.lo, sub.hi))

    def _qualified(self, key: float) -> bool:
        if isinstance(self.query, WindowQuery):
            return key == 0.0
        return key <= self.kth_distance()

    def _new_page(self, sub: SubspaceRef):
        while True:
            if sub.subtree is not None:
                return None
            if not sub.active and sub.mem:
                self._flush_page(sub, sub.mem.pop())
            if self.pool.free_frames > 0:
                return self._alloc(sub)
            self._relieve()

    def _relieve(self) -> None:
        """Free at least one frame, or change the set of active subspaces."""
        active = [s for s in self._subspaces if s.active]
        if active:
            keys = [self._key(s) for s in active]
            # farthest first; ties release the larger subspace
            i = max(range(len(active)), key=lambda j: (keys[j], active[j].num_pages, -j))
            top = active[i]
            full = sum(1 for mp in top.mem if mp.full)
            if self._qualified(keys[i]) and full >= self.cb:
                self._split(top)
            else:
                self._flush_full_pages(top)
                top.deactivate()
                self.deactivations += 1
            return
        holders = [s for s in self._subspaces if s.mem]
        if not holders:
            raise RuntimeError("buffer exhausted: nothing left to flush")
        victim = max(holders, key=lambda s: s.mem[-1].n)
        self._flush_page(victim, victim.mem.pop())

    def _split(self, sub: SubspaceRef) -> None:
        """Replace a qualified subspace by ``C_B`` children of ``beta`` pages each."""
        full = [mp for mp in sub.mem if mp.full]
        beta = len(full) // self.cb
        use = full[:beta * self.cb]
        used = {id(mp) for mp in use}
        rest = [mp for mp in sub.mem if id(mp) not in used]
        pts = np.concatenate([mp.points for mp in use])
        minor = build_splittree(pts, self.cb, beta, self.cl, strict=True)
        frames = iter(use)
        for leaf in minor.leaves:
            seed, leaf.seed = leaf.seed, None
            leaf.grow(seed["c"])
            leaf.count = len(seed)
            for start in range(0, len(seed), self.cl):
                mp = next(frames)
                chunk = seed[start:start + self.cl]
                mp.buf[:len(chunk)] = chunk
                mp.n = len(chunk)
                leaf.mem.append(mp)
        sub.mem = []
        sub.subtree = minor
        sub.active = False
        self._subspaces.remove(sub)
        self._subspaces.extend(minor.leaves)
        if rest:
            self._pending.append((np.concatenate([mp.points for mp in rest]), [mp.pid for mp in rest]))
        self.splits += 1

    # -- one adaptive pass ------------------------------------------------
    def _candidate(self, s: SubspaceRef):
        if s.node is not None:
            return len(s.node)
        pages = len(s.unref.pages)
        # a sparse subspace of P <= C_B pages always refines into P leaf entries
        return pages if pages <= self.cb else None

    def _assemble(self, tree: SplitTree) -> list:
        for leaf in tree.leaves:
            if leaf.subtree is not None:
                leaf.node = Node.from_entries(self._assemble(leaf.subtree), self.d)
        self.merge_branches(tree, candidate=self._candidate)
        entries = []
        for leaf in tree.leaves:
            if leaf.node is not None:
                lo, hi = leaf.node.bounds()
                entries.append((lo, hi, leaf.node))
            else:
                entries.append((leaf.lo, leaf.hi, leaf.unref))
        return entries

    def adaptive_pass(self, source: PageSource) -> Node:
        """Steps 1, 2, refinement of active subspaces and Step 4; returns the root."""
        if len(source) <= self.M:
            return self._bulk_load(source, 0)
        tree, remaining = self.step1_initial_partition(source)
        self.step2_distribute(tree, source, remaining)
        for sub in self._subspaces:
            if sub.active:
                self._refine_resident(sub)
                sub.node = Node.from_entries(sub.result, self.d)
                self.refined += 1
            else:
                sub.unref = Unrefined(sub.disk)
        root = Node.from_entries(self._assemble(tree), self.d)
        write_node(self.pool, self.file, root, self.d)
        return root


class AmbiIndex(Index):
    """An adaptively built index over ``dataset``.

    Nothing is read until the first call to :meth:`query`. ``log`` keeps one
    record per query: subspaces refined, pages reloaded, heap evictions.
    """

    def __init__(self, dataset: Dataset, pool: BufferPool, out_path=None, leaf_cap: Optional[int] = None,
                 branch_cap: Optional[int] = None, seed=None):
        cl, cb = resolve_capacities(dataset.page_size, dataset.d, leaf_cap, branch_cap)
        out = new_index_file(out_path, dataset.d, dataset.page_size, dataset.with_ids, cl, cb)
        super().__init__(None, out, pool, dataset.d, cl, cb, dataset.n, "ambi", dataset.with_ids)
        self.dataset = dataset
        self.rng = np.random.default_rng(seed)
        self.log: list = []
        self.build_io = IoStats()
        self.total_io = IoStats()
        self._cur: dict = {}
        self._next_id = 0
        self._helper = FmbiBuilder(pool, out, self.d, cl, cb, self.rng)

    @property
    def initialized(self) -> bool:
        return self.root is not None

    # -- queries ----------------------------------------------------------
    def query(self, q) -> QueryResult:
        self._cur = {"query": len(self.log), "refined": 0, "pages_reloaded": 0, "evictions": 0}
        start = self.pool.io_stats()
        if self.root is None:
            res = self._first_query(q)
        elif isinstance(q, WindowQuery):
            res = window_query(self, q)
        elif isinstance(q, KnnQuery):
            res = knn_query(self, q)
        else:
            raise TypeError(f"unsupported query {q!r}")
        # refinement is synchronous: its writes belong to this query
        self.pool.flush_all(self.file)
        io = self.pool.io_stats() - start
        res.io = io
        res.pages_read = io.page_reads
        self.total_io = self.total_io + io
        self.log.append(dict(self._cur))
        return res

    def window(self, lo, hi) -> QueryResult:
        return self.query(WindowQuery(MBB(tuple(lo), tuple(hi))))

    def _first_query(self, q) -> QueryResult:
        b = AmbiBuilder(self.pool, self.file, self.d, self.leaf_cap, self.branch_cap, self.rng, q)
        src = PageSource.from_dataset(self.dataset)
        self.root = b.adaptive_pass(src)
        self._next_id = b.max_id + 1
        self._cur.update(refined=b.refined, pages_reloaded=0, evictions=b.deactivations)
        self.pool.flush_all(self.file)
        res = b.result(self.with_ids)
        res.nodes_visited = 0
        return res

    # -- refinement hooks used by the shared traversal ----------------------
    def expand(self, parent: Node, i: int, query) -> None:
        u = parent.children[i]
        npages = len(u.pages)
        self._cur["refined"] = self._cur.get("refined", 0) + 1
        self._cur["pages_reloaded"] = self._cur.get("pages_reloaded", 0) + npages
        if npages <= self.pool.free_frames:
            node = self._refine_sparse(u)
            self._place(u, node)
        else:
            b = AmbiBuilder(self.pool, self.file, self.d, self.leaf_cap, self.branch_cap, self.rng, query,
                            collect=False)
            src = PageSource.from_index_pages(self.file, u.pages, self.d, self.leaf_cap)
            node = b.adaptive_pass(src)
            for pid, _ in u.pages:
                self.pool.discard(self.file, pid)
                self.file.free(pid)
            if u.group is not None:
                u.group.reserved.pop(id(u), None)
            self._cur["evictions"] = self._cur.get("evictions", 0) + b.deactivations
        lo, hi = node.bounds()
        parent.replace(i, lo, hi, node)
        rewrite(self.pool, self.file, parent, self.d)

    def _refine_sparse(self, u: Unrefined) -> Node:
        pids = [pid for pid, _ in u.pages]
        blocks = [decode_data_page(self.pool.read_page(self.file, pid, pin=True), self.dtype) for pid in pids]
        blk = np.concatenate(blocks)
        spare = list(pids)
        entries = self._helper.generate_entries(blk, spare) if len(blk) else []
        for pid in pids:
            self.pool.unpin(self.file, pid)
        for pid in spare:
            self.pool.discard(self.file, pid)
            self.file.free(pid)
        return Node.from_entries(entries, self.d)

    def _place(self, u: Unrefined, node: Node) -> None:
        grp = u.group
        if grp is not None:
            grp.reserved.pop(id(u), None)
            if grp.entry_total() + len(node) <= self.branch_cap:
                grp.members.append(node)
                node.group = grp
                write_group(self.pool, self.file, grp.members, self.d, grp.pid)
                return
        write_node(self.pool, self.file, node, self.d)

    def needs_refresh(self, node: Node) -> bool:
        return any(isinstance(c, Leaf) and (c.overflow or c.stale) for c in node.children)

    def refresh(self, node: Node, query) -> Node:
        """Repack the leaf children of ``node`` after lazy updates."""
        keep, blocks, pids = [], [], []
        for i, c in enumerate(node.children):
            if isinstance(c, Leaf):
                blocks.append(self.read_leaf(c).copy())
                pids.extend(c.pages)
            else:
                keep.append((node.lo[i], node.hi[i], c))
        blk = np.concatenate(blocks) if blocks else np.empty(0, dtype=self.dtype)
        spare = list(pids)
        entries = self._helper.generate_entries(blk, spare) if len(blk) else []
        for pid in spare:
            self.pool.discard(self.file, pid)
            self.file.free(pid)
        # a shared page only has room for what its co-residents leave over;
        # surplus leaves go one level down so no page address changes
        room = self.branch_cap
        if node.group is not None:
            room -= node.group.entry_total() - len(node)
        cb = self.branch_cap
        while len(keep) + len(entries) > room:
            entries = [self._helper._branch(entries[i:i + cb]) for i in range(0, len(entries), cb)]
        fresh = Node.from_entries(keep + entries, self.d)
        node.lo, node.hi, node.children = fresh.lo, fresh.hi, fresh.children
        rewrite(self.pool, self.file, node, self.d)
        self._cur["refined"] = self._cur.get("refined", 0) + 1
        return node

    # -- lazy updates -----------------------------------------------------
    def _record(self, coords, pid) -> np.ndarray:
        p = np.asarray(coords, dtype=np.float64)
        if p.shape != (self.d,):
            raise ValueError(f"point must have dimensionality {self.d}")
        if not np.all(np.isfinite(p)):
            raise ValueError("point coordinates must be finite")
        rec = np.empty(1, dtype=self.dtype)
        rec["c"][0] = p
        rec["id"][0] = pid
        return rec

    def insert(self, coords, id: Optional[int] = None) -> int:
        """Insert a point; returns its id (auto-assigned when ``id`` is None)."""
        if self.root is None:
            raise RuntimeError("the adaptive index is initialized by its first query; run one before updating")
        if id is None:
            id = self._next_id
        self._next_id = max(self._next_id, int(id) + 1)
        rec = self._record(coords, id)
        p = rec["c"][0]
        node = self.root
        while True:
            self.visit_node(node)
            if not len(node):
                leaf = write_leaf(self.pool, self.file, rec)
                fresh = Node.from_entries([(p.copy(), p.copy(), leaf)], self.d)
                node.lo, node.hi, node.children = fresh.lo, fresh.hi, fresh.children
                rewrite(self.pool, self.file, node, self.d)
                break
            inside = np.flatnonzero(np.all((node.lo <= p) & (p <= node.hi), axis=1))
            if len(inside):
                i = int(inside[0])
            else:
                r = np.maximum(node.lo - p, 0.0) + np.maximum(p - node.hi, 0.0)
                i = int(np.argmin((r * r).sum(axis=1)))
                node.lo[i] = np.minimum(node.lo[i], p)
                node.hi[i] = np.maximum(node.hi[i], p)
                rewrite(self.pool, self.file, node, self.d)
            child = node.children[i]
            if isinstance(child, Node):
                node = child
                continue
            if isinstance(child, Leaf):
                self._append_leaf(child, rec)
            else:
                self._append_unrefined(child, rec)
            break
        self.n += 1
        self.pool.flush_all(self.file)
        return int(id)

    def _append_leaf(self, leaf: Leaf, rec: np.ndarray) -> None:
        last = leaf.pages[-1]
        blk = decode_data_page(self.pool.read_page(self.file, last), self.dtype)
        if len(blk) < self.leaf_cap:
            self.pool.write_page(self.file, last, encode_data_page(np.concatenate((blk, rec)), self.file.page_size))
        else:
            pid = self.pool.allocate_page(self.file)
            self.pool.write_page(self.file, pid, encode_data_page(rec, self.file.page_size))
            leaf.overflow.append(pid)
        leaf.count += 1

    def _append_unrefined(self, u: Unrefined, rec: np.ndarray) -> None:
        pid, cnt = u.pages[-1]
        if cnt < self.leaf_cap:
            blk = decode_data_page(self.pool.read_page(self.file, pid), self.dtype)
            self.pool.write_page(self.file, pid, encode_data_page(np.concatenate((blk, rec)), self.file.page_size))
            u.pages[-1] = (pid, cnt + 1)
        else:
            pid = self.pool.allocate_page(self.file)
            self.pool.write_page(self.file, pid, encode_data_page(rec, self.file.page_size))
            u.pages.append((pid, 1))
        u.stale = True

    def delete(self, coords, id: Optional[int] = None) -> bool:
        """Remove one point equal to ``coords`` (and ``id``, if given)."""
        if self.root is None:
            raise RuntimeError("the adaptive index is initialized by its first query; run one before updating")
        p = self._record(coords, 0)["c"][0]
        stack = [self.root]
        while stack:
            node = stack.pop()
            self.visit_node(node)
            if not len(node):
                continue
            for i in np.flatnonzero(np.all((node.lo <= p) & (p <= node.hi), axis=1)):
                child = node.children[int(i)]
                if isinstance(child, Node):
                    stack.append(child)
                    continue
                pages = child.pages if isinstance(child, Leaf) else [pid for pid, _ in child.pages]
                for j, pid in enumerate(pages):
                    blk = decode_data_page(self.pool.read_page(self.file, pid), self.dtype)
                    m = np.all(blk["c"] == p, axis=1)
                    if id is not None:
                        m &= blk["id"] == np.uint64(id)
                    hit = np.flatnonzero(m)
                    if not len(hit):
                        continue
                    rest = np.delete(blk, hit[0])
                    self.pool.write_page(self.file, pid, encode_data_page(rest, self.file.page_size))
                    if isinstance(child, Leaf):
                        child.count -= 1
                    else:
                        child.pages[j] = (pid, len(rest))
                    child.stale = True
                    self.n -= 1
                    self.pool.flush_all(self.file)
                    return True
        return False

    def refined_fraction(self) -> float:
        """Share of points already stored in refined leaves."""
        if self.root is None:
            return 0.0
        unref = sum(c.count for n in iter_nodes(self.root) for c in n.children if isinstance(c, Unrefined))
        return 1.0 - unref / self.n if self.n else 1.0
