"""Scan-based full bulk loading (FMBI).

The build works top-down in five steps over a buffer of ``M`` pages:

1. read ``alpha * C_B`` random pages (``alpha = M // C_B``) and split them in
   memory into a Major SplitTree with ``C_B`` subspaces of ``alpha`` pages;
2. stream the remaining pages into the subspaces, deactivating (flushing) a
   subspace whenever it needs a new page while the buffer is full;
3. refine every subspace that fits in the buffer with :meth:`generate_entries`
   (active ones first, their pages are already resident);
4. co-locate underflowed subspace nodes on shared pages (:meth:`merge_branches`);
5. bulk load every remaining (dense) subspace recursively.

All page traffic goes through one :class:`~mbindex.storage.BufferPool`; pages
a step holds in memory are pinned there, so the pool's pinned count *is* the
build's memory use.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import longest_dimension, record_dtype
from .index import Index, Leaf, Node, PageGroup, iter_leaf_entries, tree_height, write_group, write_leaf, write_node
from .splittree import SplitTree, SubspaceRef, build_splittree
from .storage import BufferPool, Dataset, PageFile, decode_data_page, encode_data_page, \
    new_index_file, resolve_capacities

log = logging.getLogger(__name__)

MAX_RECURSION = 32


class RecursionCapError(RuntimeError):
    pass


class PageSource:
    """The pages one bulk-load invocation consumes.

    ``pages`` is a list of ``(pid, count)``; ``count`` may be ``None`` when
    unknown. ``cap`` is the point capacity of a full source page.
    """

    def __init__(self, file: PageFile, pages: list, decode, cap: int):
        self.file = file
        self.pages = list(pages)
        self._decode = decode
        self.cap = cap

    @classmethod
    def from_dataset(cls, ds: Dataset) -> "PageSource":
        p = ds.num_pages
        last = ds.n - (p - 1) * ds.capacity
        pages = [(pid, ds.capacity) for pid in range(p - 1)] + [(p - 1, last)]
        return cls(ds.file, pages, ds.decode, ds.capacity)

    @classmethod
    def from_index_pages(cls, file: PageFile, pages: list, d: int, cap: int) -> "PageSource":
        dt = record_dtype(d)
        return cls(file, pages, lambda pid, data: decode_data_page(data, dt), cap)

    def __len__(self):
        return len(self.pages)

    def read(self, pool: BufferPool, pid: int, pin: bool = False) -> np.ndarray:
        return self._decode(pid, pool.read_page(self.file, pid, pin=pin))


class MemPage:
    """A pinned buffer frame being filled with points."""

    __slots__ = ("pid", "buf", "n")

    def __init__(self, pid: int, cap: int, dtype):
        self.pid = pid
        self.buf = np.empty(cap, dtype=dtype)
        self.n = 0

    @property
    def full(self) -> bool:
        return self.n == len(self.buf)

    @property
    def points(self) -> np.ndarray:
        return self.buf[:self.n]


@dataclass
class InvocationStats:
    depth: int
    source_pages: int
    alpha: int = 0
    direct: bool = False
    sparse: int = 0
    dense: int = 0
    # total entries stored on each Step-4 page (shared or not)
    unit_entries: list = field(default_factory=list)
    merges: int = 0
    subspace_counts: list = field(default_factory=list)

    def underflowed(self, branch_cap: int) -> int:
        return sum(1 for e in self.unit_entries if e <= branch_cap / 2)


class FmbiBuilder:
    """Stateful driver for one FMBI build (including its Step-5 recursions)."""

    def __init__(self, pool: BufferPool, out_file: PageFile, d: int, leaf_cap: int, branch_cap: int,
                 seed=None, max_depth: int = MAX_RECURSION):
        self.pool = pool
        self.file = out_file
        self.d = d
        self.cl = leaf_cap
        self.cb = branch_cap
        self.rng = np.random.default_rng(seed)
        self.max_depth = max_depth
        self.dtype = record_dtype(d)
        self.invocations: list = []
        self.deactivations = 0
        self._subspaces: list = []
        self._pending: list = []

    @property
    def M(self) -> int:
        return self.pool.capacity

    # -- memory pages ----------------------------------------------------
    def _alloc(self, sub: SubspaceRef) -> MemPage:
        if self.pool.free_frames <= 0:
            self._make_frame()
        mp = MemPage(self.pool.allocate_page(self.file, pin=True), self.cl, self.dtype)
        sub.mem.append(mp)
        return mp

    def _make_frame(self) -> None:
        """Free one frame when every frame is pinned (only reachable in corner cases)."""
        victims = [s for s in self._subspaces if s.mem]
        if not victims:
            raise RuntimeError("buffer exhausted")
        victim = max(victims, key=lambda s: len(s.mem))
        self._flush_all_pages(victim)
        victim.deactivate()

    def _flush_page(self, sub: SubspaceRef, mp: MemPage) -> None:
        pool, f = self.pool, self.file
        if mp.n == 0:
            pool.discard(f, mp.pid)
            f.free(mp.pid)
            return
        pool.write_page(f, mp.pid, encode_data_page(mp.points, f.page_size))
        pool.flush_page(f, mp.pid)
        pool.unpin(f, mp.pid)
        sub.disk.append((mp.pid, mp.n))

    def _flush_all_pages(self, sub: SubspaceRef) -> None:
        for mp in sub.mem:
            self._flush_page(sub, mp)
        sub.mem = []

    def _flush_full_pages(self, sub: SubspaceRef) -> None:
        keep = [mp for mp in sub.mem if not mp.full]
        for mp in sub.mem:
            if mp.full:
                self._flush_page(sub, mp)
        sub.mem = keep

    def _new_page(self, sub: SubspaceRef) -> MemPage:
        """Allocation policy of Step 2."""
        if not sub.active:
            # the single retained page is full: write it out and start another
            if sub.mem:
                self._flush_page(sub, sub.mem.pop())
            return self._alloc(sub)
        if self.pool.free_frames <= 0:
            self._flush_full_pages(sub)
            sub.deactivate()
            self.deactivations += 1
        return self._alloc(sub)

    def _append(self, sub: SubspaceRef, pts: np.ndarray) -> None:
        if not len(pts):
            return
        sub.grow(pts["c"])
        sub.count += len(pts)
        pos = 0
        while pos < len(pts):
            mp = sub.mem[-1] if sub.mem and not sub.mem[-1].full else None
            if mp is None:
                mp = self._new_page(sub)
                if mp is None:
                    # the subspace was split while making room; re-route the rest
                    self._pending.append((pts[pos:], []))
                    return
            take = min(self.cl - mp.n, len(pts) - pos)
            mp.buf[mp.n:mp.n + take] = pts[pos:pos + take]
            mp.n += take
            pos += take

    # -- Step 1 ----------------------------------------------------------
    def step1_initial_partition(self, source: PageSource, fanout: Optional[int] = None):
        """Sample ``alpha * C_B`` pages and build the Major SplitTree.

        Returns ``(tree, remaining_pages)``; every leaf of ``tree`` holds its
        seed pages pinned in ``leaf.mem``.
        """
        fanout = self.cb if fanout is None else fanout
        alpha = self.M // fanout
        if alpha < 1:
            raise ValueError(f"buffer of {self.M} pages must exceed the fanout {fanout}")
        k = alpha * fanout
        want = k * self.cl
        # source pages may hold more points than an index page (files without ids)
        k_src = -(-want // source.cap)
        if len(source) < k_src:
            raise ValueError(f"source has {len(source)} pages, Step 1 needs {k_src}")
        full = [i for i, (_, c) in enumerate(source.pages) if c == source.cap]
        pool_idx = full if len(full) >= k_src else list(range(len(source)))
        chosen = self.rng.choice(len(pool_idx), size=k_src, replace=False)
        chosen_set = {pool_idx[i] for i in chosen}
        blocks = [source.read(self.pool, source.pages[i][0]).copy() for i in sorted(chosen_set)]
        sample = np.concatenate(blocks)
        self._scan(sample)
        surplus = sample[want:]
        sample = sample[:want]
        strict = len(sample) == want
        tree = build_splittree(sample, fanout, alpha, self.cl, strict=strict)
        for leaf in tree.leaves:
            seed = leaf.seed
            leaf.seed = None
            leaf.grow(seed["c"])
            leaf.count = len(seed)
            for start in range(0, len(seed), self.cl):
                mp = self._alloc(leaf)
                chunk = seed[start:start + self.cl]
                mp.buf[:len(chunk)] = chunk
                mp.n = len(chunk)
        self._subspaces = list(tree.leaves)
        if len(surplus):
            self._route(tree, tree.leaves, surplus)
            self._drain(tree)
        remaining = [p for i, p in enumerate(source.pages) if i not in chosen_set]
        return tree, remaining

    # -- Step 2 ----------------------------------------------------------
    def step2_distribute(self, tree: SplitTree, source: PageSource, remaining: list) -> None:
        """Route every point of ``remaining`` to its subspace."""
        leaves = tree.leaves
        for pid, _ in remaining:
            blk = source.read(self.pool, pid)
            self._scan(blk)
            self._route(tree, leaves, blk)
            self._drain(tree)
        for sub in self._subspaces:
            if not sub.active and sub.mem:
                self._flush_all_pages(sub)

    def _drain(self, tree: SplitTree) -> None:
        while self._pending:
            blk, release = self._pending.pop(0)
            self._route(tree, tree.leaves, blk)
            for pid in release:
                self.pool.discard(self.file, pid)
                self.file.free(pid)

    def _route(self, tree: SplitTree, leaves: list, blk: np.ndarray) -> None:
        if not len(blk):
            return
        where = tree.locate_many(blk["c"])
        order = np.argsort(where, kind="stable")
        where = where[order]
        blk = blk[order]
        cuts = np.flatnonzero(np.diff(where)) + 1
        starts = np.concatenate(([0], cuts))
        ends = np.concatenate((cuts, [len(where)]))
        for s, e in zip(starts, ends):
            leaf = leaves[where[s]]
            if leaf.subtree is not None:
                # the subspace was split further (adaptive builds)
                self._route(leaf.subtree, leaf.subtree.leaves, blk[s:e])
            else:
                self._append(leaf, blk[s:e])

    def _scan(self, blk: np.ndarray) -> None:
        """Called with every block read from the source (adaptive builds answer queries here)."""

    # -- Step 3 ----------------------------------------------------------
    def step3_refine(self, tree: SplitTree, stats: Optional[InvocationStats] = None) -> None:
        """Refine sparse subspaces: active ones from memory, then inactive ones reloaded."""
        for sub in tree.leaves:
            if sub.active:
                self._refine_resident(sub)
                if stats:
                    stats.sparse += 1
        for sub in tree.leaves:
            if sub.active:
                continue
            if len(sub.disk) <= self.pool.free_frames:
                self._refine_reload(sub)
                if stats:
                    stats.sparse += 1
            elif stats:
                stats.dense += 1

    def _refine_resident(self, sub: SubspaceRef) -> None:
        pids = [mp.pid for mp in sub.mem]
        blk = np.concatenate([mp.points for mp in sub.mem]) if sub.mem else np.empty(0, self.dtype)
        sub.mem = []
        self._refine_block(sub, blk, pids)

    def _refine_reload(self, sub: SubspaceRef) -> None:
        dt = self.dtype
        pids = [pid for pid, _ in sub.disk]
        blocks = [decode_data_page(self.pool.read_page(self.file, pid, pin=True), dt) for pid in pids]
        blk = np.concatenate(blocks) if blocks else np.empty(0, dt)
        sub.disk = []
        self._refine_block(sub, blk, pids)

    def _refine_block(self, sub: SubspaceRef, blk: np.ndarray, pids: list) -> None:
        spare = list(pids)
        sub.result = self.generate_entries(blk, spare)
        for pid in pids:
            self.pool.unpin(self.file, pid)
        for pid in spare:
            self.pool.discard(self.file, pid)
            self.file.free(pid)

    def generate_entries(self, blk: np.ndarray, pids: Optional[list] = None) -> list:
        """Refine a sparse point set into at most ``C_B`` node entries.

        Post-order walk of an implicit minor SplitTree: ``ceil(n/C_L)`` pages
        are halved (``floor``/``ceil`` pages) on the longest dimension until
        single pages remain, which become leaf entries. Sibling results are
        concatenated while they fit in one node, otherwise each side is wrapped
        into a branch node. Leaf pages reuse ids popped from ``pids`` (front
        first) and fresh pages once it runs out.

        Returns a list of ``(lo, hi, child)`` entries.
        """
        if not len(blk):
            raise ValueError("generate_entries needs at least one point")
        pids = [] if pids is None else pids
        cl, cb = self.cl, self.cb

        def rec(b: np.ndarray) -> list:
            c = b["c"]
            lo, hi = c.min(axis=0), c.max(axis=0)
            pages = -(-len(b) // cl)
            if pages == 1:
                leaf = write_leaf(self.pool, self.file, b, pids.pop(0) if pids else None)
                return [(lo, hi, leaf)]
            dim = longest_dimension((lo, hi))
            b = b[np.argsort(c[:, dim], kind="stable")]
            cut = (pages // 2) * cl
            e1 = rec(b[:cut])
            e2 = rec(b[cut:])
            if len(e1) + len(e2) <= cb:
                return e1 + e2
            return [self._branch(e1), self._branch(e2)]

        return rec(blk)

    def _branch(self, entries: list):
        node = Node.from_entries(entries, self.d)
        write_node(self.pool, self.file, node, self.d)
        lo, hi = node.bounds()
        return (lo, hi, node)

    # -- Step 4 ----------------------------------------------------------
    def merge_branches(self, tree: SplitTree, candidate=None) -> list:
        """Bottom-up merge of underflowed units over a SplitTree, then write the subspace nodes.

        ``candidate(sub)`` returns the number of entries a subspace will occupy
        or ``None`` when it cannot take part (dense). By default only refined
        subspaces (``sub.node`` set) take part. A unit may also hold subspaces
        that are not refined yet (``sub.unref``); their entries are reserved on
        the shared page. Returns ``(PageGroup, entries)`` for every page written.
        """
        if candidate is None:
            def candidate(s):
                return len(s.node) if s.node is not None else None
        cb = self.cb
        groups: dict = {}

        def rec(ptr):
            if isinstance(ptr, SubspaceRef):
                k = candidate(ptr)
                if k is None:
                    return None
                unit = ([ptr], k)
                groups[id(ptr)] = unit
                return unit
            left = rec(ptr.left)
            right = rec(ptr.right)
            if left is None:
                return right
            if right is None:
                return left
            if left[1] + right[1] <= cb:
                merged = (left[0] + right[0], left[1] + right[1])
                for m in merged[0]:
                    groups[id(m)] = merged
                return merged
            # the smaller candidate keeps looking for a partner; ties go right
            return left if left[1] < right[1] else right

        rec(tree.root)
        written, seen = [], set()
        for sub in tree.leaves:
            unit = groups.get(id(sub))
            if unit is None or id(unit[0]) in seen:
                continue
            seen.add(id(unit[0]))
            members, total = unit
            nodes = [m.node for m in members if m.node is not None]
            pid = write_group(self.pool, self.file, nodes, self.d)
            grp = PageGroup(pid)
            grp.members = nodes
            for n in nodes:
                n.group = grp
            for m in members:
                if m.node is None:
                    m.unref.group = grp
                    grp.reserved[id(m.unref)] = candidate(m)
            written.append((grp, total))
        return written

    # -- Step 5 ----------------------------------------------------------
    def step5_dense(self, sub: SubspaceRef, depth: int) -> Node:
        """Bulk load a dense subspace as a dataset of its own."""
        src = PageSource.from_index_pages(self.file, sub.disk, self.d, self.cl)
        root = self._bulk_load(src, depth + 1)
        for pid, _ in sub.disk:
            self.pool.discard(self.file, pid)
            self.file.free(pid)
        sub.disk = []
        return root

    # -- orchestration ---------------------------------------------------
    def _load_direct(self, source: PageSource, stats: InvocationStats) -> Node:
        blocks = [source.read(self.pool, pid).copy() for pid, _ in source.pages]
        blk = np.concatenate(blocks)
        self._scan(blk)
        reuse = [pid for pid, _ in source.pages] if source.file is self.file else []
        entries = self.generate_entries(blk, reuse)
        for pid in reuse:
            self.pool.discard(self.file, pid)
            self.file.free(pid)
        root = Node.from_entries(entries, self.d)
        write_node(self.pool, self.file, root, self.d)
        stats.direct = True
        stats.unit_entries = [len(root)]
        return root

    def _bulk_load(self, source: PageSource, depth: int) -> Node:
        if depth > self.max_depth:
            raise RecursionCapError(f"Step-5 recursion exceeded {self.max_depth} levels "
                                    "(massively duplicated coordinates?)")
        stats = InvocationStats(depth, len(source))
        self.invocations.append(stats)
        if len(source) <= self.M or len(source) < (self.M // self.cb) * self.cb:
            return self._load_direct(source, stats)
        if self.M <= self.cb:
            raise ValueError(f"buffer of {self.M} pages must exceed C_B={self.cb}")
        stats.alpha = self.M // self.cb
        tree, remaining = self.step1_initial_partition(source)
        self.step2_distribute(tree, source, remaining)
        stats.subspace_counts = [s.count for s in tree.leaves]
        self.step3_refine(tree, stats)
        for sub in tree.leaves:
            sub.node = Node.from_entries(sub.result, self.d) if sub.result is not None else None
        written = self.merge_branches(tree)
        stats.unit_entries = [total for _, total in written]
        stats.merges = sum(len(g.members) - 1 for g, _ in written)
        entries = []
        for sub in tree.leaves:
            if sub.node is not None:
                child = sub.node
            else:
                child = self.step5_dense(sub, depth)
            lo, hi = child.bounds()
            entries.append((lo, hi, child))
        root = Node.from_entries(entries, self.d)
        write_node(self.pool, self.file, root, self.d)
        return root

    def bulk_load(self, source: PageSource) -> Node:
        return self._bulk_load(source, 0)


def bulk_load(dataset: Dataset, pool: BufferPool, out_path=None, leaf_cap: Optional[int] = None,
              branch_cap: Optional[int] = None, seed=None, max_depth: int = MAX_RECURSION) -> Index:
    """Build an FMBI over ``dataset`` and return the finished index.

    ``out_path=None`` keeps the index file in memory. Build I/O is available
    as ``index.build_io``; per-invocation statistics as
    ``index.build_info["invocations"]``.
    """
    page_size = dataset.page_size
    cl, cb = resolve_capacities(page_size, dataset.d, leaf_cap, branch_cap)
    out = new_index_file(out_path, dataset.d, page_size, dataset.with_ids, cl, cb)
    before = pool.io_stats()
    builder = FmbiBuilder(pool, out, dataset.d, cl, cb, seed, max_depth)
    root = builder.bulk_load(PageSource.from_dataset(dataset))
    pool.flush_all()
    idx = Index(root, out, pool, dataset.d, cl, cb, dataset.n, "fmbi", dataset.with_ids)
    idx.build_io = pool.io_stats() - before
    idx.build_info = {"invocations": builder.invocations, "deactivations": builder.deactivations}
    if out_path is not None:
        idx.save()
    return idx


@dataclass
class IndexStats:
    leaf_count: int
    perimeter: float
    area: float
    height: int
    nodes_per_level: list
    unrefined: int = 0
    points: int = 0

    def as_dict(self) -> dict:
        return {"leaf_count": self.leaf_count, "perimeter": self.perimeter, "area": self.area,
                "height": self.height, "nodes_per_level": list(self.nodes_per_level),
                "unrefined": self.unrefined, "points": self.points}


def leaf_boxes(root: Node):
    """``(lo, hi)`` arrays of every leaf entry under ``root`` (no I/O)."""
    los, his = [], []
    for lo, hi, _ in iter_leaf_entries(root):
        los.append(lo)
        his.append(hi)
    if not los:
        return np.empty((0, 0)), np.empty((0, 0))
    return np.array(los), np.array(his)


def index_stats(index: Index) -> IndexStats:
    """Leaf count, leaf perimeter/area totals, height and nodes per level.

    The perimeter of a ``d``-box is its total edge length divided by two,
    ``2**(d-1) * sum(extents)``, which is the usual ``2(w + h)`` in 2-D.
    Statistics are computed from the in-memory tree and cost no I/O.
    """
    root = index.root
    lo, hi = leaf_boxes(root)
    ext = hi - lo if len(lo) else np.empty((0, index.d))
    d = index.d
    perimeter = float(2 ** (d - 1) * ext.sum()) if len(ext) else 0.0
    area = float(np.prod(ext, axis=1).sum()) if len(ext) else 0.0
    levels, unrefined, points = [], 0, 0
    frontier = [root]
    while frontier:
        levels.append(len(frontier))
        nxt = []
        for node in frontier:
            for c in node.children:
                if isinstance(c, Node):
                    nxt.append(c)
                elif isinstance(c, Leaf):
                    points += c.count
                else:
                    unrefined += 1
                    points += c.count
        frontier = nxt
    return IndexStats(len(lo), perimeter, area, tree_height(root), levels, unrefined, points)
