"""Bottom-up R-tree bulk loaders used as baselines: STR and Hilbert packing.

Both rely on :func:`external_sort`, a textbook M-way merge sort whose page
traffic goes through the same buffer pool as everything else. The last merge
pass can stream straight into a leaf packer (``sink``) instead of writing a
sorted file that would only be read back once.
"""
from __future__ import annotations

import heapq
import math
from typing import Callable, Optional

import numpy as np

from .core import record_dtype
from .fmbi import PageSource
from .index import Index, Node, write_leaf, write_node
from .storage import (BufferPool, Dataset, PageFile, decode_data_page, encode_data_page, new_index_file,
                      resolve_capacities)

HILBERT_BITS = 16


# -- sorted output sinks -----------------------------------------------------

class RunWriter:
    """Packs a sorted record stream into full pages of a scratch file."""

    def __init__(self, pool: BufferPool, file: PageFile, cap: int, dtype):
        self.pool = pool
        self.file = file
        self.cap = cap
        self.buf = np.empty(cap, dtype=dtype)
        self.n = 0
        self.pages: list = []

    def __call__(self, blk: np.ndarray) -> None:
        pos = 0
        while pos < len(blk):
            take = min(self.cap - self.n, len(blk) - pos)
            self.buf[self.n:self.n + take] = blk[pos:pos + take]
            self.n += take
            pos += take
            if self.n == self.cap:
                self._emit()

    def _emit(self) -> None:
        pid = self.pool.allocate_page(self.file)
        self.pool.write_page(self.file, pid, encode_data_page(self.buf[:self.n], self.file.page_size))
        self.pages.append((pid, self.n))
        self.n = 0

    def close(self) -> list:
        if self.n:
            self._emit()
        return self.pages


class LeafPacker:
    """Packs a sorted record stream into leaf pages of an index file."""

    def __init__(self, pool: BufferPool, file: PageFile, cap: int, dtype):
        self.pool = pool
        self.file = file
        self.cap = cap
        self.buf = np.empty(cap, dtype=dtype)
        self.n = 0
        self.entries: list = []

    def __call__(self, blk: np.ndarray) -> None:
        pos = 0
        while pos < len(blk):
            take = min(self.cap - self.n, len(blk) - pos)
            self.buf[self.n:self.n + take] = blk[pos:pos + take]
            self.n += take
            pos += take
            if self.n == self.cap:
                self.close()

    def close(self) -> list:
        if self.n:
            blk = self.buf[:self.n]
            leaf = write_leaf(self.pool, self.file, blk)
            c = blk["c"]
            self.entries.append((c.min(axis=0), c.max(axis=0), leaf))
            self.n = 0
        return self.entries


# -- external merge sort -----------------------------------------------------

def external_sort(source: PageSource, pool: BufferPool, key: Callable, scratch: Optional[PageFile] = None,
                  out_cap: Optional[int] = None, sink: Optional[Callable] = None, fan_in: Optional[int] = None):
    """Stable external merge sort of ``source`` by ``key(block) -> 1-D array``.

    Run formation sorts ``M`` pages at a time; merge passes combine up to
    ``M - 1`` runs (one frame is the output page). Without ``sink`` the result
    is written to ``scratch`` and returned as a list of ``(pid, count)``;
    with ``sink`` the final pass calls ``sink(block)`` with consecutive
    sorted chunks and nothing is returned.
    """
    M = pool.capacity
    fan_in = max(2, M - 1) if fan_in is None else fan_in
    if scratch is None:
        scratch = PageFile(None, source.file.page_size)
    dtype = None
    out_cap = source.cap if out_cap is None else out_cap
    runs = []
    pages = source.pages
    for start in range(0, len(pages), M):
        chunk = [source.read(pool, pid).copy() for pid, _ in pages[start:start + M]]
        blk = np.concatenate(chunk)
        dtype = blk.dtype
        blk = blk[np.argsort(key(blk), kind="stable")]
        last = sink is not None and len(pages) <= M
        if last:
            sink(blk)
            return None
        w = RunWriter(pool, scratch, out_cap, dtype)
        w(blk)
        runs.append(w.close())
        pool.flush_all(scratch)
    if not runs:
        return [] if sink is None else None
    if len(runs) == 1 and sink is None:
        return runs[0]
    while True:
        final = len(runs) <= fan_in
        merged = []
        for g in range(0, len(runs), fan_in):
            group = runs[g:g + fan_in]
            if final and sink is not None:
                _merge(group, scratch, pool, key, dtype, sink)
                return None
            w = RunWriter(pool, scratch, out_cap, dtype)
            _merge(group, scratch, pool, key, dtype, w)
            merged.append(w.close())
            pool.flush_all(scratch)
        runs = merged
        if final:
            return runs[0]


def _merge(runs: list, file: PageFile, pool: BufferPool, key: Callable, dtype, emit: Callable) -> None:
    """Merge sorted runs of ``file`` into ``emit``, in (key, run, position) order.

    Pages are read in exactly the order a record-at-a-time merge would need
    them: a run's next page is fetched when its current page runs out, i.e.
    in order of each page's last key. Output is produced in batches of
    records that are already final.
    """
    R = len(runs)
    nxt = [0] * R
    bufs: list = [[] for _ in range(R)]
    keys: list = [[] for _ in range(R)]
    heap: list = []

    def load(r: int) -> None:
        pid, _ = runs[r][nxt[r]]
        nxt[r] += 1
        blk = decode_data_page(pool.read_page(file, pid), dtype).copy()
        pool.discard(file, pid)
        file.free(pid)
        k = key(blk)
        bufs[r].append(blk)
        keys[r].append(k)
        heapq.heappush(heap, (k[-1], r))

    def flush(bound) -> None:
        parts, kparts = [], []
        for r in range(R):
            if not bufs[r]:
                continue
            blk = np.concatenate(bufs[r]) if len(bufs[r]) > 1 else bufs[r][0]
            k = np.concatenate(keys[r]) if len(keys[r]) > 1 else keys[r][0]
            if bound is None:
                cut = len(k)
            else:
                bk, br = bound
                cut = int(np.searchsorted(k, bk, side="right" if r <= br else "left"))
            if cut:
                parts.append(blk[:cut])
                kparts.append(k[:cut])
            bufs[r] = [blk[cut:]] if cut < len(k) else []
            keys[r] = [k[cut:]] if cut < len(k) else []
        if parts:
            blk = np.concatenate(parts)
            emit(blk[np.argsort(np.concatenate(kparts), kind="stable")])

    for r in range(R):
        if runs[r]:
            load(r)
    pops = 0
    while heap:
        bk, r = heapq.heappop(heap)
        if nxt[r] < len(runs[r]):
            load(r)
        pops += 1
        if pops % R == 0:
            flush((bk, r))
    flush(None)


def sort_io_estimate(pages: int, buffer_pages: int) -> int:
    """Page I/O of a textbook external sort: ``2P * (1 + ceil(log_{M-1}(P/M)))``."""
    runs = math.ceil(pages / buffer_pages)
    passes = 1 + (math.ceil(math.log(runs, buffer_pages - 1)) if runs > 1 else 0)
    return 2 * pages * passes


# -- Hilbert curve -----------------------------------------------------------

def hilbert_transpose(x: np.ndarray, bits: int) -> np.ndarray:
    """Skilling's axes-to-transpose mapping for ``(n, d)`` integer grid coords."""
    X = np.array(x, dtype=np.uint64, copy=True)
    n, d = X.shape
    Q = 1 << (bits - 1)
    while Q > 1:
        P = np.uint64(Q - 1)
        q = np.uint64(Q)
        for i in range(d):
            m = (X[:, i] & q) != 0
            X[m, 0] ^= P
            nm = ~m
            t = (X[nm, 0] ^ X[nm, i]) & P
            X[nm, 0] ^= t
            X[nm, i] ^= t
        Q >>= 1
    for i in range(1, d):
        X[:, i] ^= X[:, i - 1]
    t = np.zeros(n, dtype=np.uint64)
    Q = 1 << (bits - 1)
    while Q > 1:
        m = (X[:, d - 1] & np.uint64(Q)) != 0
        t[m] ^= np.uint64(Q - 1)
        Q >>= 1
    X ^= t[:, None]
    return X


def hilbert_keys(grid: np.ndarray, bits: int = HILBERT_BITS) -> np.ndarray:
    """Hilbert rank of integer grid points as fixed-width big-endian byte strings.

    Byte strings of equal width compare like the integers they encode, so the
    result can be sorted and searched with ordinary numpy calls.
    """
    grid = np.asarray(grid)
    n, d = grid.shape
    X = hilbert_transpose(grid, bits)
    # rank bits, most significant first: bit b of axis 0, axis 1, ..., then bit b-1
    shifts = np.arange(bits - 1, -1, -1, dtype=np.uint64)
    bitmat = ((X[:, None, :] >> shifts[None, :, None]) & np.uint64(1)).astype(np.uint8)
    packed = np.packbits(bitmat.reshape(n, bits * d), axis=1)
    width = packed.shape[1]
    return np.ascontiguousarray(packed).view(f"S{width}").ravel()


def hilbert_rank(grid, bits: int = HILBERT_BITS) -> list:
    """Integer Hilbert ranks (convenience wrapper for small inputs)."""
    grid = np.atleast_2d(np.asarray(grid))
    nbits = grid.shape[1] * bits
    pad = -nbits % 8
    return [int.from_bytes(k.ljust((nbits + pad) // 8, b"\0"), "big") >> pad for k in hilbert_keys(grid, bits)]


class Quantizer:
    """Maps coordinates onto a ``2**bits`` grid per dimension over a box."""

    def __init__(self, lo: np.ndarray, hi: np.ndarray, bits: int = HILBERT_BITS):
        self.lo = np.asarray(lo, dtype=np.float64)
        ext = np.asarray(hi, dtype=np.float64) - self.lo
        self.scale = np.where(ext > 0, (1 << bits) / np.where(ext > 0, ext, 1.0), 0.0)
        self.top = (1 << bits) - 1
        self.bits = bits

    def __call__(self, coords: np.ndarray) -> np.ndarray:
        g = np.floor((coords - self.lo) * self.scale)
        return np.clip(g, 0, self.top).astype(np.uint64)

    def keys(self, coords: np.ndarray) -> np.ndarray:
        return hilbert_keys(self(coords), self.bits)


# -- loaders -----------------------------------------------------------------

def _setup(dataset: Dataset, out_path, leaf_cap, branch_cap):
    cl, cb = resolve_capacities(dataset.page_size, dataset.d, leaf_cap, branch_cap)
    out = new_index_file(out_path, dataset.d, dataset.page_size, dataset.with_ids, cl, cb)
    return cl, cb, out


def _finish(root, out, pool, dataset, cl, cb, method, out_path, before) -> Index:
    pool.flush_all()
    idx = Index(root, out, pool, dataset.d, cl, cb, dataset.n, method, dataset.with_ids)
    idx.build_io = pool.io_stats() - before
    if out_path is not None:
        idx.save()
    return idx


def _write_level(pool, out, d: int, groups: list) -> list:
    entries = []
    for g in groups:
        node = Node.from_entries(g, d)
        write_node(pool, out, node, d)
        lo, hi = node.bounds()
        entries.append((lo, hi, node))
    return entries


def _str_groups(entries: list, cap: int, d: int) -> list:
    """Sort-tile-recursive grouping of entries (by box centers) into nodes of ``cap``."""
    centers = np.array([(e[0] + e[1]) / 2 for e in entries])
    out: list = []

    def rec(idx: np.ndarray, dim: int):
        p = -(-len(idx) // cap)
        if dim == d - 1 or p <= 1:
            idx = idx[np.argsort(centers[idx, dim], kind="stable")]
            for s in range(0, len(idx), cap):
                out.append([entries[i] for i in idx[s:s + cap]])
            return
        idx = idx[np.argsort(centers[idx, dim], kind="stable")]
        slices = math.ceil(p ** (1.0 / (d - dim)))
        per = math.ceil(p / slices) * cap
        for s in range(0, len(idx), per):
            rec(idx[s:s + per], dim + 1)

    rec(np.arange(len(entries)), 0)
    return out


def str_bulk_load(dataset: Dataset, pool: BufferPool, out_path=None, leaf_cap: Optional[int] = None,
                  branch_cap: Optional[int] = None) -> Index:
    """Sort-Tile-Recursive packing.

    The data is externally sorted on axis 0 and cut into ``ceil(p**(1/d))``
    page-aligned slices; each slice is sorted on the next axis and sliced again
    with ``ceil(p_s**(1/r))`` for the ``r`` axes left, down to the last axis,
    where runs of ``C_L`` points become leaves. Upper levels repeat the same
    tiling on node-box centers in memory.
    """
    cl, cb, out = _setup(dataset, out_path, leaf_cap, branch_cap)
    d = dataset.d
    before = pool.io_stats()
    scratch = PageFile(None, dataset.page_size)
    dtype = record_dtype(d)
    packer = LeafPacker(pool, out, cl, dtype)
    src = PageSource.from_dataset(dataset)

    def axis_key(dim):
        return lambda blk: blk["c"][:, dim]

    def tile(source: PageSource, dim: int):
        p = -(-sum(c for _, c in source.pages) // cl)
        if dim == d - 1:
            external_sort(source, pool, axis_key(dim), scratch, cl, sink=packer)
            packer.close()
            return
        pages = external_sort(source, pool, axis_key(dim), scratch, cl)
        slices = math.ceil(p ** (1.0 / (d - dim)))
        per = math.ceil(p / slices)
        for s in range(0, len(pages), per):
            sub = PageSource(scratch, pages[s:s + per], lambda pid, data: decode_data_page(data, dtype), cl)
            tile(sub, dim + 1)
        for pid, _ in pages:
            pool.discard(scratch, pid)

    tile(src, 0)
    pool.drop_file(scratch)
    entries = packer.entries
    while len(entries) > 1:
        entries = _write_level(pool, out, d, _str_groups(entries, cb, d))
    root = entries[0][2] if isinstance(entries[0][2], Node) else _write_level(pool, out, d, [entries])[0][2]
    return _finish(root, out, pool, dataset, cl, cb, "str", out_path, before)


def hilbert_bulk_load(dataset: Dataset, pool: BufferPool, out_path=None, leaf_cap: Optional[int] = None,
                      branch_cap: Optional[int] = None, bits: int = HILBERT_BITS) -> Index:
    """Hilbert packing: sort points by Hilbert rank, cut into full leaves.

    Ranks use a ``2**bits`` grid per axis over the dataset's bounding box,
    which costs one extra scan. Upper levels group consecutive node boxes in
    Hilbert order of their centers.
    """
    cl, cb, out = _setup(dataset, out_path, leaf_cap, branch_cap)
    d = dataset.d
    before = pool.io_stats()
    src = PageSource.from_dataset(dataset)
    lo = np.full(d, np.inf)
    hi = np.full(d, -np.inf)
    for pid, _ in src.pages:
        c = src.read(pool, pid)["c"]
        lo = np.minimum(lo, c.min(axis=0))
        hi = np.maximum(hi, c.max(axis=0))
    quant = Quantizer(lo, hi, bits)
    scratch = PageFile(None, dataset.page_size)
    packer = LeafPacker(pool, out, cl, record_dtype(d))
    external_sort(src, pool, lambda blk: quant.keys(blk["c"]), scratch, cl, sink=packer)
    packer.close()
    pool.drop_file(scratch)
    entries = packer.entries
    while len(entries) > 1:
        centers = np.array([(e[0] + e[1]) / 2 for e in entries])
        order = np.argsort(quant.keys(centers), kind="stable")
        ordered = [entries[i] for i in order]
        entries = _write_level(pool, out, d, [ordered[s:s + cb] for s in range(0, len(ordered), cb)])
    root = entries[0][2] if isinstance(entries[0][2], Node) else _write_level(pool, out, d, [entries])[0][2]
    return _finish(root, out, pool, dataset, cl, cb, "hilbert", out_path, before)
