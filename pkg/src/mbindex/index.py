"""In-memory index tree shared by FMBI, AMBI and the R-tree baselines.

A built index is a tree of :class:`Node` objects mirroring what is on disk.
Each node records the page (and slot, when several nodes share a page) that
holds its serialized entries, and every traversal charges a read of that page
through the buffer pool. Leaf data is always read from the pages themselves.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import record_dtype
from .storage import (
    INDEX_HEADER_SIZE, NODE_HEADER, TRAILER_SIZE, BufferPool, PageFile, decode_data_page,
    encode_data_page, new_index_file, pack_trailer, parse_index_header, unpack_trailer,
)

METHODS = {"fmbi": 1, "ambi": 2, "str": 3, "hilbert": 4}
METHOD_NAMES = {v: k for k, v in METHODS.items()}

_LEAF_BIT = 1 << 63
_UNREFINED_REF = (1 << 63) - 1
_SLOT_SHIFT = 40
_PID_MASK = (1 << _SLOT_SHIFT) - 1


class Leaf:
    """A data page; ``overflow`` chains extra pages added by lazy inserts."""

    __slots__ = ("pid", "count", "overflow", "stale")

    def __init__(self, pid: int, count: int):
        self.pid = pid
        self.count = count
        self.overflow: list = []
        self.stale = False

    @property
    def pages(self) -> list:
        return [self.pid] + self.overflow

    def __repr__(self):
        return f"Leaf(pid={self.pid}, count={self.count})"


class Unrefined:
    """A subspace AMBI has not refined yet: a bare list of ``(pid, count)`` pages."""

    __slots__ = ("pages", "stale", "group")

    def __init__(self, pages: list):
        self.pages = list(pages)
        self.stale = False
        # shared page holding a reserved slot for this subspace, if any
        self.group = None

    @property
    def count(self) -> int:
        return sum(c for _, c in self.pages)

    def __repr__(self):
        return f"Unrefined(pages={len(self.pages)}, count={self.count})"


class Node:
    """Branch node: parallel arrays of child boxes plus the child objects."""

    __slots__ = ("lo", "hi", "children", "pid", "slot", "group")

    def __init__(self, lo: np.ndarray, hi: np.ndarray, children: list):
        self.lo = lo
        self.hi = hi
        self.children = children
        self.pid = -1
        self.slot = 0
        self.group = None

    @classmethod
    def from_entries(cls, entries: list, d: int) -> "Node":
        if not entries:
            return cls(np.empty((0, d)), np.empty((0, d)), [])
        lo = np.array([e[0] for e in entries], dtype=np.float64)
        hi = np.array([e[1] for e in entries], dtype=np.float64)
        return cls(lo, hi, [e[2] for e in entries])

    def entries(self) -> list:
        return [(self.lo[i], self.hi[i], c) for i, c in enumerate(self.children)]

    def __len__(self):
        return len(self.children)

    def bounds(self):
        return self.lo.min(axis=0), self.hi.max(axis=0)

    def replace(self, i: int, lo, hi, child) -> None:
        self.lo[i] = lo
        self.hi[i] = hi
        self.children[i] = child

    def remove(self, i: int) -> None:
        self.lo = np.delete(self.lo, i, axis=0)
        self.hi = np.delete(self.hi, i, axis=0)
        del self.children[i]

    def __repr__(self):
        return f"Node(pid={self.pid}, slot={self.slot}, entries={len(self.children)})"


class PageGroup:
    """Nodes co-located on one disk page (one slot per node)."""

    __slots__ = ("pid", "members", "reserved")

    def __init__(self, pid: int):
        self.pid = pid
        self.members: list = []
        # entries promised to members that are not refined yet (AMBI)
        self.reserved: dict = {}

    def entry_total(self) -> int:
        return sum(len(m) for m in self.members) + sum(self.reserved.values())


def child_ref(child) -> int:
    if isinstance(child, Leaf):
        return _LEAF_BIT | child.pid
    if isinstance(child, Node):
        return (child.slot << _SLOT_SHIFT) | child.pid
    return _UNREFINED_REF


def encode_node_page(nodes: list, page_size: int, d: int) -> bytes:
    counts = [len(n) for n in nodes]
    total = sum(counts)
    ent = np.empty(total, dtype=[("lo", "<f8", (d,)), ("hi", "<f8", (d,)), ("ref", "<u8")])
    pos = 0
    for n in nodes:
        k = len(n)
        if k:
            ent["lo"][pos:pos + k] = n.lo
            ent["hi"][pos:pos + k] = n.hi
            ent["ref"][pos:pos + k] = [child_ref(c) for c in n.children]
        pos += k
    body = struct.pack("<II", len(nodes), total) + ent.tobytes() + np.asarray(counts, dtype="<u2").tobytes()
    if len(body) > page_size:
        raise ValueError(f"node page overflow: {total} entries in {len(nodes)} slots")
    return body + bytes(page_size - len(body))


def decode_node_page(data, d: int):
    """``[(lo, hi, refs), ...]`` for every slot of a node page."""
    nslots, total = struct.unpack_from("<II", data, 0)
    dt = np.dtype([("lo", "<f8", (d,)), ("hi", "<f8", (d,)), ("ref", "<u8")])
    ent = np.frombuffer(data, dtype=dt, count=total, offset=NODE_HEADER)
    counts = np.frombuffer(data, dtype="<u2", count=nslots, offset=NODE_HEADER + total * dt.itemsize)
    out, pos = [], 0
    for k in counts:
        k = int(k)
        out.append((ent["lo"][pos:pos + k], ent["hi"][pos:pos + k], ent["ref"][pos:pos + k]))
        pos += k
    return out


@dataclass
class Index:
    """A built index: tree, backing file, capacities and build accounting."""

    root: Node
    file: PageFile
    pool: BufferPool
    d: int
    leaf_cap: int
    branch_cap: int
    n: int
    method: str = "fmbi"
    with_ids: bool = True
    build_io: object = None
    build_info: dict = field(default_factory=dict)

    @property
    def dtype(self):
        return record_dtype(self.d)

    # hooks used by adaptive indexes; static indexes never refine
    def expand(self, parent: Node, i: int, query) -> None:  # pragma: no cover - AMBI overrides
        raise RuntimeError("static index contains an unrefined entry")

    def needs_refresh(self, node: Node) -> bool:
        return False

    def refresh(self, node: Node, query) -> Node:  # pragma: no cover
        return node

    def visit_node(self, node: Node) -> None:
        self.pool.read_page(self.file, node.pid)

    def read_leaf(self, leaf: Leaf) -> np.ndarray:
        blocks = [decode_data_page(self.pool.read_page(self.file, pid), self.dtype) for pid in leaf.pages]
        return blocks[0] if len(blocks) == 1 else np.concatenate(blocks)

    def height(self) -> int:
        return tree_height(self.root)

    def save(self) -> None:
        """Flush the pool and append the trailer so the file can be reopened."""
        self.pool.flush_all(self.file)
        self.file.write_trailer(pack_trailer(self.root.pid, self.root.slot, self.height(), self.n,
                                             METHODS.get(self.method, 0)))


def tree_height(root) -> int:
    """Levels from the root to the deepest leaf (a lone leaf page counts as 1)."""
    if not isinstance(root, Node):
        return 1
    h = 0
    frontier = [root]
    while frontier:
        h += 1
        nxt = []
        for node in frontier:
            nxt.extend(c for c in node.children if isinstance(c, Node))
        frontier = nxt
    return h + 1


def iter_nodes(root: Node):
    stack = [root]
    while stack:
        node = stack.pop()
        yield node
        stack.extend(c for c in node.children if isinstance(c, Node))


def iter_leaf_entries(root: Node):
    """``(lo, hi, leaf)`` for every leaf entry under ``root``."""
    for node in iter_nodes(root):
        for i, c in enumerate(node.children):
            if isinstance(c, Leaf):
                yield node.lo[i], node.hi[i], c


def write_group(pool: BufferPool, file: PageFile, nodes: list, d: int, pid: Optional[int] = None) -> int:
    """Serialize ``nodes`` into one page (allocating it if needed)."""
    if pid is None:
        pid = pool.allocate_page(file)
    for slot, n in enumerate(nodes):
        n.pid = pid
        n.slot = slot
    pool.write_page(file, pid, encode_node_page(nodes, file.page_size, d))
    return pid


def write_node(pool: BufferPool, file: PageFile, node: Node, d: int) -> int:
    return write_group(pool, file, [node], d)


def rewrite(pool: BufferPool, file: PageFile, node: Node, d: int) -> None:
    """Write ``node`` back to its page (with its co-residents, if any)."""
    if node.group is not None:
        write_group(pool, file, node.group.members, d, node.group.pid)
    else:
        write_group(pool, file, [node], d, node.pid if node.pid >= 0 else None)


def write_leaf(pool: BufferPool, file: PageFile, block: np.ndarray, pid: Optional[int] = None) -> Leaf:
    if pid is None:
        pid = pool.allocate_page(file)
    pool.write_page(file, pid, encode_data_page(block, file.page_size))
    return Leaf(pid, len(block))


def open_index(path, pool: BufferPool) -> Index:
    """Reopen a finalized index file and rebuild its node tree from the pages.

    Decoding reads raw pages directly; it is not charged to ``pool``.
    """
    with open(path, "rb") as fh:
        d, page_size, with_ids, cl, cb = parse_index_header(fh.read(INDEX_HEADER_SIZE))
    f = PageFile(path, page_size, header_size=INDEX_HEADER_SIZE, trailer_size=TRAILER_SIZE, mode="r")
    root_pid, root_slot, _height, n, method = unpack_trailer(f.read_trailer(TRAILER_SIZE))
    dt = record_dtype(d)
    cache: dict = {}

    def load(pid: int, slot: int) -> Node:
        if pid not in cache:
            cache[pid] = decode_node_page(f.read(pid), d)
        lo, hi, refs = cache[pid][slot]
        children = []
        for r in refs:
            r = int(r)
            if r & _LEAF_BIT:
                lpid = r & ~_LEAF_BIT
                children.append(Leaf(lpid, len(decode_data_page(f.read(lpid), dt))))
            else:
                children.append(load(r & _PID_MASK, r >> _SLOT_SHIFT))
        node = Node(np.array(lo), np.array(hi), children)
        node.pid, node.slot = pid, slot
        return node

    root = load(root_pid, root_slot)
    return Index(root, f, pool, d, cl, cb, n, METHOD_NAMES.get(method, "fmbi"), with_ids)


def create_index_file(path, d: int, page_size: int, with_ids: bool, cl: int, cb: int) -> PageFile:
    return new_index_file(path, d, page_size, with_ids, cl, cb)
