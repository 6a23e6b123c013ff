"""SplitTree: a binary tree of (dimension, coordinate) splits.

The leaves are subspaces. A Major SplitTree partitions a whole build into
``C_B`` subspaces; a minor one refines a single subspace. Points whose
coordinate equals a split value route left.
"""
from __future__ import annotations

from typing import Iterator, Union

import numpy as np

from .core import longest_dimension


class Split:
    __slots__ = ("dim", "coord", "left", "right", "parent")

    def __init__(self, dim: int, coord: float, parent=None):
        self.dim = dim
        self.coord = coord
        self.left = None
        self.right = None
        self.parent = parent

    def __repr__(self):
        return f"Split(dim={self.dim}, coord={self.coord:g})"


class SubspaceRef:
    """A leaf region of a SplitTree plus the page state a build attaches to it.

    ``mem`` holds pinned in-memory pages (the last one may be partially
    filled), ``disk`` holds ``(pid, count)`` of flushed pages. ``result`` and
    ``node`` are filled in once a build refines the subspace.
    """

    __slots__ = ("index", "lo", "hi", "count", "mem", "disk", "active", "parent",
                 "seed", "result", "node", "unref", "subtree")

    def __init__(self, index: int, parent=None):
        self.index = index
        self.parent = parent
        self.lo = None
        self.hi = None
        self.count = 0
        self.mem: list = []
        self.disk: list = []
        self.active = True
        self.seed = None
        self.result = None
        self.node = None
        self.unref = None
        self.subtree = None

    @property
    def num_pages(self) -> int:
        return len(self.mem) + len(self.disk)

    def grow(self, coords: np.ndarray) -> None:
        lo = coords.min(axis=0)
        hi = coords.max(axis=0)
        if self.lo is None:
            self.lo, self.hi = lo, hi
        else:
            self.lo = np.minimum(self.lo, lo)
            self.hi = np.maximum(self.hi, hi)

    def deactivate(self) -> None:
        # state only ever moves active -> inactive within one build
        self.active = False

    def __repr__(self):
        state = "active" if self.active else "inactive"
        return f"SubspaceRef({self.index}, pages={self.num_pages}, count={self.count}, {state})"


Node = Union[Split, SubspaceRef]


class SplitTreeError(ValueError):
    pass


class SplitTree:
    def __init__(self, root: Node, leaves: list, d: int):
        self.root = root
        self.leaves = leaves
        self.d = d

    @property
    def fanout(self) -> int:
        return len(self.leaves)

    def splits(self) -> list:
        return [n for n in self.postorder() if isinstance(n, Split)]

    def postorder(self) -> Iterator[Node]:
        out = []
        stack = [(self.root, False)]
        while stack:
            node, seen = stack.pop()
            if isinstance(node, SubspaceRef) or seen:
                out.append(node)
                continue
            stack.append((node, True))
            stack.append((node.right, False))
            stack.append((node.left, False))
        return iter(out)

    def locate(self, p) -> SubspaceRef:
        p = np.asarray(getattr(p, "coords", p), dtype=np.float64)
        node = self.root
        while isinstance(node, Split):
            node = node.left if p[node.dim] <= node.coord else node.right
        return node

    def locate_many(self, coords: np.ndarray) -> np.ndarray:
        """Leaf index of every row of ``coords``."""
        n = len(coords)
        out = np.empty(n, dtype=np.int64)
        stack = [(self.root, np.arange(n))]
        while stack:
            node, idx = stack.pop()
            if isinstance(node, SubspaceRef):
                out[idx] = node.index
                continue
            m = coords[idx, node.dim] <= node.coord
            left, right = idx[m], idx[~m]
            if len(left):
                stack.append((node.left, left))
            if len(right):
                stack.append((node.right, right))
        return out

    def cell(self, leaf: SubspaceRef):
        """The half-open region of space a leaf covers, as closed bounds.

        Unbounded sides are +/-inf.
        """
        lo = np.full(self.d, -np.inf)
        hi = np.full(self.d, np.inf)
        child = leaf
        node = leaf.parent
        while node is not None:
            if child is node.left:
                hi[node.dim] = min(hi[node.dim], node.coord)
            else:
                lo[node.dim] = max(lo[node.dim], node.coord)
            child, node = node, node.parent
        return lo, hi


def _split_index(n: int, fanout: int, page_capacity: int) -> int:
    left_f = fanout // 2
    pages = -(-n // page_capacity)
    cut = (pages * left_f // fanout) * page_capacity
    if 0 < cut < n:
        return cut
    # too few points for page-aligned halves
    return max(1, min(n - 1, n * left_f // fanout))


def build_splittree(points: np.ndarray, fanout: int, quantum: int, page_capacity: int,
                    strict: bool = True) -> SplitTree:
    """Recursive median-page splitting on the longest dimension.

    ``points`` is a record block holding ``quantum * fanout`` full pages of
    ``page_capacity`` points. Each side of a split receives
    ``quantum * floor(f/2)`` and ``quantum * ceil(f/2)`` pages for a node of
    fanout ``f``, so every leaf ends with exactly ``quantum`` pages. The split
    coordinate is the value of the last point of the left half on the split
    dimension. With ``strict=False`` partially filled inputs are accepted and
    halves are cut on page boundaries as closely as possible.

    The points assigned to each leaf are stored on ``leaf.seed``.
    """
    if fanout < 2:
        raise SplitTreeError("fanout must be at least 2")
    n = len(points)
    expected = quantum * fanout * page_capacity
    if strict and n != expected:
        raise SplitTreeError(
            f"expected {quantum * fanout} full pages ({expected} points), got {n} points")
    if n < fanout:
        raise SplitTreeError("fewer points than subspaces")
    coords = points["c"]
    d = coords.shape[1]
    leaves: list = []

    def rec(sel: np.ndarray, f: int, parent):
        if f == 1:
            leaf = SubspaceRef(len(leaves), parent)
            leaf.seed = points[sel]
            leaves.append(leaf)
            return leaf
        c = coords[sel]
        dim = longest_dimension((c.min(axis=0), c.max(axis=0)))
        order = np.argsort(c[:, dim], kind="stable")
        sel = sel[order]
        if strict:
            cut = quantum * (f // 2) * page_capacity
        else:
            cut = _split_index(len(sel), f, page_capacity)
        split = Split(dim, float(coords[sel[cut - 1], dim]), parent)
        split.left = rec(sel[:cut], f // 2, split)
        split.right = rec(sel[cut:], f - f // 2, split)
        return split

    root = rec(np.arange(n), fanout, None)
    return SplitTree(root, leaves, d)


def single_leaf_tree(d: int) -> SplitTree:
    leaf = SubspaceRef(0)
    return SplitTree(leaf, [leaf], d)
