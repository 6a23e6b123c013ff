"""Geometry primitives shared by every index in the package.

Points travel through the engine as numpy arrays: a block of ``n`` points is a
structured array with a ``c`` field of shape ``(d,)`` (float64 coordinates)
and an ``id`` field (uint64 record id). The small value types below exist for
the public API and for validation; hot paths work on raw arrays.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

MIN_DIM = 2
MAX_DIM = 16


class EmptyPointSetError(ValueError):
    pass


def record_dtype(d: int, with_ids: bool = True) -> np.dtype:
    """Packed little-endian point record: ``d`` float64 coords then a uint64 id."""
    fields = [("c", "<f8", (d,))]
    if with_ids:
        fields.append(("id", "<u8"))
    return np.dtype(fields)


def make_block(coords, ids=None) -> np.ndarray:
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2:
        raise ValueError("coords must be a 2-D array")
    n, d = coords.shape
    blk = np.empty(n, dtype=record_dtype(d))
    blk["c"] = coords
    blk["id"] = np.arange(n, dtype=np.uint64) if ids is None else np.asarray(ids, dtype=np.uint64)
    return blk


@dataclass(frozen=True)
class Point:
    coords: tuple
    id: Optional[int] = None

    def __post_init__(self):
        c = tuple(float(v) for v in self.coords)
        if not all(math.isfinite(v) for v in c):
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "coords", c)

    @property
    def dim(self) -> int:
        return len(self.coords)


@dataclass(frozen=True)
class MBB:
    """Closed axis-aligned box ``[lo, hi]``."""

    lo: tuple
    hi: tuple

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lo)
        hi = tuple(float(v) for v in self.hi)
        if len(lo) != len(hi):
            raise ValueError("lo and hi differ in dimensionality")
        if any(a > b for a, b in zip(lo, hi)):
            raise ValueError("invalid MBB: lo > hi on some axis")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self) -> int:
        return len(self.lo)

    def as_arrays(self):
        return np.array(self.lo), np.array(self.hi)

    def contains(self, q) -> bool:
        q = _coords(q)
        return all(a <= v <= b for a, v, b in zip(self.lo, q, self.hi))

    def extents(self):
        return tuple(b - a for a, b in zip(self.lo, self.hi))


@dataclass(frozen=True)
class WindowQuery:
    rect: MBB


@dataclass(frozen=True)
class KnnQuery:
    center: Point
    k: int

    def __post_init__(self):
        if int(self.k) < 1:
            raise ValueError("k must be >= 1")


def _coords(p) -> np.ndarray:
    if isinstance(p, Point):
        return np.asarray(p.coords, dtype=np.float64)
    return np.asarray(p, dtype=np.float64)


def _box(b):
    if isinstance(b, MBB):
        return np.asarray(b.lo), np.asarray(b.hi)
    lo, hi = b
    return np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)


def mbb_of(points: Sequence) -> MBB:
    """Componentwise min/max of a non-empty point collection.

    Accepts a sequence of :class:`Point`, a ``(n, d)`` array or a record block.
    """
    if isinstance(points, np.ndarray) and points.dtype.names:
        arr = points["c"]
    elif len(points) and isinstance(points[0], Point):
        dims = {p.dim for p in points}
        if len(dims) != 1:
            raise ValueError("points have mixed dimensionality")
        arr = np.array([p.coords for p in points], dtype=np.float64)
    else:
        arr = np.asarray(points, dtype=np.float64)
    if arr.size == 0 or len(arr) == 0:
        raise EmptyPointSetError("empty point set")
    lo, hi = bounds(arr)
    return MBB(tuple(lo), tuple(hi))


def bounds(coords: np.ndarray):
    """``(lo, hi)`` arrays of an ``(n, d)`` coordinate array (n >= 1)."""
    return coords.min(axis=0), coords.max(axis=0)


def longest_dimension(box) -> int:
    """Axis of largest extent; ties go to the lowest index."""
    lo, hi = _box(box)
    # np.argmax returns the first maximum, which is the tie rule we want
    return int(np.argmax(hi - lo))


def mindist(q, box) -> float:
    """Euclidean distance from ``q`` to the closest point of the closed box."""
    q = _coords(q)
    lo, hi = _box(box)
    if q.shape != lo.shape:
        raise ValueError("dimensionality mismatch")
    r = np.maximum(lo - q, 0.0) + np.maximum(q - hi, 0.0)
    # hypot rescales, so tiny residuals do not underflow to zero
    return math.hypot(*r.tolist())


def mindist_many(q: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Vectorized ``mindist`` of one point against ``k`` boxes ``(k, d)``."""
    r = np.maximum(lo - q, 0.0) + np.maximum(q - hi, 0.0)
    return np.hypot.reduce(r, axis=1)


def box_distance(alo, ahi, blo, bhi) -> float:
    """Euclidean gap between two closed boxes (0 when they intersect)."""
    r = np.maximum(np.asarray(alo) - bhi, 0.0) + np.maximum(np.asarray(blo) - ahi, 0.0)
    return math.hypot(*r.tolist())


def intersects(a, b) -> bool:
    alo, ahi = _box(a)
    blo, bhi = _box(b)
    if alo.shape != blo.shape:
        raise ValueError("dimensionality mismatch")
    return bool(np.all(alo <= bhi) and np.all(blo <= ahi))


def intersects_many(lo: np.ndarray, hi: np.ndarray, wlo: np.ndarray, whi: np.ndarray) -> np.ndarray:
    return np.all(lo <= whi, axis=1) & np.all(hi >= wlo, axis=1)


def union_bounds(lo: np.ndarray, hi: np.ndarray):
    return lo.min(axis=0), hi.max(axis=0)


def check_dim(d: int) -> int:
    d = int(d)
    if not MIN_DIM <= d <= MAX_DIM:
        raise ValueError(f"dimensionality must be in [{MIN_DIM}, {MAX_DIM}], got {d}")
    return d
