"""Seeded synthetic datasets and query workloads.

Distributions:

* ``uniform`` -- i.i.d. uniform on the unit cube.
* ``gaussian`` -- i.i.d. normal per axis (``mean``, ``sigma``), not clipped.
* ``skewed`` -- a Gaussian mixture: ``clusters`` centers uniform on the unit
  cube, cluster sizes proportional to ``rank ** -zipf`` (power law), each
  cluster isotropic with standard deviation ``spread``.
"""
from __future__ import annotations

from typing import Optional

import numpy as np

from .core import MBB, KnnQuery, Point, WindowQuery, check_dim

DISTRIBUTIONS = ("uniform", "gaussian", "skewed")


def generate(distribution: str, n: int, d: int, seed=None, mean: float = 0.5, sigma: float = 0.15,
             clusters: int = 50, zipf: float = 1.0, spread: float = 0.02) -> np.ndarray:
    """``(n, d)`` float64 coordinates drawn from ``distribution``."""
    check_dim(d)
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    if distribution == "uniform":
        return rng.random((n, d))
    if distribution == "gaussian":
        return rng.normal(mean, sigma, size=(n, d))
    if distribution == "skewed":
        if clusters < 1:
            raise ValueError("clusters must be >= 1")
        centers = rng.random((clusters, d))
        w = np.arange(1, clusters + 1, dtype=np.float64) ** -zipf
        sizes = rng.multinomial(n, w / w.sum())
        label = np.repeat(np.arange(clusters), sizes)
        pts = centers[label] + rng.normal(0.0, spread, size=(n, d))
        return pts[rng.permutation(n)]
    raise ValueError(f"unknown distribution {distribution!r} (expected one of {', '.join(DISTRIBUTIONS)})")


def focus_box(lo: np.ndarray, hi: np.ndarray, fraction: float):
    """Sub-box at the center of ``[lo, hi]`` holding ``fraction`` of its volume."""
    if not 0 < fraction <= 1:
        raise ValueError("focus fraction must be in (0, 1]")
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    side = (hi - lo) * fraction ** (1.0 / len(lo))
    mid = (lo + hi) / 2
    return mid - side / 2, mid + side / 2


def window_workload(lo, hi, n_queries: int, n_points: int, seed=None, min_area: float = 64.0,
                    max_area: float = 1024.0, focus: Optional[float] = None) -> list:
    """Windows whose volume is ``[min_area, max_area] / n_points`` of the space.

    Windows keep the aspect ratio of the data space; centers are uniform in
    the space or in its central ``focus`` fraction.
    """
    rng = np.random.default_rng(seed)
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    d = len(lo)
    clo, chi = focus_box(lo, hi, focus) if focus else (lo, hi)
    out = []
    for _ in range(n_queries):
        frac = rng.uniform(min_area, max_area) / n_points
        side = (hi - lo) * frac ** (1.0 / d)
        c = rng.uniform(clo, chi)
        out.append(WindowQuery(MBB(tuple(c - side / 2), tuple(c + side / 2))))
    return out


def knn_workload(lo, hi, n_queries: int, seed=None, ks=(16, 64, 256), focus: Optional[float] = None) -> list:
    rng = np.random.default_rng(seed)
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    clo, chi = focus_box(lo, hi, focus) if focus else (lo, hi)
    return [KnnQuery(Point(tuple(rng.uniform(clo, chi))), int(rng.choice(ks))) for _ in range(n_queries)]


def tiling_workload(lo, hi, cells_per_axis: int, seed=None) -> list:
    """Windows of a regular grid that together cover ``[lo, hi]``, in random order."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    d = len(lo)
    g = int(cells_per_axis)
    if g < 1:
        raise ValueError("cells_per_axis must be >= 1")
    step = (hi - lo) / g
    cells = np.array(np.meshgrid(*[np.arange(g)] * d, indexing="ij")).reshape(d, -1).T
    cells = cells[np.random.default_rng(seed).permutation(len(cells))]
    out = []
    for cell in cells:
        a = lo + cell * step
        b = np.where(cell == g - 1, hi, lo + (cell + 1) * step)
        out.append(WindowQuery(MBB(tuple(a), tuple(b))))
    return out

