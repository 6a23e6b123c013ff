"""scikit-learn style wrappers around the index builders.

``fit(X, y=None)`` bulk loads ``X`` (``y`` are optional integer record ids).
Queries return record ids; ``kneighbors`` follows the ``NearestNeighbors``
convention of returning ``(distances, ids)``.
"""
from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .ambi import AmbiIndex
from .baselines import hilbert_bulk_load, str_bulk_load
from .core import MAX_DIM, MIN_DIM, MBB, KnnQuery, Point, WindowQuery
from .fmbi import bulk_load, index_stats
from .query import knn_query, window_query
from .storage import DEFAULT_PAGE_SIZE, BufferPool, dataset_from_arrays, resolve_capacities


def validate_points(X) -> np.ndarray:
    """2-D finite float64 array with ``MIN_DIM <= d <= MAX_DIM`` columns."""
    X = check_array(X, dtype=np.float64, ensure_all_finite=True)
    if not MIN_DIM <= X.shape[1] <= MAX_DIM:
        raise ValueError(f"expected {MIN_DIM}..{MAX_DIM} features, got {X.shape[1]}")
    return X


def validate_ids(y, n: int) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (n,):
        raise ValueError(f"ids must have shape ({n},), got {y.shape}")
    if not np.issubdtype(y.dtype, np.integer) or (y < 0).any():
        raise ValueError("ids must be non-negative integers")
    return y.astype(np.uint64)


def resolve_buffer(pages: int, buffer_pages=None, buffer_pct=None) -> int:
    """Buffer size in pages, from an absolute count or a percentage of the dataset."""
    if buffer_pages is not None:
        m = int(buffer_pages)
    elif buffer_pct is not None:
        if not 0 < buffer_pct <= 100:
            raise ValueError("buffer_pct must be in (0, 100]")
        m = math.ceil(pages * buffer_pct / 100.0)
    else:
        raise ValueError("either buffer_pages or buffer_pct is required")
    if m < 1:
        raise ValueError("buffer must hold at least one page")
    return m


class _IndexEstimator(BaseEstimator):
    _method = None

    def __init__(self, page_size=DEFAULT_PAGE_SIZE, buffer_pct=1.0, buffer_pages=None, leaf_cap=None,
                 branch_cap=None, random_state=None):
        self.page_size = page_size
        self.buffer_pct = buffer_pct
        self.buffer_pages = buffer_pages
        self.leaf_cap = leaf_cap
        self.branch_cap = branch_cap
        self.random_state = random_state

    def _build(self, dataset, pool):
        raise NotImplementedError

    def fit(self, X, y=None):
        X = validate_points(X)
        ids = None if y is None else validate_ids(y, len(X))
        self.n_features_in_ = X.shape[1]
        cl, cb = resolve_capacities(self.page_size, X.shape[1], self.leaf_cap, self.branch_cap)
        self.dataset_ = dataset_from_arrays(X, ids, page_size=self.page_size)
        m = resolve_buffer(self.dataset_.num_pages, self.buffer_pages, self.buffer_pct)
        self.pool_ = BufferPool(m)
        self.index_ = self._build(self.dataset_, self.pool_)
        self.io_stats_ = self.index_.build_io
        return self

    def _check_point(self, p) -> np.ndarray:
        p = check_array(np.atleast_2d(np.asarray(p, dtype=np.float64)), ensure_all_finite=True)
        if p.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {p.shape[1]}")
        return p

    def query_window(self, lo, hi) -> np.ndarray:
        """Ids of the points inside the closed box ``[lo, hi]``, in result order."""
        check_is_fitted(self, "index_")
        lo = self._check_point(lo)[0]
        hi = self._check_point(hi)[0]
        q = WindowQuery(MBB(tuple(lo), tuple(hi)))
        res = self._run(q)
        self.last_query_io_ = res.io
        return res.ids.astype(np.int64)

    def kneighbors(self, X, n_neighbors=5, return_distance=True):
        check_is_fitted(self, "index_")
        X = self._check_point(X)
        if n_neighbors < 1:
            raise ValueError("n_neighbors must be >= 1")
        k = min(int(n_neighbors), self.index_.n)
        dist = np.empty((len(X), k))
        ind = np.empty((len(X), k), dtype=np.int64)
        for r, row in enumerate(X):
            res = self._run(KnnQuery(Point(tuple(row)), k))
            ind[r] = res.ids
            dist[r] = res.distances
        return (dist, ind) if return_distance else ind

    def _run(self, q):
        if isinstance(q, WindowQuery):
            return window_query(self.index_, q)
        return knn_query(self.index_, q)

    def index_stats(self) -> dict:
        check_is_fitted(self, "index_")
        out = index_stats(self.index_).as_dict()
        out.update(method=self._method, leaf_cap=self.index_.leaf_cap, branch_cap=self.index_.branch_cap,
                   buffer_pages=self.pool_.capacity)
        return out


class FMBIIndex(_IndexEstimator):
    """Scan-based full bulk loading."""

    _method = "fmbi"

    def _build(self, dataset, pool):
        return bulk_load(dataset, pool, leaf_cap=self.leaf_cap, branch_cap=self.branch_cap,
                         seed=self.random_state)


class STRIndex(_IndexEstimator):
    _method = "str"

    def _build(self, dataset, pool):
        return str_bulk_load(dataset, pool, leaf_cap=self.leaf_cap, branch_cap=self.branch_cap)


class HilbertIndex(_IndexEstimator):
    _method = "hilbert"

    def _build(self, dataset, pool):
        return hilbert_bulk_load(dataset, pool, leaf_cap=self.leaf_cap, branch_cap=self.branch_cap)


class AMBIIndex(_IndexEstimator):
    """Adaptive index: ``fit`` only registers the data, queries build the index.

    ``io_stats_`` after ``fit`` is zero; cumulative cost is ``index_.total_io``.
    """

    _method = "ambi"

    def _build(self, dataset, pool):
        idx = AmbiIndex(dataset, pool, leaf_cap=self.leaf_cap, branch_cap=self.branch_cap, seed=self.random_state)
        return idx

    def _run(self, q):
        return self.index_.query(q)

    def index_stats(self) -> dict:
        check_is_fitted(self, "index_")
        if not self.index_.initialized:
            raise ValueError("the adaptive index has not answered a query yet")
        return super().index_stats()

    def insert(self, X, ids=None) -> np.ndarray:
        """Insert points lazily; returns their ids."""
        check_is_fitted(self, "index_")
        X = self._check_point(X)
        ids = [None] * len(X) if ids is None else list(validate_ids(ids, len(X)))
        return np.array([self.index_.insert(row, None if i is None else int(i)) for row, i in zip(X, ids)],
                        dtype=np.int64)

    def delete(self, X, ids=None) -> np.ndarray:
        """Delete points; returns a boolean array (True where a point was removed)."""
        check_is_fitted(self, "index_")
        X = self._check_point(X)
        ids = [None] * len(X) if ids is None else list(validate_ids(ids, len(X)))
        return np.array([self.index_.delete(row, None if i is None else int(i)) for row, i in zip(X, ids)])
