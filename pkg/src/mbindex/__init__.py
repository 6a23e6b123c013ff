"""Memory-bounded bulk loading of disk-based multidimensional point indexes.

``bulk_load`` builds a full index with a fixed number of dataset scans;
``AmbiIndex`` builds one lazily, refining only the regions queries touch.
STR and Hilbert packing are provided as baselines, and :mod:`mbindex.distsim`
simulates partitioned parallel builds.
"""
from .core import MBB, KnnQuery, Point, WindowQuery
from .storage import BufferPool, IoStats, create_dataset, dataset_from_arrays, open_dataset
from .fmbi import bulk_load, index_stats
from .ambi import AmbiIndex
from .baselines import hilbert_bulk_load, str_bulk_load
from .query import knn_query, window_query
from .estimator import AMBIIndex, FMBIIndex, HilbertIndex, STRIndex

__version__ = "0.1.0"

__all__ = [
    "MBB", "Point", "WindowQuery", "KnnQuery",
    "BufferPool", "IoStats", "create_dataset", "dataset_from_arrays", "open_dataset",
    "bulk_load", "index_stats", "AmbiIndex", "str_bulk_load", "hilbert_bulk_load",
    "window_query", "knn_query",
    "FMBIIndex", "AMBIIndex", "STRIndex", "HilbertIndex",
]
