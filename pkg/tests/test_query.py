import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import knn_oracle, window_oracle
from mbindex.baselines import hilbert_bulk_load, str_bulk_load
from mbindex.core import MBB, KnnQuery, Point, WindowQuery, intersects, mindist
from mbindex.datagen import knn_workload, window_workload
from mbindex.fmbi import bulk_load
from mbindex.query import knn_query, load_workload, parse_query, query_to_json, run_query, save_workload, \
    window_query
from mbindex.storage import BufferPool, dataset_from_arrays

N = 10_000


@pytest.fixture(scope="module")
def indexes(uniform_10k):
    ds, coords = uniform_10k
    m = math.ceil(ds.num_pages * 0.1)
    return coords, {
        "fmbi": bulk_load(ds, BufferPool(m), seed=0),
        "str": str_bulk_load(ds, BufferPool(m)),
        "hilbert": hilbert_bulk_load(ds, BufferPool(m)),
    }


def record_visits(index):
    seen = []
    orig = index.visit_node

    def visit(node):
        seen.append(node)
        orig(node)

    index.visit_node = visit
    return seen


def test_whole_space_window(indexes):
    coords, idxs = indexes
    for idx in idxs.values():
        res = window_query(idx, ((-1, -1), (2, 2)))
        assert np.array_equal(res.ids, np.arange(N))


def test_disjoint_window_reads_nothing(indexes):
    _, idxs = indexes
    for idx in idxs.values():
        res = window_query(idx, ((5, 5), (6, 6)))
        assert len(res) == 0 and res.pages_read == 0 and res.nodes_visited == 0


def test_random_windows_exact(indexes):
    coords, idxs = indexes
    ids = np.arange(N)
    for q in window_workload((0, 0), (1, 1), 200, N, seed=3):
        lo, hi = q.rect.as_arrays()
        expect = window_oracle(coords, ids, lo, hi)
        for idx in idxs.values():
            assert np.array_equal(window_query(idx, q).ids, expect)


def test_random_knn_exact(indexes):
    coords, idxs = indexes
    ids = np.arange(N)
    for q in knn_workload((0, 0), (1, 1), 150, seed=4):
        expect = knn_oracle(coords, ids, np.array(q.center.coords), q.k)
        for idx in idxs.values():
            res = knn_query(idx, q)
            assert np.array_equal(res.ids, expect)
            assert np.all(np.diff(res.distances) >= 0)


def test_knn_at_data_point(indexes):
    coords, idxs = indexes
    res = knn_query(idxs["fmbi"], coords[123], 1)
    assert res.ids.tolist() == [123] and res.distances[0] == 0.0


def test_knn_all_and_beyond(indexes):
    _, idxs = indexes
    res = knn_query(idxs["fmbi"], (0.5, 0.5), N)
    assert len(res) == N and not res.truncated_k
    res = knn_query(idxs["fmbi"], (0.5, 0.5), N + 5)
    assert len(res) == N and res.truncated_k


def test_knn_distance_ties_by_id():
    coords = np.array([[1, 0], [0, 1], [-1, 0], [0, -1], [3, 3]], dtype=float)
    ds = dataset_from_arrays(coords, np.array([40, 10, 30, 20, 0]), page_size=512)
    idx = bulk_load(ds, BufferPool(4))
    assert knn_query(idx, (0, 0), 3).ids.tolist() == [10, 20, 30]


def test_window_visits_only_intersecting_nodes(indexes):
    _, idxs = indexes
    idx = idxs["fmbi"]
    seen = record_visits(idx)
    try:
        for q in window_workload((0, 0), (1, 1), 50, N, seed=8):
            seen.clear()
            window_query(idx, q)
            lo, hi = q.rect.as_arrays()
            for node in seen:
                # shared pages are only read for a node that qualifies
                assert intersects(node.bounds(), (lo, hi))
    finally:
        del idx.visit_node


def test_knn_pruning_optimal(indexes):
    _, idxs = indexes
    idx = idxs["fmbi"]
    seen = record_visits(idx)
    try:
        for q in knn_workload((0, 0), (1, 1), 40, seed=9):
            seen.clear()
            res = knn_query(idx, q)
            kth = res.distances[-1]
            for node in seen:
                assert mindist(q.center, node.bounds()) <= kth + 1e-12
    finally:
        del idx.visit_node


def test_nested_windows_monotone_cost(indexes):
    _, idxs = indexes
    idx = idxs["fmbi"]
    saved = idx.pool
    try:
        last = -1
        for r in np.linspace(0.01, 0.5, 12):
            idx.pool = BufferPool(10_000)
            cost = window_query(idx, ((0.5 - r, 0.5 - r), (0.5 + r, 0.5 + r))).pages_read
            assert cost >= last
            last = cost
    finally:
        idx.pool = saved


def test_invalid_queries(indexes):
    _, idxs = indexes
    idx = idxs["fmbi"]
    with pytest.raises(ValueError):
        window_query(idx, ((1, 1), (0, 0)))
    with pytest.raises(ValueError):
        window_query(idx, ((0, 0, 0), (1, 1, 1)))
    with pytest.raises(ValueError):
        knn_query(idx, (0, 0), 0)
    with pytest.raises(ValueError):
        knn_query(idx, (0, 0, 0), 3)


def test_run_query_dispatch(indexes):
    _, idxs = indexes
    idx = idxs["str"]
    w = WindowQuery(MBB((0.1, 0.1), (0.2, 0.2)))
    assert np.array_equal(run_query(idx, w).ids, window_query(idx, w).ids)
    k = KnnQuery(Point((0.3, 0.3)), 5)
    assert np.array_equal(run_query(idx, k).ids, knn_query(idx, k).ids)


def test_without_ids_sorted_lexicographically():
    coords = np.random.default_rng(0).random((500, 2))
    ds = dataset_from_arrays(coords, page_size=512)
    idx = bulk_load(ds, BufferPool(16))
    res = window_query(idx, ((0.2, 0.2), (0.6, 0.7)))
    m = np.all((coords >= (0.2, 0.2)) & (coords <= (0.6, 0.7)), axis=1)
    expect = coords[m][np.lexsort((coords[m][:, 1], coords[m][:, 0]))]
    assert np.array_equal(res.coords, expect)


def test_workload_roundtrip(tmp_path):
    qs = window_workload((0, 0), (1, 1), 5, 1000, seed=0) + knn_workload((0, 0), (1, 1), 5, seed=0)
    path = tmp_path / "w.jsonl"
    save_workload(path, qs)
    assert load_workload(path) == qs
    first = json.loads(path.read_text().splitlines()[0])
    assert first["type"] == "window" and len(first["lo"]) == 2


def test_workload_errors_carry_line_numbers(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"type":"knn","center":[0,0],"k":3}\n\n{"type":"box"}\n')
    with pytest.raises(ValueError, match=r"bad.jsonl:3"):
        load_workload(path)
    with pytest.raises(ValueError):
        parse_query({"type": "knn", "center": [0, 0], "k": 0})


@given(st.lists(st.floats(0, 1), min_size=4, max_size=4))
def test_window_soundness_property(v):
    # one small index shared by all examples
    idx, coords = _tiny()
    lo = np.minimum(v[:2], v[2:])
    hi = np.maximum(v[:2], v[2:])
    got = window_query(idx, (lo, hi)).ids
    assert np.array_equal(got, window_oracle(coords, np.arange(len(coords)), lo, hi))


@given(st.floats(-0.5, 1.5), st.floats(-0.5, 1.5), st.integers(1, 60))
def test_knn_optimality_property(x, y, k):
    idx, coords = _tiny()
    res = knn_query(idx, (x, y), k)
    d = np.sqrt(((coords - (x, y)) ** 2).sum(axis=1))
    excluded = np.setdiff1d(np.arange(len(coords)), res.ids)
    assert res.distances.max() <= d[excluded].min()
    assert query_to_json(KnnQuery(Point((x, y)), k))["k"] == k


_TINY = {}


def _tiny():
    if not _TINY:
        coords = np.random.default_rng(21).random((1500, 2))
        ds = dataset_from_arrays(coords, np.arange(1500), page_size=256)
        _TINY["v"] = (bulk_load(ds, BufferPool(40), seed=0), coords)
    return _TINY["v"]
