import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import leaf_depths, leaf_records, leaves, multiset, small_dataset
from mbindex.baselines import (
    Quantizer, external_sort, hilbert_bulk_load, hilbert_keys, hilbert_rank, sort_io_estimate, str_bulk_load,
)
from mbindex.fmbi import PageSource
from mbindex.index import Node, iter_nodes
from mbindex.storage import BufferPool, PageFile, dataset_from_arrays, decode_data_page, read_all


def xy2d(n, x, y):
    """Reference 2-D Hilbert index (the classic rotate-and-reflect loop)."""
    d = 0
    s = n // 2
    while s > 0:
        rx = 1 if x & s else 0
        ry = 1 if y & s else 0
        d += s * s * ((3 * rx) ^ ry)
        if ry == 0:
            if rx == 1:
                x, y = s - 1 - x, s - 1 - y
            x, y = y, x
        s //= 2
    return d


# -- Hilbert curve -------------------------------------------------------------------

def test_order1_quadrants():
    assert hilbert_rank([(0, 0), (0, 1), (1, 1), (1, 0)], bits=1) == [0, 1, 2, 3]


@pytest.mark.parametrize("bits", [2, 3, 5])
def test_matches_reference_mapping(bits):
    n = 1 << bits
    grid = [(x, y) for x in range(n) for y in range(n)]
    assert hilbert_rank(grid, bits) == [xy2d(n, x, y) for x, y in grid]


@pytest.mark.parametrize("d,bits", [(2, 4), (3, 3), (4, 2)])
def test_bijection_and_adjacency(d, bits):
    n = 1 << bits
    grid = np.array(np.meshgrid(*[np.arange(n)] * d, indexing="ij")).reshape(d, -1).T
    ranks = np.array(hilbert_rank(grid, bits))
    assert sorted(ranks.tolist()) == list(range(n ** d))
    walk = grid[np.argsort(ranks)]
    # consecutive cells along the curve are unit steps apart
    assert np.all(np.abs(np.diff(walk, axis=0)).sum(axis=1) == 1)


@given(arrays(np.uint64, st.tuples(st.integers(2, 40), st.sampled_from([2, 3, 5])),
              elements=st.integers(0, (1 << 16) - 1)))
def test_byte_keys_order_like_ranks(grid):
    keys = hilbert_keys(grid)
    ranks = hilbert_rank(grid)
    assert np.array_equal(np.argsort(keys, kind="stable"), np.argsort(ranks, kind="stable"))


def test_quantizer_range():
    q = Quantizer(np.array([0.0, -1.0]), np.array([1.0, 1.0]), bits=4)
    g = q(np.array([[0.0, -1.0], [1.0, 1.0], [0.5, 0.0]]))
    assert g.tolist() == [[0, 0], [15, 15], [8, 8]]
    flat = Quantizer(np.array([2.0, 0.0]), np.array([2.0, 1.0]), bits=4)
    assert flat(np.array([[2.0, 0.5]])).tolist() == [[0, 8]]


# -- external sort ---------------------------------------------------------------------

def _sorted_pages(f, pages, dtype):
    return np.concatenate([decode_data_page(f.read(pid), dtype) for pid, _ in pages])


def test_external_sort_matches_memory_sort():
    ds, coords = small_dataset(100_000, page_size=1024, seed=3)
    pool = BufferPool(50)
    scratch = PageFile(None, 1024)
    before = pool.io_stats()
    out = external_sort(PageSource.from_dataset(ds), pool, lambda b: b["c"][:, 0], scratch)
    pool.flush_all()
    io = pool.io_stats() - before
    recs = _sorted_pages(scratch, out, read_all(ds).dtype)
    oracle = read_all(ds)
    oracle = oracle[np.argsort(oracle["c"][:, 0], kind="stable")]
    assert np.array_equal(recs, oracle)
    est = sort_io_estimate(ds.num_pages, 50)
    assert abs(io.total - est) <= 0.1 * est


def test_external_sort_multi_pass_io():
    ds, _ = small_dataset(40_000, page_size=512, seed=1)
    pool = BufferPool(6)
    scratch = PageFile(None, 512)
    before = pool.io_stats()
    out = external_sort(PageSource.from_dataset(ds), pool, lambda b: b["c"][:, 1], scratch)
    pool.flush_all()
    io = pool.io_stats() - before
    recs = _sorted_pages(scratch, out, read_all(ds).dtype)
    assert np.all(np.diff(recs["c"][:, 1]) >= 0)
    assert np.array_equal(multiset(recs), multiset(read_all(ds)))
    est = sort_io_estimate(ds.num_pages, 6)
    assert abs(io.total - est) <= 0.1 * est


def test_external_sort_in_memory_single_pass():
    coords = np.sort(np.random.default_rng(0).random((500, 2)), axis=0)
    ds = dataset_from_arrays(coords, np.arange(500), page_size=512)
    pool = BufferPool(ds.num_pages + 2)
    scratch = PageFile(None, 512)
    external_sort(PageSource.from_dataset(ds), pool, lambda b: b["c"][:, 0], scratch)
    pool.flush_all()
    assert pool.io_stats().page_reads == ds.num_pages
    assert pool.io_stats().page_writes == ds.num_pages


def test_external_sort_is_stable():
    coords = np.column_stack([np.repeat(np.arange(10.0), 300), np.arange(3000.0)])
    ds = dataset_from_arrays(coords, np.arange(3000), page_size=256)
    pool = BufferPool(5)
    scratch = PageFile(None, 256)
    out = external_sort(PageSource.from_dataset(ds), pool, lambda b: b["c"][:, 0], scratch)
    pool.flush_all()
    recs = _sorted_pages(scratch, out, read_all(ds).dtype)
    for v in range(10):
        ids = recs["id"][recs["c"][:, 0] == v]
        assert np.all(np.diff(ids.astype(np.int64)) > 0)


# -- loaders ------------------------------------------------------------------------------

@pytest.fixture(scope="module", params=["str", "hilbert"])
def baseline(request):
    ds, coords = small_dataset(12_345, page_size=512, seed=6)
    m = math.ceil(ds.num_pages * 0.05)
    load = str_bulk_load if request.param == "str" else hilbert_bulk_load
    return request.param, ds, load(ds, BufferPool(m))


def test_fully_packed(baseline):
    _, ds, idx = baseline
    lv = leaves(idx)
    assert len(lv) == math.ceil(ds.n / idx.leaf_cap)
    assert sum(1 for leaf in lv if leaf.count != idx.leaf_cap) <= 1


def test_shape(baseline):
    _, ds, idx = baseline
    assert len(set(leaf_depths(idx.root))) == 1
    for node in iter_nodes(idx.root):
        assert 1 <= len(node) <= idx.branch_cap
        for i, c in enumerate(node.children):
            if isinstance(c, Node):
                lo, hi = c.bounds()
                assert np.all(node.lo[i] <= lo) and np.all(hi <= node.hi[i])


def test_conserves_points(baseline):
    _, ds, idx = baseline
    assert np.array_equal(multiset(leaf_records(idx)), multiset(read_all(ds)))


def test_str_leaves_do_not_overlap():
    ds, _ = small_dataset(10_000, page_size=512, seed=2)
    idx = str_bulk_load(ds, BufferPool(30))
    boxes = [(lo, hi) for n in iter_nodes(idx.root) for lo, hi, c in n.entries() if not isinstance(c, Node)]
    lo = np.array([b[0] for b in boxes])
    hi = np.array([b[1] for b in boxes])
    for i in range(len(lo)):
        ov = np.all((lo[i] < hi[i + 1:]) & (lo[i + 1:] < hi[i]), axis=1)
        assert not ov.any()


def test_str_four_pages_two_slices():
    ds, _ = small_dataset(4 * 21, page_size=512, seed=0)
    idx = str_bulk_load(ds, BufferPool(8))
    boxes = sorted((tuple(lo), tuple(hi)) for lo, hi, _ in idx.root.entries())
    assert len(boxes) == 4
    xs = sorted(boxes, key=lambda b: b[0][0])
    left, right = xs[:2], xs[2:]
    assert max(b[1][0] for b in left) <= min(b[0][0] for b in right)
    # inside a slice the leaves are stacked on y
    for pair in (left, right):
        a, b = sorted(pair, key=lambda bx: bx[0][1])
        assert a[1][1] <= b[0][1]


def test_baseline_costs_ordered():
    ds, _ = small_dataset(30_000, page_size=512, seed=8)
    m = math.ceil(ds.num_pages * 0.05)
    s = str_bulk_load(ds, BufferPool(m)).build_io.total
    h = hilbert_bulk_load(ds, BufferPool(m)).build_io.total
    assert h < s
