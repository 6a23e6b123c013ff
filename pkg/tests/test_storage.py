import math
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mbindex.core import make_block
from mbindex.storage import (
    BufferFullError, BufferPool, DatasetWriter, IoStats, PageFile, StorageError, branch_capacity, create_dataset,
    dataset_from_arrays, decode_data_page, encode_data_page, leaf_capacity, open_dataset, read_all,
    resolve_capacities,
)


def filled_file(n, page_size=64):
    f = PageFile(None, page_size)
    for i in range(n):
        pid = f.allocate()
        f.write(pid, bytes([i % 256]) * page_size)
    return f


class ModelLRU:
    """Reference LRU: a plain list, most recent last."""

    def __init__(self, cap):
        self.cap = cap
        self.order = []
        self.misses = 0

    def access(self, pid):
        if pid in self.order:
            self.order.remove(pid)
        else:
            self.misses += 1
            if len(self.order) == self.cap:
                self.order.pop(0)
        self.order.append(pid)


def test_read_twice_counts_once():
    f = filled_file(4)
    pool = BufferPool(2)
    pool.read_page(f, 0)
    pool.read_page(f, 0)
    assert pool.io_stats() == IoStats(1, 0)


def test_lru_eviction_trace():
    m = 5
    f = filled_file(m + 1)
    pool = BufferPool(m)
    for pid in range(m + 1):
        pool.read_page(f, pid)
    pool.read_page(f, 0)
    assert pool.reads == m + 2


def test_everything_resident_after_warmup():
    f = filled_file(10)
    pool = BufferPool(10)
    for pid in range(10):
        pool.read_page(f, pid)
    for pid in np.random.default_rng(1).permutation(10):
        pool.read_page(f, int(pid))
    assert pool.reads == 10


def test_cold_scan_reads_every_page():
    f = filled_file(30)
    pool = BufferPool(7)
    for pid in range(30):
        pool.read_page(f, pid)
    assert pool.io_stats() == IoStats(30, 0)


def test_fresh_pool_zero():
    assert BufferPool(3).io_stats() == IoStats(0, 0)
    with pytest.raises(ValueError):
        BufferPool(0)


def test_allocate_ids_sequential():
    f = PageFile(None, 64)
    pool = BufferPool(2)
    assert [pool.allocate_page(f) for _ in range(4)] == [0, 1, 2, 3]
    assert f.read(3) == bytes(64)


def test_allocation_under_full_buffer_writes_dirty_victim_only():
    f = PageFile(None, 64)
    pool = BufferPool(2)
    a = pool.allocate_page(f)
    pool.write_page(f, a, b"x" * 64)
    pool.allocate_page(f)
    pool.allocate_page(f)  # evicts a, which is dirty
    assert pool.writes == 1
    pool.allocate_page(f)  # evicts a clean zero page
    assert pool.writes == 1
    assert f.read(a) == b"x" * 64


def test_flush_counts_each_dirty_page_once():
    f = filled_file(3)
    pool = BufferPool(3)
    for pid in range(3):
        pool.write_page(f, pid, bytes([9]) * 64)
    pool.flush_all()
    pool.flush_all()
    assert pool.writes == 3


def test_pinned_pages_survive_and_overflow_bypasses():
    f = filled_file(5)
    pool = BufferPool(2)
    pool.read_page(f, 0, pin=True)
    pool.read_page(f, 1, pin=True)
    assert pool.free_frames == 0
    data = pool.read_page(f, 2)  # bypasses the full cache
    assert data == f.read(2)
    assert pool.is_resident(f, 0) and pool.is_resident(f, 1)
    with pytest.raises(BufferFullError):
        pool.read_page(f, 3, pin=True)
    pool.unpin(f, 0)
    pool.read_page(f, 3)
    assert not pool.is_resident(f, 0)


def test_out_of_range_read():
    f = filled_file(2)
    with pytest.raises(IndexError):
        BufferPool(1).read_page(f, 5)


@given(st.integers(1, 8), st.lists(st.integers(0, 11), max_size=200))
def test_lru_matches_reference_model(cap, trace):
    f = filled_file(12)
    pool = BufferPool(cap)
    model = ModelLRU(cap)
    for pid in trace:
        pool.read_page(f, pid)
        model.access(pid)
    assert pool.reads == model.misses


@given(st.integers(1, 6), st.lists(st.tuples(st.booleans(), st.integers(0, 7), st.integers(0, 255)), max_size=120))
def test_buffer_transparency(cap, ops):
    """Contents seen through the pool always equal a shadow copy; counters stay sound."""
    f = filled_file(8)
    shadow = [f.read(p) for p in range(8)]
    pool = BufferPool(cap)
    for is_write, pid, val in ops:
        if is_write:
            pool.write_page(f, pid, bytes([val]) * 64)
            shadow[pid] = bytes([val]) * 64
        else:
            assert pool.read_page(f, pid) == shadow[pid]
        assert pool.resident_count <= cap
    pool.flush_all()
    assert [f.read(p) for p in range(8)] == shadow
    assert pool.writes <= sum(1 for w, _, _ in ops if w)


def test_capacities():
    assert leaf_capacity(4096, 2) == 170
    assert branch_capacity(4096, 2) == (4096 - 8) // (16 * 2 + 8 + 2)
    assert resolve_capacities(1024, 2) == (42, 24)
    assert resolve_capacities(1024, 2, leaf_cap=10, branch_cap=4) == (10, 4)
    with pytest.raises(ValueError):
        resolve_capacities(1024, 2, leaf_cap=43)
    with pytest.raises(ValueError):
        resolve_capacities(1024, 2, branch_cap=1)


def test_data_page_roundtrip():
    blk = make_block(np.random.default_rng(0).random((42, 2)))
    page = encode_data_page(blk, 1024)
    assert len(page) == 1024
    assert np.array_equal(decode_data_page(page, blk.dtype), blk)
    with pytest.raises(ValueError):
        encode_data_page(make_block(np.zeros((43, 2))), 1024)


def test_dataset_header_bit_exact(tmp_path):
    path = tmp_path / "d.mbd"
    coords = np.arange(10.0).reshape(5, 2)
    create_dataset(path, coords, ids=np.arange(5), page_size=256)
    raw = path.read_bytes()
    assert raw[:4] == b"MBID"
    version, d, n, page_size, flags = struct.unpack_from("<IIQII", raw, 4)
    assert (version, d, n, page_size, flags) == (1, 2, 5, 256, 1)
    assert len(raw) == 28 + 256
    ds = open_dataset(path)
    assert ds.n == 5 and ds.d == 2 and ds.with_ids
    assert np.array_equal(read_all(ds)["c"], coords)


def test_dataset_without_ids_gets_synthetic_ids():
    ds = dataset_from_arrays(np.random.default_rng(0).random((200, 2)), page_size=256)
    ids = read_all(ds)["id"]
    assert len(set(ids.tolist())) == 200
    assert ds.capacity == (256 - 4) // 16


def test_dataset_write_count_through_pool():
    n = 100_000
    pool = BufferPool(4)
    ds = create_dataset(None, np.random.default_rng(0).random((n, 2)), np.arange(n), page_size=1024, pool=pool)
    assert pool.writes == math.ceil(n / 42) == ds.num_pages


def test_dataset_single_point():
    ds = dataset_from_arrays(np.array([[0.5, 0.5]]), page_size=256)
    assert ds.num_pages == 1 and ds.n == 1


def test_dataset_errors(tmp_path):
    with pytest.raises(ValueError):
        dataset_from_arrays(np.empty((0, 2)))
    with pytest.raises(ValueError):
        dataset_from_arrays(np.array([[np.inf, 0.0]]))
    bad = tmp_path / "bad"
    bad.write_bytes(b"XXXX" + bytes(40))
    with pytest.raises(StorageError):
        open_dataset(bad)


def test_dataset_writer_roundtrip(tmp_path):
    pool = BufferPool(3)
    w = DatasetWriter(tmp_path / "w.mbd", 2, 256, pool)
    blk = make_block(np.random.default_rng(2).random((100, 2)))
    w.append(blk[:37])
    w.append(blk[37:])
    ds = w.close()
    assert ds.n == 100 and ds.num_pages == math.ceil(100 / ((256 - 4) // 24))
    again = open_dataset(tmp_path / "w.mbd")
    assert np.array_equal(read_all(again), blk)
