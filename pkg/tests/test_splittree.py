import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mbindex.core import make_block
from mbindex.splittree import Split, SplitTree, SplitTreeError, SubspaceRef, build_splittree, single_leaf_tree


def one_split(coord=5.0):
    s = Split(0, coord)
    s.left, s.right = SubspaceRef(0, s), SubspaceRef(1, s)
    return SplitTree(s, [s.left, s.right], 2)


def test_two_single_point_pages():
    blk = make_block([[0, 0], [1, 0]])
    t = build_splittree(blk, 2, 1, 1)
    (s,) = t.splits()
    assert (s.dim, s.coord) == (0, 0.0)
    assert t.leaves[0].seed["c"].tolist() == [[0, 0]]
    assert t.leaves[1].seed["c"].tolist() == [[1, 0]]


def test_fanout_four_quantum_two_matches_sort_oracle():
    cap = 10
    rng = np.random.default_rng(5)
    blk = make_block(rng.random((4 * 2 * cap, 2)))
    t = build_splittree(blk, 4, 2, cap)
    assert len(t.splits()) == 3
    assert [len(lf.seed) for lf in t.leaves] == [2 * cap] * 4
    # independent oracle: redo the median splits with a full sort
    c = blk["c"]
    dim0 = int(np.argmax(c.max(0) - c.min(0)))
    srt = c[np.argsort(c[:, dim0])]
    assert t.root.dim == dim0
    assert t.root.coord == srt[2 * cap * 2 - 1, dim0]
    for half, node in ((srt[:40], t.root.left), (srt[40:], t.root.right)):
        d = int(np.argmax(half.max(0) - half.min(0)))
        assert node.dim == d
        assert node.coord == np.sort(half[:, d])[2 * cap - 1]


def test_fanout_eight_small_quantum():
    # fanout 8 with a small quantum: 7 splits, 8 equal subspaces
    cap, q = 4, 3
    blk = make_block(np.random.default_rng(0).random((8 * q * cap, 2)))
    t = build_splittree(blk, 8, q, cap)
    assert len(t.splits()) == 7 and t.fanout == 8
    assert all(len(lf.seed) == q * cap for lf in t.leaves)


def test_non_power_of_two_fanout():
    cap, q = 3, 2
    blk = make_block(np.random.default_rng(1).random((5 * q * cap, 3)))
    t = build_splittree(blk, 5, q, cap)
    assert t.fanout == 5 and len(t.splits()) == 4
    assert all(len(lf.seed) == q * cap for lf in t.leaves)


def test_wrong_page_count():
    blk = make_block(np.zeros((7, 2)))
    with pytest.raises(SplitTreeError):
        build_splittree(blk, 2, 1, 4)
    with pytest.raises(SplitTreeError):
        build_splittree(blk, 1, 7, 1)


def test_boundary_routes_left():
    t = one_split()
    assert t.locate((5, 9)).index == 0
    assert t.locate((5.0001, 0)).index == 1


def test_single_leaf_tree():
    t = single_leaf_tree(3)
    assert t.fanout == 1 and t.locate((1, 2, 3)) is t.leaves[0]


def test_seeds_respect_routing():
    blk = make_block(np.random.default_rng(3).random((16 * 8, 2)))
    t = build_splittree(blk, 8, 2, 8)
    for lf in t.leaves:
        assert np.all(t.locate_many(lf.seed["c"]) == lf.index)


def test_routing_partitions_input():
    rng = np.random.default_rng(8)
    blk = make_block(rng.random((64 * 10, 2)))
    t = build_splittree(blk, 16, 4, 10)
    pts = rng.random((10_000, 2))
    where = t.locate_many(pts)
    assert np.array_equal(where, [t.locate(p).index for p in pts])
    counts = np.bincount(where, minlength=16)
    assert counts.sum() == 10_000
    # cells are disjoint and each point falls inside its cell
    for lf in t.leaves:
        lo, hi = t.cell(lf)
        inside = pts[where == lf.index]
        # cells are half-open: (lo, hi] on every split axis
        assert np.all((inside > lo) & (inside <= hi))


def test_state_transitions_one_way():
    s = SubspaceRef(0)
    s.deactivate()
    s.deactivate()
    assert not s.active


@given(st.integers(1, 4), st.sampled_from([2, 3, 4, 8]), st.integers(2, 5), st.integers(0, 10_000))
def test_partition_property(q, f, cap, seed):
    rng = np.random.default_rng(seed)
    # coarse grid values force many duplicates on split coordinates
    blk = make_block(rng.integers(0, 4, size=(q * f * cap, 2)).astype(float))
    t = build_splittree(blk, f, q, cap)
    assert t.fanout == f and len(t.splits()) == f - 1
    probe = rng.integers(-1, 5, size=(200, 2)).astype(float)
    where = t.locate_many(probe)
    assert np.all((0 <= where) & (where < f))
    for i, p in enumerate(probe):
        assert t.locate(p).index == where[i]
