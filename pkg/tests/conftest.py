import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mbindex.core import make_block, record_dtype
from mbindex.index import Leaf, Node, Unrefined, iter_nodes
from mbindex.storage import BufferPool, dataset_from_arrays, decode_data_page

settings.register_profile("repo", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("repo")


# -- brute-force oracles -------------------------------------------------------

def window_oracle(coords, ids, lo, hi):
    """Ids of points inside the closed box, ascending."""
    m = np.all((coords >= lo) & (coords <= hi), axis=1)
    return np.sort(ids[m])


def knn_oracle(coords, ids, q, k):
    """Ids of the ``k`` nearest points, ordered by (distance, id)."""
    d2 = ((coords - q) ** 2).sum(axis=1)
    order = np.lexsort((ids, d2))
    return ids[order[:k]]


def multiset(block):
    """Canonical sorted view of a record block for equality checks."""
    keys = [block["id"]] + [block["c"][:, j] for j in range(block["c"].shape[1] - 1, -1, -1)]
    return block[np.lexsort(keys)]


# -- structure helpers -----------------------------------------------------------

def leaf_records(index):
    """Every record reachable from the tree, read straight from the file (no pool)."""
    dt = record_dtype(index.d)
    index.pool.flush_all(index.file)
    parts = []
    for node in iter_nodes(index.root):
        for child in node.children:
            if isinstance(child, Leaf):
                for pid in child.pages:
                    parts.append(decode_data_page(index.file.read(pid), dt))
            elif isinstance(child, Unrefined):
                # unrefined subspaces keep their pages in the index file
                for pid, _ in child.pages:
                    parts.append(decode_data_page(index.file.read(pid), dt))
    return np.concatenate(parts) if parts else np.empty(0, dtype=dt)


def leaves(index):
    return [c for n in iter_nodes(index.root) for c in n.children if isinstance(c, Leaf)]


def branch_nodes(index):
    return list(iter_nodes(index.root))


def leaf_depths(root):
    out = []

    def rec(node, depth):
        for c in node.children:
            if isinstance(c, Node):
                rec(c, depth + 1)
            else:
                out.append(depth)

    rec(root, 1)
    return out


# -- datasets --------------------------------------------------------------------

def uniform_block(n, d=2, seed=0):
    rng = np.random.default_rng(seed)
    return make_block(rng.random((n, d)))


def small_dataset(n=3000, d=2, seed=0, page_size=512, ids=True):
    rng = np.random.default_rng(seed)
    coords = rng.random((n, d))
    return dataset_from_arrays(coords, np.arange(n) if ids else None, page_size=page_size), coords


@pytest.fixture
def pool():
    return BufferPool(64)


@pytest.fixture(scope="session")
def uniform_10k():
    rng = np.random.default_rng(11)
    coords = rng.random((10_000, 2))
    ds = dataset_from_arrays(coords, np.arange(10_000), page_size=512)
    return ds, coords


# -- acceptance report -------------------------------------------------------------

ACCEPTANCE = {}


def record_criterion(number, ok, detail):
    """Remember one criterion outcome; printed once at the end of the run."""
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
