import numpy as np
import pytest

from mbindex.datagen import focus_box, generate, knn_workload, tiling_workload, window_workload


@pytest.mark.parametrize("dist", ["uniform", "gaussian", "skewed"])
def test_deterministic(dist):
    a = generate(dist, 1000, 3, seed=5)
    assert a.shape == (1000, 3) and a.dtype == np.float64
    assert np.array_equal(a, generate(dist, 1000, 3, seed=5))
    assert not np.array_equal(a, generate(dist, 1000, 3, seed=6))


def test_uniform_in_unit_cube():
    a = generate("uniform", 5000, 4, seed=0)
    assert a.min() >= 0 and a.max() < 1


def test_gaussian_moments():
    n, sigma = 100_000, 0.15
    a = generate("gaussian", n, 2, seed=1, sigma=sigma)
    assert np.all(np.abs(a.mean(axis=0) - 0.5) < 3 * sigma / np.sqrt(n))
    assert np.allclose(a.std(axis=0), sigma, rtol=0.02)


def test_skewed_is_clustered():
    a = generate("skewed", 20_000, 2, seed=2, clusters=10, spread=0.01)
    counts, _, _ = np.histogram2d(a[:, 0], a[:, 1], bins=20, range=[[0, 1], [0, 1]])
    # mass concentrates in a handful of cells
    top = np.sort(counts.ravel())[::-1]
    assert top[:20].sum() > 0.8 * len(a)


def test_bad_arguments():
    with pytest.raises(ValueError):
        generate("zipf", 10, 2)
    with pytest.raises(ValueError):
        generate("uniform", 0, 2)
    with pytest.raises(ValueError):
        generate("uniform", 10, 1)
    with pytest.raises(ValueError):
        focus_box((0, 0), (1, 1), 0)


def test_focus_box_volume():
    lo, hi = focus_box(np.zeros(3), np.full(3, 2.0), 0.01)
    assert np.prod(hi - lo) == pytest.approx(0.01 * 8)
    assert np.allclose((lo + hi) / 2, 1.0)


def test_window_areas_and_focus():
    n = 10_000
    qs = window_workload((0, 0), (1, 1), 200, n, seed=3, focus=0.01)
    flo, fhi = focus_box(np.zeros(2), np.ones(2), 0.01)
    for q in qs:
        lo, hi = q.rect.as_arrays()
        area = np.prod(hi - lo)
        assert 64 / n - 1e-12 <= area <= 1024 / n + 1e-12
        c = (lo + hi) / 2
        assert np.all((flo <= c) & (c <= fhi))
    assert qs == window_workload((0, 0), (1, 1), 200, n, seed=3, focus=0.01)


def test_knn_ks():
    qs = knn_workload((0, 0), (1, 1), 300, seed=0)
    assert {q.k for q in qs} == {16, 64, 256}


@pytest.mark.parametrize("d,g", [(2, 10), (3, 4)])
def test_tiling_covers_space(d, g):
    qs = tiling_workload(np.zeros(d), np.ones(d), g, seed=1)
    assert len(qs) == g ** d
    vol = sum(np.prod(np.subtract(*q.rect.as_arrays()[::-1])) for q in qs)
    assert vol == pytest.approx(1.0)
    # every probe point lands in at least one tile
    probe = np.random.default_rng(0).random((500, d))
    probe[0] = 1.0
    hit = np.zeros(len(probe), dtype=bool)
    for q in qs:
        lo, hi = q.rect.as_arrays()
        hit |= np.all((probe >= lo) & (probe <= hi), axis=1)
    assert hit.all()
