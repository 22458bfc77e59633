import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nbnnda.nn_index import NNIndex, NNResult
from nbnnda.types import ValidationError


def numpy_oracle(points, q):
    d = ((points - q) ** 2).sum(axis=1)
    return int(np.argmin(d)), float(d.min())


@pytest.mark.parametrize("backend", ["brute", "kdtree"])
def test_single_point(backend):
    idx = NNIndex([[1.0, 2.0]], backend)
    assert idx.size == 1
    assert idx.nearest([4.0, 6.0]) == NNResult(0, 25.0)


@pytest.mark.parametrize("backend", ["brute", "kdtree"])
def test_thousand_points_all_queryable(backend, rng):
    pts = rng.normal(size=(1000, 64))
    idx = NNIndex(pts, backend)
    assert len(idx) == 1000
    ids, dist = idx.query(pts)
    np.testing.assert_array_equal(ids, np.arange(1000))
    assert (dist == 0).all()


@pytest.mark.parametrize("bad", [[], [[1.0, np.nan]], [[1.0, np.inf]]])
def test_build_rejects(bad):
    with pytest.raises(ValidationError):
        NNIndex(bad)


def test_unknown_backend():
    with pytest.raises(ValueError):
        NNIndex([[0.0]], "lsh")


@pytest.mark.parametrize("backend", ["brute", "kdtree"])
def test_self_match(backend, rng):
    pts = rng.normal(size=(50, 5))
    assert NNIndex(pts, backend).nearest(pts[7]) == NNResult(7, 0.0)


@pytest.mark.parametrize("backend", ["brute", "kdtree"])
def test_tie_goes_to_smaller_id(backend):
    pts = np.array([[5.0, 5.0], [1.0, 0.0], [-1.0, 0.0], [0.0, 1.0]])
    assert NNIndex(pts, backend).nearest([0.0, 0.0]) == NNResult(1, 1.0)


@pytest.mark.parametrize("backend", ["brute", "kdtree"])
def test_duplicates_resolve_to_first(backend, rng):
    base = rng.normal(size=(40, 3))
    pts = np.concatenate([base, base, base])
    ids, dist = NNIndex(pts, backend).query(pts)
    np.testing.assert_array_equal(ids, np.tile(np.arange(40), 3))
    assert (dist == 0).all()


def test_dim_mismatch(rng):
    idx = NNIndex(rng.normal(size=(10, 4)))
    with pytest.raises(ValidationError):
        idx.nearest(np.zeros(3))
    with pytest.raises(ValidationError):
        idx.batch_nearest(np.zeros((5, 3)))


@pytest.mark.parametrize("dim", [2, 64])
def test_kdtree_matches_brute_random(dim, rng):
    pts = rng.normal(size=(500, dim))
    qs = rng.normal(size=(100, dim))
    kd, br = NNIndex(pts, "kdtree").query(qs), NNIndex(pts, "brute").query(qs)
    np.testing.assert_array_equal(kd[0], br[0])
    np.testing.assert_array_equal(kd[1], br[1])
    for q, i, d in zip(qs, *kd):
        oid, od = numpy_oracle(pts, q)
        assert i == oid
        assert d == pytest.approx(od, rel=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 300), st.sampled_from([1, 2, 3, 8]), st.booleans())
def test_kdtree_matches_brute_property(seed, n, dim, lattice):
    rng = np.random.default_rng(seed)
    if lattice:
        # integer lattice points create many exact ties
        pts = rng.integers(-2, 3, size=(n, dim)).astype(float)
        qs = rng.integers(-3, 4, size=(30, dim)).astype(float)
    else:
        pts = rng.normal(size=(n, dim))
        qs = rng.normal(size=(30, dim))
    kd, br = NNIndex(pts, "kdtree").query(qs), NNIndex(pts, "brute").query(qs)
    np.testing.assert_array_equal(kd[0], br[0])
    np.testing.assert_array_equal(kd[1], br[1])


def test_metric_sanity(rng):
    pts = rng.normal(size=(200, 6))
    idx = NNIndex(pts)
    assert idx.nearest(pts[3]).distance == 0.0
    assert idx.nearest(pts[3] + 1e-3).distance > 0.0


def test_batch_equals_sequential(rng):
    pts = rng.normal(size=(300, 8))
    qs = rng.normal(size=(100, 8))
    idx = NNIndex(pts)
    assert idx.batch_nearest(qs) == [idx.nearest(q) for q in qs]
    assert idx.batch_nearest(np.zeros((0, 8))) == []


def test_threaded_batch_is_order_preserving(rng):
    pts = rng.normal(size=(400, 16))
    qs = rng.normal(size=(333, 16))
    idx = NNIndex(pts)
    one = idx.query(qs)
    for threads in (2, 3, 7):
        many = idx.query(qs, threads=threads)
        np.testing.assert_array_equal(one[0], many[0])
        np.testing.assert_array_equal(one[1], many[1])


def test_concurrent_queries_share_index(rng):
    pts = rng.normal(size=(500, 8))
    qs = rng.normal(size=(200, 8))
    idx = NNIndex(pts)
    expected = idx.query(qs)
    out = [None] * 4

    def work(k):
        out[k] = idx.query(qs)

    ts = [threading.Thread(target=work, args=(k,)) for k in range(4)]
    for t in ts:
        t.start()
    for t in ts:
        t.join()
    for ids, dist in out:
        np.testing.assert_array_equal(ids, expected[0])
        np.testing.assert_array_equal(dist, expected[1])


def test_index_is_immutable(rng):
    idx = NNIndex(rng.normal(size=(20, 2)))
    with pytest.raises(ValueError):
        idx.points[0, 0] = 3.0
