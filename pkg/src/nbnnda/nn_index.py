"""Exact 1-nearest-neighbour search under squared Euclidean distance.

Two backends answer the same queries: ``brute`` scans every point and
``kdtree`` (median split on the widest dimension, leaf size 16) prunes with
bounding boxes. Both share one distance kernel, so they agree bit-for-bit;
ties go to the smallest point id.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Tuple

import numba as nb
import numpy as np

from .types import ValidationError

BACKENDS = ("brute", "kdtree")
LEAF_SIZE = 16
_STACK = 512


@nb.njit(cache=True, inline="always")
def _sqdist(q, p):
    # four interleaved lanes; _box_bound mirrors this association exactly
    a0 = 0.0
    a1 = 0.0
    a2 = 0.0
    a3 = 0.0
    d = q.shape[0]
    k = 0
    while k + 4 <= d:
        t0 = q[k] - p[k]
        t1 = q[k + 1] - p[k + 1]
        t2 = q[k + 2] - p[k + 2]
        t3 = q[k + 3] - p[k + 3]
        a0 += t0 * t0
        a1 += t1 * t1
        a2 += t2 * t2
        a3 += t3 * t3
        k += 4
    while k < d:
        t = q[k] - p[k]
        a0 += t * t
        k += 1
    return (a0 + a1) + (a2 + a3)


@nb.njit(cache=True, inline="always")
def _sqdist_capped(q, p, cap):
    # _sqdist, abandoned once a partial sum exceeds cap (the result then only
    # needs to compare greater than cap; partial sums never exceed the total)
    a0 = 0.0
    a1 = 0.0
    a2 = 0.0
    a3 = 0.0
    d = q.shape[0]
    k = 0
    while k + 4 <= d:
        t0 = q[k] - p[k]
        t1 = q[k + 1] - p[k + 1]
        t2 = q[k + 2] - p[k + 2]
        t3 = q[k + 3] - p[k + 3]
        a0 += t0 * t0
        a1 += t1 * t1
        a2 += t2 * t2
        a3 += t3 * t3
        k += 4
        if (k & 15) == 0 and (a0 + a1) + (a2 + a3) > cap:
            return np.inf
    while k < d:
        t = q[k] - p[k]
        a0 += t * t
        k += 1
    return (a0 + a1) + (a2 + a3)


@nb.njit(cache=True, inline="always")
def _gap(v, lo, hi):
    # branchless; lo <= hi so at most one term is non-zero
    return max(lo - v, 0.0) + max(v - hi, 0.0)


@nb.njit(cache=True, inline="always")
def _box_bound(q, lo, hi):
    # Same lane layout as _sqdist, each term <= the matching term of any point
    # inside the box, so the rounded bound never exceeds a rounded distance.
    a0 = 0.0
    a1 = 0.0
    a2 = 0.0
    a3 = 0.0
    d = q.shape[0]
    k = 0
    while k + 4 <= d:
        t0 = _gap(q[k], lo[k], hi[k])
        t1 = _gap(q[k + 1], lo[k + 1], hi[k + 1])
        t2 = _gap(q[k + 2], lo[k + 2], hi[k + 2])
        t3 = _gap(q[k + 3], lo[k + 3], hi[k + 3])
        a0 += t0 * t0
        a1 += t1 * t1
        a2 += t2 * t2
        a3 += t3 * t3
        k += 4
    while k < d:
        t = _gap(q[k], lo[k], hi[k])
        a0 += t * t
        k += 1
    return (a0 + a1) + (a2 + a3)


@nb.njit(cache=True, nogil=True)
def _brute_query(queries, points, out_ids, out_d):
    n = points.shape[0]
    for qi in range(queries.shape[0]):
        q = queries[qi]
        best = np.inf
        best_id = -1
        for i in range(n):
            dd = _sqdist(q, points[i])
            if dd < best:
                best = dd
                best_id = i
        out_ids[qi] = best_id
        out_d[qi] = best


@nb.njit(cache=True)
def _kd_build(points, leaf_size):
    n, d = points.shape
    perm = np.arange(n)
    cap = 4 * (n // leaf_size + 1) + 1
    start = np.zeros(cap, np.int64)
    end = np.zeros(cap, np.int64)
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    lo = np.zeros((cap, d))
    hi = np.zeros((cap, d))
    end[0] = n
    n_nodes = 1
    todo = np.zeros(cap, np.int64)
    top = 1
    while top > 0:
        top -= 1
        node = todo[top]
        s = start[node]
        e = end[node]
        widest = -1.0
        axis = 0
        for j in range(d):
            mn = np.inf
            mx = -np.inf
            for i in range(s, e):
                v = points[perm[i], j]
                if v < mn:
                    mn = v
                if v > mx:
                    mx = v
            lo[node, j] = mn
            hi[node, j] = mx
            if mx - mn > widest:
                widest = mx - mn
                axis = j
        if e - s <= leaf_size or widest <= 0.0:
            continue
        members = perm[s:e].copy()
        keys = np.empty(e - s)
        for i in range(e - s):
            keys[i] = points[members[i], axis]
        order = np.argsort(keys, kind="mergesort")
        for i in range(e - s):
            perm[s + i] = members[order[i]]
        mid = (s + e) // 2
        a = n_nodes
        b = n_nodes + 1
        n_nodes += 2
        start[a] = s
        end[a] = mid
        start[b] = mid
        end[b] = e
        left[node] = a
        right[node] = b
        todo[top] = a
        todo[top + 1] = b
        top += 2
    return (perm, start[:n_nodes].copy(), end[:n_nodes].copy(), left[:n_nodes].copy(),
            right[:n_nodes].copy(), lo[:n_nodes].copy(), hi[:n_nodes].copy())


@nb.njit(cache=True, nogil=True)
def _kd_query(queries, data, perm, start, end, left, right, lo, hi, out_ids, out_d):
    stack = np.empty(_STACK, np.int64)
    bounds = np.empty(_STACK)
    for qi in range(queries.shape[0]):
        q = queries[qi]
        best = np.inf
        best_id = -1
        stack[0] = 0
        bounds[0] = 0.0
        top = 1
        while top > 0:
            top -= 1
            node = stack[top]
            # equality must still be visited: a tie with a smaller id may live there
            if bounds[top] > best:
                continue
            if left[node] < 0:
                for i in range(start[node], end[node]):
                    dd = _sqdist_capped(q, data[i], best)
                    if dd < best or (dd == best and perm[i] < best_id):
                        best = dd
                        best_id = perm[i]
                continue
            a = left[node]
            b = right[node]
            ba = _box_bound(q, lo[a], hi[a])
            bb = _box_bound(q, lo[b], hi[b])
            if ba <= bb:
                near, far, bn, bf = a, b, ba, bb
            else:
                near, far, bn, bf = b, a, bb, ba
            if bf <= best:
                stack[top] = far
                bounds[top] = bf
                top += 1
            if bn <= best:
                stack[top] = near
                bounds[top] = bn
                top += 1
        out_ids[qi] = best_id
        out_d[qi] = best


@dataclass(frozen=True)
class NNResult:
    point_id: int
    distance: float


class NNIndex:
    """Immutable exact nearest-neighbour index over a fixed point set.

    Distances are squared Euclidean. Queries are read-only, so one index can
    serve many threads at once.
    """

    def __init__(self, points, backend: str = "kdtree", leaf_size: int = LEAF_SIZE):
        if backend not in BACKENDS:
            raise ValueError(f"unknown backend {backend!r}; expected one of {BACKENDS}")
        pts = np.array(points, dtype=np.float64, order="C")
        if pts.ndim != 2 or pts.shape[0] == 0 or pts.shape[1] == 0:
            raise ValidationError(f"index needs a non-empty 2-D point set, got shape {pts.shape}")
        if not np.isfinite(pts).all():
            raise ValidationError("index points contain non-finite values")
        pts.setflags(write=False)
        self.backend = backend
        self.points = pts
        self.leaf_size = leaf_size
        self._tree: Optional[Tuple[np.ndarray, ...]] = None
        if backend == "kdtree":
            perm, start, end, left, right, lo, hi = _kd_build(pts, leaf_size)
            data = np.ascontiguousarray(pts[perm])
            self._tree = (data, perm, start, end, left, right, lo, hi)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def size(self) -> int:
        return self.points.shape[0]

    def __len__(self) -> int:
        return self.size

    def _check_queries(self, queries) -> np.ndarray:
        q = np.asarray(queries, dtype=np.float64)
        if q.ndim == 1 and q.size == 0:
            q = q.reshape(0, self.dim)
        if q.ndim != 2 or q.shape[1] != self.dim:
            raise ValidationError(f"query dim mismatch: index dim {self.dim}, queries shape {q.shape}")
        return np.ascontiguousarray(q)

    def _run(self, q: np.ndarray, ids: np.ndarray, dist: np.ndarray) -> None:
        if self._tree is None:
            _brute_query(q, self.points, ids, dist)
        else:
            _kd_query(q, *self._tree, ids, dist)

    def query(self, queries, threads: int = 1) -> Tuple[np.ndarray, np.ndarray]:
        """Vectorised form of :meth:`batch_nearest`: returns ``(ids, sq_distances)`` arrays."""
        q = self._check_queries(queries)
        m = q.shape[0]
        ids = np.empty(m, np.int64)
        dist = np.empty(m, np.float64)
        if m == 0:
            return ids, dist
        if threads <= 1 or m < 2 * threads:
            self._run(q, ids, dist)
            return ids, dist
        bounds = np.linspace(0, m, threads + 1).astype(int)
        with ThreadPoolExecutor(max_workers=threads) as pool:
            jobs = [pool.submit(self._run, q[a:b], ids[a:b], dist[a:b])
                    for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
            for job in jobs:
                job.result()
        return ids, dist

    def nearest(self, query) -> NNResult:
        q = np.asarray(query, dtype=np.float64)
        if q.ndim != 1:
            raise ValidationError(f"single query must be 1-D, got shape {q.shape}")
        ids, dist = self.query(q.reshape(1, -1))
        return NNResult(int(ids[0]), float(dist[0]))

    def batch_nearest(self, queries, threads: int = 1):
        ids, dist = self.query(queries, threads=threads)
        return [NNResult(int(i), float(d)) for i, d in zip(ids, dist)]


def build(points, backend: str = "kdtree") -> NNIndex:
    return NNIndex(points, backend)


def nearest(idx: NNIndex, query) -> NNResult:
    return idx.nearest(query)


def batch_nearest(idx: NNIndex, queries, threads: int = 1):
    return idx.batch_nearest(queries, threads=threads)
