"""Exact 2-D neighbour queries over micrometre point sets.

The acceleration structure is scipy's ``cKDTree``; it is only used to collect
candidates. Final membership, distances and ordering are always decided by
``_distances`` so that results agree exactly with :func:`brute_force_neighbors`.
Ordering is ascending by (distance, id).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial import cKDTree

# relative slack used when asking the tree for candidates
_SLACK = 1e-9


@dataclass(frozen=True)
class Point2:
    x: float
    y: float


def _as_xy(points) -> np.ndarray:
    if isinstance(points, np.ndarray):
        xy = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    else:
        pts = list(points)
        if pts and isinstance(pts[0], Point2):
            xy = np.array([(p.x, p.y) for p in pts], dtype=np.float64).reshape(-1, 2)
        else:
            xy = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    if not np.all(np.isfinite(xy)):
        raise ValueError("non-finite coordinate in point set")
    return xy


def _distances(xy: np.ndarray, q: np.ndarray) -> np.ndarray:
    return np.hypot(xy[..., 0] - q[..., 0], xy[..., 1] - q[..., 1])


class SpatialIndex:
    """Immutable point set with stable integer ids."""

    def __init__(self, xy: np.ndarray, ids: np.ndarray | None = None):
        self.xy = _as_xy(xy)
        self.xy.setflags(write=False)
        n = len(self.xy)
        if ids is None:
            ids = np.arange(n, dtype=np.int64)
        self.ids = np.asarray(ids, dtype=np.int64)
        if self.ids.shape != (n,):
            raise ValueError(f"ids shape {self.ids.shape} does not match {n} points")
        if len(np.unique(self.ids)) != n:
            raise ValueError("ids must be unique")
        self._pos = {int(i): p for p, i in enumerate(self.ids)}
        self.tree = cKDTree(self.xy) if n else None

    def __len__(self) -> int:
        return len(self.xy)

    def position_of(self, id_: int) -> int:
        return self._pos[int(id_)]

    def _query_point(self, query) -> tuple[np.ndarray, int | None]:
        if isinstance(query, (int, np.integer)):
            p = self.position_of(query)
            return self.xy[p], p
        if isinstance(query, Point2):
            q = np.array([query.x, query.y], dtype=np.float64)
        else:
            q = np.asarray(query, dtype=np.float64).reshape(2)
        if not np.all(np.isfinite(q)):
            raise ValueError("non-finite query coordinate")
        return q, None


def build_index(points, ids: Sequence[int] | None = None) -> SpatialIndex:
    return SpatialIndex(_as_xy(points), None if ids is None else np.asarray(ids))


def _exclusion_mask(index: SpatialIndex, cand: np.ndarray, d: np.ndarray,
                    self_pos: int | None, exclude_self: bool) -> np.ndarray:
    if not exclude_self:
        return np.ones(len(cand), dtype=bool)
    if self_pos is not None:
        return cand != self_pos
    # point query: "self" is whatever sits exactly on the query
    return d > 0.0


def _ordered(index: SpatialIndex, cand: np.ndarray, d: np.ndarray) -> list[tuple[int, float]]:
    ids = index.ids[cand]
    order = np.lexsort((ids, d))
    return [(int(ids[o]), float(d[o])) for o in order]


def knn(index: SpatialIndex, query, k: int, exclude_self: bool = False) -> list[tuple[int, float]]:
    """The ``k`` nearest points as ``(id, distance)``, ties broken by ascending id.

    ``query`` is either a coordinate (``Point2`` or pair) or the id of an indexed
    point. With ``exclude_self`` an id query drops that id; a coordinate query
    drops points lying exactly on it.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    n = len(index)
    if n == 0:
        return []
    q, self_pos = index._query_point(query)
    want = min(n, k + (1 if exclude_self else 0))
    dtree, _ = index.tree.query(q, k=want)
    dk = float(np.max(np.atleast_1d(dtree)))
    cand = np.asarray(index.tree.query_ball_point(q, dk * (1 + _SLACK) + 1e-12), dtype=np.int64)
    d = _distances(index.xy[cand], q)
    keep = _exclusion_mask(index, cand, d, self_pos, exclude_self)
    cand, d = cand[keep], d[keep]
    if len(cand) < k and len(cand) < n - (0 if not exclude_self else 1):
        # many coincident points were excluded; fall back to a full scan
        return brute_force_neighbors(index, query, k=k, exclude_self=exclude_self)
    return _ordered(index, cand, d)[:k]


def within_radius(index: SpatialIndex, query, eps: float,
                  exclude_self: bool = False) -> list[tuple[int, float]]:
    """All points with distance <= ``eps`` (closed ball), sorted by (distance, id)."""
    if not eps > 0:
        raise ValueError("eps must be > 0")
    if len(index) == 0:
        return []
    q, self_pos = index._query_point(query)
    cand = np.asarray(index.tree.query_ball_point(q, eps * (1 + _SLACK) + 1e-12), dtype=np.int64)
    d = _distances(index.xy[cand], q)
    keep = (d <= eps) & _exclusion_mask(index, cand, d, self_pos, exclude_self)
    return _ordered(index, cand[keep], d[keep])


def brute_force_neighbors(points, query, k: int | None = None, eps: float | None = None,
                          exclude_self: bool = False) -> list[tuple[int, float]]:
    """Linear-scan reference for :func:`knn` (``k``) and :func:`within_radius` (``eps``)."""
    if (k is None) == (eps is None):
        raise ValueError("give exactly one of k or eps")
    index = points if isinstance(points, SpatialIndex) else SpatialIndex(_as_xy(points))
    if len(index) == 0:
        return []
    q, self_pos = index._query_point(query)
    cand = np.arange(len(index))
    d = _distances(index.xy, q)
    keep = _exclusion_mask(index, cand, d, self_pos, exclude_self)
    if eps is not None:
        keep &= d <= eps
    res = _ordered(index, cand[keep], d[keep])
    return res[:k] if k is not None else res


# ---------------------------------------------------------------------------
# batch queries used by graph construction


def knn_all(index: SpatialIndex, k: int) -> tuple[np.ndarray, np.ndarray]:
    """kNN of every indexed point against the others (self excluded by position).

    Returns ``(nbr, dist)`` of shape ``(n, k)``; ``nbr`` holds positions, padded
    with -1 (and ``dist`` with inf) when fewer than ``k`` others exist.
    """
    n = len(index)
    nbr = np.full((n, k), -1, dtype=np.int64)
    dist = np.full((n, k), np.inf)
    if n <= 1:
        return nbr, dist
    want = min(n, k + 2)
    _, cols = index.tree.query(index.xy, k=want)
    cols = cols.reshape(n, want)
    rows = np.repeat(np.arange(n), want).reshape(n, want)
    d = _distances(index.xy[cols], index.xy[rows])
    d = np.where(cols == rows, np.inf, d)
    ids = index.ids[cols]
    # row-wise (distance, id) sort
    order = _rowwise_lexsort(d, ids)
    cols = np.take_along_axis(cols, order, axis=1)
    d = np.take_along_axis(d, order, axis=1)
    m = min(k, n - 1)
    nbr[:, :m] = cols[:, :m]
    dist[:, :m] = d[:, :m]
    if want < n:
        # the candidate window may have cut through a tie at the k-th distance
        last = np.max(np.where(np.isfinite(d), d, -np.inf), axis=1)
        risky = last <= dist[:, m - 1] * (1 + _SLACK) + 1e-12
        for p in np.nonzero(risky)[0]:
            res = knn(index, int(index.ids[p]), m, exclude_self=True)
            nbr[p, :m] = [index.position_of(i) for i, _ in res]
            dist[p, :m] = [dd for _, dd in res]
    return nbr, dist


def _rowwise_lexsort(d: np.ndarray, ids: np.ndarray) -> np.ndarray:
    n, w = d.shape
    row = np.repeat(np.arange(n), w)
    flat = np.lexsort((ids.ravel(), d.ravel(), row))
    return (flat % w).reshape(n, w)


def radius_pairs(index: SpatialIndex, eps: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Unordered pairs ``i < j`` (positions) with distance <= ``eps``, lexicographically sorted."""
    if len(index) < 2:
        e = np.empty(0, dtype=np.int64)
        return e, e.copy(), np.empty(0)
    pairs = index.tree.query_pairs(eps * (1 + _SLACK) + 1e-12, output_type="ndarray")
    pairs = np.sort(pairs.reshape(-1, 2), axis=1)
    d = _distances(index.xy[pairs[:, 0]], index.xy[pairs[:, 1]])
    keep = d <= eps
    i, j, d = pairs[keep, 0], pairs[keep, 1], d[keep]
    order = np.lexsort((j, i))
    return i[order], j[order], d[order]


def cross_radius_pairs(a: SpatialIndex, b: SpatialIndex,
                       eps: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pairs ``(i in a, j in b)`` (positions) with distance <= ``eps``, sorted by (i, j)."""
    if len(a) == 0 or len(b) == 0:
        e = np.empty(0, dtype=np.int64)
        return e, e.copy(), np.empty(0)
    sdm = a.tree.sparse_distance_matrix(b.tree, eps * (1 + _SLACK) + 1e-12, output_type="ndarray")
    i = sdm["i"].astype(np.int64)
    j = sdm["j"].astype(np.int64)
    d = _distances(a.xy[i], b.xy[j])
    keep = d <= eps
    i, j, d = i[keep], j[keep], d[keep]
    order = np.lexsort((j, i))
    return i[order], j[order], d[order]


def brute_force_pairs(xy_a: np.ndarray, xy_b: np.ndarray | None, eps: float) -> set[tuple[int, int]]:
    """Reference pair scan; with ``xy_b`` None it is a self-join returning ``i < j``."""
    xy_a = _as_xy(xy_a)
    other = xy_a if xy_b is None else _as_xy(xy_b)
    out = set()
    for i in range(len(xy_a)):
        d = _distances(other, xy_a[i])
        for j in np.nonzero(d <= eps)[0]:
            if xy_b is None and j <= i:
                continue
            out.add((i, int(j)))
    return out


def iter_points(xy: np.ndarray) -> Iterable[Point2]:
    for x, y in np.asarray(xy, dtype=np.float64):
        yield Point2(float(x), float(y))
