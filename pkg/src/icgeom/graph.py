"""k-NN graphs, farthest point sampling and ball queries.

All functions work on plain ``(N, D)`` arrays, so the same k-NN code serves
the 3D coordinates of the first layer and the feature spaces of later ones.
Ties are always broken by the smaller point index.
"""

from __future__ import annotations

import numpy as np


def _check_k(n: int, k: int) -> None:
    if k < 1:
        raise ValueError(f"k must be positive, got {k}")
    if k > n:
        raise ValueError(f"k={k} exceeds the number of points ({n})")


def pairwise_sq_dists(x: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances via the Gram expansion.

    Coordinates are taken relative to the first point, which removes any
    common offset and keeps integer inputs exact.
    """
    x = np.asarray(x, dtype=np.float64)
    x = x - x[0]
    sq = np.einsum("ij,ij->i", x, x)
    d = x @ x.T
    d *= -2.0
    d += sq[:, None]
    d += sq[None, :]
    np.maximum(d, 0.0, out=d)
    np.fill_diagonal(d, 0.0)
    return d


def _smallest_k(d: np.ndarray, k: int) -> np.ndarray:
    """Row-wise indices of the k smallest entries, ordered by (value, index)."""
    n_rows, n_cols = d.shape
    if k == n_cols:
        return _sort_rows(d, np.broadcast_to(np.arange(n_cols), d.shape).copy())
    cols = np.argpartition(d, k - 1, axis=1)[:, :k]
    vals = np.take_along_axis(d, cols, axis=1)
    kth = vals.max(axis=1, keepdims=True)
    # rows where the k-th value is shared with an unselected entry
    n_le = (d <= kth).sum(axis=1)
    for r in np.flatnonzero(n_le > k):
        row = d[r]
        cols[r] = np.lexsort((np.arange(n_cols), row))[:k]
        vals[r] = row[cols[r]]
    return _sort_rows(vals, cols)


def _sort_rows(values: np.ndarray, cols: np.ndarray) -> np.ndarray:
    order = np.lexsort((cols, values), axis=-1)
    return np.take_along_axis(cols, order, axis=1)


def knn_graph(features: np.ndarray, k: int) -> np.ndarray:
    """Neighbor table of shape ``(N, k)``; row ``i`` starts with ``i`` itself.

    Rows are ordered nearest first. The self-loop is always present even if
    another point coincides with point ``i``.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n = len(x)
    _check_k(n, k)
    d = pairwise_sq_dists(x)
    np.fill_diagonal(d, -1.0)
    return _smallest_k(d, k)


def knn_graph_exhaustive(features: np.ndarray, k: int) -> np.ndarray:
    """O(N^2) reference scan with explicit coordinate differences."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n = len(x)
    _check_k(n, k)
    idx = np.arange(n)
    rows = np.empty((n, k), dtype=np.int64)
    for i in range(n):
        diff = x - x[i]
        d = np.einsum("ij,ij->i", diff, diff)
        # sort key: (not self, distance, index)
        rows[i] = np.lexsort((idx, d, idx != i))[:k]
    return rows


def farthest_point_sampling(points: np.ndarray, m: int, start: int = 0) -> np.ndarray:
    """Greedy max-min selection of ``m`` indices beginning at ``start``."""
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    if m < 1 or m > n:
        raise ValueError(f"cannot pick {m} of {n} points")
    if not 0 <= start < n:
        raise ValueError(f"start index {start} out of range")
    picked = np.empty(m, dtype=np.int64)
    picked[0] = start
    diff = pts - pts[start]
    min_d = np.einsum("ij,ij->i", diff, diff)
    chosen = np.zeros(n, dtype=bool)
    chosen[start] = True
    for s in range(1, m):
        cand = np.where(chosen, -np.inf, min_d)
        nxt = int(np.argmax(cand))  # first maximum -> smallest index
        picked[s] = nxt
        chosen[nxt] = True
        diff = pts - pts[nxt]
        np.minimum(min_d, np.einsum("ij,ij->i", diff, diff), out=min_d)
    return picked


def ball_query(points: np.ndarray, center, r: float, max_count: int) -> np.ndarray:
    """Indices within distance ``r`` of ``center``, nearest first."""
    if r <= 0:
        raise ValueError("radius must be positive")
    pts = np.asarray(points, dtype=np.float64)
    diff = pts - np.asarray(center, dtype=np.float64)
    d = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    inside = np.flatnonzero(d <= r)
    order = np.lexsort((inside, d[inside]))
    return inside[order][:max_count]
