"""Exact Euclidean nearest-neighbor queries, chunked to bound memory.

Ties are broken toward the lowest point index (stable sort order), which the
clustering and loss code relies on for determinism.
"""

from __future__ import annotations

import numpy as np

__all__ = ["pairwise_sq_dists", "knn", "nearest"]

_CHUNK_BUDGET = 1 << 22  # pairwise-distance entries held at once


def pairwise_sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances, shape (len(a), len(b))."""
    d = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", d, d)


def knn(points: np.ndarray, k: int, query: np.ndarray | None = None,
        exclude_self: bool = False):
    """Indices and distances of the k nearest points for each query row.

    With `exclude_self` the query is assumed to be `points` itself and each
    point's own row is masked out. Returns (idx, dist) of shape (Q, k).
    """
    if query is None:
        query = points
    n = len(points)
    limit = n - 1 if exclude_self else n
    if not 1 <= k <= limit:
        raise ValueError(f"k={k} invalid for {n} reference points")

    rows = max(1, _CHUNK_BUDGET // max(1, n))
    idx_out = np.empty((len(query), k), dtype=np.intp)
    dist_out = np.empty((len(query), k), dtype=np.float64)
    for start in range(0, len(query), rows):
        stop = min(start + rows, len(query))
        d2 = pairwise_sq_dists(query[start:stop], points)
        if exclude_self:
            d2[np.arange(start, stop) - start, np.arange(start, stop)] = np.inf
        if n > 4096 and k + 1 < n:
            # narrow to candidates first; stable order restored below
            cand = np.argpartition(d2, k, axis=1)[:, : k + 1]
            cd = np.take_along_axis(d2, cand, axis=1)
            order = np.argsort(cd, axis=1, kind="stable")[:, :k]
            idx = np.take_along_axis(cand, order, axis=1)
            # lowest-index tie break within the candidate set
            pairs = np.take_along_axis(cd, order, axis=1)
            resort = np.lexsort((idx, pairs))
            idx = np.take_along_axis(idx, resort, axis=1)
            dist = np.take_along_axis(pairs, resort, axis=1)
        else:
            order = np.argsort(d2, axis=1, kind="stable")[:, :k]
            idx = order
            dist = np.take_along_axis(d2, order, axis=1)
        idx_out[start:stop] = idx
        dist_out[start:stop] = dist
    return idx_out, np.sqrt(dist_out)


def nearest(query: np.ndarray, points: np.ndarray):
    """Index of the single nearest point (lowest index on ties) per query row."""
    rows = max(1, _CHUNK_BUDGET // max(1, len(points)))
    idx_out = np.empty(len(query), dtype=np.intp)
    for start in range(0, len(query), rows):
        stop = min(start + rows, len(query))
        d2 = pairwise_sq_dists(query[start:stop], points)
        idx_out[start:stop] = np.argmin(d2, axis=1)
    return idx_out
