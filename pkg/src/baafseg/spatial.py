"""Geometric primitives: farthest point sampling, kd-tree kNN, nearest-neighbor
interpolation and neighborhood compactness statistics.

Neighbor lists are sorted by (squared distance, reference index), so ties
always resolve to the lower index and results match a brute-force sort.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .tensor import Tensor, take_rows


class SizeError(ValueError):
    pass


@dataclass(frozen=True)
class SampleSet:
    indices: np.ndarray
    positions: np.ndarray


def _as_points(x) -> np.ndarray:
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected an n x d array, got shape {x.shape}")
    return np.ascontiguousarray(x)


# ---------------------------------------------------------------------- FPS


def fps(positions, m: int, start: int = 0) -> SampleSet:
    """Greedy farthest point sampling; the first pick is ``start``."""
    pts = _as_points(positions)
    n = len(pts)
    if not 1 <= m <= n:
        raise SizeError(f"cannot sample {m} of {n} points")
    if not 0 <= start < n:
        raise IndexError(f"start index {start} out of range for {n} points")
    picked = np.empty(m, dtype=np.int64)
    picked[0] = start
    d2 = ((pts - pts[start]) ** 2).sum(axis=1)
    for i in range(1, m):
        nxt = int(np.argmax(d2))
        picked[i] = nxt
        np.minimum(d2, ((pts - pts[nxt]) ** 2).sum(axis=1), out=d2)
    return SampleSet(picked, pts[picked].astype(np.float32))


def random_sample(positions, m: int, rng: np.random.Generator) -> SampleSet:
    pts = _as_points(positions)
    n = len(pts)
    if not 1 <= m <= n:
        raise SizeError(f"cannot sample {m} of {n} points")
    idx = np.sort(rng.choice(n, size=m, replace=False)).astype(np.int64)
    return SampleSet(idx, pts[idx].astype(np.float32))


# ---------------------------------------------------------------------- kd-tree


class KDTree:
    """Median-split kd-tree over 3-D points with bucket leaves.

    The tree stores a permutation internally; query results are always indices
    into the array the tree was built from.
    """

    def __init__(self, points, leaf_size: int = 16):
        self.points = _as_points(points)
        n = len(self.points)
        if n == 0:
            raise SizeError("kd-tree needs at least one point")
        self.leaf_size = leaf_size
        perm = np.arange(n, dtype=np.int64)
        # node arrays: split dim (-1 for leaf), split value, children, bucket range
        dims, vals, lefts, rights, starts, ends = [], [], [], [], [], []

        def build(lo, hi):
            node = len(dims)
            dims.append(-1)
            vals.append(0.0)
            lefts.append(-1)
            rights.append(-1)
            starts.append(lo)
            ends.append(hi)
            if hi - lo <= leaf_size:
                return node
            sub = self.points[perm[lo:hi]]
            dim = int(np.argmax(sub.max(axis=0) - sub.min(axis=0)))
            mid = (hi - lo) // 2
            order = np.argpartition(sub[:, dim], mid)
            perm[lo:hi] = perm[lo:hi][order]
            dims[node] = dim
            vals[node] = float(self.points[perm[lo + mid], dim])
            lefts[node] = build(lo, lo + mid)
            rights[node] = build(lo + mid, hi)
            return node

        build(0, n)
        self.perm = perm
        self.split_dim = np.array(dims, dtype=np.int64)
        self.split_val = np.array(vals, dtype=np.float64)
        self.left = np.array(lefts, dtype=np.int64)
        self.right = np.array(rights, dtype=np.int64)
        self.start = np.array(starts, dtype=np.int64)
        self.end = np.array(ends, dtype=np.int64)

    def query(self, queries, k: int) -> tuple[np.ndarray, np.ndarray]:
        """k nearest points per query: (indices q x k, squared distances q x k)."""
        q = _as_points(queries)
        if k < 1:
            raise ValueError("k must be >= 1")
        kk = min(k, len(self.points))
        idx, d2 = _kd_query(q, self.points, self.perm, self.split_dim, self.split_val,
                            self.left, self.right, self.start, self.end, kk)
        if kk < k:
            pad = k - kk
            idx = np.concatenate([idx, np.repeat(idx[:, :1], pad, axis=1)], axis=1)
            d2 = np.concatenate([d2, np.repeat(d2[:, :1], pad, axis=1)], axis=1)
        return idx, d2


@numba.njit(cache=True)
def _insert(best_d, best_i, d, i, k):
    # keep (d, i) sorted ascending, lexicographically
    if d > best_d[k - 1] or (d == best_d[k - 1] and i >= best_i[k - 1]):
        return
    j = k - 1
    while j > 0 and (best_d[j - 1] > d or (best_d[j - 1] == d and best_i[j - 1] > i)):
        best_d[j] = best_d[j - 1]
        best_i[j] = best_i[j - 1]
        j -= 1
    best_d[j] = d
    best_i[j] = i


@numba.njit(cache=True)
def _kd_query(queries, pts, perm, split_dim, split_val, left, right, start, end, k):
    nq = queries.shape[0]
    dim = pts.shape[1]
    out_i = np.empty((nq, k), dtype=np.int64)
    out_d = np.empty((nq, k), dtype=np.float64)
    stack = np.empty(256, dtype=np.int64)
    for qi in range(nq):
        best_d = np.full(k, np.inf)
        best_i = np.full(k, np.iinfo(np.int64).max)
        top = 0
        stack[0] = 0
        top = 1
        while top > 0:
            top -= 1
            node = stack[top]
            sd = split_dim[node]
            if sd < 0:
                for s in range(start[node], end[node]):
                    p = perm[s]
                    d = 0.0
                    for c in range(dim):
                        t = queries[qi, c] - pts[p, c]
                        d += t * t
                    _insert(best_d, best_i, d, p, k)
                continue
            diff = queries[qi, sd] - split_val[node]
            if diff < 0:
                near, far = left[node], right[node]
            else:
                near, far = right[node], left[node]
            # far side first on the stack so the near side is searched first
            if diff * diff <= best_d[k - 1]:
                stack[top] = far
                top += 1
            stack[top] = near
            top += 1
        for j in range(k):
            out_i[qi, j] = best_i[j]
            out_d[qi, j] = best_d[j]
    return out_i, out_d


# ---------------------------------------------------------------------- kNN


def knn(query, reference, k: int = 12, tree: KDTree | None = None) -> np.ndarray:
    """Indices of the k nearest reference points per query, padded with the nearest if k > n."""
    ref = _as_points(reference)
    if len(ref) == 0:
        raise SizeError("empty reference set")
    if k < 1:
        raise ValueError("k must be >= 1")
    tree = tree if tree is not None else KDTree(ref)
    return tree.query(query, k)[0]


def dilated_knn(query, reference, k: int, d: int = 1, tree: KDTree | None = None) -> np.ndarray:
    """Every d-th of the k*d nearest neighbors (ranks 0, d, 2d, ...)."""
    if d < 1:
        raise ValueError("dilation must be >= 1")
    return knn(query, reference, k * d, tree=tree)[:, ::d][:, :k]


def brute_knn(query, reference, k: int) -> np.ndarray:
    """O(q*n) reference implementation used as a test oracle."""
    q, ref = _as_points(query), _as_points(reference)
    n = len(ref)
    if n == 0:
        raise SizeError("empty reference set")
    out = np.empty((len(q), k), dtype=np.int64)
    ar = np.arange(n)
    for i, p in enumerate(q):
        d2 = np.zeros(n)
        for c in range(q.shape[1]):
            d2 += (p[c] - ref[:, c]) ** 2
        order = np.lexsort((ar, d2))[:k]
        if len(order) < k:
            order = np.concatenate([order, np.repeat(order[:1], k - len(order))])
        out[i] = order
    return out


# ---------------------------------------------------------------------- interpolation


def nearest_index(low_pos, high_pos) -> np.ndarray:
    low = _as_points(low_pos)
    if len(low) == 0:
        raise SizeError("empty low-resolution set")
    return knn(high_pos, low, 1)[:, 0]


def nn_interpolate(low_pos, low_feat, high_pos):
    """Copy to every high-resolution point the feature of its nearest low-resolution point.

    ``low_feat`` may be an array or a Tensor; a Tensor stays in the graph as a row gather.
    """
    idx = nearest_index(low_pos, high_pos)
    if isinstance(low_feat, Tensor):
        return take_rows(low_feat, idx)
    return np.asarray(low_feat)[idx]


# ---------------------------------------------------------------------- diagnostics


def neighborhood_stats(values, neighbors: np.ndarray, shifted=None) -> dict[str, float]:
    """Mean neighbor-to-centroid distance and mean per-neighborhood variance.

    ``values`` are the centroid attributes (n x d); neighbor values are gathered
    from it unless ``shifted`` (n x k x d) is given, in which case those are
    measured instead. Variance is the mean squared distance of a neighborhood's
    members to their own mean, averaged over neighborhoods.
    """
    v = np.asarray(values, dtype=np.float64)
    nb = v[np.asarray(neighbors)] if shifted is None else np.asarray(shifted, dtype=np.float64)
    if nb.shape[0] != v.shape[0] or nb.shape[2] != v.shape[1]:
        raise ValueError(f"inconsistent shapes {v.shape} and {nb.shape}")
    rel = nb - v[:, None, :]
    dist = np.sqrt((rel ** 2).sum(axis=2))
    var = ((rel - rel.mean(axis=1, keepdims=True)) ** 2).sum(axis=2).mean(axis=1)
    return {"mean_dist": float(dist.mean()), "variance": float(var.mean())}
