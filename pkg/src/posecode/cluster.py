"""Size-balanced k-means clustering.

The splitter used to build surface code hierarchies: k-means++ seeding
followed by Lloyd iterations whose assignment step is forced to produce
groups of equal size (within one element). For two centers the balanced
assignment sorts points by the difference of their distances to the two
centers and splits at the median; for r centers it assigns points to their
nearest non-full center in order of assignment confidence.

Randomness comes from a counter-based hash of (seed, node id, draw index),
so every split is reproducible in isolation; a hierarchy of millions of
splits needs no shared generator state.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.utils.validation import check_array

_MAX_LLOYD_ITER = 32
_CENTER_TOL_MM = 1e-9
_M64 = (1 << 64) - 1


def _hash64(*parts: int) -> int:
    """SplitMix64-style mix of integer parts into a uint64."""
    h = 0x9E3779B97F4A7C15
    for p in parts:
        h ^= int(p) & _M64
        h = (h * 0xBF58476D1CE4E5B9) & _M64
        h ^= h >> 29
        h = (h * 0x94D049BB133111EB) & _M64
        h ^= h >> 32
    return h


class SplitRandom:
    """Deterministic draw stream for one clustering run."""

    __slots__ = ("seed", "node", "counter")

    def __init__(self, seed: int, node: int = 0):
        self.seed = int(seed)
        self.node = int(node)
        self.counter = 0

    def _next(self) -> int:
        h = _hash64(self.seed, self.node, self.counter)
        self.counter += 1
        return h

    def integers(self, n: int) -> int:
        return self._next() % n

    def uniform(self) -> float:
        return self._next() / 2.0**64


def balanced_two_split(points, seed=0):
    """Split points into two groups whose sizes differ by at most one.

    Args:
        points: (N, 3) array of 3D points, N >= 2.
        seed: Seed for the k-means++ center initialization.

    Returns:
        (left, right): ascending index arrays partitioning range(N); the
        left group holds the points closer to the first seeded center
        (ties broken by input index) and receives the extra point when
        N is odd.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or len(points) < 2:
        raise ValueError("balanced_two_split needs at least 2 points")
    labels = _balanced_split(points, 2, SplitRandom(seed))
    idx = np.arange(len(points))
    return idx[labels == 0], idx[labels == 1]


def _seed_two_centers(points, rand):
    """k-means++ for two centers: random first, squared-distance-weighted second."""
    n = len(points)
    j = rand.integers(n)
    c0 = points[j]
    diff = points - c0
    d2 = np.einsum("ij,ij->i", diff, diff)
    total = d2.sum()
    if total <= 0.0:
        return c0, c0.copy()  # all points coincide
    u = rand.uniform() * total
    k = int(np.searchsorted(np.cumsum(d2), u, side="right"))
    return c0, points[min(k, n - 1)]


def _two_split_order(points, c0, c1):
    """Indices sorted by (dist to c0 - dist to c1), stable in input index."""
    d = points - c0
    e0 = np.sqrt(np.einsum("ij,ij->i", d, d))
    d = points - c1
    e1 = np.sqrt(np.einsum("ij,ij->i", d, d))
    return np.argsort(e0 - e1, kind="stable")


def _balanced_split_two(points, rand):
    n = len(points)
    n_left = (n + 1) // 2
    c0, c1 = _seed_two_centers(points, rand)
    order = _two_split_order(points, c0, c1)
    for _ in range(_MAX_LLOYD_ITER):
        left = points[order[:n_left]]
        right = points[order[n_left:]]
        nc0 = left.sum(axis=0) / len(left)
        nc1 = right.sum(axis=0) / len(right)
        move = max(
            float(np.sqrt(((nc0 - c0) ** 2).sum())),
            float(np.sqrt(((nc1 - c1) ** 2).sum())),
        )
        c0, c1 = nc0, nc1
        order = _two_split_order(points, c0, c1)
        if move < _CENTER_TOL_MM:
            break
    labels = np.empty(n, dtype=np.int64)
    labels[order[:n_left]] = 0
    labels[order[n_left:]] = 1
    return labels


def _kmeanspp_centers(points, r, rand):
    """Standard k-means++ seeding with the counter-based draw stream."""
    n = len(points)
    centers = np.empty((r, points.shape[1]))
    centers[0] = points[rand.integers(n)]
    diff = points - centers[0]
    d2 = np.einsum("ij,ij->i", diff, diff)
    for k in range(1, r):
        total = d2.sum()
        if total <= 0.0:
            centers[k] = centers[0]  # all remaining points coincide
            continue
        u = rand.uniform() * total
        j = int(np.searchsorted(np.cumsum(d2), u, side="right"))
        centers[k] = points[min(j, n - 1)]
        diff = points - centers[k]
        d2 = np.minimum(d2, np.einsum("ij,ij->i", diff, diff))
    return centers


def _balanced_assign_r(points, centers):
    """Confidence-ordered round-robin assignment under per-center capacities.

    Points are processed from most to least decisive (largest margin between
    their best and second-best center first) and take their nearest center
    that still has capacity. Capacities differ by at most one; lower-index
    centers receive the remainder.
    """
    n, r = len(points), len(centers)
    dists = np.linalg.norm(points[:, None, :] - centers[None, :, :], axis=2)
    part = np.sort(dists, axis=1)
    margin = part[:, 0] - part[:, 1]  # negative of the decisiveness
    order = np.argsort(margin, kind="stable")
    cap = np.full(r, n // r, dtype=np.int64)
    cap[: n % r] += 1
    pref = np.argsort(dists, axis=1, kind="stable")
    labels = np.empty(n, dtype=np.int64)
    for i in order:
        for c in pref[i]:
            if cap[c] > 0:
                cap[c] -= 1
                labels[i] = c
                break
    return labels


def _balanced_split_r(points, r, rand):
    centers = _kmeanspp_centers(points, r, rand)
    labels = _balanced_assign_r(points, centers)
    for _ in range(_MAX_LLOYD_ITER):
        new_centers = np.stack([points[labels == k].mean(axis=0) for k in range(r)])
        move = np.linalg.norm(new_centers - centers, axis=1).max()
        centers = new_centers
        labels = _balanced_assign_r(points, centers)
        if move < _CENTER_TOL_MM:
            break
    return labels


def _balanced_split(points, r, rand):
    """Balanced r-way split. Returns int labels in {0..r-1}."""
    n = len(points)
    if n < r:
        raise ValueError(f"cannot split {n} points into {r} balanced groups")
    if r == 2:
        return _balanced_split_two(points, rand)
    return _balanced_split_r(points, r, rand)


class BalancedKMeans(BaseEstimator, ClusterMixin):
    """K-means variant whose clusters are constrained to equal sizes.

    Parameters
    ----------
    n_clusters : int, default=2
        Number of groups; any two group sizes differ by at most one.
    random_state : int, default=0
        Seed for k-means++ initialization.

    Attributes
    ----------
    labels_ : ndarray of shape (n_samples,)
        Balanced group index of each training point.
    cluster_centers_ : ndarray of shape (n_clusters, n_features)
        Mean of each group after the final assignment.
    """

    def __init__(self, n_clusters=2, random_state=0):
        self.n_clusters = n_clusters
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        self.labels_ = _balanced_split(X, self.n_clusters, SplitRandom(self.random_state))
        self.cluster_centers_ = np.stack(
            [X[self.labels_ == k].mean(axis=0) for k in range(self.n_clusters)]
        )
        return self

    def predict(self, X):
        """Nearest fitted center (unconstrained; balance applies to fit only)."""
        X = check_array(X, dtype=np.float64)
        d = np.linalg.norm(X[:, None, :] - self.cluster_centers_[None], axis=2)
        return np.argmin(d, axis=1)
