"""Deterministic K-means with k-means++ style seeding.

Hand-rolled instead of delegating so the seeding, tie-breaking, and
empty-cluster policy are fixed: same seed, same clustering, bit for bit.
"""

import numpy as np


def kmeans(points, k, seed, max_iters=100, tol=1e-6):
    """Lloyd iterations until relative inertia change < tol.

    Empty clusters are re-seeded from the point farthest from its assigned
    centroid.  Returns (labels int32[N], centroids (k, D), inertia).
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if k > n:
        raise ValueError(f"k={k} exceeds {n} points")
    rng = np.random.default_rng(seed)
    centroids = _plus_plus_seed(points, k, rng)
    labels = np.zeros(n, dtype=np.int32)
    inertia = np.inf
    for _ in range(max_iters):
        d2 = _sq_distances(points, centroids)
        labels = np.argmin(d2, axis=1).astype(np.int32)
        closest = d2[np.arange(n), labels]
        for c in range(k):
            mask = labels == c
            if not np.any(mask):
                far = int(np.argmax(closest))
                centroids[c] = points[far]
                labels[far] = c
                closest[far] = 0.0
                mask = labels == c
            centroids[c] = points[mask].mean(axis=0)
        new_inertia = _sq_distances(points, centroids)[np.arange(n), labels].sum()
        if inertia - new_inertia <= tol * max(inertia, 1e-300):
            inertia = new_inertia
            break
        inertia = new_inertia
    return labels, centroids, float(inertia)


def _sq_distances(points, centroids):
    return ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)


def _plus_plus_seed(points, k, rng):
    n = len(points)
    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[rng.integers(n)]
    d2 = ((points - centroids[0]) ** 2).sum(axis=1)
    for c in range(1, k):
        total = d2.sum()
        if total <= 0:  # all remaining points coincide with a centroid
            centroids[c] = points[rng.integers(n)]
        else:
            centroids[c] = points[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((points - centroids[c]) ** 2).sum(axis=1))
    return centroids
