"""Lloyd's k-means with k-means++ seeding, shared by the codebook trainers.

Determinism contract: every random draw comes from the caller-supplied
PCG64 generator, assignments break ties toward the lower centroid index,
and empty clusters are repaired by stealing the point farthest from its
assigned centroid (lowest index on ties). A fixed (data, k, generator
state) therefore always yields the same centroids in a given environment.
"""

from __future__ import annotations

import numpy as np

__all__ = ["kmeans_fit", "assign_nearest", "pairwise_sq_dists"]


def pairwise_sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared L2 distances between rows of `a` (n, d) and `b` (m, d).

    Uses the expansion ||a||^2 + ||b||^2 - 2ab and clamps tiny negatives
    introduced by cancellation.
    """
    a = np.asarray(a, dtype=np.float32)
    b = np.asarray(b, dtype=np.float32)
    d2 = (
        np.einsum("ij,ij->i", a, a)[:, None]
        + np.einsum("ij,ij->i", b, b)[None, :]
        - 2.0 * (a @ b.T)
    )
    np.maximum(d2, 0.0, out=d2)
    return d2


def assign_nearest(data: np.ndarray, centroids: np.ndarray, block: int = 65536) -> np.ndarray:
    """Index of the nearest centroid per row, ties to the lower index."""
    n = data.shape[0]
    out = np.empty(n, dtype=np.int64)
    for start in range(0, n, block):
        out[start:start + block] = pairwise_sq_dists(data[start:start + block], centroids).argmin(axis=1)
    return out


def _seed_plus_plus(data: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ initial centers: sample proportionally to squared distance."""
    n = data.shape[0]
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = rng.integers(n)
    diff = data - data[chosen[0]]
    d2 = np.einsum("ij,ij->i", diff, diff).astype(np.float64)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            chosen[j] = rng.integers(n)
        else:
            chosen[j] = rng.choice(n, p=d2 / total)
        diff = data - data[chosen[j]]
        np.minimum(d2, np.einsum("ij,ij->i", diff, diff), out=d2)
    return data[chosen].astype(np.float32, copy=True)


def kmeans_fit(
    data: np.ndarray,
    k: int,
    iters: int,
    rng: np.random.Generator,
    tol: float = 1e-5,
) -> np.ndarray:
    """Cluster `data` (n, d) float32 into exactly `k` centroids.

    Stops after `iters` Lloyd iterations or once the relative Frobenius
    shift of the centroid matrix drops below `tol`, whichever comes first.
    Returns a (k, d) float32 centroid matrix; every cluster is non-empty
    at the end of each iteration thanks to the repair step.
    """
    data = np.ascontiguousarray(data, dtype=np.float32)
    n, d = data.shape
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range [1, {n}]")
    if iters < 1:
        raise ValueError("iters must be >= 1")

    centroids = _seed_plus_plus(data, k, rng)
    for _ in range(iters):
        d2 = pairwise_sq_dists(data, centroids)
        assign = d2.argmin(axis=1)
        counts = np.bincount(assign, minlength=k)

        sums = np.empty((k, d), dtype=np.float64)
        for j in range(d):
            sums[:, j] = np.bincount(assign, weights=data[:, j], minlength=k)
        new = np.where(counts[:, None] > 0, sums / np.maximum(counts, 1)[:, None], 0.0)

        empties = np.flatnonzero(counts == 0)
        if empties.size:
            own = d2[np.arange(n), assign].copy()
            for cid in empties:
                steal = int(own.argmax())
                new[cid] = data[steal]
                own[steal] = -1.0  # a point repairs at most one cluster per round
        new = new.astype(np.float32)

        denom = float(np.linalg.norm(centroids)) + 1e-12
        shift = float(np.linalg.norm(new - centroids)) / denom
        centroids = new
        if shift < tol:
            break
    return centroids
