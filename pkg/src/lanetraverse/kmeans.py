"""Seeded k-means++ / Lloyd clustering, batched over a leading axis."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MAX_ITER = 50
TOL = 1e-6


@dataclass
class KMeansResult:
    centers: np.ndarray  # (B, K, d), ordered by cluster size descending
    labels: np.ndarray  # (B, n) index into the ordered centers
    sizes: np.ndarray  # (B, K); padded duplicate centers have size 0
    n_iter: np.ndarray  # (B,)
    collapsed: np.ndarray  # (B,) fewer distinct points than K
    inertia_trace: list[np.ndarray] | None = None


def _sq_dist(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    d = (X * X).sum(-1)[:, :, None] - 2.0 * X @ np.swapaxes(C, 1, 2) + (C * C).sum(-1)[:, None, :]
    return np.maximum(d, 0.0)


def kmeans_pp_init(X: np.ndarray, k: int, draws: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """k-means++ seeding from uniforms ``draws`` (B, >= k).

    Returns centers (B, k, d) and a validity mask (B, k).
    """
    B, n, d = X.shape
    rows = np.arange(B)
    centers = np.zeros((B, k, d))
    valid = np.zeros((B, k), dtype=bool)
    first = np.minimum((draws[:, 0] * n).astype(np.int64), n - 1)
    centers[:, 0] = X[rows, first]
    valid[:, 0] = True
    best = ((X - centers[:, :1]) ** 2).sum(-1)
    for j in range(1, k):
        u = draws[:, j]
        total = best.sum(axis=1)
        alive = total > 0
        cum = np.cumsum(best, axis=1)
        pick = np.minimum((cum < (u * total)[:, None]).sum(axis=1), n - 1)
        # never pick a zero-weight point (e.g. rounding at the end of cum)
        zero = best[rows, pick] <= 0
        if np.any(zero & alive):
            pick = np.where(zero & alive, np.argmax(best, axis=1), pick)
        centers[:, j] = np.where(alive[:, None], X[rows, pick], 0.0)
        valid[:, j] = alive
        d_new = ((X - centers[:, j:j + 1]) ** 2).sum(-1)
        best = np.where(alive[:, None], np.minimum(best, d_new), best)
    return centers, valid


def kmeans(X: np.ndarray, k: int, rng: np.random.Generator | np.ndarray, max_iter: int = MAX_ITER, tol: float = TOL,
           trace: bool = False) -> KMeansResult:
    """Cluster each ``X[b]`` (n, d) into ``k`` groups.

    Assignment ties go to the lower cluster index; an emptied cluster keeps
    its previous center. Iteration stops after ``max_iter`` Lloyd steps or
    once no center moves more than ``tol``. When a problem has fewer than
    ``k`` distinct points the distinct set is returned, padded with copies
    of the largest clusters' centers (size 0) and flagged ``collapsed``.
    Clusters are ordered by size, larger first, with ties going to the
    cluster holding the lower sample index. ``rng`` is a generator or a (B, k) array of seeding uniforms, the latter
    letting each problem in a batch carry its own stream.
    """
    X = np.asarray(X, dtype=np.float64)
    squeeze = X.ndim == 2
    if squeeze:
        X = X[None]
    B, n, d = X.shape
    draws = rng.random((B, k)) if isinstance(rng, np.random.Generator) else np.asarray(rng, dtype=np.float64).reshape(B, -1)
    C, valid = kmeans_pp_init(X, min(k, n), draws)
    if C.shape[1] < k:
        C = np.concatenate([C, np.zeros((B, k - C.shape[1], d))], axis=1)
        valid = np.concatenate([valid, np.zeros((B, k - valid.shape[1]), dtype=bool)], axis=1)
    n_iter = np.zeros(B, dtype=np.int64)
    active = np.ones(B, dtype=bool)
    inertias = []
    labels = np.zeros((B, n), dtype=np.int64)
    for it in range(max_iter):
        D = np.where(valid[:, None, :], _sq_dist(X, C), np.inf)
        labels = np.argmin(D, axis=2)
        if trace:
            inertias.append(np.take_along_axis(D, labels[:, :, None], 2)[..., 0].sum(1))
        onehot = labels[:, :, None] == np.arange(k)[None, None, :]
        counts = onehot.sum(axis=1)
        sums = np.swapaxes(onehot, 1, 2).astype(np.float64) @ X
        newC = np.where((counts > 0)[:, :, None], sums / np.maximum(counts, 1)[:, :, None], C)
        newC = np.where(valid[:, :, None], newC, C)
        shift = np.abs(newC - C).max(axis=(1, 2))
        C = np.where(active[:, None, None], newC, C)
        n_iter += active
        active &= shift >= tol
        if not active.any():
            break
    D = np.where(valid[:, None, :], _sq_dist(X, C), np.inf)
    labels = np.argmin(D, axis=2)
    if trace:
        inertias.append(np.take_along_axis(D, labels[:, :, None], 2)[..., 0].sum(1))
    counts = (labels[:, :, None] == np.arange(k)[None, None, :]).sum(axis=1)

    collapsed = ~valid.all(axis=1)
    # size descending, ties by the lowest sample index in the cluster
    first_member = np.where(labels[:, :, None] == np.arange(k)[None, None, :], np.arange(n)[None, :, None], n).min(axis=1)
    order = np.lexsort((first_member, -np.where(valid, counts, -1)), axis=1)
    n_valid = valid.sum(axis=1)
    out_C = np.empty_like(C)
    out_sizes = np.zeros((B, k), dtype=np.int64)
    out_labels = np.empty_like(labels)
    for b in range(B):
        m = n_valid[b]
        o = order[b, :m]
        out_C[b, :m] = C[b, o]
        out_sizes[b, :m] = counts[b, o]
        for j in range(m, k):
            out_C[b, j] = C[b, o[(j - m) % m]]
        inv = np.empty(k, dtype=np.int64)
        inv[o] = np.arange(m)
        out_labels[b] = inv[labels[b]]
    res = KMeansResult(out_C, out_labels, out_sizes, n_iter, collapsed, inertias if trace else None)
    if squeeze:
        res = KMeansResult(out_C[0], out_labels[0], out_sizes[0], n_iter[:1], collapsed[:1],
                           [i[0] for i in inertias] if trace else None)
    return res
