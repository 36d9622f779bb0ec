"""k-means with k-means++ seeding, Lloyd iterations and Hartigan transfers."""

from __future__ import annotations

import numpy as np


def _plusplus(X, k, rng):
    n = len(X)
    centers = np.empty((k, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        idx = rng.integers(n) if total <= 0 else rng.choice(n, p=d2 / total)
        centers[j] = X[idx]
        d2 = np.minimum(d2, ((X - centers[j]) ** 2).sum(axis=1))
    return centers


def _sqdist(X, centers):
    return (
        (X**2).sum(axis=1)[:, None] - 2 * X @ centers.T + (centers**2).sum(axis=1)[None, :]
    ).clip(min=0)


def _lloyd(X, centers, max_iter):
    labels = None
    for _ in range(max_iter):
        new = _sqdist(X, centers).argmin(axis=1)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for j in range(len(centers)):
            members = labels == j
            if members.any():
                centers[j] = X[members].mean(axis=0)
    return labels, centers


def _hartigan(X, labels, centers, max_pass=50):
    """Single-point transfers that lower the within-cluster sum of squares.

    Moving x from a to b changes the objective by
    n_b/(n_b+1)|x-c_b|^2 - n_a/(n_a-1)|x-c_a|^2.
    """
    k = len(centers)
    sizes = np.bincount(labels, minlength=k).astype(float)
    for _ in range(max_pass):
        moved = 0
        d = _sqdist(X, centers)
        own = d[np.arange(len(X)), labels]
        with np.errstate(divide="ignore", invalid="ignore"):
            remove = np.where(sizes[labels] > 1, own * sizes[labels] / (sizes[labels] - 1), np.inf)
        add = d * (sizes / (sizes + 1))[None, :]
        add[np.arange(len(X)), labels] = np.inf
        candidates = np.flatnonzero(add.min(axis=1) < remove - 1e-12)
        for i in candidates:
            a = labels[i]
            if sizes[a] <= 1:
                continue
            x = X[i]
            da = ((x - centers[a]) ** 2).sum() * sizes[a] / (sizes[a] - 1)
            db = ((x - centers) ** 2).sum(axis=1) * sizes / (sizes + 1)
            db[a] = np.inf
            b = int(db.argmin())
            if db[b] < da - 1e-12:
                centers[a] = (centers[a] * sizes[a] - x) / (sizes[a] - 1)
                centers[b] = (centers[b] * sizes[b] + x) / (sizes[b] + 1)
                sizes[a] -= 1
                sizes[b] += 1
                labels[i] = b
                moved += 1
        if not moved:
            break
    return labels, centers


def kmeans(X, k: int, n_init: int = 25, seed=None, max_iter: int = 100):
    """Best of ``n_init`` restarts by within-cluster sum of squares.

    Returns ``(labels, centers, inertia)``.
    """
    X = np.asarray(X, dtype=float)
    if len(X) < k:
        raise ValueError(f"{len(X)} points cannot form {k} clusters")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        centers = _plusplus(X, k, rng)
        labels, centers = _lloyd(X, centers, max_iter)
        labels, centers = _hartigan(X, labels.copy(), centers)
        inertia = float(((X - centers[labels]) ** 2).sum())
        if best is None or inertia < best[2] - 1e-9:
            best = (labels, centers, inertia)
    return best
