"""Partition agreement and chain diagnostics."""

from __future__ import annotations

import numpy as np
from scipy.special import comb


def _pair_count(x) -> float:
    return float(comb(np.asarray(x, dtype=float), 2).sum())


def adjusted_rand_index(labels_a, labels_b) -> float:
    """Hubert-Arabie adjusted Rand index from the contingency table.

    Entries that are NaN or negative in either argument are dropped
    pairwise.  Two trivial partitions (both a single cluster, or both all
    singletons) agree perfectly and score 1.
    """
    a = np.asarray(labels_a, dtype=float).ravel()
    b = np.asarray(labels_b, dtype=float).ravel()
    if a.shape != b.shape:
        raise ValueError("partitions must cover the same items")
    keep = ~(np.isnan(a) | np.isnan(b) | (a < 0) | (b < 0))
    a, b = a[keep], b[keep]
    n = len(a)
    if n < 2:
        raise ValueError("ARI needs at least two items")
    _, ia = np.unique(a, return_inverse=True)
    _, ib = np.unique(b, return_inverse=True)
    table = np.zeros((ia.max() + 1, ib.max() + 1))
    np.add.at(table, (ia, ib), 1)
    index = _pair_count(table)
    sum_a = _pair_count(table.sum(axis=1))
    sum_b = _pair_count(table.sum(axis=0))
    expected = sum_a * sum_b / _pair_count([n])
    max_index = 0.5 * (sum_a + sum_b)
    if max_index == expected:
        return 1.0
    return float((index - expected) / (max_index - expected))


def effective_sample_size(x) -> float:
    """ESS of one chain via Geyer's initial positive sequence of autocorrelations."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    if n < 4:
        return float(n)
    x = x - x.mean()
    var = x @ x / n
    if var <= 0:
        return float(n)
    size = 1 << int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(x, size)
    acov = np.fft.irfft(f * np.conj(f), size)[:n] / n
    rho = acov / var
    tau = -1.0
    for k in range(0, n - 1, 2):
        pair = rho[k] + rho[k + 1]
        if pair < 0:
            break
        tau += 2 * pair
    return float(n / max(tau, 1e-12))
