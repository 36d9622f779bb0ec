"""Relabelled posterior summaries: region labels, occupancy, cluster intensities and PCFs."""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import linear_sum_assignment

from .features import PcaBasis, invert_features
from .sampler import Chain

QUANTILES = (0.025, 0.5, 0.975)


def _permute_offsets(vec: np.ndarray, perm: np.ndarray) -> np.ndarray:
    out = np.empty_like(vec)
    out[perm] = vec
    return out - out[0]  # the model is invariant to a common shift; keep index 0 at zero


def relabel_chain(chain: Chain) -> tuple[Chain, np.ndarray]:
    """Align every draw to the highest-density draw.

    For each draw, the permutation maximising label agreement with the pivot
    is found by optimal assignment on the M x M co-occurrence matrix.
    Returns the relabelled chain and the permutations, shape (D, M), where
    ``perm[d, a]`` is the new index of old cluster ``a``.
    """
    D, M = chain.n_draws, chain.n_clusters
    if D < 1:
        raise ValueError("chain has no draws")
    perms = np.tile(np.arange(M), (D, 1))
    if M == 1:
        return chain, perms
    pivot = chain.labels[int(np.argmax(chain.log_post))].reshape(-1).astype(np.int64)
    labels = chain.labels.copy()
    mu = chain.mu.copy()
    alpha = chain.alpha.copy()
    beta = None if chain.beta is None else chain.beta.copy()
    for d in range(D):
        lab = chain.labels[d].reshape(-1).astype(np.int64)
        co = np.zeros((M, M))
        np.add.at(co, (lab, pivot), 1)
        rows, cols = linear_sum_assignment(co, maximize=True)
        perm = np.empty(M, np.int64)
        perm[rows] = cols
        # keep the identity when it is already optimal
        if co[np.arange(M), np.arange(M)].sum() >= co[rows, cols].sum():
            perm = np.arange(M)
        perms[d] = perm
        labels[d] = perm[chain.labels[d]]
        mu[d][:, perm] = chain.mu[d]
        alpha[d] = _permute_offsets(chain.alpha[d], perm)
        if beta is not None:
            beta[d] = _permute_offsets(chain.beta[d], perm)
    return replace(chain, labels=labels, mu=mu, alpha=alpha, beta=beta), perms


@dataclass
class LabelSummary:
    probabilities: np.ndarray  # (N, L, M)
    map_labels: np.ndarray  # (N, L), 0-based
    occupancy: dict  # group -> (M,) proportions


def map_labels(probabilities: np.ndarray) -> np.ndarray:
    """argmax with ties to the lowest index."""
    return np.argmax(probabilities, axis=-1)


def summarize_labels(chain: Chain, regions: str = "retained") -> LabelSummary:
    """Posterior label frequencies and per-group occupancy.

    Occupancy is the mean over draws of the fraction of a group's regions in
    each cluster; ``regions='retained'`` counts only regions carrying data,
    ``'all'`` counts every lattice node.
    """
    M = chain.n_clusters
    D, N, L = chain.labels.shape
    probs = np.zeros((N, L, M))
    for k in range(M):
        probs[..., k] = (chain.labels == k).mean(axis=0)
    if regions == "all":
        keep = np.ones((N, L), bool)
    else:
        keep = np.asarray(chain.meta.get("mask", np.ones((N, L))), bool)
    groups = chain.meta.get("groups") or [None] * N
    occupancy = {}
    for g in sorted({str(v) if v is not None else "all" for v in groups}):
        members = [n for n in range(N) if (str(groups[n]) if groups[n] is not None else "all") == g]
        sel = keep[members]
        frac = np.zeros(M)
        total = sel.sum()
        if total:
            for k in range(M):
                frac[k] = (chain.labels[:, members] == k)[:, sel].sum() / (total * D)
        occupancy[g] = frac
    return LabelSummary(probs, map_labels(probs), occupancy)


def _bands(samples: np.ndarray) -> dict:
    q = np.quantile(samples, QUANTILES, axis=0)
    return {"mean": samples.mean(axis=0), "q025": q[0], "q50": q[1], "q975": q[2]}


@dataclass
class ClusterSummary:
    r_grid: np.ndarray
    intensity: dict  # stat -> (M, H)
    curve: dict  # stat -> (M, n_r)
    pcf_at: dict  # r* -> (D, M) posterior samples
    theta: dict  # name -> stat -> value


def pcf_samples(chain: Chain, basis: PcaBasis, centers, scales):
    """Per-draw intensities (D, M, H) and PCF curves (D, M, n_r)."""
    mu = np.transpose(chain.mu, (0, 2, 1))  # (D, M, Q)
    return invert_features(mu, basis, np.asarray(centers), np.asarray(scales))


def summarize_clusters(chain: Chain, basis: PcaBasis, centers, scales,
                       eval_distances=()) -> ClusterSummary:
    r = basis.r_grid
    for rs in eval_distances:
        if not r[0] - 1e-12 <= rs <= r[-1] + 1e-12:
            raise ValueError(f"distance {rs} outside [{r[0]}, {r[-1]}]")
    intens, g = pcf_samples(chain, basis, centers, scales)
    pcf_at = {}
    for rs in eval_distances:
        pcf_at[float(rs)] = np.stack(
            [[np.interp(rs, r, g[d, k]) for k in range(g.shape[1])] for d in range(len(g))])
    theta = {"psi": _bands(chain.psi)}
    for j in range(1, chain.n_clusters):
        theta[f"alpha_{j + 1}"] = _bands(chain.alpha[:, j])
        if chain.beta is not None:
            theta[f"beta_{j + 1}"] = _bands(chain.beta[:, j])
    return ClusterSummary(r, _bands(intens), _bands(g), pcf_at,
                          {k: {s: float(v) for s, v in b.items()} for k, b in theta.items()})


# --- files ----------------------------------------------------------------------


def write_labels(path, chain: Chain, summary: LabelSummary) -> None:
    grid = chain.grid
    M = chain.n_clusters
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "region_row", "region_col", "map_label"]
                   + [f"prob_{k + 1}" for k in range(M)])
        for n, sid in enumerate(chain.meta["subject_ids"]):
            for l in range(grid.n_regions):
                row, col = grid.region_rc(l)
                w.writerow([sid, row, col, int(summary.map_labels[n, l]) + 1]
                           + [repr(float(p)) for p in summary.probabilities[n, l]])


def read_labels(path) -> dict:
    """``{(subject_id, row, col): map_label}`` with 1-based labels."""
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            out[(rec["subject_id"], int(rec["region_row"]), int(rec["region_col"]))] = int(
                rec["map_label"])
    return out


def write_occupancy(path, summary: LabelSummary) -> None:
    M = len(next(iter(summary.occupancy.values())))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["group"] + [f"cluster_{k + 1}" for k in range(M)])
        for g, frac in summary.occupancy.items():
            w.writerow([g] + [repr(float(v)) for v in frac])


def write_clusters(prefix, cs: ClusterSummary) -> list[str]:
    """Wide cluster table plus long-format PCF, intensity, theta and r* tables."""
    M, H = cs.intensity["mean"].shape
    stats = ("mean", "q025", "q50", "q975")
    paths = []
    p = f"{prefix}clusters.csv"
    with open(p, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["cluster", "stat"] + [f"intensity_{h + 1}" for h in range(H)]
                   + [f"g_r={r!r}" for r in cs.r_grid])
        for k in range(M):
            for s in stats:
                w.writerow([k + 1, s] + [repr(float(v)) for v in cs.intensity[s][k]]
                           + [repr(float(v)) for v in cs.curve[s][k]])
    paths.append(p)
    p = f"{prefix}pcf_long.csv"
    with open(p, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["cluster", "r"] + list(stats))
        for k in range(M):
            for i, r in enumerate(cs.r_grid):
                w.writerow([k + 1, repr(float(r))] + [repr(float(cs.curve[s][k, i])) for s in stats])
    paths.append(p)
    p = f"{prefix}intensity_long.csv"
    with open(p, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["cluster", "type"] + list(stats))
        for k in range(M):
            for h in range(H):
                w.writerow([k + 1, h + 1] + [repr(float(cs.intensity[s][k, h])) for s in stats])
    paths.append(p)
    p = f"{prefix}theta.csv"
    with open(p, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["parameter"] + list(stats))
        for name, b in cs.theta.items():
            w.writerow([name] + [repr(b[s]) for s in stats])
    paths.append(p)
    if cs.pcf_at:
        p = f"{prefix}pcf_at_r.csv"
        with open(p, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["r", "draw"] + [f"cluster_{k + 1}" for k in range(M)])
            for rs, samp in cs.pcf_at.items():
                for d, row in enumerate(samp):
                    w.writerow([repr(rs), d + 1] + [repr(float(v)) for v in row])
        paths.append(p)
    return paths
