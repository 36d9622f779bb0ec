"""Potts prior on lattice label fields.

Labels are 0-based in memory (0..M-1); files use 1..M.  A field lives on a
``rows x cols`` lattice with horizontal/vertical neighbours; every grid
region is a node, whether or not it carries data.

The log normaliser ``log d(theta)`` is exact by enumeration on tiny lattices
and otherwise comes from a :class:`SurrogateTable`: expected sufficient
statistics are simulated over a tensor design of (gaps between sorted offsets,
psi), interpolated, and integrated in ``psi`` starting from the closed form
at ``psi = 0`` (``d/dpsi log d = E[matches]``).
"""

from __future__ import annotations

import hashlib
import math
import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.integrate import cumulative_simpson, simpson
from scipy.interpolate import NdBSpline, PchipInterpolator, make_interp_spline
from scipy.special import logsumexp

ALPHA_BOUNDS = (-5.0, 5.0)
PSI_BOUNDS = (0.0, 2.5)
SURROGATE_VERSION = 2
MAX_ENUMERATION = 2**24


@dataclass(frozen=True)
class PottsGraph:
    rows: int
    cols: int
    group: int | None = None

    @property
    def n_nodes(self) -> int:
        return self.rows * self.cols

    @property
    def n_edges(self) -> int:
        return self.rows * (self.cols - 1) + (self.rows - 1) * self.cols

    @property
    def signature(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    def edges(self) -> np.ndarray:
        idx = np.arange(self.n_nodes).reshape(self.rows, self.cols)
        h = np.column_stack([idx[:, :-1].ravel(), idx[:, 1:].ravel()])
        v = np.column_stack([idx[:-1, :].ravel(), idx[1:, :].ravel()])
        return np.vstack([h, v])

    def neighbors(self, node: int) -> list[int]:
        r, c = divmod(node, self.cols)
        out = []
        for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            rr, cc = r + dr, c + dc
            if 0 <= rr < self.rows and 0 <= cc < self.cols:
                out.append(rr * self.cols + cc)
        return out

    def color_masks(self) -> tuple[np.ndarray, np.ndarray]:
        """Checkerboard classes; nodes within a class share no edge."""
        rr, cc = np.indices((self.rows, self.cols))
        black = (rr + cc) % 2 == 0
        return black, ~black


@dataclass
class PottsParams:
    """alpha[0] (and beta[0]) are pinned to 0; beta is None in single-group mode."""

    alpha: np.ndarray
    psi: float
    beta: np.ndarray | None = None

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=float)
        if self.beta is not None:
            self.beta = np.asarray(self.beta, dtype=float)

    @property
    def n_clusters(self) -> int:
        return len(self.alpha)

    def offsets(self, group: int | None) -> np.ndarray:
        if group == 1 and self.beta is not None:
            return self.beta
        return self.alpha

    def in_prior_box(self) -> bool:
        lo, hi = ALPHA_BOUNDS
        ok = PSI_BOUNDS[0] <= self.psi <= PSI_BOUNDS[1]
        ok &= bool(np.all((self.alpha >= lo) & (self.alpha <= hi)))
        if self.beta is not None:
            ok &= bool(np.all((self.beta >= lo) & (self.beta <= hi)))
        return ok and self.alpha[0] == 0 and (self.beta is None or self.beta[0] == 0)

    def copy(self) -> "PottsParams":
        return PottsParams(self.alpha.copy(), float(self.psi),
                           None if self.beta is None else self.beta.copy())


# --- sufficient statistics ---------------------------------------------------


def _as_lattice(labels, graph: PottsGraph) -> np.ndarray:
    labels = np.asarray(labels)
    return labels.reshape(labels.shape[:-1] + (graph.rows, graph.cols)) if (
        labels.shape[-1] == graph.n_nodes and labels.shape[-2:] != (graph.rows, graph.cols)
    ) else labels


def match_count(lattice: np.ndarray) -> np.ndarray:
    """Matching neighbour pairs for fields of shape (..., rows, cols)."""
    h = (lattice[..., :, 1:] == lattice[..., :, :-1]).sum(axis=(-2, -1))
    v = (lattice[..., 1:, :] == lattice[..., :-1, :]).sum(axis=(-2, -1))
    return h + v


def sufficient_quantities(labels, graph: PottsGraph, n_clusters: int):
    """(counts per cluster, matching adjacent pairs); batch dims are kept."""
    lat = _as_lattice(labels, graph)
    flat = lat.reshape(lat.shape[:-2] + (-1,))
    counts = (flat[..., None] == np.arange(n_clusters)).sum(axis=-2)
    return counts, match_count(lat)


def log_pmf_unnorm(labels, params: PottsParams, graph: PottsGraph) -> float:
    counts, matches = sufficient_quantities(labels, graph, params.n_clusters)
    return counts @ params.offsets(graph.group) + params.psi * matches


# --- exact enumeration --------------------------------------------------------


def _enumerate_stats(graph: PottsGraph, M: int, chunk: int = 1 << 18):
    """Yield (counts, matches) over every labelling, in chunks."""
    L = graph.n_nodes
    total = M**L
    if total > MAX_ENUMERATION:
        raise ValueError(f"{M}^{L} labellings exceed the enumeration limit")
    powers = M ** np.arange(L - 1, -1, -1, dtype=np.int64)
    for start in range(0, total, chunk):
        codes = np.arange(start, min(total, start + chunk), dtype=np.int64)
        fields = (codes[:, None] // powers) % M
        yield sufficient_quantities(fields.reshape(-1, graph.rows, graph.cols), graph, M)


def enumerate_fields(graph: PottsGraph, M: int) -> np.ndarray:
    """All M^L labellings as an array (M^L, L)."""
    L = graph.n_nodes
    if M**L > MAX_ENUMERATION:
        raise ValueError("graph too large to enumerate")
    powers = M ** np.arange(L - 1, -1, -1, dtype=np.int64)
    codes = np.arange(M**L, dtype=np.int64)
    return (codes[:, None] // powers) % M


def exact_log_d(params: PottsParams, graph: PottsGraph) -> float:
    off = params.offsets(graph.group)
    parts = [
        logsumexp(c @ off + params.psi * m) for c, m in _enumerate_stats(graph, params.n_clusters)
    ]
    return float(logsumexp(parts))


def exact_moments(params: PottsParams, graph: PottsGraph):
    """Exact E[counts] and E[matches] by enumeration."""
    off = params.offsets(graph.group)
    log_d = exact_log_d(params, graph)
    ec = np.zeros(params.n_clusters)
    em = 0.0
    for c, m in _enumerate_stats(graph, params.n_clusters):
        p = np.exp(c @ off + params.psi * m - log_d)
        ec += p @ c
        em += p @ m
    return ec, em


def transfer_log_d(params: PottsParams, graph: PottsGraph, max_states: int = 2**20) -> float:
    """Exact log d by a site-by-site transfer matrix over the narrow side.

    Cost is O(L * M^(w+1)) with w = min(rows, cols), so it reaches lattices
    far beyond enumeration when M^w is moderate (e.g. 10x12 with M = 3).
    """
    off = np.asarray(params.offsets(graph.group), float)
    M, psi = len(off), float(params.psi)
    rows, cols = sorted((graph.rows, graph.cols), reverse=True)  # scan along the long side
    w = cols
    if M**w > max_states:
        raise ValueError(f"{M}^{w} transfer states exceed the limit")
    # first row: horizontal chain over w sites, v indexed (site_1, ..., last)
    site = np.exp(off - off.max())
    step = np.where(np.eye(M, dtype=bool), np.exp(psi), 1.0) * site  # (last, x)
    v = site.copy()
    log_scale = off.max()
    for _ in range(1, w):
        v = v[..., None] * step
        tot = v.sum()
        v /= tot
        log_scale += off.max() + np.log(tot)
    v = v.reshape((M,) * w)
    ep = np.exp(psi)
    for i in range(1, rows):
        for j in range(w):
            V = v.reshape(M, M ** (w - 2) if w > 2 else 1, M) if w > 1 else v.reshape(M, 1, 1)
            base = V.sum(axis=0)  # (mid, last)
            out = np.empty(base.shape + (M,))
            for x in range(M):
                term = base + (ep - 1.0) * V[x]
                if j > 0 and w > 1:
                    term = term * np.where(np.arange(M) == x, ep, 1.0)[None, :]
                out[..., x] = term * np.exp(off[x] - off.max())
            log_scale += off.max()
            if w == 1:
                out = out.reshape(M)
            tot = out.sum()
            v = out / tot
            log_scale += np.log(tot)
    return float(log_scale + np.log(v.sum()))


class ExactNormalizer:
    """log d by enumeration, memoised; for tiny lattices only."""

    def __init__(self, graph: PottsGraph, n_clusters: int):
        self.graph = graph
        self.n_clusters = n_clusters
        stats = list(_enumerate_stats(graph, n_clusters))
        self._counts = np.concatenate([s[0] for s in stats]).astype(float)
        self._matches = np.concatenate([s[1] for s in stats]).astype(float)
        self._cache: dict = {}

    def log_d(self, offsets, psi: float) -> float:
        key = (tuple(np.asarray(offsets, float)), float(psi))
        out = self._cache.get(key)
        if out is None:
            out = float(logsumexp(self._counts @ np.asarray(offsets, float) + psi * self._matches))
            if len(self._cache) < 100_000:
                self._cache[key] = out
        return out


class TransferNormalizer:
    """Memoised :func:`transfer_log_d`; exact on lattices with moderate M^min(rows, cols)."""

    def __init__(self, graph: PottsGraph, n_clusters: int, max_states: int = 2**20):
        if n_clusters ** min(graph.rows, graph.cols) > max_states:
            raise ValueError("lattice too wide for the transfer matrix")
        self.graph = graph
        self.n_clusters = n_clusters
        self.max_states = max_states
        self._cache: dict = {}

    def log_d(self, offsets, psi: float) -> float:
        offsets = np.asarray(offsets, float)
        key = (tuple(offsets), float(psi))
        out = self._cache.get(key)
        if out is None:
            g = PottsGraph(self.graph.rows, self.graph.cols)
            out = transfer_log_d(PottsParams(offsets, psi), g, self.max_states)
            if len(self._cache) < 100_000:
                self._cache[key] = out
        return out


# --- Gibbs sampling ----------------------------------------------------------


def neighbor_label_counts(onehot: np.ndarray) -> np.ndarray:
    """For one-hot fields (..., rows, cols, M): same-label neighbour counts per label."""
    out = np.zeros_like(onehot)
    out[..., 1:, :, :] += onehot[..., :-1, :, :]
    out[..., :-1, :, :] += onehot[..., 1:, :, :]
    out[..., :, 1:, :] += onehot[..., :, :-1, :]
    out[..., :, :-1, :] += onehot[..., :, 1:, :]
    return out


def sample_categorical(logits: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One draw per row of the last axis by inverse CDF."""
    logits = logits - logits.max(axis=-1, keepdims=True)
    p = np.exp(logits)
    cdf = np.cumsum(p, axis=-1)
    u = rng.random(logits.shape[:-1] + (1,)) * cdf[..., -1:]
    return np.minimum((u > cdf).sum(axis=-1), logits.shape[-1] - 1)


def gibbs_sweep(lattice, offsets, psi, rng, colors, extra_logits=None, update_mask=None):
    """One systematic sweep (black sites, then white) in place.

    ``lattice`` is (B, rows, cols); ``offsets`` broadcasts to (B, M);
    ``psi`` broadcasts to (B,).  Sites of one colour are conditionally
    independent, so updating a colour class at once is the same as visiting
    its sites one by one.  ``extra_logits`` (B, rows, cols, M) adds data
    terms; ``update_mask`` restricts which sites may change.
    """
    B, R, C = lattice.shape
    M = np.shape(offsets)[-1]
    offsets = np.broadcast_to(np.asarray(offsets, float), (B, M))[:, None, None, :]
    psi = np.broadcast_to(np.asarray(psi, float), (B,))[:, None, None, None]
    eye = np.eye(M)
    for color in colors:
        onehot = eye[lattice]
        logits = offsets + psi * neighbor_label_counts(onehot)
        if extra_logits is not None:
            logits = logits + extra_logits
        sel = color if update_mask is None else (color & update_mask)
        draw = sample_categorical(logits[:, sel], rng)
        lattice[:, sel] = draw
    return lattice


def gibbs_sample_field(
    params: PottsParams,
    graph: PottsGraph,
    sweeps: int,
    seed=None,
    n_fields: int | None = None,
) -> np.ndarray:
    """Labels after ``sweeps`` Gibbs sweeps from a uniform random start.

    Returns shape (L,) or (n_fields, L).
    """
    if sweeps < 1:
        raise ValueError("sweeps must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    B = 1 if n_fields is None else n_fields
    M = params.n_clusters
    lat = rng.integers(0, M, size=(B, graph.rows, graph.cols))
    colors = graph.color_masks()
    off = params.offsets(graph.group)
    for _ in range(sweeps):
        gibbs_sweep(lat, off, params.psi, rng, colors)
    out = lat.reshape(B, -1)
    return out[0] if n_fields is None else out


# --- surrogate ---------------------------------------------------------------
#
# log d is invariant to permuting labels and shifts by L*c when every offset
# moves by c.  Sorting the offsets (s_1 >= ... >= s_M) therefore gives
#
#     log d(alpha, psi) = L*s_1 + G(gaps, psi),   gaps_k = s_k - s_{k+1} >= 0,
#
# so the table only needs the chamber of sorted offsets.  Above the critical
# psi, G changes on a scale of about 1/L near gap 0 (phase coexistence), so
# the gap nodes are geometric and dense there.

DEFAULT_GAP_NODES = (0.0, 0.01, 0.02, 0.04, 0.08, 0.16, 0.32, 0.64, 1.25, 2.5, 5.0, 10.0)


@dataclass(frozen=True)
class SurrogateDesign:
    gap_nodes: tuple = DEFAULT_GAP_NODES
    n_psi: int = 17
    n_sims: int = 200
    burn_in: int = 50
    record_sweeps: int = 10
    n_quad: int = 129
    alpha_bounds: tuple = ALPHA_BOUNDS
    psi_bounds: tuple = PSI_BOUNDS

    def __post_init__(self):
        object.__setattr__(self, "gap_nodes", tuple(float(g) for g in self.gap_nodes))
        object.__setattr__(self, "alpha_bounds", tuple(float(g) for g in self.alpha_bounds))
        object.__setattr__(self, "psi_bounds", tuple(float(g) for g in self.psi_bounds))
        if self.n_sims < 10:
            raise ValueError("n_sims below the floor of 10 simulated fields per design point")
        if self.burn_in < 1 or self.record_sweeps < 0:
            raise ValueError("burn_in must be >= 1 and record_sweeps >= 0")
        if self.n_quad < 33 or self.n_quad % 2 == 0:
            raise ValueError("n_quad must be odd and >= 33")
        if self.n_psi < 4 or len(self.gap_nodes) < 4:
            raise ValueError("cubic interpolation needs >= 4 design points per axis")
        g = np.asarray(self.gap_nodes)
        if g[0] != 0 or np.any(np.diff(g) <= 0):
            raise ValueError("gap nodes must start at 0 and increase strictly")
        if g[-1] < self.alpha_bounds[1] - self.alpha_bounds[0] - 1e-12:
            raise ValueError("gap nodes must reach the width of the offset range")

    def gaps(self) -> np.ndarray:
        return np.asarray(self.gap_nodes)

    def psi_nodes(self) -> np.ndarray:
        return np.linspace(*self.psi_bounds, self.n_psi)

    def psi_quad(self) -> np.ndarray:
        return np.linspace(*self.psi_bounds, self.n_quad)

    def n_points(self, M: int) -> int:
        return len(self.gap_nodes) ** (M - 1) * self.n_psi


def canonical_offsets(offsets) -> tuple[np.ndarray, np.ndarray, float]:
    """(gaps, order, top): ``offsets[order]`` is descending, ``top`` its first entry."""
    offsets = np.asarray(offsets, float)
    order = np.argsort(-offsets, kind="stable")
    s = offsets[order]
    return -np.diff(s), order, float(s[0])


def gap_offsets(gaps) -> np.ndarray:
    """Descending offsets with leading 0 and the given consecutive gaps."""
    return np.concatenate([[0.0], -np.cumsum(gaps)])


def _design_seed(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, index])))


def design_points(M: int, design: SurrogateDesign) -> np.ndarray:
    """All (gap_1..gap_{M-1}, psi) design points in C order, shape (P, M)."""
    axes = [design.gaps()] * (M - 1) + [design.psi_nodes()]
    return np.array(np.meshgrid(*axes, indexing="ij")).reshape(M, -1).T


def simulate_design(graph: PottsGraph, M: int, design: SurrogateDesign, seed: int):
    """Mean (counts, matches) at every design point.

    Shapes are (n_gap,)*(M-1) + (n_psi, M) and (n_gap,)*(M-1) + (n_psi,);
    counts are in descending-offset order.
    """
    from ._kernels import sweep_fields

    points = design_points(M, design)
    shape = (len(design.gap_nodes),) * (M - 1) + (design.n_psi,)
    P = len(points)
    mean_counts = np.zeros((P, M))
    mean_matches = np.zeros(P)
    black, white = (np.nonzero(c) for c in graph.color_masks())
    nb, nw = len(black[0]), len(white[0])
    S = design.n_sims
    n_rec = design.record_sweeps + 1
    for i, pt in enumerate(points):
        offsets = gap_offsets(pt[:-1])
        psi = float(pt[-1])
        if psi == 0.0:
            # independent sites: closed form
            p = np.exp(offsets - logsumexp(offsets))
            mean_counts[i] = graph.n_nodes * p
            mean_matches[i] = graph.n_edges * float(p @ p)
            continue
        # one counter-based stream per design point: order- and batch-independent
        rng = _design_seed(seed, i)
        # monochrome starts weighted like the ordered phases; random starts
        # coarsen too slowly above the critical point
        w = np.exp(graph.n_nodes * (offsets - offsets.max()))
        start = rng.choice(M, size=S, p=w / w.sum())
        lat = np.broadcast_to(start[:, None, None], (S, graph.rows, graph.cols)).copy()
        acc_c = np.zeros(M)
        acc_m = 0.0
        for sweep in range(design.burn_in + design.record_sweeps):
            sweep_fields(lat, offsets, psi, rng.random((S, nb)), rng.random((S, nw)), black, white)
            if sweep >= design.burn_in - 1:
                c, m = sufficient_quantities(lat, graph, M)
                acc_c += c.sum(axis=0)
                acc_m += m.sum()
        mean_counts[i] = acc_c / (S * n_rec)
        mean_matches[i] = acc_m / (S * n_rec)
    return points, mean_counts.reshape(shape + (M,)), mean_matches.reshape(shape)


def _monotone_in_psi(matches: np.ndarray) -> np.ndarray:
    """Isotonic (nondecreasing) projection along the last axis, by pool-adjacent-violators."""
    flat = matches.reshape(-1, matches.shape[-1])
    out = np.empty_like(flat)
    for i, y in enumerate(flat):
        vals, wts = [], []
        for v in y:
            vals.append(float(v))
            wts.append(1.0)
            while len(vals) > 1 and vals[-2] > vals[-1]:
                w = wts[-2] + wts[-1]
                vals[-2] = (vals[-2] * wts[-2] + vals[-1] * wts[-1]) / w
                wts[-2] = w
                vals.pop()
                wts.pop()
        out[i] = np.repeat(vals, np.array(wts, dtype=int))
    return out.reshape(matches.shape)


def _tie_symmetric(mean_counts: np.ndarray) -> np.ndarray:
    """Average E[counts] within runs of tied offsets (gap node 0).

    Tied labels are exchangeable, so their expected counts are equal; the
    simulated means differ only by Monte Carlo noise, which is largest in
    the slowly mixing ordered phase.
    """
    M = mean_counts.shape[-1]
    out = mean_counts.copy()
    for idx in np.ndindex(mean_counts.shape[: M - 1]):
        block = [0]
        for k in range(M):
            if k == M - 1 or idx[k] != 0:
                out[idx][:, block] = mean_counts[idx][:, block].mean(axis=-1, keepdims=True)
                block = [k + 1]
            else:
                block.append(k + 1)
    return out


def tensor_spline(axes, values) -> NdBSpline:
    """Not-a-knot cubic tensor-product interpolant; trailing value axes are allowed."""
    c = np.asarray(values, float)
    knots = []
    for i, x in enumerate(axes):
        spl = make_interp_spline(x, c, k=3, axis=i)
        c = np.moveaxis(spl.c, 0, i)
        knots.append(spl.t)
    return NdBSpline(tuple(knots), c, 3)


@dataclass
class SurrogateTable:
    graph_signature: tuple
    n_clusters: int
    design: SurrogateDesign
    seed: int
    mean_counts: np.ndarray  # (n_gap,)*(M-1) + (n_psi, M), descending-offset order
    mean_matches: np.ndarray  # (n_gap,)*(M-1) + (n_psi,), monotone in psi
    _interp: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._fit()

    @property
    def n_nodes(self) -> int:
        return self.graph_signature[0] * self.graph_signature[1]

    def _fit(self):
        d = self.design
        M = self.n_clusters
        g_axes = (d.gaps(),) * (M - 1)
        psi_d, psi_q = d.psi_nodes(), d.psi_quad()
        # monotone cubic in psi, then cumulative Simpson for the psi leg
        dense = PchipInterpolator(psi_d, self.mean_matches, axis=-1)(psi_q)
        F = cumulative_simpson(dense, x=psi_q, axis=-1, initial=0.0)
        if M == 1:
            self._interp["F"] = PchipInterpolator(psi_q, F)
            self._interp["matches"] = PchipInterpolator(psi_q, dense)
            self._interp["counts"] = None
        else:
            self._interp["F"] = tensor_spline(g_axes + (psi_q,), F)
            self._interp["matches"] = tensor_spline(g_axes + (psi_q,), dense)
            self._interp["counts"] = tensor_spline(g_axes + (psi_d,),
                                                   _tie_symmetric(self.mean_counts))

    def _check(self, offsets, psi):
        lo, hi = self.design.alpha_bounds
        plo, phi = self.design.psi_bounds
        if len(offsets) != self.n_clusters:
            raise ValueError(f"expected {self.n_clusters} offsets, got {len(offsets)}")
        if not (plo - 1e-12 <= psi <= phi + 1e-12) or np.any(offsets < lo - 1e-12) or np.any(
            offsets > hi + 1e-12
        ):
            raise ValueError(f"theta outside the surrogate design box: {offsets}, {psi}")

    def _point(self, offsets, psi):
        gaps, order, top = canonical_offsets(offsets)
        gaps = np.minimum(gaps, self.design.gap_nodes[-1])
        psi = min(max(psi, self.design.psi_bounds[0]), self.design.psi_bounds[1])
        return np.concatenate([gaps, [psi]]), order, top

    def expected(self, offsets, psi):
        """Interpolated (E[counts], E[matches]); counts in the caller's label order."""
        offsets = np.asarray(offsets, float)
        self._check(offsets, psi)
        M = self.n_clusters
        if M == 1:
            return np.array([float(self.n_nodes)]), float(self._interp["matches"](psi))
        pt, order, _ = self._point(offsets, psi)
        canon = self._interp["counts"](pt[None])[0]
        counts = np.empty(M)
        counts[order] = canon
        return counts, float(self._interp["matches"](pt[None])[0])

    def log_d(self, offsets, psi: float) -> float:
        offsets = np.asarray(offsets, float)
        self._check(offsets, psi)
        if self.n_clusters == 1:
            return self.n_nodes * float(offsets[0]) + float(self._interp["F"](psi))
        pt, _, top = self._point(offsets, psi)
        # offsets are sorted, so the first canonical offset (0) is the maximum
        base = self.n_nodes * (top + math.log(np.exp(gap_offsets(pt[:-1])).sum()))
        return base + float(self._interp["F"](pt[None])[0])

    def log_d_alpha_path(self, offsets, psi: float, n_nodes: int = 401) -> float:
        """log d via psi at equal offsets first, then a straight offset leg using E[counts].

        The leg's integrand changes fastest near equal offsets, so the
        quadrature nodes are geometric towards that end.
        """
        offsets = np.asarray(offsets, float)
        self._check(offsets, psi)
        M = self.n_clusters
        start = self.log_d(np.zeros(M), psi)
        if M == 1 or not np.any(offsets):
            return start + self.n_nodes * float(offsets[0]) if M == 1 else start
        t = np.concatenate([[0.0], np.geomspace(1e-5, 1.0, n_nodes - 1)])
        integrand = np.array([self.expected(tk * offsets, psi)[0] @ offsets for tk in t])
        return start + float(simpson(integrand, x=t))

    # -- persistence --

    def cache_key(self) -> str:
        payload = json.dumps(
            {"graph": list(self.graph_signature), "M": self.n_clusters,
             "design": _design_dict(self.design), "seed": self.seed,
             "version": SURROGATE_VERSION},
            sort_keys=True,
        )
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def save(self, path) -> None:
        meta = {"version": SURROGATE_VERSION, "graph": list(self.graph_signature),
                "M": self.n_clusters, "design": _design_dict(self.design), "seed": self.seed}
        write_npz(path, {"mean_counts": self.mean_counts, "mean_matches": self.mean_matches},
                  meta)

    @classmethod
    def load(cls, path) -> "SurrogateTable":
        arrays, meta = read_npz(path)
        if meta.get("version") != SURROGATE_VERSION:
            raise ValueError(f"{path}: unsupported surrogate version {meta.get('version')}")
        design = SurrogateDesign(**{k: tuple(v) if isinstance(v, list) else v
                                    for k, v in meta["design"].items()})
        return cls(tuple(meta["graph"]), meta["M"], design, meta["seed"],
                   arrays["mean_counts"], arrays["mean_matches"])


def _design_dict(design: SurrogateDesign) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in design.__dict__.items()}


def build_surrogate(graph: PottsGraph, M: int, design: SurrogateDesign | None = None,
                    seed: int = 0) -> SurrogateTable:
    design = design or SurrogateDesign()
    _, counts, matches = simulate_design(graph, M, design, seed)
    return SurrogateTable(graph.signature, M, design, seed, counts, _monotone_in_psi(matches))


def surrogate_log_d(params: PottsParams, table: SurrogateTable, group: int | None = None) -> float:
    return table.log_d(params.offsets(group), params.psi)


def surrogate_path(cache_dir, graph: PottsGraph, M: int, design: SurrogateDesign, seed: int) -> Path:
    probe = SurrogateTable.__new__(SurrogateTable)
    probe.graph_signature, probe.n_clusters = graph.signature, M
    probe.design, probe.seed = design, seed
    return Path(cache_dir) / f"surrogate-{SurrogateTable.cache_key(probe)}.npz"


def cached_surrogate(graph: PottsGraph, M: int, design: SurrogateDesign | None = None,
                     seed: int = 0, cache_dir=None) -> SurrogateTable:
    """Build or reuse a surrogate stored under ``cache_dir``."""
    design = design or SurrogateDesign()
    if cache_dir is None:
        return build_surrogate(graph, M, design, seed)
    path = surrogate_path(cache_dir, graph, M, design, seed)
    if path.exists():
        return SurrogateTable.load(path)
    table = build_surrogate(graph, M, design, seed)
    path.parent.mkdir(parents=True, exist_ok=True)
    table.save(path)
    return table


# --- deterministic npz ----------------------------------------------------------


def write_npz(path, arrays: dict, meta: dict | None = None) -> None:
    """npz archive with fixed timestamps so identical content gives identical bytes."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        items = dict(arrays)
        if meta is not None:
            items["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), np.uint8)
        for name in sorted(items):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(items[name]), allow_pickle=False)
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, buf.getvalue())


def read_npz(path) -> tuple[dict, dict]:
    with np.load(path, allow_pickle=False) as f:
        arrays = {k: f[k] for k in f.files if k != "__meta__"}
        meta = json.loads(f["__meta__"].tobytes().decode()) if "__meta__" in f.files else {}
    return arrays, meta
