"""MCMC for the hidden Potts Gaussian mixture.

One iteration updates labels (checkerboard Gibbs with data terms), cluster
means and error variances (conjugate draws), then the Potts parameters by
coordinate-wise random-walk Metropolis with the log normaliser supplied by a
surrogate table (or an exact normaliser on small lattices).
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import gammaln

from . import potts
from .cluster import kmeans
from .features import FeatureMatrix
from .gridstats import GridSpec
from .metrics import effective_sample_size
from .potts import PottsGraph, PottsParams

log = logging.getLogger(__name__)

CHAIN_VERSION = 1
NU_SHAPE = 1.0
NU_SCALE = 0.01


@dataclass
class McmcConfig:
    n_clusters: int = 3
    iterations: int = 30000
    burn_in: int = 10000
    thin: int = 10
    seed: int = 0
    alpha_step: float = 0.25
    psi_step: float = 0.1
    adapt: bool = True
    adapt_window: int = 50
    group_mode: bool = False
    fix_psi: float | None = None
    init_psi: float = 0.5
    kmeans_restarts: int = 5

    def __post_init__(self):
        if self.n_clusters < 1:
            raise ValueError("n_clusters must be >= 1")
        if not 0 <= self.burn_in < self.iterations:
            raise ValueError("need 0 <= burn_in < iterations")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if self.fix_psi is not None and not potts.PSI_BOUNDS[0] <= self.fix_psi <= potts.PSI_BOUNDS[1]:
            raise ValueError("fix_psi outside the prior range")

    @classmethod
    def real_data(cls, **kw) -> "McmcConfig":
        """Longer preset for real tissue data."""
        kw.setdefault("iterations", 75000)
        kw.setdefault("burn_in", 10000)
        return cls(**kw)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ChainState:
    labels: np.ndarray  # (N, rows, cols), 0-based
    mu: np.ndarray  # (Q, M)
    nu2: np.ndarray  # (Q,)
    params: PottsParams
    iteration: int = 0
    rng: np.random.Generator = field(default_factory=np.random.default_rng, repr=False)


# --- likelihood pieces ---------------------------------------------------------


def _data(fm: FeatureMatrix):
    R, C = fm.grid.rows, fm.grid.cols
    x = fm.values.reshape(fm.n_subjects, R, C, fm.n_features)
    m = fm.mask.reshape(x.shape).astype(float)
    return x, m


def label_loglik(x, m, mu, nu2) -> np.ndarray:
    """Per-site Gaussian log density for each cluster, shape (N, rows, cols, M).

    Masked dimensions contribute nothing.
    """
    w = m / nu2  # (..., Q)
    quad = ((w * x * x).sum(axis=-1)[..., None] - 2 * (w * x) @ mu + w @ (mu * mu))
    return -0.5 * (quad + (m @ np.log(2 * np.pi * nu2))[..., None])


def update_labels(state: ChainState, x, m, groups, loglik=None) -> np.ndarray:
    """One systematic-scan Gibbs sweep of every subject's labels, in place."""
    M = len(state.params.alpha)
    if M == 1:
        state.labels[:] = 0
        return state.labels
    if loglik is None:
        loglik = label_loglik(x, m, state.mu, state.nu2)
    offsets = np.stack([state.params.offsets(g) for g in groups])
    colors = PottsGraph(*state.labels.shape[1:]).color_masks()
    potts.gibbs_sweep(state.labels, offsets, state.params.psi, state.rng, colors,
                      extra_logits=loglik)
    return state.labels


def _cluster_sums(x, m, labels, M):
    """Available counts and sums per (dimension, cluster)."""
    Q = x.shape[-1]
    onehot = np.eye(M)[labels.reshape(-1)]  # (S, M)
    mf = m.reshape(-1, Q)
    xf = x.reshape(-1, Q) * mf
    return mf.T @ onehot, xf.T @ onehot


def update_means(state: ChainState, x, m) -> np.ndarray:
    """Conjugate draw under the N(0, 1) prior."""
    M = len(state.params.alpha)
    n, s = _cluster_sums(x, m, state.labels, M)
    prec = n / state.nu2[:, None] + 1.0
    mean = (s / state.nu2[:, None]) / prec
    state.mu = mean + state.rng.standard_normal(mean.shape) / np.sqrt(prec)
    return state.mu


def update_variances(state: ChainState, x, m) -> np.ndarray:
    """Conjugate draw under the InvGamma(1, 0.01) prior."""
    Q = x.shape[-1]
    fitted = state.mu[:, state.labels.reshape(-1)].T  # (S, Q)
    mf = m.reshape(-1, Q)
    ss = (((x.reshape(-1, Q) - fitted) ** 2) * mf).sum(axis=0)
    shape = NU_SHAPE + 0.5 * mf.sum(axis=0)
    rate = NU_SCALE + 0.5 * ss
    state.nu2 = rate / state.rng.gamma(shape)
    return state.nu2


# --- Potts parameters --------------------------------------------------------------


class ThetaTarget:
    """Log posterior of theta given labels, up to a constant.

    Sum over subjects of z(C_n, theta) - log d_n(theta); the uniform prior
    box contributes -inf outside.
    """

    def __init__(self, labels, groups, normalizer, group_mode: bool):
        self.normalizer = normalizer
        groups = np.array([1 if (group_mode and g == 1) else 0 for g in groups])
        flat = labels.reshape(len(labels), -1)
        M = normalizer.n_clusters
        n_sub = len(flat)
        idx = flat + M * np.arange(n_sub)[:, None]
        counts = np.bincount(idx.ravel(), minlength=M * n_sub).reshape(n_sub, M).astype(float)
        self.counts = [counts[groups == 0].sum(axis=0), counts[groups == 1].sum(axis=0)]
        self.n = [int((groups == 0).sum()), int((groups == 1).sum())]
        self.matches = float(potts.match_count(labels).sum())

    def part(self, offsets, psi, g) -> float:
        if self.n[g] == 0:
            return 0.0
        return float(offsets @ self.counts[g]) - self.n[g] * self.normalizer.log_d(offsets, psi)

    def total(self, params: PottsParams) -> float:
        beta = params.beta if params.beta is not None else params.alpha
        return (self.part(params.alpha, params.psi, 0) + self.part(beta, params.psi, 1)
                + params.psi * self.matches)


def _coordinates(M, group_mode, fix_psi):
    coords = [("alpha", j) for j in range(1, M)]
    if group_mode:
        coords += [("beta", j) for j in range(1, M)]
    if fix_psi is None:
        coords.append(("psi", 0))
    return coords


def update_theta(state: ChainState, target: ThetaTarget, steps: dict, accepted: dict,
                 coords) -> PottsParams:
    """Random-walk Metropolis, one coordinate at a time."""
    p = state.params
    lo, hi = potts.ALPHA_BOUNDS
    plo, phi = potts.PSI_BOUNDS
    beta_or_alpha = lambda q: q.beta if q.beta is not None else q.alpha  # noqa: E731
    cur = {0: target.part(p.alpha, p.psi, 0), 1: target.part(beta_or_alpha(p), p.psi, 1)}
    for name, j in coords:
        step = steps[(name, j)]
        prop = p.copy()
        if name == "psi":
            prop.psi = p.psi + step * state.rng.standard_normal()
            if not plo <= prop.psi <= phi:
                continue
            new = {0: target.part(prop.alpha, prop.psi, 0),
                   1: target.part(beta_or_alpha(prop), prop.psi, 1)}
            delta = (new[0] + new[1] - cur[0] - cur[1]
                     + (prop.psi - p.psi) * target.matches)
        else:
            vec = getattr(prop, name)
            vec[j] += step * state.rng.standard_normal()
            if not lo <= vec[j] <= hi:
                continue
            g = 0 if name == "alpha" else 1
            new = dict(cur)
            new[g] = target.part(vec, prop.psi, g)
            if prop.beta is None:  # alpha drives both groups
                new[1] = target.part(vec, prop.psi, 1)
            delta = new[0] + new[1] - cur[0] - cur[1]
        if not math.isfinite(delta):
            raise FloatingPointError(f"non-finite Metropolis ratio at iteration {state.iteration}")
        if delta >= 0 or state.rng.random() < math.exp(delta):
            p, cur = prop, new
            accepted[(name, j)] += 1
    state.params = p
    return p


# --- joint density -----------------------------------------------------------------


def log_joint(state: ChainState, x, m, groups, normalizer, loglik=None) -> float:
    """Unnormalised log posterior of the full state (uniform theta priors omitted)."""
    if loglik is None:
        loglik = label_loglik(x, m, state.mu, state.nu2)
    lab = state.labels
    ll = np.take_along_axis(loglik, lab[..., None], axis=-1).sum()
    target = ThetaTarget(lab, groups, normalizer, state.params.beta is not None)
    prior_theta = target.total(state.params)
    prior_mu = -0.5 * (state.mu**2).sum() - 0.5 * state.mu.size * np.log(2 * np.pi)
    nu2 = state.nu2
    prior_nu = (NU_SHAPE * np.log(NU_SCALE) - gammaln(NU_SHAPE)
                - (NU_SHAPE + 1) * np.log(nu2) - NU_SCALE / nu2).sum()
    return float(ll + prior_theta + prior_mu + prior_nu)


# --- initialisation ------------------------------------------------------------------


def initial_state(fm: FeatureMatrix, config: McmcConfig, rng: np.random.Generator) -> ChainState:
    """k-means labels, cluster sample means and within-cluster variances."""
    M = config.n_clusters
    x, m = _data(fm)
    Q = fm.n_features
    xf, mf = x.reshape(-1, Q), m.reshape(-1, Q).astype(bool)
    full = mf.all(axis=1)
    labels = rng.integers(0, M, size=len(xf))
    if M > 1 and full.sum() >= M:
        lab, centers, _ = kmeans(xf[full], M, n_init=config.kmeans_restarts, seed=rng)
        labels[full] = lab
        partial = ~full & mf.any(axis=1)
        for i in np.flatnonzero(partial):
            d = (((xf[i] - centers) ** 2) * mf[i]).sum(axis=1)
            labels[i] = int(d.argmin())
    elif M == 1:
        labels[:] = 0
    mu = np.zeros((Q, M))
    nu2 = np.ones(Q)
    for q in range(Q):
        ok = mf[:, q]
        resid = []
        for k in range(M):
            sel = ok & (labels == k)
            if sel.any():
                mu[q, k] = xf[sel, q].mean()
                resid.append(xf[sel, q] - mu[q, k])
        if resid:
            r = np.concatenate(resid)
            if len(r) > 1:
                nu2[q] = max(float(r @ r / len(r)), 1e-3)
    psi = config.fix_psi if config.fix_psi is not None else config.init_psi
    beta = np.zeros(M) if config.group_mode else None
    params = PottsParams(np.zeros(M), float(psi), beta)
    return ChainState(labels.reshape(fm.n_subjects, fm.grid.rows, fm.grid.cols), mu, nu2,
                      params, 0, rng)


# --- chains ------------------------------------------------------------------------------


@dataclass
class Chain:
    """Thinned post-burn-in draws plus run metadata."""

    labels: np.ndarray  # (D, N, L) int8, 0-based
    mu: np.ndarray  # (D, Q, M)
    nu2: np.ndarray  # (D, Q)
    alpha: np.ndarray  # (D, M)
    beta: np.ndarray | None  # (D, M)
    psi: np.ndarray  # (D,)
    log_post: np.ndarray  # (D,)
    iterations: np.ndarray  # (D,)
    meta: dict

    @property
    def n_draws(self) -> int:
        return len(self.psi)

    @property
    def n_clusters(self) -> int:
        return self.mu.shape[2]

    @property
    def grid(self) -> GridSpec:
        g = self.meta["grid"]
        return GridSpec(g[0], g[1], g[2], g[3], (g[4], g[5]))

    def save(self, path) -> None:
        arrays = {"labels": self.labels, "mu": self.mu, "nu2": self.nu2, "alpha": self.alpha,
                  "psi": self.psi, "log_post": self.log_post, "iterations": self.iterations}
        if self.beta is not None:
            arrays["beta"] = self.beta
        potts.write_npz(path, arrays, {**self.meta, "chain_version": CHAIN_VERSION})

    @classmethod
    def load(cls, path) -> "Chain":
        a, meta = potts.read_npz(path)
        if meta.get("chain_version") != CHAIN_VERSION:
            raise ValueError(f"{path}: unsupported chain version {meta.get('chain_version')}")
        return cls(a["labels"], a["mu"], a["nu2"], a["alpha"], a.get("beta"), a["psi"],
                   a["log_post"], a["iterations"], meta)


def diagnostics(chain: Chain) -> dict:
    """Effective sample sizes of scalar parameters; acceptance rates come from the run."""
    ess = {"psi": effective_sample_size(chain.psi), "log_post": effective_sample_size(chain.log_post)}
    M = chain.n_clusters
    for j in range(1, M):
        ess[f"alpha_{j + 1}"] = effective_sample_size(chain.alpha[:, j])
        if chain.beta is not None:
            ess[f"beta_{j + 1}"] = effective_sample_size(chain.beta[:, j])
    for q in range(chain.mu.shape[1]):
        ess[f"nu2_{q + 1}"] = effective_sample_size(chain.nu2[:, q])
        for k in range(M):
            ess[f"mu_{q + 1}_{k + 1}"] = effective_sample_size(chain.mu[:, q, k])
    return {"ess": ess, **chain.meta.get("run", {})}


def default_normalizer(fm: FeatureMatrix, config: McmcConfig, design=None, cache_dir=None,
                       surrogate_seed: int = 0):
    graph = PottsGraph(fm.grid.rows, fm.grid.cols)
    return potts.cached_surrogate(graph, config.n_clusters, design or potts.SurrogateDesign(),
                                  surrogate_seed, cache_dir)


def run_chain(fm: FeatureMatrix, config: McmcConfig, normalizer=None, progress: int = 0) -> Chain:
    """Run one chain.

    ``normalizer`` is anything with ``log_d(offsets, psi)`` and
    ``n_clusters`` (a :class:`potts.SurrogateTable`, an exact normaliser).
    """
    if normalizer is None:
        raise ValueError("a log-normaliser (surrogate table) is required")
    M = config.n_clusters
    if getattr(normalizer, "n_clusters", M) != M:
        raise ValueError("normaliser was built for a different cluster count")
    sig = getattr(normalizer, "graph_signature", None) or getattr(
        getattr(normalizer, "graph", None), "signature", None)
    if sig is not None and tuple(sig) != (fm.grid.rows, fm.grid.cols):
        raise ValueError(f"normaliser lattice {tuple(sig)} does not match the grid")
    rng = np.random.default_rng(config.seed)
    x, m = _data(fm)
    groups = fm.groups
    if config.group_mode and not any(g == 1 for g in groups):
        log.warning("group mode requested but no subject is in group 1")
    state = initial_state(fm, config, rng)
    coords = _coordinates(M, config.group_mode, config.fix_psi)
    steps = {c: (config.psi_step if c[0] == "psi" else config.alpha_step) for c in coords}
    accepted = {c: 0 for c in coords}
    window = {c: 0 for c in coords}
    saved = range(config.burn_in, config.iterations, config.thin)
    D = len(saved)
    N, L, Q = fm.n_subjects, fm.n_regions, fm.n_features
    out = dict(labels=np.zeros((D, N, L), np.int8), mu=np.zeros((D, Q, M)),
               nu2=np.zeros((D, Q)), alpha=np.zeros((D, M)),
               beta=np.zeros((D, M)) if config.group_mode else None,
               psi=np.zeros(D), log_post=np.zeros(D), iterations=np.array(saved, np.int64))
    d = 0
    for it in range(config.iterations):
        state.iteration = it
        loglik = label_loglik(x, m, state.mu, state.nu2)
        if not np.isfinite(loglik).all():
            raise FloatingPointError(f"non-finite likelihood at iteration {it}")
        update_labels(state, x, m, groups, loglik)
        update_means(state, x, m)
        update_variances(state, x, m)
        if coords:
            target = ThetaTarget(state.labels, groups, normalizer, config.group_mode)
            before = dict(accepted)
            update_theta(state, target, steps, accepted, coords)
            if it < config.burn_in:
                for c in coords:
                    window[c] += accepted[c] - before[c]
                if config.adapt and (it + 1) % config.adapt_window == 0:
                    for c in coords:
                        rate = window[c] / config.adapt_window
                        if rate < 0.2:
                            steps[c] *= 0.6
                        elif rate > 0.5:
                            steps[c] *= 1.5
                        window[c] = 0
            if it == config.burn_in - 1:
                accepted = {c: 0 for c in coords}
        if d < D and it == saved[d]:
            out["labels"][d] = state.labels.reshape(N, L)
            out["mu"][d] = state.mu
            out["nu2"][d] = state.nu2
            out["alpha"][d] = state.params.alpha
            if config.group_mode:
                out["beta"][d] = state.params.beta
            out["psi"][d] = state.params.psi
            out["log_post"][d] = log_joint(state, x, m, groups, normalizer)
            d += 1
        if progress and (it + 1) % progress == 0:
            log.info("iteration %d psi=%.3f alpha=%s", it + 1, state.params.psi,
                     np.round(state.params.alpha, 3))
    kept = config.iterations - config.burn_in
    run = {
        "acceptance": {f"{n}_{j + 1}" if n != "psi" else "psi": accepted[(n, j)] / kept
                       for n, j in coords},
        "proposal_scales": {f"{n}_{j + 1}" if n != "psi" else "psi": steps[(n, j)]
                            for n, j in coords},
    }
    g = fm.grid
    meta = {
        "config": config.to_dict(),
        "subject_ids": list(fm.subject_ids),
        "groups": [None if v is None else int(v) for v in fm.groups],
        "grid": [g.rows, g.cols, g.cell_width, g.cell_height, g.origin[0], g.origin[1]],
        "n_scores": int(fm.n_scores),
        "centers": [float(v) for v in fm.centers],
        "scales": [float(v) for v in fm.scales],
        "mask": fm.mask.any(axis=2).astype(int).tolist(),
        "run": run,
    }
    return Chain(meta=json.loads(json.dumps(meta)), **out)


def _run_one(args):
    fm, config, normalizer = args
    return run_chain(fm, config, normalizer)


def run_chains(fm: FeatureMatrix, config: McmcConfig, normalizer, n_chains: int = 1,
               threads: int = 1) -> list[Chain]:
    """Independent chains with seeds derived from ``config.seed``."""
    seeds = np.random.SeedSequence(config.seed).generate_state(n_chains, dtype=np.uint32)
    jobs = [(fm, McmcConfig(**{**config.to_dict(), "seed": int(s)}), normalizer) for s in seeds]
    if threads <= 1 or n_chains == 1:
        return [_run_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(_run_one, jobs))
