"""Synthetic multi-subject datasets with known labels, baselines and the ARI study."""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import potts
from .cluster import kmeans
from .features import FeatureMatrix, build_features
from .gridstats import DEFAULT_N_R, explicit_grid, grid_stats
from .ingest import MarkedPointPattern, Rectangle
from .metrics import adjusted_rand_index
from .posterior import relabel_chain, summarize_labels
from .potts import PottsGraph, PottsParams
from .sampler import McmcConfig, run_chain

log = logging.getLogger(__name__)

REGIMES = {"high": (45.0, 72.0), "low": (20.0, 32.0)}
METHODS = ("PCM", "nonspatial-PCM", "FPCA-G", "FPCA-S", "Curve-G", "Curve-S")


# --- point processes on one unit region --------------------------------------------


@dataclass(frozen=True)
class ClusterProcess:
    """Point process of one cluster on a unit-area region.

    ``kind`` is ``csr`` (homogeneous Poisson), ``thomas`` (Gaussian offspring
    around Poisson parents; ``scale`` is the offspring SD) or ``hardcore``
    (Matern II thinning; ``scale`` is the hard-core distance).  Marks are
    assigned independently with ``proportions``.
    """

    kind: str
    intensity: float
    proportions: tuple
    scale: float = 0.0
    offspring: float = 4.0

    def __post_init__(self):
        if self.kind not in ("csr", "thomas", "hardcore"):
            raise ValueError(f"unknown process kind {self.kind!r}")
        if self.intensity <= 0:
            raise ValueError("intensity must be positive")
        if self.kind == "hardcore" and self.intensity * np.pi * self.scale**2 >= 1:
            raise ValueError("hard-core distance too large for the intensity")


def _uniform(n, lo, hi, rng):
    return lo + (hi - lo) * rng.random((n, 2))


def matern2_parent_intensity(target: float, h: float) -> float:
    """Parent intensity whose Matern II thinning keeps ``target`` points per unit area."""
    a = np.pi * h * h
    return -np.log1p(-target * a) / a


def simulate_region(proc: ClusterProcess, rng: np.random.Generator, width=1.0, height=1.0):
    """Points (n, 2) in [0, width) x [0, height) and 1-based marks."""
    area = width * height
    if proc.kind == "csr":
        n = rng.poisson(proc.intensity * area)
        xy = _uniform(n, 0, 1, rng) * (width, height)
    elif proc.kind == "thomas":
        pad = 4 * proc.scale
        kappa = proc.intensity / proc.offspring
        n_par = rng.poisson(kappa * (width + 2 * pad) * (height + 2 * pad))
        parents = _uniform(n_par, 0, 1, rng) * (width + 2 * pad, height + 2 * pad) - pad
        sizes = rng.poisson(proc.offspring, n_par)
        xy = np.repeat(parents, sizes, axis=0) + proc.scale * rng.standard_normal((sizes.sum(), 2))
        inside = (xy[:, 0] >= 0) & (xy[:, 0] < width) & (xy[:, 1] >= 0) & (xy[:, 1] < height)
        xy = xy[inside]
    else:
        h = proc.scale
        lam = matern2_parent_intensity(proc.intensity, h)
        n_par = rng.poisson(lam * (width + 2 * h) * (height + 2 * h))
        pts = _uniform(n_par, 0, 1, rng) * (width + 2 * h, height + 2 * h) - h
        birth = rng.random(n_par)
        keep = np.ones(n_par, bool)
        if n_par > 1:
            d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1)
            older = (d2 < h * h) & (birth[None, :] < birth[:, None])
            keep = ~older.any(axis=1)
        xy = pts[keep]
        inside = (xy[:, 0] >= 0) & (xy[:, 0] < width) & (xy[:, 1] >= 0) & (xy[:, 1] < height)
        xy = xy[inside]
    marks = rng.choice(len(proc.proportions), size=len(xy), p=np.asarray(proc.proportions)) + 1
    return xy, marks


# --- scenarios ----------------------------------------------------------------------


_KINDS = ("csr", "thomas", "hardcore")


# position of each cluster's total intensity inside the regime range
_INTENSITY_FRACTIONS = (0.37, 0.19, 0.74, 0.93, 0.05)
_SCALES = {"csr": 0.0, "thomas": 0.06, "hardcore": 0.035}


def default_processes(n_clusters: int, regime: str = "high", n_types: int = 2) -> list:
    """Cluster generators inside the regime's total-intensity range.

    Cluster 1 is CSR, cluster 2 clustered, cluster 3 inhibited; further
    clusters cycle through the families.  Type-1 proportions step from 0.52
    down to 0.48 so marks alone separate clusters only weakly.
    """
    if n_clusters > len(_INTENSITY_FRACTIONS):
        raise ValueError(f"default generators cover at most {len(_INTENSITY_FRACTIONS)} clusters")
    lo, hi = REGIMES[regime]
    first = np.linspace(0.52, 0.48, n_clusters) if n_clusters > 1 else np.array([0.5])
    procs = []
    for k in range(n_clusters):
        kind = _KINDS[k % 3]
        p1 = float(first[k])
        props = (p1,) + tuple(np.full(n_types - 1, (1 - p1) / (n_types - 1)))
        lam = lo + (hi - lo) * _INTENSITY_FRACTIONS[k]
        procs.append(ClusterProcess(kind, float(lam), props, _SCALES[kind]))
    return procs


@dataclass
class ScenarioConfig:
    n_clusters: int = 3
    psi: float = 1.29
    n_subjects: int = 50
    regime: str = "high"
    rows: int = 10
    cols: int = 12
    n_types: int = 2
    seed: int = 0
    label_sweeps: int = 100
    processes: list = field(default=None)

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"regime must be one of {sorted(REGIMES)}")
        if self.processes is None:
            self.processes = default_processes(self.n_clusters, self.regime, self.n_types)
        self.processes = [p if isinstance(p, ClusterProcess) else ClusterProcess(**p)
                          for p in self.processes]
        if len(self.processes) != self.n_clusters:
            raise ValueError("one process per cluster required")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["processes"] = [asdict(p) for p in self.processes]
        return d

    def label(self) -> str:
        return f"M={self.n_clusters},psi={self.psi},N={self.n_subjects},{self.regime}"


def generate_dataset(scn: ScenarioConfig):
    """Patterns on a ``rows x cols`` grid of unit regions and true labels (N, L), 0-based."""
    ss = np.random.SeedSequence(scn.seed)
    label_seq, *subject_seqs = ss.spawn(scn.n_subjects + 1)
    graph = PottsGraph(scn.rows, scn.cols)
    params = PottsParams(np.zeros(scn.n_clusters), scn.psi)
    labels = potts.gibbs_sample_field(params, graph, scn.label_sweeps,
                                      np.random.default_rng(label_seq), n_fields=scn.n_subjects)
    window = Rectangle(0.0, float(scn.cols), 0.0, float(scn.rows))
    patterns = []
    for n in range(scn.n_subjects):
        rng = np.random.default_rng(subject_seqs[n])
        xy_all, marks_all = [], []
        for l in range(graph.n_nodes):
            row, col = divmod(l, scn.cols)
            xy, marks = simulate_region(scn.processes[labels[n, l]], rng)
            xy_all.append(xy + (col, row))
            marks_all.append(marks)
        patterns.append(MarkedPointPattern(f"s{n + 1:03d}", np.concatenate(xy_all),
                                           np.concatenate(marks_all), window, None,
                                           scn.n_types))
    return patterns, labels


@dataclass
class PreparedData:
    features: FeatureMatrix
    curves: np.ndarray  # (N, L, R_d) processed curves, NaN where missing
    intensities: np.ndarray  # (N, L, H)
    basis: object


def prepare_summaries(summaries, grid, r_grid, variance_threshold: float = 0.8) -> PreparedData:
    fm, basis = build_features(summaries, grid, r_grid, variance_threshold)
    curves = np.stack([s.curve for s in summaries])
    intens = np.stack([s.intensity for s in summaries])
    return PreparedData(fm, curves, intens, basis)


def prepare(patterns, scn: ScenarioConfig, n_r: int = DEFAULT_N_R) -> PreparedData:
    grid = explicit_grid(patterns[0].window, scn.rows, scn.cols)
    summaries = grid_stats(patterns, grid, scn.n_types, n_r)
    return prepare_summaries(summaries, grid, grid.r_grid(n_r))


# --- baselines ----------------------------------------------------------------------


def _standardize(X: np.ndarray) -> np.ndarray:
    sd = X.std(axis=0, ddof=1)
    sd[sd == 0] = 1.0
    return (X - X.mean(axis=0)) / sd


def _kmeans_labels(X: np.ndarray, ok: np.ndarray, M: int, per_subject: bool, seed,
                   n_init: int = 25) -> np.ndarray:
    """k-means on rows flagged by ``ok`` (N, L); others get -1."""
    N, L = ok.shape
    out = -np.ones((N, L), np.int64)
    rng = np.random.default_rng(seed)
    if per_subject:
        for n in range(N):
            sel = ok[n]
            if sel.sum() < M:
                raise ValueError(f"subject {n + 1} has fewer than {M} usable regions")
            out[n, sel] = kmeans(_standardize(X[n, sel]), M, n_init, rng)[0]
    else:
        out[ok] = kmeans(_standardize(X[ok]), M, n_init, rng)[0]
    return out


def run_baseline(method: str, data: PreparedData, n_clusters: int, seed=0,
                 mcmc: McmcConfig | None = None, normalizer=None) -> np.ndarray:
    """Labels (N, L), 0-based, -1 where a region has no usable features."""
    fm = data.features
    if method in ("FPCA-G", "FPCA-S"):
        ok = fm.mask.all(axis=2)
        X = fm.raw_values()
        return _kmeans_labels(np.nan_to_num(X), ok, n_clusters, method.endswith("S"), seed)
    if method in ("Curve-G", "Curve-S"):
        X = np.concatenate([data.curves, data.intensities], axis=2)
        ok = ~np.isnan(X).any(axis=2)
        return _kmeans_labels(np.nan_to_num(X), ok, n_clusters, method.endswith("S"), seed)
    if method in ("PCM", "nonspatial-PCM"):
        cfg = mcmc or McmcConfig(n_clusters=n_clusters)
        cfg = McmcConfig(**{**cfg.to_dict(), "n_clusters": n_clusters, "seed": int(seed),
                            "fix_psi": 0.0 if method == "nonspatial-PCM" else cfg.fix_psi})
        if normalizer is None:
            normalizer = potts.cached_surrogate(PottsGraph(fm.grid.rows, fm.grid.cols),
                                                n_clusters, potts.SurrogateDesign(), 0)
        chain, _ = relabel_chain(run_chain(fm, cfg, normalizer))
        labels = summarize_labels(chain).map_labels
        return np.where(fm.mask.any(axis=2), labels, -1)
    raise ValueError(f"unknown method {method!r}")


def score_ari(labels_a, labels_b) -> float:
    return adjusted_rand_index(labels_a, labels_b)


def score_method(method: str, truth: np.ndarray, labels: np.ndarray) -> float:
    """Pooled ARI for pooled methods; mean per-subject ARI for the ``-S`` variants."""
    truth = np.where(labels < 0, -1, truth)
    if method.endswith("-S"):
        return float(np.mean([score_ari(truth[n], labels[n]) for n in range(len(truth))]))
    return score_ari(truth, labels)


# --- study ------------------------------------------------------------------------------


def _replicate(args):
    scn, methods, rep, mcmc, cache_dir = args
    s = ScenarioConfig(**{**scn.to_dict(), "seed": int(
        np.random.SeedSequence([scn.seed, rep]).generate_state(1)[0])})
    patterns, truth = generate_dataset(s)
    data = prepare(patterns, s)
    normalizer = None
    if any(m.endswith("PCM") for m in methods):
        normalizer = potts.cached_surrogate(PottsGraph(s.rows, s.cols), s.n_clusters,
                                            potts.SurrogateDesign(), 0, cache_dir)
    out = {}
    for m in methods:
        labels = run_baseline(m, data, s.n_clusters, seed=s.seed, mcmc=mcmc,
                              normalizer=normalizer)
        out[m] = score_method(m, truth, labels)
        log.info("%s rep %d %s ARI %.3f", scn.label(), rep, m, out[m])
    return out


def run_study(scenarios, methods=METHODS, replications: int = 10, mcmc: McmcConfig | None = None,
              threads: int = 1, cache_dir=None) -> list[dict]:
    """Mean and SD of ARI per scenario and method across replications."""
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}")
    if cache_dir is not None:
        # build shared surrogates once before fanning out
        for scn in scenarios:
            if any(m.endswith("PCM") for m in methods):
                potts.cached_surrogate(PottsGraph(scn.rows, scn.cols), scn.n_clusters,
                                       potts.SurrogateDesign(), 0, cache_dir)
    jobs = [(scn, tuple(methods), rep, mcmc, cache_dir)
            for scn in scenarios for rep in range(replications)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_replicate, jobs))
    else:
        results = [_replicate(j) for j in jobs]
    rows = []
    for i, scn in enumerate(scenarios):
        block = results[i * replications:(i + 1) * replications]
        for m in methods:
            vals = np.array([r[m] for r in block])
            rows.append({"n_clusters": scn.n_clusters, "psi": scn.psi,
                         "n_subjects": scn.n_subjects, "regime": scn.regime, "method": m,
                         "mean_ari": float(vals.mean()),
                         "sd_ari": float(vals.std(ddof=1)) if len(vals) > 1 else 0.0,
                         "replications": replications, "values": vals.tolist()})
    return rows


STUDY_COLUMNS = ["n_clusters", "psi", "n_subjects", "regime", "method", "mean_ari", "sd_ari",
                 "replications"]


def write_study(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, STUDY_COLUMNS, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({**r, "mean_ari": repr(r["mean_ari"]), "sd_ari": repr(r["sd_ari"])})


# --- cluster-count selection ------------------------------------------------------------


def select_m(fm: FeatureMatrix, config: McmcConfig, m_min: int = 2, m_max: int = 10,
             threshold: float = 0.01, normalizer_for=None) -> tuple[int, list[dict]]:
    """Increase M until some cluster's occupancy falls below ``threshold``.

    The chosen M is the last one before the stopping value (every cluster
    still populated).  ``normalizer_for(M)`` supplies the log normaliser.
    """
    if normalizer_for is None:
        graph = PottsGraph(fm.grid.rows, fm.grid.cols)
        normalizer_for = lambda M: potts.cached_surrogate(  # noqa: E731
            graph, M, potts.SurrogateDesign(), 0)
    history = []
    chosen = None
    for M in range(m_min, m_max + 1):
        cfg = McmcConfig(**{**config.to_dict(), "n_clusters": M})
        chain, _ = relabel_chain(run_chain(fm, cfg, normalizer_for(M)))
        occ = summarize_labels(chain).occupancy
        overall = np.mean(np.stack(list(occ.values())), axis=0) if len(occ) > 1 else next(
            iter(occ.values()))
        smallest = float(overall.min())
        history.append({"M": M, "min_occupancy": smallest, "occupancy": overall.tolist()})
        if smallest < threshold:
            chosen = max(M - 1, m_min)
            break
    if chosen is None:
        chosen = m_max
    return chosen, history
