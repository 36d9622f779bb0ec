import numpy as np
import pytest
from numpy.testing import assert_allclose

from pcmseg.features import build_features, fit_pca, invert_features
from pcmseg.gridstats import explicit_grid, grid_stats
from pcmseg.ingest import MarkedPointPattern, Rectangle
from pcmseg.metrics import adjusted_rand_index
from pcmseg.posterior import (
    map_labels, read_labels, relabel_chain, summarize_clusters, summarize_labels, write_clusters,
    write_labels, write_occupancy,
)
from pcmseg.potts import ExactNormalizer, PottsGraph
from pcmseg.sampler import Chain, McmcConfig, run_chain


def _chain(labels, mu=None, log_post=None, groups=None, mask=None, alpha=None):
    labels = np.asarray(labels, np.int8)
    D, N, L = labels.shape
    M = int(labels.max()) + 1 if mu is None else mu.shape[2]
    if mu is None:
        mu = np.zeros((D, 1, M))
    if alpha is None:
        alpha = np.zeros((D, M))
    meta = {"grid": [1, L, 1.0, 1.0, 0.0, 0.0], "subject_ids": [f"s{n}" for n in range(N)],
            "groups": groups or [None] * N,
            "mask": (np.ones((N, L), int) if mask is None else mask).tolist()}
    return Chain(labels, mu, np.ones((D, mu.shape[1])), alpha, None, np.zeros(D),
                 np.zeros(D) if log_post is None else np.asarray(log_post, float),
                 np.arange(D), meta)


class TestRelabel:
    def test_no_switching_identity(self):
        rng = np.random.default_rng(0)
        base = rng.integers(0, 3, (1, 2, 12))
        lab = np.repeat(base, 5, axis=0)
        lab[2, 0, 0] = (lab[2, 0, 0] + 1) % 3
        _, perms = relabel_chain(_chain(lab))
        np.testing.assert_array_equal(perms, np.tile(np.arange(3), (5, 1)))

    def test_repairs_injected_permutation(self):
        rng = np.random.default_rng(1)
        truth = rng.integers(0, 3, (2, 30))
        D = 20
        lab = np.repeat(truth[None], D, axis=0)
        noise = rng.random(lab.shape) < 0.05
        lab = np.where(noise, rng.integers(0, 3, lab.shape), lab)
        perm = np.array([2, 0, 1])
        mu = np.tile(np.array([[-1.0, 0.0, 1.0]]), (D, 1, 1))
        alpha = np.tile([0.0, 0.5, -0.3], (D, 1))
        lab[D // 2:] = perm[lab[D // 2:]]
        mu[D // 2:][:, :, perm] = mu[D // 2:].copy()
        alpha[D // 2:][:, perm] = alpha[D // 2:].copy()
        lp = np.zeros(D)
        lp[0] = 1.0
        out, _ = relabel_chain(_chain(lab, mu, lp, alpha=alpha))
        first = summarize_labels(_chain(out.labels[: D // 2])).map_labels
        second = summarize_labels(_chain(out.labels[D // 2:])).map_labels
        assert adjusted_rand_index(first, second) == 1.0
        np.testing.assert_array_equal(first, second)
        assert_allclose(out.mu, np.tile([[-1.0, 0.0, 1.0]], (D, 1, 1)))
        assert_allclose(out.alpha, np.tile([0.0, 0.5, -0.3], (D, 1)))

    def test_one_cluster_noop(self):
        ch = _chain(np.zeros((3, 1, 4)))
        out, perms = relabel_chain(ch)
        assert out is ch and np.all(perms == 0)

    def test_invariance_to_global_permutation(self):
        # noisy copies of one field with label switching between draws
        rng = np.random.default_rng(2)
        truth = rng.integers(0, 3, (2, 10))
        lab = np.where(rng.random((8, 2, 10)) < 0.15, rng.integers(0, 3, (8, 2, 10)), truth)
        lab = np.stack([rng.permutation(3)[d] for d in lab])
        lp = rng.normal(size=8)
        perm = np.array([1, 2, 0])
        a = summarize_labels(relabel_chain(_chain(lab, log_post=lp))[0])
        b = summarize_labels(relabel_chain(_chain(perm[lab], log_post=lp))[0])
        # cluster k of the original is cluster perm[k] of the permuted chain
        assert_allclose(b.probabilities[..., perm], a.probabilities)
        assert_allclose(b.occupancy["all"][perm], a.occupancy["all"])


class TestLabels:
    def test_constant_chain(self):
        lab = np.tile([[0, 1, 2, 1]], (4, 1, 1))
        s = summarize_labels(_chain(lab))
        assert set(np.unique(s.probabilities)) == {0.0, 1.0}
        np.testing.assert_array_equal(s.map_labels[0], [0, 1, 2, 1])

    def test_tie_to_lower(self):
        lab = np.array([[[0, 2]], [[1, 2]]])
        s = summarize_labels(_chain(lab, mu=np.zeros((2, 1, 3))))
        assert_allclose(s.probabilities[0, 0], [0.5, 0.5, 0])
        assert s.map_labels[0, 0] == 0
        assert map_labels(np.array([0.2, 0.4, 0.4])) == 1

    def test_probabilities_and_occupancy(self):
        rng = np.random.default_rng(3)
        lab = rng.integers(0, 3, (6, 4, 5))
        mask = np.ones((4, 5), int)
        mask[0, :2] = 0
        s = summarize_labels(_chain(lab, groups=[0, 0, 1, 1], mask=mask))
        assert_allclose(s.probabilities.sum(-1), 1)
        assert set(s.occupancy) == {"0", "1"}
        for frac in s.occupancy.values():
            assert_allclose(frac.sum(), 1)
        ref = np.array([(lab[:, 2:] == k).mean() for k in range(3)])
        assert_allclose(s.occupancy["1"], ref)
        allreg = summarize_labels(_chain(lab, groups=[0, 0, 1, 1], mask=mask), regions="all")
        ref0 = np.array([(lab[:, :2] == k).mean() for k in range(3)])
        assert_allclose(allreg.occupancy["0"], ref0)


def _basis():
    r = np.linspace(0.01, 0.5, 32)
    rng = np.random.default_rng(4)
    X = 1 + rng.normal(size=(40, 2)) @ np.stack([np.sin(4 * r), r]) * 0.2
    return fit_pca(X, 0.8, r)


class TestClusters:
    def test_zero_means(self):
        b = _basis()
        Q = b.n_components + 2
        centers = np.linspace(1, 2, Q)
        scales = np.ones(Q)
        ch = _chain(np.zeros((5, 1, 3)), mu=np.zeros((5, Q, 2)))
        cs = summarize_clusters(ch, b, centers, scales, [b.r_grid[0], 0.2])
        assert_allclose(cs.intensity["mean"], np.tile(centers[-2:], (2, 1)))
        _, g = invert_features(np.zeros(Q), b, centers, scales)
        assert_allclose(cs.curve["mean"][0], g)
        assert_allclose(cs.pcf_at[float(b.r_grid[0])][:, 0], g[0])
        for s in (cs.intensity, cs.curve):
            assert np.all(s["q025"] <= s["q50"]) and np.all(s["q50"] <= s["q975"])

    def test_bands_nested_and_nonnegative(self):
        b = _basis()
        Q = b.n_components + 2
        rng = np.random.default_rng(5)
        ch = _chain(np.zeros((50, 1, 3)), mu=rng.normal(size=(50, Q, 3)))
        cs = summarize_clusters(ch, b, np.zeros(Q), np.ones(Q))
        for s in (cs.intensity, cs.curve):
            assert np.all(s["q025"] <= s["q50"] + 1e-12) and np.all(s["q50"] <= s["q975"] + 1e-12)
            assert np.all(s["q025"] >= 0)

    def test_distance_outside_range(self):
        b = _basis()
        Q = b.n_components + 2
        ch = _chain(np.zeros((2, 1, 3)), mu=np.zeros((2, Q, 2)))
        with pytest.raises(ValueError):
            summarize_clusters(ch, b, np.zeros(Q), np.ones(Q), [0.6])
        with pytest.raises(ValueError):
            summarize_clusters(ch, b, np.zeros(Q), np.ones(Q), [0.001])

    def test_files(self, tmp_path):
        b = _basis()
        Q = b.n_components + 2
        rng = np.random.default_rng(6)
        ch = _chain(rng.integers(0, 2, (4, 2, 3)), mu=rng.normal(size=(4, Q, 2)))
        s = summarize_labels(ch)
        write_labels(tmp_path / "labels.csv", ch, s)
        got = read_labels(tmp_path / "labels.csv")
        assert got[("s1", 0, 2)] == s.map_labels[1, 2] + 1
        write_occupancy(tmp_path / "occ.csv", s)
        paths = write_clusters(f"{tmp_path}/", summarize_clusters(ch, b, np.zeros(Q), np.ones(Q), [0.2]))
        assert len(paths) == 5
        header = open(paths[0]).readline().strip().split(",")
        assert header[:4] == ["cluster", "stat", "intensity_1", "intensity_2"]


def test_csr_posterior_pcf_near_one():
    rng = np.random.default_rng(7)
    w = Rectangle(0, 4, 0, 4)
    pats = []
    for n in range(8):
        m = rng.poisson(60 * 16)
        pats.append(MarkedPointPattern(f"s{n}", rng.uniform(0, 4, (m, 2)),
                                       rng.integers(1, 3, m), w, None, 2))
    grid = explicit_grid(w, 4, 4)
    r = grid.r_grid(128)
    summ = grid_stats(pats, grid, 2, n_r=128)
    fm, basis = build_features(summ, grid, r)
    cfg = McmcConfig(n_clusters=1, iterations=600, burn_in=200, thin=2, seed=1)
    ch = run_chain(fm, cfg, ExactNormalizer(PottsGraph(4, 4), 1))
    cs = summarize_clusters(relabel_chain(ch)[0], basis, fm.centers, fm.scales)
    band = r >= 0.1 * r[-1]
    g = cs.curve["mean"][0, band]
    assert np.all((g >= 0.85) & (g <= 1.15)), (g.min(), g.max())
