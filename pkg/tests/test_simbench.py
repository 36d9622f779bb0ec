import itertools

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy import stats

from pcmseg import simbench
from pcmseg.cluster import kmeans
from pcmseg.metrics import adjusted_rand_index
from pcmseg.potts import match_count
from pcmseg.sampler import Chain, McmcConfig
from pcmseg.simbench import (
    ClusterProcess, ScenarioConfig, default_processes, generate_dataset, prepare, run_baseline,
    run_study, score_method, select_m, simulate_region, write_study,
)


def _brute_ari(a, b):
    """Pair-counting ARI over all item pairs."""
    n = len(a)
    pairs = list(itertools.combinations(range(n), 2))
    same_a = np.array([a[i] == a[j] for i, j in pairs])
    same_b = np.array([b[i] == b[j] for i, j in pairs])
    index = np.sum(same_a & same_b)
    expected = same_a.sum() * same_b.sum() / len(pairs)
    top = 0.5 * (same_a.sum() + same_b.sum())
    return (index - expected) / (top - expected)


class TestAri:
    def test_identical_and_permuted(self):
        a = np.array([0, 0, 1, 1, 2, 2, 2])
        assert adjusted_rand_index(a, a) == 1.0
        assert adjusted_rand_index(a, np.array([2, 0, 1])[a]) == 1.0

    def test_brute_force_small(self):
        a, b = [1, 1, 2, 2], [1, 2, 1, 2]
        assert_allclose(adjusted_rand_index(a, b), _brute_ari(a, b))
        assert_allclose(adjusted_rand_index(a, b), -0.5)

    def test_brute_force_random_and_symmetric(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            a, b = rng.integers(0, 3, 15), rng.integers(0, 4, 15)
            assert_allclose(adjusted_rand_index(a, b), _brute_ari(a, b), atol=1e-12)
            assert_allclose(adjusted_rand_index(a, b), adjusted_rand_index(b, a), atol=1e-12)

    def test_missing_excluded(self):
        a = np.array([0, 0, 1, 1, -1])
        b = np.array([1, 1, 0, 0, 0])
        assert adjusted_rand_index(a, b) == 1.0
        assert adjusted_rand_index([0.0, 1.0, np.nan], [1.0, 0.0, 0.0]) == 1.0

    def test_errors(self):
        with pytest.raises(ValueError):
            adjusted_rand_index([1], [1])
        with pytest.raises(ValueError):
            adjusted_rand_index([1, 2], [1, 2, 3])

    def test_per_subject_scoring(self):
        truth = np.array([[0, 0, 1, 1], [0, 1, 0, 1]])
        labels = np.array([[1, 1, 0, 0], [0, 0, 1, 1]])
        assert_allclose(score_method("FPCA-S", truth, labels), (1.0 - 0.5) / 2)


class TestKmeans:
    def test_separated_blobs(self):
        rng = np.random.default_rng(1)
        X = np.vstack([rng.normal(0, 0.3, (50, 2)), rng.normal(5, 0.3, (50, 2))])
        truth = np.repeat([0, 1], 50)
        lab, centers, inertia = kmeans(X, 2, seed=0)
        assert adjusted_rand_index(lab, truth) == 1.0
        assert_allclose(inertia, sum(((X[lab == k] - centers[k]) ** 2).sum() for k in range(2)))

    def test_duplicates_share_labels(self):
        rng = np.random.default_rng(2)
        X = rng.normal(size=(40, 3))
        lab, _, _ = kmeans(np.vstack([X, X]), 3, seed=1)
        np.testing.assert_array_equal(lab[:40], lab[40:])

    def test_local_optimum_no_single_move_improves(self):
        rng = np.random.default_rng(3)
        X = rng.normal(size=(60, 2))
        lab, centers, inertia = kmeans(X, 4, seed=2)
        for i in range(len(X)):
            for k in range(4):
                if k == lab[i] or (lab == lab[i]).sum() == 1:
                    continue
                new = lab.copy()
                new[i] = k
                cost = sum(((X[new == j] - X[new == j].mean(0)) ** 2).sum() for j in range(4))
                assert cost >= inertia - 1e-9

    def test_seeded(self):
        X = np.random.default_rng(4).normal(size=(30, 2))
        np.testing.assert_array_equal(kmeans(X, 3, seed=5)[0], kmeans(X, 3, seed=5)[0])


class TestGenerators:
    def test_csr_counts_poisson(self):
        proc = ClusterProcess("csr", 50.0, (0.5, 0.5))
        rng = np.random.default_rng(5)
        counts = np.array([len(simulate_region(proc, rng)[0]) for _ in range(500)])
        edges = np.concatenate([[0], np.arange(38, 63, 3), [np.inf]])
        obs = np.histogram(counts, edges)[0]
        cdf = stats.poisson(50).cdf(edges[1:] - 1)
        exp = np.diff(np.concatenate([[0], cdf])) * len(counts)
        exp[-1] = len(counts) - exp[:-1].sum()
        assert stats.chisquare(obs, exp, ddof=0).pvalue > 0.01

    @pytest.mark.parametrize("kind,scale", [("thomas", 0.06), ("hardcore", 0.035)])
    def test_intensity(self, kind, scale):
        proc = ClusterProcess(kind, 40.0, (0.5, 0.5), scale)
        rng = np.random.default_rng(6)
        counts = [len(simulate_region(proc, rng)[0]) for _ in range(800)]
        assert abs(np.mean(counts) - 40) < 4 * np.std(counts) / np.sqrt(800)

    def test_hardcore_distance(self):
        proc = ClusterProcess("hardcore", 60.0, (1.0,), 0.035)
        xy, _ = simulate_region(proc, np.random.default_rng(7))
        d = np.hypot(*(xy[:, None] - xy[None]).transpose(2, 0, 1))
        assert d[np.triu_indices(len(xy), 1)].min() >= 0.035

    def test_defaults_inside_regime(self):
        for regime, (lo, hi) in simbench.REGIMES.items():
            for M in (3, 4, 5):
                procs = default_processes(M, regime)
                assert all(lo <= p.intensity <= hi for p in procs)
                assert [p.kind for p in procs[:3]] == ["csr", "thomas", "hardcore"]

    def test_invalid_process(self):
        with pytest.raises(ValueError):
            ClusterProcess("hardcore", 500.0, (1.0,), 0.1)
        with pytest.raises(ValueError):
            ClusterProcess("gibbs", 5.0, (1.0,))


class TestDataset:
    def test_psi_zero_uniform_labels(self):
        _, lab = generate_dataset(ScenarioConfig(psi=0.0, n_subjects=40, seed=1))
        freq = np.bincount(lab.ravel(), minlength=3) / lab.size
        assert np.all(np.abs(freq - 1 / 3) < 3 * np.sqrt(2 / 9 / lab.size))

    def test_spatial_labels_smoother(self):
        frac = []
        for psi in (0.0, 1.29):
            _, lab = generate_dataset(ScenarioConfig(psi=psi, n_subjects=10, seed=2))
            frac.append(match_count(lab.reshape(10, 10, 12)).mean() / (10 * 11 + 9 * 12))
        assert frac[1] > frac[0]

    def test_reproducible_and_shapes(self):
        scn = ScenarioConfig(n_subjects=3, rows=3, cols=4, seed=3)
        p1, l1 = generate_dataset(scn)
        p2, l2 = generate_dataset(scn)
        assert p1 == p2
        np.testing.assert_array_equal(l1, l2)
        assert l1.shape == (3, 12)
        assert all(p.window.area == 12 for p in p1)

    def test_baselines(self):
        scn = ScenarioConfig(n_subjects=4, rows=4, cols=4, seed=4)
        pats, truth = generate_dataset(scn)
        data = prepare(pats, scn, n_r=64)
        for m in ("FPCA-G", "FPCA-S", "Curve-G", "Curve-S"):
            lab = run_baseline(m, data, 3, seed=0)
            assert lab.shape == truth.shape and lab.max() <= 2
            assert -1 <= score_method(m, truth, lab) <= 1
        with pytest.raises(ValueError):
            run_baseline("FPCA-S", data, 17)
        with pytest.raises(ValueError):
            run_baseline("DBSCAN", data, 3)


def test_study_deterministic(tmp_path):
    scn = ScenarioConfig(n_subjects=3, rows=3, cols=4, seed=5)
    r1 = run_study([scn], ["FPCA-G", "Curve-S"], replications=1)
    r2 = run_study([scn], ["FPCA-G", "Curve-S"], replications=1)
    assert r1 == r2 and len(r1) == 2
    write_study(tmp_path / "study.csv", r1)
    header = open(tmp_path / "study.csv").readline().strip().split(",")
    assert header == simbench.STUDY_COLUMNS
    with pytest.raises(ValueError):
        run_study([scn], ["nope"], 1)


def test_select_m_stopping_rule(monkeypatch):
    """Occupancies per M are scripted; the rule stops at the first M with a cluster under 1%."""
    occupancy = {2: [0.5, 0.5], 3: [0.4, 0.3, 0.3], 4: [0.5, 0.3, 0.195, 0.005]}

    def fake_chain(fm, cfg, normalizer):
        M = cfg.n_clusters
        L = 200
        lab = np.repeat(np.arange(M), np.round(np.array(occupancy[M]) * L).astype(int))[None, None]
        return Chain(lab.astype(np.int8), np.zeros((1, 1, M)), np.ones((1, 1)), np.zeros((1, M)),
                     None, np.zeros(1), np.zeros(1), np.zeros(1, int),
                     {"groups": [None], "mask": np.ones((1, L), int).tolist()})

    monkeypatch.setattr(simbench, "run_chain", fake_chain)
    chosen, hist = select_m(None, McmcConfig(iterations=2, burn_in=1), 2, 6,
                            normalizer_for=lambda M: None)
    assert chosen == 3
    assert [h["M"] for h in hist] == [2, 3, 4]
