import itertools
import math

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.special import logsumexp

from pcmseg.potts import (
    ExactNormalizer, PottsGraph, PottsParams, SurrogateDesign, SurrogateTable, TransferNormalizer,
    build_surrogate, cached_surrogate, canonical_offsets, enumerate_fields, exact_log_d,
    exact_moments, gibbs_sample_field, log_pmf_unnorm, sufficient_quantities, surrogate_log_d,
    surrogate_path, transfer_log_d,
)


def _brute_matches(labels, g):
    lab = np.asarray(labels).reshape(g.rows, g.cols)
    m = 0
    for a in range(g.n_nodes):
        for b in g.neighbors(a):
            if a < b and lab.flat[a] == lab.flat[b]:
                m += 1
    return m


class TestSufficientQuantities:
    def test_monochrome(self):
        g = PottsGraph(3, 4)
        c, m = sufficient_quantities(np.zeros(12, int), g, 2)
        assert m == g.n_edges == 17
        np.testing.assert_array_equal(c, [12, 0])

    def test_checkerboard(self):
        g = PottsGraph(2, 2)
        assert sufficient_quantities(np.array([0, 1, 1, 0]), g, 2)[1] == 0

    def test_brute_force(self):
        g = PottsGraph(3, 3)
        rng = np.random.default_rng(0)
        for _ in range(50):
            lab = rng.integers(0, 3, 9)
            c, m = sufficient_quantities(lab, g, 3)
            assert m == _brute_matches(lab, g)
            np.testing.assert_array_equal(c, np.bincount(lab, minlength=3))

    def test_graph(self):
        g = PottsGraph(3, 4)
        e = g.edges()
        assert len(e) == g.n_edges and np.all(e[:, 0] != e[:, 1])
        deg = np.bincount(e.ravel(), minlength=g.n_nodes)
        assert deg.max() <= 4
        for a in range(g.n_nodes):
            for b in g.neighbors(a):
                assert a in g.neighbors(b)


class TestLogPmf:
    def test_zero_params(self):
        g = PottsGraph(2, 3)
        lab = np.random.default_rng(1).integers(0, 3, 6)
        assert log_pmf_unnorm(lab, PottsParams(np.zeros(3), 0.0), g) == 0

    def test_single_node(self):
        assert log_pmf_unnorm(np.array([1]), PottsParams([0, 1.0], 0.0), PottsGraph(1, 1)) == 1

    def test_dot_product_and_groups(self):
        g1 = PottsGraph(3, 3, group=1)
        p = PottsParams([0, 0.3, -1.2], 0.7, beta=[0, 2.0, 0.5])
        lab = np.random.default_rng(2).integers(0, 3, 9)
        c, m = sufficient_quantities(lab, g1, 3)
        assert_allclose(log_pmf_unnorm(lab, p, g1), c @ p.beta + 0.7 * m)
        g0 = PottsGraph(3, 3, group=0)
        assert_allclose(log_pmf_unnorm(lab, p, g0), c @ p.alpha + 0.7 * m)


class TestExactLogD:
    def test_independent(self):
        a = np.array([0, 0.4, -0.9])
        g = PottsGraph(2, 3)
        assert_allclose(exact_log_d(PottsParams(a, 0.0), g), 6 * logsumexp(a), rtol=1e-12)

    def test_two_by_two(self):
        d = exact_log_d(PottsParams([0, 0], 1.0), PottsGraph(2, 2))
        assert_allclose(d, math.log(2 * math.e ** 4 + 12 * math.e ** 2 + 2), rtol=1e-12)

    def test_one_cluster(self):
        g = PottsGraph(3, 3)
        assert_allclose(exact_log_d(PottsParams([0.0], 0.8), g), 0.8 * g.n_edges)

    def test_too_large(self):
        with pytest.raises(ValueError):
            exact_log_d(PottsParams([0, 0], 1.0), PottsGraph(5, 5))

    @pytest.mark.parametrize("shape", [(2, 2), (3, 3), (2, 5), (4, 3)])
    def test_transfer_matrix(self, shape):
        g = PottsGraph(*shape)
        rng = np.random.default_rng(3)
        for M in (2, 3):
            if M ** g.n_nodes > 2 ** 20:
                continue
            a = np.concatenate([[0], rng.uniform(-2, 2, M - 1)])
            p = PottsParams(a, rng.uniform(0, 2.5))
            assert_allclose(transfer_log_d(p, g), exact_log_d(p, g), rtol=1e-11)
            assert_allclose(TransferNormalizer(g, M).log_d(a, p.psi), exact_log_d(p, g), rtol=1e-11)
            assert_allclose(ExactNormalizer(g, M).log_d(a, p.psi), exact_log_d(p, g), rtol=1e-11)

    def test_transfer_single_row_and_column(self):
        for g in (PottsGraph(1, 4), PottsGraph(4, 1), PottsGraph(1, 1)):
            p = PottsParams([0, 0.5], 1.1)
            assert_allclose(transfer_log_d(p, g), exact_log_d(p, g), rtol=1e-12)


class TestGibbs:
    def test_independent_marginals(self):
        a = np.array([0.0, 0.8, -0.5])
        g = PottsGraph(2, 2)
        draws = gibbs_sample_field(PottsParams(a, 0.0), g, 1, seed=0, n_fields=2500)
        freq = np.bincount(draws.ravel(), minlength=3) / draws.size
        p = np.exp(a - logsumexp(a))
        se = np.sqrt(p * (1 - p) / draws.size)
        assert np.all(np.abs(freq - p) < 3 * se)

    def test_one_cluster(self):
        out = gibbs_sample_field(PottsParams([0.0], 2.0), PottsGraph(3, 3), 3, seed=1)
        assert np.all(out == 0)

    def test_expected_matches(self):
        g = PottsGraph(3, 3)
        p = PottsParams([0, 0], 1.0)
        _, em = exact_moments(p, g)
        draws = gibbs_sample_field(p, g, 30, seed=2, n_fields=4000)
        m = sufficient_quantities(draws, g, 2)[1]
        assert abs(m.mean() - em) < 3 * m.std() / np.sqrt(len(m))

    def test_sweeps_floor(self):
        with pytest.raises(ValueError):
            gibbs_sample_field(PottsParams([0, 0], 1.0), PottsGraph(2, 2), 0)

    def test_reproducible(self):
        p, g = PottsParams([0, 0.1, 0.2], 1.0), PottsGraph(4, 5)
        np.testing.assert_array_equal(gibbs_sample_field(p, g, 5, seed=9),
                                      gibbs_sample_field(p, g, 5, seed=9))


def test_canonical_offsets():
    gaps, order, top = canonical_offsets([0.0, 1.5, -2.0])
    assert_allclose(gaps, [1.5, 2.0])
    np.testing.assert_array_equal(order, [1, 0, 2])
    assert top == 1.5


def test_design_validation():
    with pytest.raises(ValueError):
        SurrogateDesign(n_sims=5)
    with pytest.raises(ValueError):
        SurrogateDesign(gap_nodes=(0.1, 1, 2, 10))
    with pytest.raises(ValueError):
        SurrogateDesign(n_quad=32)


@pytest.fixture(scope="module")
def table_m2(cache_dir):
    return cached_surrogate(PottsGraph(3, 3), 2, cache_dir=cache_dir)


@pytest.fixture(scope="module")
def table_m3(cache_dir):
    return cached_surrogate(PottsGraph(3, 3), 3, cache_dir=cache_dir)


class TestSurrogate:
    def test_independent_case(self, table_m3):
        L = 9
        for a in ([0, 0, 0], [0, 1.0, -2.0], [0, -4.0, 3.0]):
            a = np.asarray(a, float)
            assert_allclose(table_m3.log_d(a, 0.0), L * logsumexp(a), rtol=1e-12)
            counts, matches = table_m3.expected(a, 0.0)
            assert_allclose(counts, L * np.exp(a - logsumexp(a)), atol=0.02 * L)
        assert_allclose(table_m3.expected(np.zeros(3), 0.0)[1], 12 / 3, rtol=0.02)

    def test_counts_sum_to_L(self, table_m3):
        assert_allclose(table_m3.mean_counts.sum(axis=-1), 9, rtol=1e-12)

    def test_monotone_in_psi(self, table_m3):
        assert np.all(np.diff(table_m3.mean_matches, axis=-1) >= 0)
        psi = np.linspace(0, 2.5, 41)
        for a in ([0, 0, 0], [0, 0.7, -1.3], [0, 4.0, 4.0]):
            ld = [table_m3.log_d(np.asarray(a, float), s) for s in psi]
            assert np.all(np.diff(ld) >= -1e-9)

    def test_interpolated_moments_5cubed(self, table_m3):
        g = PottsGraph(3, 3)
        worst_c = worst_m = 0.0
        for a2, a3, psi in itertools.product(np.linspace(-5, 5, 5), np.linspace(-5, 5, 5),
                                             np.linspace(0, 2.5, 5)):
            p = PottsParams([0, a2, a3], psi)
            ec, em = exact_moments(p, g)
            sc, sm = table_m3.expected(p.alpha, psi)
            worst_c = max(worst_c, np.abs(sc - ec).max() / g.n_nodes)
            worst_m = max(worst_m, abs(sm - em) / em)
        assert worst_c <= 0.05 and worst_m <= 0.05

    def test_accuracy_m2(self, table_m2):
        g = PottsGraph(3, 3)
        for a2, psi in itertools.product(np.linspace(-5, 5, 9), np.linspace(0, 2.5, 7)):
            p = PottsParams([0, a2], psi)
            ex = exact_log_d(p, g)
            assert abs(surrogate_log_d(p, table_m2) - ex) <= 0.05 * abs(ex)

    def test_path_independence(self, table_m3):
        rng = np.random.default_rng(4)
        for _ in range(10):
            a = np.concatenate([[0], rng.uniform(-5, 5, 2)])
            psi = rng.uniform(0, 2.5)
            d1 = table_m3.log_d(a, psi)
            d2 = table_m3.log_d_alpha_path(a, psi)
            assert abs(d1 - d2) <= 0.02 * max(abs(d1), 1.0)

    def test_out_of_box(self, table_m2):
        with pytest.raises(ValueError):
            table_m2.log_d(np.array([0, 6.0]), 1.0)
        with pytest.raises(ValueError):
            table_m2.log_d(np.array([0, 1.0]), 3.0)
        with pytest.raises(ValueError):
            table_m2.log_d(np.array([0, 1.0, 2.0]), 1.0)

    def test_group_offsets(self, table_m2):
        p = PottsParams([0, 1.0], 0.5, beta=[0, -2.0])
        assert surrogate_log_d(p, table_m2, 1) == table_m2.log_d(np.array([0, -2.0]), 0.5)


def test_surrogate_persistence_and_seed(tmp_path):
    g = PottsGraph(2, 3)
    design = SurrogateDesign(n_sims=20, burn_in=5, record_sweeps=2, n_psi=5)
    t1 = build_surrogate(g, 2, design, seed=7)
    t2 = build_surrogate(g, 2, design, seed=7)
    np.testing.assert_array_equal(t1.mean_matches, t2.mean_matches)
    t1.save(tmp_path / "a.npz")
    t2.save(tmp_path / "b.npz")
    assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()
    t3 = SurrogateTable.load(tmp_path / "a.npz")
    assert t3.log_d(np.array([0, 0.3]), 1.2) == t1.log_d(np.array([0, 0.3]), 1.2)
    t4 = cached_surrogate(g, 2, design, seed=7, cache_dir=tmp_path)
    assert surrogate_path(tmp_path, g, 2, design, 7).exists()
    np.testing.assert_array_equal(t4.mean_counts, t1.mean_counts)
    assert surrogate_path(tmp_path, g, 2, design, 8) != surrogate_path(tmp_path, g, 2, design, 7)


def test_one_cluster_surrogate(tmp_path):
    g = PottsGraph(2, 2)
    t = build_surrogate(g, 1, SurrogateDesign(n_sims=10, n_psi=5), seed=0)
    assert_allclose(t.log_d(np.array([0.0]), 1.5), 1.5 * g.n_edges, rtol=1e-3)
