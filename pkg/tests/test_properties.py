import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from numpy.testing import assert_allclose

from pcmseg.config import RunConfig
from pcmseg.metrics import adjusted_rand_index
from pcmseg.potts import (
    PottsGraph, PottsParams, exact_log_d, log_pmf_unnorm, match_count, sufficient_quantities,
    transfer_log_d,
)

labels = arrays(np.int64, st.integers(2, 30), elements=st.integers(0, 3))


@given(labels, st.permutations(range(4)), st.integers(0, 2**31))
def test_ari_permutation_and_symmetry(a, perm, seed):
    b = np.random.default_rng(seed).integers(0, 3, len(a))
    perm = np.asarray(perm)
    assert_allclose(adjusted_rand_index(a, b), adjusted_rand_index(perm[a], b), atol=1e-12)
    assert_allclose(adjusted_rand_index(a, b), adjusted_rand_index(b, a), atol=1e-12)
    assert adjusted_rand_index(a, perm[a]) == 1.0
    assert adjusted_rand_index(a, b) <= 1.0


@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31))
def test_sufficient_quantities(rows, cols, M, seed):
    g = PottsGraph(rows, cols)
    lab = np.random.default_rng(seed).integers(0, M, g.n_nodes)
    c, m = sufficient_quantities(lab, g, M)
    assert c.sum() == g.n_nodes
    e = g.edges()
    assert m == np.sum(lab[e[:, 0]] == lab[e[:, 1]])
    assert 0 <= m <= g.n_edges
    assert match_count(np.zeros((rows, cols), int)) == g.n_edges


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(2, 3),
       st.lists(st.floats(-5, 5), min_size=2, max_size=2), st.floats(0, 2.5), st.floats(-3, 3))
def test_log_d_shift_and_transfer(rows, cols, M, a, psi, shift):
    g = PottsGraph(rows, cols)
    alpha = np.concatenate([[0.0], a[: M - 1]])
    d = exact_log_d(PottsParams(alpha, psi), g)
    # common shift of every offset multiplies d by exp(L * shift)
    assert_allclose(exact_log_d(PottsParams(alpha + shift, psi), g), d + g.n_nodes * shift,
                    rtol=1e-10, atol=1e-10)
    assert_allclose(transfer_log_d(PottsParams(alpha, psi), g), d, rtol=1e-10, atol=1e-10)
    lab = np.zeros(g.n_nodes, int)
    assert log_pmf_unnorm(lab, PottsParams(alpha, psi), g) <= d + 1e-9


@given(st.integers(0, 10**6), st.floats(0, 2.5), st.integers(1, 6))
def test_config_round_trip(seed, psi, M):
    cfg = RunConfig(seed=seed, psi=psi, n_clusters=M, distances=[0.1, 0.2])
    assert RunConfig.from_dict(cfg.to_dict()) == cfg
