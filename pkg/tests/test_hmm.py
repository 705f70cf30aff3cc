import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import (brute_loglik, brute_posteriors, brute_viterbi, power_stationary,
                     random_instance)
from smoothhmm.errors import ModelError, NumericalError
from smoothhmm.hmm import (forward_backward, forward_loglik, periodic_stationary, state_probs,
                           stationary, stationary_sensitivity, tpm_multinomial, viterbi)


def test_single_state_and_single_step():
    rng = np.random.default_rng(0)
    logp = rng.normal(size=(7, 1))
    assert forward_loglik([1.0], [[1.0]], logp) == pytest.approx(logp.sum(), abs=1e-12)
    np.testing.assert_array_equal(viterbi([1.0], [[1.0]], logp), np.zeros(7))
    delta = np.array([0.3, 0.7])
    lp = np.log([[0.2, 1.5]])
    assert forward_loglik(delta, np.eye(2), lp) == pytest.approx(np.log(0.3 * 0.2 + 0.7 * 1.5))


def test_brute_force_example_n2_t6():
    d, G, lp = random_instance(np.random.default_rng(1), 2, 6)
    assert forward_loglik(d, G, lp) == pytest.approx(brute_loglik(d, G, lp), abs=1e-10)
    np.testing.assert_array_equal(viterbi(d, G, lp), brute_viterbi(d, G, lp))


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31), N=st.sampled_from([2, 3]), T=st.integers(2, 7), inh=st.booleans())
def test_forward_backward_against_enumeration(seed, N, T, inh):
    d, G, lp = random_instance(np.random.default_rng(seed), N, T, inh)
    ll, probs, xi = forward_backward(d, G, lp)
    assert ll == pytest.approx(brute_loglik(d, G, lp), rel=1e-9)
    np.testing.assert_allclose(probs, brute_posteriors(d, G, lp), atol=1e-10)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-8)
    np.testing.assert_array_equal(viterbi(d, G, lp), brute_viterbi(d, G, lp))
    # expected transitions marginalize to the state posteriors
    xs = xi if inh else None
    if inh:
        np.testing.assert_allclose(xs[1:].sum(axis=2), probs[:-1], atol=1e-10)
    else:
        np.testing.assert_allclose(xi[0].sum(axis=0), probs[1:].sum(axis=0), atol=1e-10)


def test_scaling_invariance():
    d, G, lp = random_instance(np.random.default_rng(3), 3, 40)
    base = forward_loglik(d, G, lp)
    lp2 = lp.copy()
    lp2[17] += np.log(1e3)
    assert forward_loglik(d, G, lp2) - base == pytest.approx(np.log(1e3), abs=1e-8)


def test_permutation_equivariance():
    rng = np.random.default_rng(4)
    d, G, lp = random_instance(rng, 3, 50)
    perm = np.array([2, 0, 1])
    ll = forward_loglik(d, G, lp)
    llp = forward_loglik(d[perm], G[np.ix_(perm, perm)], lp[:, perm])
    assert llp == pytest.approx(ll, abs=1e-10)
    path = viterbi(d, G, lp)
    pathp = viterbi(d[perm], G[np.ix_(perm, perm)], lp[:, perm])
    np.testing.assert_array_equal(perm[pathp], path)


def test_long_series_is_finite():
    rng = np.random.default_rng(5)
    d, G, _ = random_instance(rng, 2, 1)
    lp = rng.normal(-50, 5, (200000, 2))
    assert np.isfinite(forward_loglik(d, G, lp))


def test_vanishing_forward_vector_reports_time():
    lp = np.zeros((5, 2))
    lp[3] = -np.inf
    with pytest.raises(NumericalError) as err:
        forward_loglik([0.5, 0.5], np.full((2, 2), 0.5), lp)
    assert err.value.index == 3
    G = np.eye(2)
    lp = np.zeros((4, 2))
    lp[2, 0] = -np.inf
    with pytest.raises(NumericalError):
        forward_loglik([1.0, 0.0], G, lp)


def test_dominant_emissions_decode_argmax():
    rng = np.random.default_rng(6)
    truth = rng.integers(0, 3, 100)
    lp = np.full((100, 3), -500.0)
    lp[np.arange(100), truth] = 0.0
    G = np.full((3, 3), 1 / 3) + np.diag([1e-3] * 3)
    G /= G.sum(axis=1, keepdims=True)
    np.testing.assert_array_equal(viterbi(np.ones(3) / 3, G, lp), truth)


def test_viterbi_ties_prefer_lower_state():
    np.testing.assert_array_equal(viterbi([0.5, 0.5], np.full((2, 2), 0.5), np.zeros((4, 2))), 0)


def test_tpm_multinomial():
    np.testing.assert_allclose(tpm_multinomial(np.zeros((3, 3))), 1 / 3)
    eta = np.array([[0.0, -np.log(1 / 0.019 - 1)], [0.0, 0.0]])
    assert tpm_multinomial(eta)[0, 1] == pytest.approx(0.019, abs=1e-12)
    rng = np.random.default_rng(7)
    etas = rng.normal(0, 30, (100, 4, 4))
    np.testing.assert_allclose(tpm_multinomial(etas).sum(axis=-1), 1.0, atol=1e-12)
    # diagonal entries of eta are ignored
    e = rng.normal(size=(3, 3))
    e2 = e.copy()
    np.fill_diagonal(e2, 99.0)
    np.testing.assert_array_equal(tpm_multinomial(e), tpm_multinomial(e2))


def test_stationary_examples():
    with pytest.raises(ModelError):
        stationary(np.eye(2))
    np.testing.assert_allclose(stationary([[0.7, 0.3], [0.3, 0.7]]), [0.5, 0.5], atol=1e-14)
    G = np.array([[1 - 0.019, 0.019], [0.013, 1 - 0.013]])
    np.testing.assert_allclose(stationary(G), [0.40625, 0.59375], atol=1e-12)
    rng = np.random.default_rng(8)
    for _ in range(10):
        _, G, _ = random_instance(rng, 4, 1)
        np.testing.assert_allclose(stationary(G), power_stationary(G), atol=1e-10)


def test_stationary_sensitivity_matches_fd():
    rng = np.random.default_rng(9)
    _, G, _ = random_instance(rng, 3, 1)
    w = rng.normal(size=3)
    grad = stationary_sensitivity(G, stationary(G), w)
    h = 1e-6
    for i in range(3):
        for j in range(3):
            E = np.zeros((3, 3))
            E[i, j] = h
            # perturbation along a single entry; the resulting matrix need not be stochastic,
            # but delta = 1^T (I - G + 11^T)^{-1} is still defined
            f = lambda M: w @ np.linalg.solve((np.eye(3) - M + 1).T, np.ones(3))  # noqa: E731
            assert (f(G + E) - f(G - E)) / (2 * h) == pytest.approx(grad[i, j], abs=1e-7)


def test_periodic_stationary():
    rng = np.random.default_rng(10)
    _, G1, _ = random_instance(rng, 3, 1)
    np.testing.assert_allclose(periodic_stationary(G1[None])[0], stationary(G1), atol=1e-12)
    same = periodic_stationary(np.stack([G1] * 4))
    np.testing.assert_allclose(same, np.tile(stationary(G1), (4, 1)), atol=1e-10)
    _, Gs, _ = random_instance(rng, 3, 3, inhomogeneous=True)
    D = periodic_stationary(Gs)
    L = 3
    for l in range(L):
        np.testing.assert_allclose(D[l] @ Gs[(l + 1) % L], D[(l + 1) % L], atol=1e-10)
    prod = Gs[1] @ Gs[2] @ Gs[0]
    np.testing.assert_allclose(D[0], power_stationary(prod), atol=1e-10)
    with pytest.raises(ModelError):
        periodic_stationary(np.stack([np.eye(2)] * 2))


def test_state_probs_wrapper_and_dimension_check():
    d, G, lp = random_instance(np.random.default_rng(11), 2, 5)
    np.testing.assert_allclose(state_probs(d, G, lp), forward_backward(d, G, lp)[1])
    with pytest.raises(ValueError):
        forward_loglik(d, np.eye(3), lp)
