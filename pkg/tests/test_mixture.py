import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ctld import MixtureError, SharedCovMixture, symmetric_mixture
from oracles import fd_gradient, fd_laplacian, mixture_log_pdf, rel_err


def random_mixture(rng, d, K, spread=2.0):
    w = rng.dirichlet(np.ones(K) * 2)
    mu = rng.normal(0, spread, (K, d))
    A = rng.normal(size=(d, d))
    cov = A @ A.T / d + 0.5 * np.eye(d)
    return SharedCovMixture(w, mu, cov)


def test_log_pdf_matches_scipy(rng):
    for d, K in [(1, 1), (2, 3), (3, 2)]:
        m = random_mixture(rng, d, K)
        x = m.sample(rng, 50)
        ref = mixture_log_pdf(x, m.weights, m.means, m.covariance)
        assert np.max(np.abs(m.log_pdf(x) - ref)) < 1e-10


def test_single_point_returns_scalars(rng):
    m = random_mixture(rng, 2, 2)
    assert isinstance(m.log_pdf(np.zeros(2)), float)
    b = m.derivatives(np.zeros(2))
    assert b.score.shape == (2,)
    assert b.mean_gradient.shape == (4,)


def test_far_from_modes_stays_finite():
    m = symmetric_mixture(6.0)
    b = m.derivatives(np.array([[1e3]]))
    assert np.all(np.isfinite(b.score)) and np.all(np.isfinite(b.bilaplacian_ratio))
    assert np.isclose(b.score[0, 0], -(1e3 - 3.0))


def test_single_gaussian_closed_forms():
    cov = np.array([[2.0, 0.3], [0.3, 1.0]])
    m = SharedCovMixture([1.0], [[0.5, -1.0]], cov)
    x = np.array([1.0, 2.0])
    P = np.linalg.inv(cov)
    b = m.derivatives(x)
    a = P @ (x - m.means[0])
    assert np.allclose(b.score, -a)
    assert np.isclose(b.hessian_log_trace, -np.trace(P))
    assert np.isclose(b.laplacian_ratio, a @ a - np.trace(P))


def test_score_and_laplacian_against_finite_differences(rng):
    m = random_mixture(rng, 3, 3)
    x = m.sample(rng, 1)[0]
    b = m.derivatives(x)
    assert rel_err(b.score, fd_gradient(lambda y: m.log_pdf(y), x)) < 1e-7
    p = lambda y: np.exp(m.log_pdf(y))
    assert rel_err(b.laplacian_ratio, fd_laplacian(p, x) / p(x)) < 1e-6


def test_bilaplacian_against_laplacian_of_p_lap(rng):
    m = random_mixture(rng, 2, 2)
    x = m.sample(rng, 1)[0]
    p_lap = lambda y: np.exp(m.log_pdf(y)) * m.derivatives(y).laplacian_ratio
    ref = fd_laplacian(p_lap, x) / np.exp(m.log_pdf(x))
    assert rel_err(m.derivatives(x).bilaplacian_ratio, ref) < 1e-6


def test_validation():
    with pytest.raises(MixtureError):
        SharedCovMixture([0.5, 0.4], [[0.0], [1.0]], [[1.0]])
    with pytest.raises(MixtureError):
        SharedCovMixture([1.0], [[0.0, 0.0]], [[1.0, 2.0], [0.0, 1.0]])
    with pytest.raises(MixtureError):
        SharedCovMixture([1.0], [[0.0, 0.0]], [[1.0, 0.0], [0.0, -1.0]])
    with pytest.raises(MixtureError):
        SharedCovMixture([1.0], [[0.0, 0.0]], np.diag([1.0, 1e-13]))
    with pytest.raises(MixtureError):
        SharedCovMixture([0.5, 0.5], [[0.0], [5.0]], [[1.0]], diameter=1.0)


def test_json_roundtrip_is_exact(rng):
    m = random_mixture(rng, 2, 3)
    again = SharedCovMixture.from_json(m.to_json())
    assert again == m
    assert again.to_json() == m.to_json()
    assert json.loads(m.to_json())["n_components"] == 3


def test_from_dict_infers_shapes():
    m = SharedCovMixture.from_dict({"weights": [0.5, 0.5], "means": [[-1, 0], [1, 0]],
                                    "covariance": [[1, 0], [0, 1]]})
    assert m.dim == 2 and m.n_components == 2
    with pytest.raises(MixtureError):
        SharedCovMixture.from_dict({"weights": [1.0]})


def test_tempering_adds_isotropic_covariance():
    m = symmetric_mixture(2.0, sigma=0.5)
    t = m.temper(3.0, 0.25)
    assert np.allclose(t.covariance, [[1.0]])
    with pytest.raises(MixtureError):
        m.temper(-1.0, 1.0)


def test_sampling_labels_and_moments(rng):
    m = symmetric_mixture(4.0)
    x, lab = m.sample(rng, 200_000, return_labels=True)
    assert abs(lab.mean() - 0.5) < 0.01
    assert abs(x.var() - (1 + 4.0)) < 0.05


@settings(max_examples=30, deadline=None)
@given(st.floats(-8, 8), st.floats(0.3, 3.0), st.floats(0.1, 0.9))
def test_responsibilities_are_a_distribution(x, sep, w):
    m = SharedCovMixture([w, 1 - w], [[-sep], [sep]], [[1.0]])
    g = m.responsibilities(np.array([[x]]))
    assert np.all(g >= 0) and np.isclose(g.sum(), 1.0)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.5, 6.0), st.floats(-5, 5))
def test_symmetric_mixture_score_is_odd(sep, x):
    m = symmetric_mixture(sep)
    s1 = m.derivatives(np.array([x])).score
    s2 = m.derivatives(np.array([-x])).score
    assert np.allclose(s1, -s2, atol=1e-12)
