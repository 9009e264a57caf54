import numpy as np
import pytest
from scipy import integrate

from ctld import SharedCovMixture, TemperatureSchedule, schedule_for, symmetric_mixture
from ctld import poincare as pc
from oracles import gaussian_chisq_dblquad, gaussian_chisq_quad, poincare_1d_dense
from test_mixture import random_mixture

# Frozen oracle values ([DERIVED], computed once by direct quadrature of
# int r(beta) (exp(4 / (1 + beta)) - 1) dbeta on [0, 13] for mu = +-1, Sigma = 1).
CHISQ_JOINT_PM1 = 0.7033623741243273


def test_same_cov_identity_and_unit_shift():
    assert pc.chisq_same_cov([0.0], [0.0], [[1.0]]) == 0.0
    assert np.isclose(pc.chisq_same_cov([0.0], [1.0], [[1.0]]), np.e - 1, rtol=1e-14)
    assert np.isclose(gaussian_chisq_quad(0.0, 1.0, 1.0), np.e - 1, rtol=1e-8)
    with pytest.raises(ValueError):
        pc.chisq_same_cov([0.0], [1.0], [[-1.0]])


def test_same_cov_closed_form_against_quadrature():
    rng = np.random.default_rng(0)
    for _ in range(5):
        mi, mj, s2 = rng.normal(), rng.normal(), rng.uniform(0.5, 2.0)
        ref = gaussian_chisq_quad(mi, mj, s2)
        assert abs(pc.chisq_same_cov([mi], [mj], [[s2]]) - ref) <= 1e-6 * ref
    cov = np.array([[1.2, 0.3], [0.3, 0.8]])
    mi, mj = np.array([0.2, -0.4]), np.array([-0.3, 0.5])
    ref = gaussian_chisq_dblquad(mi, mj, cov)
    assert abs(pc.chisq_same_cov(mi, mj, cov) - ref) <= 1e-6 * ref


def test_same_cov_ceiling_dominates():
    rng = np.random.default_rng(1)
    for _ in range(50):
        d = rng.integers(1, 4)
        D = rng.uniform(0.5, 3.0)
        A = rng.normal(size=(d, d))
        cov = A @ A.T / d + 0.2 * np.eye(d)
        lam = np.linalg.eigvalsh(cov)[0]
        mus = [u / np.linalg.norm(u) * D * rng.uniform() for u in rng.normal(size=(2, d))]
        beta = rng.uniform(0, 14 * D * D / lam)
        val = pc.chisq_same_cov(*mus, cov + beta * lam * np.eye(d))
        assert val <= pc.chisq_same_cov_bound(D, lam, beta)


def test_joint_chisq_fixture_and_independent_quadrature():
    m = symmetric_mixture(2.0)
    s = schedule_for(m)
    assert pc.chisq_joint(m, s, 0, 0) == 0.0
    val = pc.chisq_joint(m, s, 0, 1)
    assert abs(val - CHISQ_JOINT_PM1) < 1e-8
    Z = integrate.quad(lambda b: np.exp(-7 / (1 + b)), 0, 13, epsabs=0, epsrel=1e-13)[0]
    ref = integrate.quad(lambda b: np.exp(-7 / (1 + b)) * np.expm1(4 / (1 + b)) / Z, 0, 13,
                         epsabs=0, epsrel=1e-13)[0]
    assert abs(val - ref) < 1e-8
    est, se = pc.chisq_joint_mc(m, s, 0, 1, 200_000, np.random.default_rng(2))
    assert abs(est - val) < 3 * se


def test_joint_chisq_ceiling_on_random_instances():
    rng = np.random.default_rng(3)
    for _ in range(10):
        m = random_mixture(rng, rng.integers(1, 3), rng.integers(2, 4), spread=1.0)
        s = schedule_for(m)
        for i in range(m.n_components):
            for j in range(m.n_components):
                assert pc.chisq_joint(m, s, i, j) <= 14 * s.D ** 2 / s.lam


def test_projected_transitions_structure():
    T = pc.projected_transitions([0.5, 0.5], np.array([[0.0, 3.0], [3.0, 0.0]]))
    assert np.allclose(T, T.T) and np.allclose(T.sum(axis=1), 1.0)
    assert np.isclose(T[0, 1], 0.5 / 3.0)


def test_canonical_paths_dominate_exact_gap():
    rng = np.random.default_rng(4)
    for _ in range(20):
        K = rng.integers(2, 5)
        w = rng.dirichlet(np.ones(K))
        chi = rng.uniform(0, 20, (K, K))
        chi = np.maximum(chi, chi.T)
        T = pc.projected_transitions(w, chi)
        exact = pc.poincare_constant_discrete(w[:, None] * T, w)
        assert exact <= pc.canonical_path_bound(w, T) * (1 + 1e-10)


def test_projected_bound_ceiling_on_random_instances():
    rng = np.random.default_rng(5)
    for _ in range(20):
        m = random_mixture(rng, 1, rng.integers(2, 4), spread=1.5)
        s = schedule_for(m)
        _, bound, _, exact = pc.projected_chain_bound(m, s)
        assert exact <= bound * (1 + 1e-10) <= 14 * s.D ** 2 / s.lam * (1 + 1e-10)


def test_rate_of_change_below_closed_ceiling():
    rng = np.random.default_rng(6)
    for _ in range(10):
        m = random_mixture(rng, rng.integers(1, 4), 2)
        s = schedule_for(m)
        sup = pc.rate_of_change_sup(m, s)
        assert sup <= pc.rate_of_change_ceiling(m, s)
        assert np.isclose(sup, 0.5 * s.lam ** 2 * np.sum(m.eigvals ** -2.0))


def test_rate_of_change_matches_monte_carlo():
    m = SharedCovMixture([1.0], [[0.0, 0.0]], np.diag([1.0, 2.0]))
    s = TemperatureSchedule(1.5, 1.0)
    rng = np.random.default_rng(7)
    x = m.sample(rng, 400_000)
    from ctld.losses import beta_derivatives
    v, _ = beta_derivatives(m, s, x, np.zeros(len(x)))
    assert abs((v ** 2).mean() - pc.rate_of_change_sup(m, s)) < 4 * (v ** 2).std() / np.sqrt(len(v))


def test_temperature_constants_unit_instance():
    m = SharedCovMixture([1.0], [[0.0]], [[1.0]], diameter=1.0)
    b = pc.total_bound(m, schedule_for(m))
    assert np.isclose(b.c_beta_literal, 13 / np.pi)
    assert np.isclose(b.c_beta, 169 / np.pi ** 2)
    assert b.c_projected == 0.0 and b.c_total == b.c_component


def test_temperature_constant_dominates_the_oracle():
    for D in (1.0, 2.0, 3.0):
        s = TemperatureSchedule(D, 1.0)
        ld, axes = pc.temperature_target(s)
        oracle = pc.spectral_oracle(ld, axes)
        assert oracle <= pc.temperature_poincare_bound(s)
        # the literal length / pi constant is below the oracle: not a valid bound
        assert oracle > s.beta_max / np.pi


def test_component_bound_monotone_in_radius():
    m = SharedCovMixture([1.0], [[0.0]], [[1.0]])
    vals = [pc.component_bound(m, TemperatureSchedule(D, 1.0)) for D in (1.0, 1.5, 2.0, 3.0)]
    assert np.all(np.diff(vals) >= 0)
    with pytest.raises(IndexError):
        pc.component_bound(m, TemperatureSchedule(1.0, 1.0), i=3)


def test_total_bound_grows_with_mean_norms():
    prev = 0.0
    for sep in (2.0, 4.0, 8.0):
        m = symmetric_mixture(sep)
        c = pc.total_bound(m, schedule_for(m)).c_total
        assert np.isfinite(c) and c >= prev
        prev = c


def test_grid_oracle_gaussian():
    for sigma in (0.5, 1.0, 2.0):
        ld, axes = pc.gaussian_target(sigma)
        assert abs(pc.spectral_oracle(ld, axes) / sigma ** 2 - 1) < 0.02


def test_grid_oracle_mixture_against_dense_solver():
    prev = 0.0
    for sep in (2.0, 3.0, 4.0):
        m = symmetric_mixture(sep)
        ld, axes = pc.mixture_target(m)
        val = pc.spectral_oracle(ld, axes)
        ref = poincare_1d_dense(lambda x: m.log_pdf(x.reshape(-1, 1)), -sep / 2 - 9, sep / 2 + 9, 2000)
        assert abs(val / ref - 1) < 0.01
        assert val > prev
        prev = val
    m = symmetric_mixture(6.0)
    ld, axes = pc.mixture_target(m)
    assert pc.spectral_oracle(ld, axes) <= pc.total_bound(m, schedule_for(m)).c_total


def test_grid_oracle_rejects_unresolved_density():
    ld = lambda x: -0.5 * x ** 2
    with pytest.raises(pc.OracleError):
        pc.spectral_oracle(ld, [pc.Axis(-1.0, 1.0, 50)])
    with pytest.raises(ValueError):
        pc.Axis(0.0, 1.0, 4, kind="cubic").nodes()


def test_decomposition_single_component_is_tight():
    inst = pc.discrete_gaussian_instance(8, [3.5], 1.5, [1.0])
    rep = pc.decomposition_check(inst, 20, np.random.default_rng(0))
    assert rep.violations == 0 and rep.c_projected == 0.0
    assert np.isclose(rep.adversarial_slack, 1.0)


def test_decomposition_overlapping_components():
    inst = pc.discrete_gaussian_instance(5, [1.0, 3.0], 1.0, [0.4, 0.6])
    rep = pc.decomposition_check(inst, 100, np.random.default_rng(1))
    assert rep.passed and rep.trials == 100
    assert rep.adversarial_slack >= 1.0 and rep.to_dict()["passed"]


def test_discrete_mixture_validation():
    p = np.array([0.5, 0.5])
    with pytest.raises(ValueError):
        pc.DiscreteMixture([0.5, 0.4], [p, p], [pc.metropolis_generator(p)] * 2)
    bad = np.array([[-1.0, 1.0], [2.0, -2.0]])
    with pytest.raises(ValueError):
        pc.DiscreteMixture([1.0], [p], [bad])
