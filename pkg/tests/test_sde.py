import numpy as np
import pytest

from ctld import SharedCovMixture, TemperatureSchedule, noise_channel, symmetric_mixture
from ctld.sde import (ChainState, StepError, beta_histogram_test, ctld_drift, ctld_step, fold,
                      integrated_autocorr_time, langevin_step, nearest_mean, run_chain)


def test_fold_reflects_into_interval():
    assert np.isclose(fold(np.array([-0.3]), 5.0)[0], 0.3)
    assert np.isclose(fold(np.array([5.4]), 5.0)[0], 4.6)
    out = fold(np.array([-123.7, 1e4 + 0.25]), 5.0)
    assert np.all((out >= 0) & (out <= 5.0))
    assert np.isclose(fold(np.array([10.25]), 5.0)[0], 0.25)


def test_stationary_point_is_fixed_without_noise():
    m = SharedCovMixture([1.0], [[0.5]], [[1.0]])
    s = TemperatureSchedule(1.0, 1.0)
    fx, _ = ctld_drift(m.means, np.array([0.0]), m, s)
    assert np.allclose(fx, 0.0)
    # in beta the drift vanishes where r'/r balances the heat term; x at the mode
    # with beta = 0 still moves beta, so pin beta at the balance point instead
    grid = np.linspace(0.0, s.beta_max, 200_001)
    fb = ctld_drift(np.repeat(m.means, len(grid), axis=0), grid, m, s)[1]
    b0 = grid[np.argmin(np.abs(fb))]
    st = ChainState(m.means.copy(), np.array([b0]))
    nxt = ctld_step(st, 1e-3, m, s, None, noise=False)
    assert np.allclose(nxt.x, st.x) and abs(nxt.beta[0] - b0) < 1e-6
    x = langevin_step(m.means, 1e-3, m, None, noise=False)
    assert np.allclose(x, m.means)


def test_step_size_guard_and_nonfinite_drift():
    m = symmetric_mixture(2.0, sigma=0.5)
    s = TemperatureSchedule(1.0, m.lam_min)
    st = ChainState.single([0.0])
    with pytest.raises(ValueError):
        ctld_step(st, 1e-2, m, s, np.random.default_rng(0))
    with pytest.raises(StepError):
        ctld_step(ChainState.single([np.nan]), 1e-3, m, s, np.random.default_rng(0))


def test_ou_variance():
    rng = np.random.default_rng(0)
    m = SharedCovMixture([1.0], [[0.0]], [[1.0]])
    x = rng.standard_normal((1000, 1))
    xs = []
    for i in range(1000):
        x = langevin_step(x, 1e-3, m, rng)
        xs.append(x[:, 0].copy())
    v = np.array(xs).var()
    assert abs(v - 1.0) < 0.05


def test_tempered_run_recovers_averaged_covariance():
    rng = np.random.default_rng(1)
    cov = np.array([[1.0, 0.3], [0.3, 0.6]])
    m = SharedCovMixture([1.0], [[0.0, 0.0]], cov)
    s = TemperatureSchedule(1.0, m.lam_min)
    ts = noise_channel(m.sample(rng, 400), s, rng)
    st = ChainState(ts.x, ts.beta)
    xs = []
    for i in range(3000):
        st = ctld_step(st, 2e-3, m, s, rng)
        if i % 10 == 0:
            xs.append(st.x.copy())
    xs = np.concatenate(xs)
    bb = np.linspace(0, s.beta_max, 100_001)
    mean_beta = np.trapezoid(bb * s.r_pdf(bb), bb)
    target = cov + mean_beta * s.lam * np.eye(2)
    emp = np.cov(xs.T)
    assert np.max(np.abs(np.diag(emp) / np.diag(target) - 1)) < 0.05


def test_runs_are_reproducible():
    m = symmetric_mixture(4.0)
    s = TemperatureSchedule(2.0, 1.0)
    a = run_chain(ChainState.single([2.0]), 500, 1e-2, 10, m, s, np.random.default_rng(3))[0]
    b = run_chain(ChainState.single([2.0]), 500, 1e-2, 10, m, s, np.random.default_rng(3))[0]
    assert np.array_equal(a, b)
    assert a.shape == (50, 4)


def test_drift_vanishes_at_a_symmetric_mode():
    m = SharedCovMixture([1.0], [[1.0, -2.0]], np.eye(2))
    s = TemperatureSchedule(3.0, 1.0)
    fx, _ = ctld_drift(m.means, np.array([7.0]), m, s)
    assert np.allclose(fx, 0.0)


def test_nearest_mean_and_autocorrelation():
    means = np.array([[-3.0], [3.0]])
    assert list(nearest_mean(np.array([[-1.0], [0.5], [9.0]]), means)) == [0, 1, 1]
    rng = np.random.default_rng(2)
    iid = rng.standard_normal(20_000)
    assert integrated_autocorr_time(iid) < 1.2
    ar = np.zeros(20_000)
    for i in range(1, len(ar)):
        ar[i] = 0.9 * ar[i - 1] + iid[i]
    assert abs(integrated_autocorr_time(ar) - 19.0) < 3.0


def test_histogram_test_accepts_exact_draws():
    s = TemperatureSchedule(2.0, 1.0)
    chisq, p = beta_histogram_test(s.sample_beta(np.random.default_rng(4), 50_000), s)
    assert p > 0.01
    chisq, p = beta_histogram_test(np.full(1000, 1.0), s)
    assert p < 1e-6


def test_frozen_temperature_baseline_is_plain_langevin():
    m = symmetric_mixture(6.0)
    s = TemperatureSchedule(3.0, 1.0)
    traj, rep = run_chain(ChainState.single([3.0]), 200, 1e-2, 1, m, s, np.random.default_rng(5),
                          frozen_beta=True)
    assert np.all(traj[:, 2] == 0.0)
    assert np.isnan(rep.histogram_pvalue)
    assert rep.to_dict()["frozen_beta"] is True
