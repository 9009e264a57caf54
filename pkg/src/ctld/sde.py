"""Euler-Maruyama simulation of tempered Langevin dynamics with a reflected temperature.

The state is (x, beta).  x follows the score of the tempered model; beta
follows the score of the joint density r(beta) p^beta(x) in beta and is folded
back into [0, beta_max] after each step.  Chains are vectorized: a state holds
any number of independent chains along the first axis.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .losses import heat_rate


class StepError(FloatingPointError):
    """Non-finite drift; carries the offending state."""

    def __init__(self, msg, state):
        super().__init__(msg)
        self.state = state


@dataclass
class ChainState:
    x: np.ndarray
    beta: np.ndarray
    step_count: int = 0

    @classmethod
    def single(cls, x, beta=0.0):
        return cls(np.atleast_2d(np.asarray(x, dtype=float)), np.atleast_1d(float(beta)))


@dataclass
class MixingReport:
    mode_occupancy: np.ndarray
    autocorrelation_time: float
    histogram_chisq: float = float("nan")
    histogram_pvalue: float = float("nan")
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "mode_occupancy": [float(v) for v in self.mode_occupancy],
            "autocorrelation_time": float(self.autocorrelation_time),
            "histogram_chisq": float(self.histogram_chisq),
            "histogram_pvalue": float(self.histogram_pvalue),
            **self.extra,
        }


def fold(beta, beta_max):
    """Reflect into [0, beta_max] by repeated folding."""
    beta = np.asarray(beta, dtype=float).copy()
    for _ in range(64):
        lo, hi = beta < 0, beta > beta_max
        if not (lo.any() or hi.any()):
            return beta
        beta[lo] = -beta[lo]
        beta[hi] = 2.0 * beta_max - beta[hi]
    # a step spanning many periods: fold by the period directly
    period = 2.0 * beta_max
    beta = np.mod(beta, period)
    return np.where(beta > beta_max, period - beta, beta)


def check_dt(dt, lam):
    limit = 1e-2 * min(1.0, lam)
    if not 0 < dt <= limit * (1 + 1e-12):
        raise ValueError(f"dt={dt} violates the stability guard dt <= {limit:.3g}")


def ctld_drift(x, beta, model, schedule):
    ev = model.tempered_eigvals(beta, schedule.lam)
    t = model.terms(x, ev=ev)
    drift_x = model.unrotate(t.score)
    drift_b = schedule.r_grad_log(beta) + heat_rate(schedule) * t.lap
    return drift_x, drift_b


def ctld_step(state, dt, model, schedule, rng, noise=True, check=True):
    """One Euler-Maruyama step of the joint (x, beta) diffusion with reflection."""
    if check:
        check_dt(dt, schedule.lam)
    fx, fb = ctld_drift(state.x, state.beta, model, schedule)
    if not (np.all(np.isfinite(fx)) and np.all(np.isfinite(fb))):
        raise StepError("non-finite drift", state)
    x = state.x + dt * fx
    beta = state.beta + dt * fb
    if noise:
        s = np.sqrt(2.0 * dt)
        x = x + s * rng.standard_normal(x.shape)
        beta = beta + s * rng.standard_normal(beta.shape)
    return ChainState(x, fold(beta, schedule.beta_max), state.step_count + 1)


def langevin_step(x, dt, model, rng, noise=True, check=True):
    """One Euler-Maruyama step of overdamped Langevin on ``model``."""
    if check:
        check_dt(dt, model.lam_min)
    x = np.atleast_2d(x)
    drift = model.unrotate(model.terms(x).score)
    if not np.all(np.isfinite(drift)):
        raise StepError("non-finite drift", x)
    x = x + dt * drift
    if noise:
        x = x + np.sqrt(2.0 * dt) * rng.standard_normal(x.shape)
    return x


def nearest_mean(x, means):
    d2 = np.sum((x[..., None, :] - means) ** 2, axis=-1)
    return np.argmin(d2, axis=-1)


def integrated_autocorr_time(series, c=5.0):
    """Integrated autocorrelation time with Sokal's self-consistent window."""
    y = np.asarray(series, dtype=float)
    y = y - y.mean()
    n = len(y)
    if n < 4 or np.allclose(y, 0):
        return 1.0
    m = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(y, m)
    acf = np.fft.irfft(f * np.conj(f), m)[:n]
    acf /= acf[0]
    taus = 2.0 * np.cumsum(acf) - 1.0
    window = np.arange(n) >= c * taus
    k = int(np.argmax(window)) if window.any() else n - 1
    return float(max(taus[k], 1.0))


def beta_histogram_test(beta, schedule, n_bins=20, tau=1.0):
    """Chi-square goodness of fit of beta draws against r.

    Bins are equiprobable under r.  With autocorrelated draws the statistic is
    divided by the integrated autocorrelation time ``tau`` (effective sample size).
    """
    beta = np.asarray(beta, dtype=float)
    edges_u = np.linspace(0.0, 1.0, n_bins + 1)
    cdf = schedule.cdf(beta)
    counts = np.histogram(cdf, bins=edges_u)[0]
    expected = len(beta) / n_bins
    chisq = float(np.sum((counts - expected) ** 2 / expected)) / max(tau, 1.0)
    pval = float(stats.chi2.sf(chisq, n_bins - 1))
    return chisq, pval


def run_chain(init, steps, dt, thin, model, schedule, rng, frozen_beta=False):
    """Run CTLD (or plain Langevin with ``frozen_beta``) and collect diagnostics.

    Returns ``(trajectory, report)`` where the trajectory has columns
    ``chain, step, beta, x...`` for every chain, stacked chain-major.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    state = ChainState(np.atleast_2d(init.x).copy(), np.atleast_1d(init.beta).copy(), init.step_count)
    n_chains, d = state.x.shape
    K = model.n_components
    counts = np.zeros(K)
    rows, xs, bs = [], [], []
    u = np.zeros(d)
    u[0] = 1.0
    check_dt(dt, schedule.lam if schedule is not None else model.lam_min)
    for i in range(steps):
        if frozen_beta:
            state = ChainState(langevin_step(state.x, dt, model, rng, check=False),
                               state.beta, state.step_count + 1)
        else:
            state = ctld_step(state, dt, model, schedule, rng, check=False)
        counts += np.bincount(nearest_mean(state.x, model.means), minlength=K)
        if (i + 1) % thin == 0:
            rows.append((state.step_count, state.beta.copy(), state.x.copy()))
            xs.append(state.x @ u)
            bs.append(state.beta.copy())
    occ = counts / counts.sum()
    xs = np.array(xs)
    tau = float(np.mean([integrated_autocorr_time(xs[:, j]) for j in range(n_chains)])) if len(xs) else float("nan")
    traj = np.concatenate(
        [np.column_stack([np.full(len(rows), c, dtype=float),
                          np.array([r[0] for r in rows], dtype=float),
                          np.array([r[1][c] for r in rows]),
                          np.array([r[2][c] for r in rows])]) for c in range(n_chains)]
    ) if rows else np.empty((0, d + 3))
    report = MixingReport(occ, tau, extra={"steps": int(steps), "dt": float(dt), "thin": int(thin),
                                           "n_chains": int(n_chains), "frozen_beta": bool(frozen_beta)})
    if not frozen_beta and len(bs):
        b = np.array(bs)
        tau_b = float(np.mean([integrated_autocorr_time(b[:, j]) for j in range(n_chains)]))
        chisq, pval = beta_histogram_test(b.ravel(), schedule, tau=tau_b)
        report.histogram_chisq, report.histogram_pvalue = chisq, pval
        report.extra["beta_autocorrelation_time"] = tau_b
    return traj, report

