"""Score matching and tempered (CTLD) generalized score matching losses.

Per-sample losses are the integrated-by-parts forms, so their expectation
under the data differs from the population loss by a constant that does not
depend on the model.  Gradients are with respect to the flattened means.

Temperature derivatives go through the heat equation: tempering by beta adds
``beta * lam`` to the covariance, so

    d/dbeta log p^beta   = (lam / 2) * lap
    d2/dbeta2 log p^beta = (lam / 2)^2 * (bilap - lap^2)

with ``lap = Laplacian p / p`` and ``bilap = Laplacian^2 p / p``.
"""

from dataclasses import dataclass

import numpy as np

from .temper import TemperedSample

KINDS = ("SM_population", "SM_ibp", "GSM_population", "GSM_ibp")


@dataclass(frozen=True)
class LossReport:
    value: float
    std_error: float
    n_points: int
    kind: str
    seed: int = None

    def to_dict(self):
        return {"kind": self.kind, "value": self.value, "std_error": self.std_error,
                "n_points": self.n_points, "seed": self.seed}


@dataclass(frozen=True)
class PerSampleLoss:
    """Per-sample tempered loss pieces, batched on the first axis.

    ``l1`` is the spatial part, ``l2`` the temperature part, ``boundary`` the
    reflecting-boundary correction (zero when it was not requested) and
    ``grad_means`` the gradient of ``l1 + l2 - boundary``.
    """

    l1: np.ndarray
    l2: np.ndarray
    boundary: np.ndarray
    grad_means: np.ndarray

    @property
    def total(self):
        return self.l1 + self.l2 - self.boundary


def heat_rate(schedule):
    """Coefficient of the Laplacian in d/dbeta log p^beta."""
    return 0.5 * schedule.lam


def _mean_se(v):
    v = np.asarray(v, dtype=float)
    n = len(v)
    return float(np.mean(v)), float(np.std(v, ddof=1) / np.sqrt(n)) if n > 1 else 0.0


def _flat(model, g):
    return model.unrotate(g).reshape(g.shape[0], -1)


# --- plain score matching ------------------------------------------------

def sm_per_sample(model, x):
    """Tr Hess log q + 0.5 ||grad log q||^2 at each point, and its mean-gradient."""
    x = np.atleast_2d(x)
    t = model.terms(x)
    val = t.lap - 0.5 * np.sum(t.score ** 2, axis=1)
    grad = t.grad_lap() - t.grad_half_score_sq()
    return val, _flat(model, grad)


def sm_population(p, q, n, rng, seed=None):
    """0.5 E_p ||score_p - score_q||^2 by Monte Carlo."""
    if p.dim != q.dim:
        raise ValueError("dimension mismatch")
    x = p.sample(rng, n)
    diff = p.terms(x).score @ p.eigvecs.T - q.terms(x).score @ q.eigvecs.T
    v = 0.5 * np.sum(diff ** 2, axis=1)
    m, se = _mean_se(v)
    return LossReport(m, se, n, "SM_population", seed)


# --- tempered generalized score matching --------------------------------

def _tempered_terms(model, schedule, x, beta):
    ev = model.tempered_eigvals(beta, schedule.lam)
    return model.terms(np.atleast_2d(x), ev=ev, second=True)


def gsm_ctld_per_sample(model, schedule, ts, boundary=True):
    """Per-sample tempered loss l1 + l2 (minus the boundary correction) with gradient.

    l1 = 0.5 ||grad_x log p(x|beta)||^2 + Lap_x log p(x|beta)
    l2 = 0.5 (d_beta log p)^2 + d_beta log r * d_beta log p + d2_beta log p

    The temperature integration by parts runs over a bounded interval, so the
    unbiased form also subtracts r(beta_max) E[d_beta log p at beta_max] and adds
    r(0) E[d_beta log p at 0]; these are estimated from ``ts.x_top`` and
    ``ts.x_data``.  ``boundary=False`` drops them.
    """
    beta = np.asarray(ts.beta, dtype=float)
    if np.any(beta < 0) or np.any(beta > schedule.beta_max):
        raise ValueError("temperature outside [0, beta_max]")
    c = heat_rate(schedule)
    t = _tempered_terms(model, schedule, ts.x, beta)
    gr = schedule.r_grad_log(beta)
    l1 = t.lap - 0.5 * np.sum(t.score ** 2, axis=1)
    l2 = 0.5 * (c * t.lap) ** 2 + gr * c * t.lap + c * c * (t.bilap - t.lap ** 2)
    g_lap = t.grad_lap()
    grad = (g_lap - t.grad_half_score_sq()
            + c * c * t.grad_bilap() - (c * c * t.lap)[:, None, None] * g_lap
            + (c * gr)[:, None, None] * g_lap)
    bnd = np.zeros_like(l1)
    if boundary:
        if ts.x_data is None or ts.x_top is None:
            raise ValueError("boundary correction needs x_data and x_top in the sample")
        r_top = float(schedule.r_pdf(schedule.beta_max))
        r_bot = float(schedule.r_pdf(0.0))
        n = len(beta)
        top = _tempered_terms(model, schedule, ts.x_top, np.full(n, schedule.beta_max))
        bot = model.terms(np.atleast_2d(ts.x_data))
        bnd = c * (r_top * top.lap - r_bot * bot.lap)
        grad = grad - c * (r_top * top.grad_lap() - r_bot * bot.grad_lap())
    return PerSampleLoss(l1, l2, bnd, _flat(model, grad))


def beta_derivatives(model, schedule, x, beta):
    """(d_beta log p, d2_beta log p) of the tempered model through the heat identity."""
    c = heat_rate(schedule)
    t = _tempered_terms(model, schedule, x, np.asarray(beta, dtype=float))
    return c * t.lap, c * c * (t.bilap - t.lap ** 2)


def gsm_ctld_population(p, q, schedule, n, rng, seed=None):
    """0.5 E_{(x,beta)} [ ||score_p - score_q||^2 + (d_beta log p - d_beta log q)^2 ]."""
    if p.dim != q.dim:
        raise ValueError("dimension mismatch")
    ts = noise_channel_from(p, schedule, rng, n)
    return _gsm_population_on(p, q, schedule, ts, seed)


def _gsm_population_on(p, q, schedule, ts, seed=None, split=False):
    c = heat_rate(schedule)
    tp = _tempered_terms(p, schedule, ts.x, ts.beta)
    tq = _tempered_terms(q, schedule, ts.x, ts.beta)
    sx = 0.5 * np.sum((p.unrotate(tp.score) - q.unrotate(tq.score)) ** 2, axis=1)
    sb = 0.5 * (c * (tp.lap - tq.lap)) ** 2
    if split:
        return sx, sb
    m, se = _mean_se(sx + sb)
    return LossReport(m, se, len(ts), "GSM_population", seed)


def noise_channel_from(model, schedule, rng, n):
    from .temper import noise_channel
    return noise_channel(model.sample(rng, n), schedule, rng)


def empirical_loss(model, schedule, samples, boundary=True):
    """Mean tempered loss over a batch and its mean-gradient."""
    if samples is None or len(samples) == 0:
        raise ValueError("empty sample batch")
    out = gsm_ctld_per_sample(model, schedule, samples, boundary=boundary)
    return float(np.mean(out.total)), out.grad_means.mean(axis=0)


def empirical_sm_loss(model, x):
    val, grad = sm_per_sample(model, x)
    return float(np.mean(val)), grad.mean(axis=0)


def nll_per_sample(model, x):
    """Negative log-likelihood and its mean-gradient (the MLE loss)."""
    t = model.terms(np.atleast_2d(x))
    return -t.log_density, -_flat(model, t.grad_log_density())


def per_sample(kind, model, data, schedule=None):
    """Dispatch to a per-sample (value, grad) pair for ``kind`` in {'mle', 'sm', 'gsm'}."""
    if kind == "mle":
        return nll_per_sample(model, data)
    if kind == "sm":
        return sm_per_sample(model, data)
    if kind == "gsm":
        out = gsm_ctld_per_sample(model, schedule, data)
        return out.total, out.grad_means
    raise ValueError(f"unknown loss kind {kind!r}")


__all__ = [
    "LossReport", "PerSampleLoss", "TemperedSample", "heat_rate", "sm_per_sample",
    "sm_population", "gsm_ctld_per_sample", "gsm_ctld_population", "beta_derivatives",
    "empirical_loss", "empirical_sm_loss", "nll_per_sample", "per_sample",
]
