"""Temperature law for continuously tempered Langevin dynamics and the noising channel.

The temperature density is r(beta) proportional to exp(-7 D^2 / (lam (1 + beta)))
on [0, beta_max] with beta_max = 14 D^2 / lam - 1.  Its CDF has a closed form
through the exponential integral E1, which the sampler uses for refinement.
"""

from dataclasses import dataclass

import numpy as np
from scipy import integrate
from scipy.special import exp1

R_EXPONENT = 7.0
BETA_MAX_FACTOR = 14.0


class ScheduleError(ValueError):
    pass


def _antiderivative(u, c):
    # d/du [u exp(-c/u) - c E1(c/u)] = exp(-c/u)
    return u * np.exp(-c / u) - c * exp1(c / u)


class TemperatureSchedule:
    """Temperature law on [0, beta_max] for a mean radius ``D`` and noise scale ``lam``.

    ``lam`` is the smallest covariance eigenvalue of the data model; tempering at
    beta adds ``beta * lam * I`` to the covariance.
    """

    def __init__(self, D, lam, n_knots=4096, model=None):
        D, lam = float(D), float(lam)
        if not (np.isfinite(D) and np.isfinite(lam)) or lam <= 0 or D <= 0:
            raise ScheduleError("D and lam must be positive and finite")
        if D * D / lam < 1.0 - 1e-12:
            raise ScheduleError(f"requires D^2/lam >= 1, got {D * D / lam:.4g}")
        if model is not None:
            max_norm = float(np.max(np.linalg.norm(model.means, axis=1)))
            if max_norm > D * (1 + 1e-12):
                raise ScheduleError(f"D={D} does not cover mean norm {max_norm}")
        self.D = D
        self.lam = lam
        self.c = R_EXPONENT * D * D / lam
        self.beta_max = BETA_MAX_FACTOR * D * D / lam - 1.0

        Z, err = integrate.quad(self._unnormalized, 0.0, self.beta_max,
                                epsabs=0.0, epsrel=1e-12, limit=200)
        self.Z = Z
        self.Z_quad_error = err
        self.log_Z = float(np.log(Z))
        self._F0 = _antiderivative(1.0, self.c)
        self._Z_closed = _antiderivative(1.0 + self.beta_max, self.c) - self._F0

        # Knots uniform in log(1 + beta): r changes fastest near beta = 0.
        knots = np.expm1(np.linspace(0.0, np.log1p(self.beta_max), n_knots))
        knots[-1] = self.beta_max
        cdf = self.cdf(knots)
        if np.any(np.diff(cdf) <= 0):
            raise ScheduleError("inverse-CDF table is not strictly increasing")
        self.knots = knots
        self.knot_cdf = cdf
        knots.setflags(write=False)
        cdf.setflags(write=False)

    def _unnormalized(self, beta):
        return np.exp(-self.c / (1.0 + beta))

    def __repr__(self):
        return f"TemperatureSchedule(D={self.D:.4g}, lam={self.lam:.4g}, beta_max={self.beta_max:.4g})"

    def _check(self, beta):
        beta = np.asarray(beta, dtype=float)
        if np.any(beta < 0) or np.any(beta > self.beta_max) or not np.all(np.isfinite(beta)):
            raise ScheduleError("temperature outside [0, beta_max]")
        return beta

    def r_log_pdf(self, beta):
        beta = self._check(beta)
        return -self.c / (1.0 + beta) - self.log_Z

    def r_pdf(self, beta):
        return np.exp(self.r_log_pdf(beta))

    def r_grad_log(self, beta):
        beta = self._check(beta)
        return self.c / (1.0 + beta) ** 2

    def cdf(self, beta):
        """Closed-form CDF via the exponential integral."""
        beta = np.clip(np.asarray(beta, dtype=float), 0.0, self.beta_max)
        return (_antiderivative(1.0 + beta, self.c) - self._F0) / self._Z_closed

    def sample_beta(self, rng, n=None, tol=1e-10):
        """Inverse-CDF draws: table lookup, then bisection until the CDF bracket is below ``tol``."""
        size = 1 if n is None else n
        u = rng.random(size)
        j = np.clip(np.searchsorted(self.knot_cdf, u, side="right") - 1, 0, len(self.knots) - 2)
        lo, hi = self.knots[j].copy(), self.knots[j + 1].copy()
        flo, fhi = self.knot_cdf[j].copy(), self.knot_cdf[j + 1].copy()
        for _ in range(200):
            active = (fhi - flo) > tol
            if not np.any(active):
                break
            mid = 0.5 * (lo + hi)
            fm = self.cdf(mid)
            left = active & (fm > u)
            right = active & ~(fm > u)
            hi[left], fhi[left] = mid[left], fm[left]
            lo[right], flo[right] = mid[right], fm[right]
        w = np.where(fhi > flo, (u - flo) / np.where(fhi > flo, fhi - flo, 1.0), 0.5)
        beta = np.clip(lo + np.clip(w, 0.0, 1.0) * (hi - lo), 0.0, self.beta_max)
        return float(beta[0]) if n is None else beta

    def to_dict(self):
        return {"D": self.D, "lam": self.lam}

    @classmethod
    def from_dict(cls, rec):
        return cls(rec["D"], rec["lam"])


def schedule_radius(model):
    """Default mean radius: max mean norm, raised to sqrt(lam_min) so that D^2/lam >= 1."""
    max_norm = float(np.max(np.linalg.norm(model.means, axis=1)))
    return max(max_norm, model.diameter, np.sqrt(model.lam_min))


def schedule_for(model, **kw):
    return TemperatureSchedule(schedule_radius(model), model.lam_min, model=model, **kw)


@dataclass(frozen=True)
class TemperedSample:
    """Tempered draws (x, beta) ~ r(beta) p^beta(x), batched along the first axis.

    ``x_data`` is the clean point the draw came from and ``x_top`` is an extra
    draw of the same point noised at beta_max; both feed the boundary terms of
    the integrated-by-parts temperature loss.
    """

    x: np.ndarray
    beta: np.ndarray
    x_data: np.ndarray = None
    x_top: np.ndarray = None

    def __len__(self):
        return len(self.beta)

    def subset(self, idx):
        pick = lambda a: None if a is None else a[idx]
        return TemperedSample(self.x[idx], self.beta[idx], pick(self.x_data), pick(self.x_top))


def noise_channel(x0, schedule, rng, beta=None):
    """Noise clean points: beta ~ r, x = x0 + sqrt(beta * lam) z.

    Draw order is fixed (betas, then z, then the beta_max draw) so a seed
    determines the whole batch.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    n, d = x0.shape
    if beta is None:
        beta = schedule.sample_beta(rng, n)
    else:
        beta = np.broadcast_to(np.asarray(beta, dtype=float), (n,)).copy()
    z = rng.standard_normal((n, d))
    x = x0 + np.sqrt(beta * schedule.lam)[:, None] * z
    z_top = rng.standard_normal((n, d))
    x_top = x0 + np.sqrt(schedule.beta_max * schedule.lam) * z_top
    return TemperedSample(x, beta, x0.copy(), x_top)
