"""Shared-covariance Gaussian mixtures and their analytic derivatives.

Every derivative routine works in the eigenbasis of the covariance so the same
code path serves a fixed covariance and a per-point tempered covariance
``Sigma + beta * lam * I`` (the eigenvectors do not move under tempering).
"""

from dataclasses import dataclass
import json

import numpy as np
from scipy.special import logsumexp

LOG_2PI = np.log(2.0 * np.pi)
MAX_CONDITION = 1e12


class MixtureError(ValueError):
    """Raised for invalid mixture parameters or inputs."""


def _as_points(x, dim):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[-1] != dim:
        raise MixtureError(f"points have dimension {x.shape[-1]}, model has {dim}")
    if not np.all(np.isfinite(x)):
        raise MixtureError("non-finite input point")
    return x, single


class Terms:
    """Per-point, per-component quantities of a mixture in the eigenbasis.

    Parameters
    ----------
    xr : (n, d) points in rotated coordinates.
    mr : (K, d) means in rotated coordinates.
    log_w : (K,) log weights.
    ev : (n, d) or (d,) covariance eigenvalues (per point when tempered).
    second : also compute fourth-order (bilaplacian) quantities.
    """

    def __init__(self, xr, mr, log_w, ev, second=False):
        n, d = xr.shape
        ev = np.broadcast_to(ev, (n, d))
        self.inv = inv = 1.0 / ev
        y = xr[:, None, :] - mr[None, :, :]
        self.a = a = y * inv[:, None, :]
        quad = np.einsum("nkd,nkd->nk", y, a)
        logdet = np.log(ev).sum(axis=1)
        lj = log_w[None, :] - 0.5 * quad - 0.5 * (d * LOG_2PI + logdet)[:, None]
        self.log_density = logsumexp(lj, axis=1)
        self.gamma = np.exp(lj - self.log_density[:, None])
        self.tr = inv.sum(axis=1)
        self.tr2 = (inv * inv).sum(axis=1)
        self.na2 = np.einsum("nkd,nkd->nk", a, a)
        self.psi1 = self.na2 - self.tr[:, None]
        self.score = -np.einsum("nk,nkd->nd", self.gamma, a)
        self.lap = np.einsum("nk,nk->n", self.gamma, self.psi1)
        self.second = second
        if second:
            aAa = np.einsum("nkd,nkd->nk", a * a, np.broadcast_to(inv[:, None, :], a.shape))
            tr = self.tr[:, None]
            self.psi2 = (self.na2 ** 2 - 2.0 * self.na2 * tr + tr ** 2
                         + 2.0 * self.tr2[:, None] - 4.0 * aAa)
            self.bilap = np.einsum("nk,nk->n", self.gamma, self.psi2)

    # Gradients with respect to the (rotated) means, shape (n, K, d).

    def grad_log_density(self):
        return self.gamma[..., None] * self.a

    def grad_lap(self):
        g = self.gamma[..., None]
        dev = (self.psi1 - self.lap[:, None])[..., None]
        return g * (dev * self.a - 2.0 * self.a * self.inv[:, None, :])

    def grad_bilap(self):
        if not self.second:
            raise RuntimeError("fourth-order terms were not computed")
        g = self.gamma[..., None]
        a, inv = self.a, self.inv[:, None, :]
        dev = (self.psi2 - self.bilap[:, None])[..., None]
        dpsi = 4.0 * self.na2[..., None] * a - 4.0 * self.tr[:, None, None] * a - 8.0 * a * inv
        return g * (dev * a - inv * dpsi)

    def grad_half_score_sq(self):
        """Gradient of 0.5 * ||score||^2, i.e. J_k^T s per component block."""
        s = self.score[:, None, :]
        a = self.a
        proj = np.einsum("nkd,nkd->nk", a + s, np.broadcast_to(s, a.shape))
        return self.gamma[..., None] * (self.inv[:, None, :] * s - a * proj[..., None])

    def score_jacobian(self):
        """d score_j / d mean_{k,l}, shape (n, K, d, d) indexed [n, k, j, l]."""
        d = self.a.shape[-1]
        s = self.score[:, None, :]
        outer = (self.a + s)[..., :, None] * self.a[..., None, :]
        diag = np.eye(d)[None, None] * self.inv[:, None, None, :]
        return self.gamma[..., None, None] * (diag - outer)


@dataclass(frozen=True)
class DerivativeBundle:
    """Analytic derivatives of a mixture log-density at a batch of points.

    Array fields carry a leading batch axis; ``mean_gradient`` is flattened
    component-major to length K*d.
    """

    log_density: np.ndarray
    score: np.ndarray
    hessian_log_trace: np.ndarray
    laplacian_ratio: np.ndarray
    bilaplacian_ratio: np.ndarray
    mean_gradient: np.ndarray
    responsibilities: np.ndarray

    def squeeze(self):
        """Drop the batch axis (for single-point evaluations)."""
        return DerivativeBundle(**{k: v[0] for k, v in self.__dict__.items()})


class SharedCovMixture:
    """Mixture sum_i w_i N(mu_i, Sigma) with one covariance shared by all components."""

    def __init__(self, weights, means, covariance, diameter=None):
        w = np.array(weights, dtype=float).ravel()
        mu = np.array(means, dtype=float)
        if mu.ndim == 1:
            mu = mu[:, None]
        cov = np.array(covariance, dtype=float)
        if cov.ndim == 0:
            cov = cov.reshape(1, 1)
        K, d = mu.shape
        if w.shape != (K,):
            raise MixtureError("weights and means disagree on the number of components")
        if cov.shape != (d, d):
            raise MixtureError("covariance shape does not match mean dimension")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(mu)) and np.all(np.isfinite(cov))):
            raise MixtureError("non-finite parameters")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise MixtureError("weights must be positive and sum to 1")
        if not np.array_equal(cov, cov.T):
            raise MixtureError("covariance must be symmetric")
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise MixtureError("covariance is not positive definite") from exc
        ev, Q = np.linalg.eigh(cov)
        if ev[0] <= 0 or ev[-1] / ev[0] > MAX_CONDITION:
            raise MixtureError("covariance is singular or too ill-conditioned")
        max_norm = float(np.max(np.linalg.norm(mu, axis=1)))
        if diameter is None:
            diameter = max_norm
        diameter = float(diameter)
        if max_norm > diameter * (1 + 1e-12):
            raise MixtureError(f"mean norm {max_norm} exceeds diameter bound {diameter}")

        self.weights = w
        self.means = mu
        self.covariance = cov
        self.diameter = diameter
        self.chol = chol
        self.eigvals = ev
        self.eigvecs = Q
        self.precision = (Q / ev) @ Q.T
        self.logdet = float(np.log(ev).sum())
        self.lam_min = float(ev[0])
        self.lam_max = float(ev[-1])
        self.log_weights = np.log(w)
        for arr in (w, mu, cov, chol, ev, Q, self.precision):
            arr.setflags(write=False)

    @property
    def n_components(self):
        return self.means.shape[0]

    @property
    def dim(self):
        return self.means.shape[1]

    @property
    def theta(self):
        """Mean parameters flattened component-major."""
        return self.means.ravel().copy()

    def __repr__(self):
        return (f"SharedCovMixture(K={self.n_components}, d={self.dim}, "
                f"lam_min={self.lam_min:.4g}, lam_max={self.lam_max:.4g}, D={self.diameter:.4g})")

    def with_means(self, means):
        """Same weights and covariance, new means (diameter grows if needed)."""
        mu = np.asarray(means, dtype=float).reshape(self.means.shape)
        D = max(self.diameter, float(np.max(np.linalg.norm(mu, axis=1))))
        return SharedCovMixture(self.weights, mu, self.covariance, D)

    def temper(self, beta, lam_ref):
        """Convolve with N(0, beta * lam_ref * I)."""
        if beta < 0:
            raise MixtureError("temperature must be non-negative")
        cov = self.covariance + beta * lam_ref * np.eye(self.dim)
        return SharedCovMixture(self.weights, self.means, cov, self.diameter)

    # --- evaluation -----------------------------------------------------

    def _rotate(self, x):
        return x @ self.eigvecs, self.means @ self.eigvecs

    def terms(self, x, ev=None, second=False):
        """Kernel quantities at points ``x`` (n, d); ``ev`` overrides eigenvalues per point."""
        xr, mr = self._rotate(x)
        return Terms(xr, mr, self.log_weights, self.eigvals if ev is None else ev, second)

    def tempered_eigvals(self, beta, lam_ref):
        beta = np.asarray(beta, dtype=float)
        return self.eigvals[None, :] + beta.reshape(-1, 1) * lam_ref

    def unrotate(self, g):
        """Map arrays whose last axis is a rotated spatial index back to the original basis."""
        return g @ self.eigvecs.T

    def log_pdf(self, x):
        x, single = _as_points(x, self.dim)
        out = self.terms(x).log_density
        return float(out[0]) if single else out

    def component_log_pdf(self, x):
        """log N(x; mu_i, Sigma) for every component, shape (n, K)."""
        x, _ = _as_points(x, self.dim)
        y = x[:, None, :] - self.means[None]
        z = np.linalg.solve(self.chol, y.reshape(-1, self.dim).T).T.reshape(y.shape)
        return -0.5 * np.sum(z * z, axis=-1) - 0.5 * (self.dim * LOG_2PI + self.logdet)

    def responsibilities(self, x):
        x, _ = _as_points(x, self.dim)
        return self.terms(x).gamma

    def sample(self, rng, n, return_labels=False):
        """Draw n i.i.d. points (component index first, then the Gaussian)."""
        labels = rng.choice(self.n_components, size=n, p=self.weights)
        z = rng.standard_normal((n, self.dim))
        x = self.means[labels] + z @ self.chol.T
        return (x, labels) if return_labels else x

    def derivatives(self, x):
        """Analytic derivative bundle at x (single point or (n, d) batch)."""
        x, single = _as_points(x, self.dim)
        t = self.terms(x, second=True)
        score = self.unrotate(t.score)
        grad = self.unrotate(t.grad_log_density()).reshape(len(x), -1)
        b = DerivativeBundle(
            log_density=t.log_density,
            score=score,
            hessian_log_trace=t.lap - np.sum(t.score ** 2, axis=1),
            laplacian_ratio=t.lap,
            bilaplacian_ratio=t.bilap,
            mean_gradient=grad,
            responsibilities=t.gamma,
        )
        return b.squeeze() if single else b

    # --- serialization --------------------------------------------------

    def to_dict(self):
        return {
            "dim": self.dim,
            "n_components": self.n_components,
            "weights": self.weights.tolist(),
            "means": self.means.ravel().tolist(),
            "covariance": self.covariance.ravel().tolist(),
            "diameter": self.diameter,
        }

    @classmethod
    def from_dict(cls, rec):
        try:
            K = int(rec.get("n_components", len(rec["weights"])))
            d = int(rec.get("dim", np.asarray(rec["means"]).size // K))
            means = np.asarray(rec["means"], dtype=float).reshape(K, d)
            cov = np.asarray(rec["covariance"], dtype=float).reshape(d, d)
            return cls(rec["weights"], means, cov, rec.get("diameter"))
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, MixtureError):
                raise
            raise MixtureError(f"malformed mixture record: {exc}") from exc

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def __eq__(self, other):
        return (isinstance(other, SharedCovMixture)
                and np.array_equal(self.weights, other.weights)
                and np.array_equal(self.means, other.means)
                and np.array_equal(self.covariance, other.covariance)
                and self.diameter == other.diameter)

    __hash__ = None


def symmetric_mixture(separation, sigma=1.0, n_components=2, dim=1):
    """Equal-weight 1D-style mixture with means evenly spaced on [-separation/2, separation/2].

    For ``dim > 1`` the means lie along the first coordinate axis.
    """
    centers = np.linspace(-separation / 2.0, separation / 2.0, n_components)
    means = np.zeros((n_components, dim))
    means[:, 0] = centers
    w = np.full(n_components, 1.0 / n_components)
    w[-1] = 1.0 - w[:-1].sum()
    return SharedCovMixture(w, means, sigma ** 2 * np.eye(dim))
