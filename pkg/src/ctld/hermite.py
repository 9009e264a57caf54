"""Multivariate Hermite tensors and Gaussian derivative ratios.

With P = Sigma^-1 and y = x - mu, the derivatives of the Gaussian density obey

    grad_x^k phi / phi = (-1)^k P^{(x)k} H_k(y; Sigma)

where H_k satisfies the three-term recursion
H_{k+1} = y (x) H_k - sum_j Sigma_{i_j, b} H_{k-1}[... i_j removed ...],
obtained by differentiating the Rodrigues form once more.  H_k is also
E_u[Re (y + i u)^{(x)k}] for u ~ N(0, Sigma), used as an independent check.
"""

import math
from dataclasses import dataclass
from itertools import product

import numpy as np

MAX_ORDER = 4


@dataclass(frozen=True)
class HermiteTensor:
    order: int
    dim: int
    entries: np.ndarray
    mc_entries: np.ndarray = None
    mc_stderr: np.ndarray = None

    def as_tensor(self):
        return self.entries.reshape((self.dim,) * self.order)


def hermite_batch(k, y, cov):
    """H_k(y; cov) for a batch y of shape (n, d); returns shape (n,) + (d,)*k."""
    if k > MAX_ORDER or k < 0:
        raise ValueError(f"order {k} unsupported (max {MAX_ORDER})")
    y = np.atleast_2d(np.asarray(y, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    n, d = y.shape
    prev, cur = None, np.ones(n)
    for m in range(k):
        # cur = H_m with shape (n,) + (d,)*m
        nxt = cur[..., None] * y.reshape((n,) + (1,) * m + (d,))
        if m >= 1:
            base = prev[..., None, None] * cov  # (n, d^(m-1), d, d): last two = (i_j, b)
            for j in range(m):
                nxt = nxt - np.moveaxis(base, m, 1 + j)
        prev, cur = cur, nxt
    return cur


def hermite_tensor(k, x, cov, mc=0, rng=None, chunk=100_000):
    """Order-k Hermite tensor at a single point, optionally with its Monte Carlo twin."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    d = len(x)
    exact = hermite_batch(k, x[None], cov)[0].reshape(-1)
    if not mc:
        return HermiteTensor(k, d, exact)
    L = np.linalg.cholesky(np.atleast_2d(cov))
    s1 = np.zeros(d ** k)
    s2 = np.zeros(d ** k)
    si = np.zeros(d ** k)
    done = 0
    while done < mc:
        m = min(chunk, mc - done)
        u = rng.standard_normal((m, d)) @ L.T
        z = x[None, :] + 1j * u
        t = np.ones((m, 1), dtype=complex)
        for _ in range(k):
            t = (t[:, :, None] * z[:, None, :]).reshape(m, -1)
        s1 += t.real.sum(axis=0)
        s2 += (t.real ** 2).sum(axis=0)
        si += t.imag.sum(axis=0)
        done += m
    mean = s1 / mc
    se = np.sqrt(np.maximum(s2 / mc - mean ** 2, 0.0) / (mc - 1))
    return HermiteTensor(k, d, exact, mean, se)


def contract_each_axis(t, P, n_batch=1):
    """Apply matrix P to every tensor axis after the first ``n_batch`` axes."""
    for ax in range(n_batch, t.ndim):
        t = np.moveaxis(np.tensordot(t, P, axes=([ax], [1])), -1, ax)
    return t


def mixed_derivative_ratio(k1, k2, x, mu, cov):
    """grad_mu^k1 grad_x^k2 phi(x - mu; cov) / phi, flattened (mu indices first)."""
    k = k1 + k2
    if k > 3:
        raise ValueError("mixed orders above 3 are not supported")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    P = np.linalg.inv(np.atleast_2d(cov))
    H = hermite_batch(k, (x - np.asarray(mu, dtype=float))[None], cov)
    return ((-1) ** k2 * contract_each_axis(H, P))[0].reshape(-1)


def derivative_ratios(order, y, cov):
    """grad_x^order phi / phi at a batch of offsets y = x - mu; shape (n,) + (d,)*order."""
    P = np.linalg.inv(np.atleast_2d(cov))
    return (-1) ** order * contract_each_axis(hermite_batch(order, y, cov), P)


def laplacian_contract(t, n_pairs, n_batch=1):
    """Trace out ``n_pairs`` trailing index pairs (i, i) of a tensor."""
    for _ in range(n_pairs):
        t = np.trace(t, axis1=t.ndim - 2, axis2=t.ndim - 1)
    return t


# --- moment bounds ------------------------------------------------------

@dataclass(frozen=True)
class MomentRow:
    k1: int
    k2: int
    k: int
    dim: int
    lam_min: float
    laplacian: bool
    lhs: float
    lhs_stderr: float
    rhs: float

    @property
    def ratio(self):
        return self.lhs / self.rhs

    def to_dict(self):
        return {"k1": self.k1, "k2": self.k2, "k": self.k, "d": self.dim, "lam_min": self.lam_min,
                "laplacian": self.laplacian, "lhs": self.lhs, "lhs_stderr": self.lhs_stderr,
                "rhs": self.rhs, "ratio": self.ratio}


def moment_bound_report(k1, k2, k, cov, mu, mc, rng, laplacian=False):
    """E ||ratio||^(2k) under N(mu, cov) against the d / lam_min power profile.

    Without ``laplacian`` the ratio is grad_mu^k1 grad_x^k2 phi / phi and the
    reference is d^((k1+k2)k) lam^-((k1+k2)k).  With ``laplacian`` the k2 x-derivatives
    are Laplacians (order k1 + 2 k2 tensor, k2 pairs traced) and the reference is
    d^((k1+3k2)k) lam^-((k1+3k2)k).
    """
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    d = cov.shape[0]
    lam = float(np.linalg.eigvalsh(cov)[0])
    L = np.linalg.cholesky(cov)
    y = rng.standard_normal((mc, d)) @ L.T
    order = k1 + (2 * k2 if laplacian else k2)
    if order > MAX_ORDER:
        raise ValueError("order too high")
    # grad_mu = -grad_x on phi(x - mu)
    t = (-1) ** k1 * derivative_ratios(order, y, cov)
    if laplacian:
        t = laplacian_contract(t, k2)
    sq = np.sum(t.reshape(mc, -1) ** 2, axis=1) ** k
    lhs, se = float(sq.mean()), float(sq.std(ddof=1) / np.sqrt(mc))
    e = (k1 + 3 * k2) * k if laplacian else (k1 + k2) * k
    rhs = float(d ** e * lam ** (-e))
    return MomentRow(k1, k2, k, d, lam, laplacian, lhs, se, rhs)


# --- perspective inequality ---------------------------------------------

OPERATORS = ("grad_x", "grad_theta", "lap_x", "grad_theta_grad_x")


def _component_ratios(op, a, inv_diag, Q, K):
    """Per-component ratios D phi_i / phi_i in rotated coordinates, flattened per component.

    a: (n, K, d) = A (x - mu_i) in the eigenbasis; inv_diag: (n, d) eigenvalues of A.
    Returns (n, K, m) where the mixture ratio is sum_i gamma_i * out[:, i].
    """
    n, K_, d = a.shape
    if op == "grad_x":
        return -a
    if op == "lap_x":
        return (np.sum(a * a, axis=-1) - inv_diag.sum(axis=1)[:, None])[..., None]
    if op == "grad_theta":
        out = np.zeros((n, K, K * d))
        for i in range(K):
            out[:, i, i * d:(i + 1) * d] = a[:, i]
        return out
    if op == "grad_theta_grad_x":
        # grad_mu grad_x phi / phi = -(a a' - A); block i of a (K d) x d matrix
        blk = -(a[..., :, None] * a[..., None, :] - np.eye(d) * inv_diag[:, None, None, :])
        out = np.zeros((n, K, K * d, d))
        for i in range(K):
            out[:, i, i * d:(i + 1) * d, :] = blk[:, i]
        return out.reshape(n, K, -1)
    raise ValueError(f"unknown operator {op!r}")


@dataclass
class PerspectiveReport:
    operator: str
    k: int
    lhs: float
    lhs_stderr: float
    average_rhs: float
    average_rhs_stderr: float
    rhs: float
    rhs_stderr: float

    @property
    def passed(self):
        return self.lhs <= self.rhs + 3.0 * np.hypot(self.lhs_stderr, self.rhs_stderr)

    def to_dict(self):
        d = dict(self.__dict__)
        d["passed"] = bool(self.passed)
        return d


def perspective_check(model, schedule, operator, k, mc, rng, n_grid=24, mc_component=None):
    """E_{(x,beta)} ||D p(x|beta) / p(x|beta)||^k versus the worst component moment.

    ``average_rhs`` is the r- and w-weighted average of component moments (the
    Jensen intermediate, equal to the left side when K = 1); ``rhs`` is the
    maximum over a temperature grid and the components.
    """
    if operator not in OPERATORS:
        raise ValueError(f"operator must be one of {OPERATORS}")
    if k % 2:
        raise ValueError("k must be even")
    from .temper import noise_channel
    K, d = model.n_components, model.dim
    mc_component = mc_component or mc
    ts = noise_channel(model.sample(rng, mc), schedule, rng)
    ev = model.tempered_eigvals(ts.beta, schedule.lam)
    t = model.terms(ts.x, ev=ev)
    comp = _component_ratios(operator, t.a, t.inv, model.eigvecs, K)
    mix = np.einsum("nk,nkm->nm", t.gamma, comp)
    v = np.sum(mix ** 2, axis=1) ** (k // 2)
    lhs, lse = float(v.mean()), float(v.std(ddof=1) / np.sqrt(mc))

    def comp_moment(beta_arr, i):
        n = len(beta_arr)
        evb = model.eigvals[None, :] + beta_arr[:, None] * schedule.lam
        z = rng.standard_normal((n, d)) * np.sqrt(evb)
        a = np.zeros((n, K, d))
        a[:, i] = z / evb
        c = _component_ratios(operator, a, 1.0 / evb, model.eigvecs, K)[:, i]
        return np.sum(c ** 2, axis=1) ** (k // 2)

    # Jensen intermediate: one fresh component draw per (beta_n, i)
    inter = sum(model.weights[i] * comp_moment(ts.beta, i) for i in range(K))
    avg, ase = float(inter.mean()), float(inter.std(ddof=1) / np.sqrt(mc))

    best, best_se = -np.inf, 0.0
    grid = np.concatenate([[0.0], np.geomspace(1e-3, schedule.beta_max, n_grid - 1)])
    for b in grid:
        for i in range(K):
            m = comp_moment(np.full(mc_component, b), i)
            val = float(m.mean())
            if val > best:
                best, best_se = val, float(m.std(ddof=1) / np.sqrt(mc_component))
    return PerspectiveReport(operator, k, lhs, lse, avg, ase, best, best_se)


# --- log-derivative bound ------------------------------------------------

def set_partitions(items):
    items = list(items)
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for part in set_partitions(rest):
        for j in range(len(part)):
            yield part[:j] + [[first] + part[j]] + part[j + 1:]
        yield [[first]] + part


def mixture_derivative_ratios(model, x, max_order, cov=None):
    """m_J = d_J f / f for all orders <= max_order at points x (n, d).

    Returns a dict order -> array (n,) + (d,)*order.
    """
    cov = model.covariance if cov is None else cov
    x = np.atleast_2d(x)
    mtmp = model if cov is model.covariance else type(model)(model.weights, model.means, cov, model.diameter)
    gamma = mtmp.responsibilities(x)
    out = {}
    for order in range(1, max_order + 1):
        acc = 0.0
        for i in range(model.n_components):
            r = derivative_ratios(order, x - model.means[i], cov)
            acc = acc + gamma[:, i].reshape((-1,) + (1,) * order) * r
        out[order] = acc
    return out


def log_derivative(ratios, index):
    """d_I log f from derivative ratios via the moment-to-cumulant partition formula."""
    k = len(index)
    total = 0.0
    for part in set_partitions(range(k)):
        b = len(part)
        term = (-1) ** (b - 1) * math.factorial(b - 1)
        for block in part:
            sub = tuple(index[j] for j in block)
            term = term * ratios[len(sub)][(slice(None),) + sub]
        total = total + term
    return total


def sub_indices(index):
    """All non-empty sub-multi-indices J <= I (as sorted tuples)."""
    index = tuple(index)
    subs = set()
    for mask in product([0, 1], repeat=len(index)):
        J = tuple(sorted(index[j] for j in range(len(index)) if mask[j]))
        if J:
            subs.add(J)
    return sorted(subs)


@dataclass
class LogDerivativeReport:
    index: tuple
    max_ratio: float
    n_points: int
    ceiling: float = 50.0

    @property
    def passed(self):
        return self.max_ratio <= self.ceiling

    def to_dict(self):
        return {"index": list(self.index), "max_ratio": self.max_ratio, "n_points": self.n_points,
                "ceiling": self.ceiling, "passed": bool(self.passed)}


def log_derivative_bound_check(index, model, mc, rng, cov=None, ceiling=50.0):
    """max over draws of |d_I log f| / max(1, max_{J <= I} |d_J f / f|^|I|)."""
    index = tuple(int(i) for i in index)
    if not 1 <= len(index) <= 3:
        raise ValueError("multi-index order must be 1..3")
    cov = model.covariance if cov is None else np.atleast_2d(cov)
    L = np.linalg.cholesky(cov)
    lab = rng.choice(model.n_components, size=mc, p=model.weights)
    x = model.means[lab] + rng.standard_normal((mc, model.dim)) @ L.T
    ratios = mixture_derivative_ratios(model, x, len(index), cov)
    lhs = np.abs(log_derivative(ratios, index))
    den = np.ones(mc)
    for J in sub_indices(index):
        den = np.maximum(den, np.abs(ratios[len(J)][(slice(None),) + J]) ** len(index))
    return LogDerivativeReport(index, float(np.max(lhs / den)), mc, ceiling)
