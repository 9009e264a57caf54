"""Poincare constants: explicit upper-bound pipeline, chi-square tools and numeric oracles.

The bound for the tempered joint chain (x, beta) is assembled from
  * a Poincare constant for the temperature law (log-concave on an interval),
  * Bakry-Emery for each tempered Gaussian component,
  * the Fisher information of a component in the temperature direction,
  * a projected chain over components whose rates come from chi-square overlaps.
Numeric oracles solve the discretized Dirichlet-form eigenproblem on a grid
(continuous state, at most two dimensions) or exactly (finite state spaces).
"""

from dataclasses import dataclass, field, asdict

import numpy as np
from scipy import integrate, linalg, sparse
from scipy.sparse.linalg import eigsh

from .losses import heat_rate


class OracleError(RuntimeError):
    pass


# --- chi-square divergences ------------------------------------------------

def chisq_same_cov(mu_i, mu_j, cov):
    """chi^2(N(mu_i, cov) || N(mu_j, cov)) = exp(delta' cov^-1 delta) - 1."""
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise ValueError("covariance is not positive definite") from exc
    z = linalg.solve_triangular(L, np.atleast_1d(np.subtract(mu_i, mu_j, dtype=float)), lower=True)
    return float(np.expm1(z @ z))


def chisq_same_cov_bound(D, lam, beta):
    """Closed-form ceiling exp(7 D^2 / (lam (1 + beta))) for means within radius D."""
    return float(np.exp(7.0 * D * D / (lam * (1.0 + beta))))


def _mahalanobis_tempered(model, schedule, i, j):
    dr = (model.means[i] - model.means[j]) @ model.eigvecs
    ev = model.eigvals
    return lambda beta: float(np.sum(dr * dr / (ev + beta * schedule.lam)))


def chisq_joint(model, schedule, i, j, epsrel=1e-10):
    """chi^2 between joint (x, beta) laws of components i and j: int chi^2(beta) r(beta) dbeta."""
    if i == j:
        return 0.0
    q = _mahalanobis_tempered(model, schedule, i, j)
    c, logZ = schedule.c, schedule.log_Z

    def f(beta):
        # exp(q) r(beta) - r(beta), combined in the exponent to avoid overflow
        lr = -c / (1.0 + beta) - logZ
        return np.exp(q(beta) + lr) - np.exp(lr)

    val, err = integrate.quad(f, 0.0, schedule.beta_max, epsabs=0.0, epsrel=epsrel, limit=400)
    if not np.isfinite(val) or err > max(1e-6 * abs(val), 1e-12):
        raise OracleError(f"chi-square quadrature did not converge (error {err:.3g})")
    return float(val)


def chisq_joint_mc(model, schedule, i, j, n, rng):
    """Importance estimate E_{beta ~ r}[chi^2(beta)] with stderr, for cross-checks."""
    q = _mahalanobis_tempered(model, schedule, i, j)
    b = schedule.sample_beta(rng, n)
    v = np.expm1(np.array([q(x) for x in b]))
    return float(v.mean()), float(v.std(ddof=1) / np.sqrt(n))


# --- discrete reversible chains ------------------------------------------

def dirichlet_matrix(conductance):
    """Graph Laplacian of a symmetric conductance matrix (diagonal ignored)."""
    Q = np.array(conductance, dtype=float)
    np.fill_diagonal(Q, 0.0)
    return np.diag(Q.sum(axis=1)) - Q


def poincare_constant_discrete(conductance, pi):
    """1 / spectral gap of the reversible chain with conductances pi(x) L(x, y)."""
    pi = np.asarray(pi, dtype=float)
    if len(pi) == 1:
        return 0.0
    Lm = dirichlet_matrix(conductance)
    vals = linalg.eigh(Lm, np.diag(pi), eigvals_only=True)
    gap = vals[1]
    if gap <= 0:
        return np.inf
    return float(1.0 / gap)


def projected_transitions(weights, chisq_max):
    """T(i, j) = w_j / max(chi2_max(i, j), 1) off the diagonal, self-loops fill rows to 1."""
    w = np.asarray(weights, dtype=float)
    T = w[None, :] / np.maximum(np.asarray(chisq_max, dtype=float), 1.0)
    np.fill_diagonal(T, 0.0)
    off = T.sum(axis=1)
    if np.any(off > 1 + 1e-12):
        raise AssertionError("projected rows exceed 1 before the self-loop fill")
    T[np.diag_indices_from(T)] = 1.0 - off
    return T


def canonical_path_bound(weights, T):
    """Direct-edge canonical-path bound on the Poincare constant of T.

    Each pair (k, l) is routed along its own edge; with edge capacity
    Q(k, l) = w_k T(k, l) the congestion of that edge is w_k w_l / Q(k, l).
    """
    w = np.asarray(weights, dtype=float)
    K = len(w)
    if K == 1:
        return 0.0
    vals = [w[k] * w[l] / (w[k] * T[k, l]) for k in range(K) for l in range(K) if k != l]
    return float(max(vals))


@dataclass
class PoincareBoundBreakdown:
    c_beta: float
    c_beta_literal: float
    c_x_given_beta: float
    rate_of_change_sup: float
    rate_of_change_ceiling: float
    c_component: float
    c_component_literal: float
    chisq_joint_matrix: list
    projected_T: list
    c_projected: float
    c_projected_literal: float
    c_projected_exact: float
    c_total: float
    c_total_literal: float
    collapsed_profile: float
    beta_max: float
    oracle_value: float = None

    def to_dict(self):
        return asdict(self)


def beta_grid(schedule, n=512):
    """Log-spaced temperatures on [0, beta_max] (first node exactly 0)."""
    return np.concatenate([[0.0], np.geomspace(1e-6, schedule.beta_max, n - 1)])


def rate_of_change_sup(model, schedule, n_grid=512):
    """sup_beta E_{x ~ N(mu, Sigma_beta)} (d_beta log N(x; mu, Sigma_beta))^2.

    For a Gaussian, d_beta log N = c (||A y||^2 - tr A) with A = Sigma_beta^-1,
    whose variance is 2 c^2 tr(A^2); it is largest at beta = 0.
    """
    c = heat_rate(schedule)
    b = beta_grid(schedule, n_grid)
    ev = model.eigvals[None, :] + b[:, None] * schedule.lam
    vals = 2.0 * c * c * np.sum(ev ** -2.0, axis=1)
    return float(vals.max())


def rate_of_change_ceiling(model, schedule):
    d = model.dim
    return float(16.0 * d * d * max(model.lam_max ** 8, 14.0 ** 8 * schedule.D ** 16))


def temperature_poincare_bound(schedule):
    """Payne-Weinberger/Bebendorf bound (length / pi)^2 for a log-concave law on an interval."""
    return float((schedule.beta_max / np.pi) ** 2)


def component_bound(model, schedule, i=0, literal=False):
    """Poincare bound for the joint (x, beta) law of component i.

    max{ C2 (1 + 2 C1 Linf), 2 C1 } with C1 the temperature-law constant,
    C2 = lam_max + beta_max lam the worst tempered-Gaussian constant and Linf the
    temperature Fisher information.  ``literal=True`` uses C1 = beta_max / pi and the
    closed-form Linf ceiling instead.  Identical for every i (shared covariance).
    """
    if not 0 <= i < model.n_components:
        raise IndexError("component index out of range")
    c2 = model.lam_max + schedule.beta_max * schedule.lam
    if literal:
        c1, linf = schedule.beta_max / np.pi, rate_of_change_ceiling(model, schedule)
    else:
        c1, linf = temperature_poincare_bound(schedule), rate_of_change_sup(model, schedule)
    return float(max(c2 * (1.0 + 2.0 * c1 * linf), 2.0 * c1))


def projected_chain_bound(model, schedule, chisq=None):
    """(T, canonical-path bound, literal variant, exact constant) for the component chain."""
    K = model.n_components
    if chisq is None:
        chisq = np.array([[chisq_joint(model, schedule, i, j) for j in range(K)] for i in range(K)])
    chisq_max = np.maximum(chisq, chisq.T)
    T = projected_transitions(model.weights, chisq_max)
    w = model.weights
    flow = w[:, None] * T
    if not np.allclose(flow, flow.T, rtol=0, atol=1e-12):
        raise AssertionError("projected chain violates detailed balance")
    bound = canonical_path_bound(w, T)
    literal = 0.0 if K == 1 else max(w[k] * w[l] / T[k, l] for k in range(K) for l in range(K) if k != l)
    exact = poincare_constant_discrete(flow, w)
    ceiling = 14.0 * schedule.D ** 2 / schedule.lam
    if bound > ceiling * (1 + 1e-12):
        raise AssertionError(f"projected bound {bound} exceeds 14 D^2/lam = {ceiling}")
    return T, bound, float(literal), exact


def total_bound(model, schedule):
    """Full breakdown of the explicit-constant upper bound on the joint chain's Poincare constant."""
    K = model.n_components
    chisq = np.array([[chisq_joint(model, schedule, i, j) for j in range(K)] for i in range(K)])
    T, c_proj, c_proj_lit, c_proj_exact = projected_chain_bound(model, schedule, chisq)
    comp = max(component_bound(model, schedule, i) for i in range(K))
    comp_lit = max(component_bound(model, schedule, i, literal=True) for i in range(K))
    D, lam = schedule.D, schedule.lam
    profile = D ** 22 * model.dim ** 2 * model.lam_max ** 9 / lam ** 2
    return PoincareBoundBreakdown(
        c_beta=temperature_poincare_bound(schedule),
        c_beta_literal=schedule.beta_max / np.pi,
        c_x_given_beta=model.lam_max + schedule.beta_max * lam,
        rate_of_change_sup=rate_of_change_sup(model, schedule),
        rate_of_change_ceiling=rate_of_change_ceiling(model, schedule),
        c_component=comp,
        c_component_literal=comp_lit,
        chisq_joint_matrix=chisq.tolist(),
        projected_T=T.tolist(),
        c_projected=c_proj,
        c_projected_literal=c_proj_lit,
        c_projected_exact=c_proj_exact,
        c_total=comp * (1.0 + c_proj / 2.0),
        c_total_literal=comp_lit * (1.0 + c_proj_lit / 2.0),
        collapsed_profile=float(profile),
        beta_max=schedule.beta_max,
    )


# --- grid spectral oracle ----------------------------------------------------

@dataclass(frozen=True)
class Axis:
    """One grid axis.

    ``kind`` picks the node spacing: 'uniform', 'sinh' (fine near ``center``,
    width ``scale``) or 'log1p' (fine near ``lo``).  ``truncated`` marks axes
    that cut off an unbounded domain (boundary mass is then checked).
    """

    lo: float
    hi: float
    n: int
    kind: str = "uniform"
    center: float = 0.0
    scale: float = 1.0
    truncated: bool = True

    def nodes(self, refine=1):
        m = self.n * refine + 1
        if self.kind == "uniform":
            return np.linspace(self.lo, self.hi, m)
        if self.kind == "sinh":
            a = np.arcsinh((self.lo - self.center) / self.scale)
            b = np.arcsinh((self.hi - self.center) / self.scale)
            return self.center + self.scale * np.sinh(np.linspace(a, b, m))
        if self.kind == "log1p":
            s = self.scale
            t = np.linspace(0.0, np.log1p((self.hi - self.lo) / s), m)
            x = self.lo + s * np.expm1(t)
            x[-1] = self.hi
            return x
        raise ValueError(f"unknown axis kind {self.kind!r}")


def _dual_widths(x):
    w = np.empty_like(x)
    w[1:-1] = 0.5 * (x[2:] - x[:-2])
    w[0] = 0.5 * (x[1] - x[0])
    w[-1] = 0.5 * (x[-1] - x[-2])
    return w


@dataclass
class GridOperator:
    """Finite-volume Dirichlet form E(f) = f' L f and node masses (summing to 1)."""

    axes: list
    weights: np.ndarray
    laplacian: sparse.csr_matrix
    boundary_mass: float = 0.0
    shape: tuple = field(default=())


def assemble_grid(log_density, axes, refine=1, floor=200.0):
    """Dirichlet form of the Langevin diffusion with stationary density exp(log_density).

    ``log_density`` takes one array per axis (broadcastable meshes) and returns
    unnormalized log-density values.  Edge conductances use the density at the
    edge midpoint; the density is floored ``floor`` nats below its maximum so that
    far-tail nodes stay connected.
    """
    coords = [ax.nodes(refine) for ax in axes]
    shape = tuple(len(c) for c in coords)
    mesh = np.meshgrid(*coords, indexing="ij")
    ld = log_density(*mesh)
    top = ld.max()
    ld = np.maximum(ld - top, -floor)
    dual = [_dual_widths(c) for c in coords]
    vol = np.ones(shape)
    for a, w in enumerate(dual):
        vol = vol * w.reshape([-1 if b == a else 1 for b in range(len(axes))])
    mass = np.exp(ld) * vol
    total = mass.sum()

    idx = np.arange(mass.size).reshape(shape)
    rows, cols, vals = [], [], []
    for a in range(len(axes)):
        c = coords[a]
        lo_sl = [slice(None)] * len(axes)
        hi_sl = [slice(None)] * len(axes)
        lo_sl[a], hi_sl[a] = slice(0, -1), slice(1, None)
        lo_sl, hi_sl = tuple(lo_sl), tuple(hi_sl)
        mid = [0.5 * (m[lo_sl] + m[hi_sl]) for m in mesh]
        ldm = np.maximum(log_density(*mid) - top, -floor)
        h = np.diff(c).reshape([-1 if b == a else 1 for b in range(len(axes))])
        cross = np.ones_like(ldm)
        for b, w in enumerate(dual):
            if b != a:
                cross = cross * w.reshape([-1 if e == b else 1 for e in range(len(axes))])
        cond = np.exp(ldm) * cross / h / total
        rows.append(idx[lo_sl].ravel())
        cols.append(idx[hi_sl].ravel())
        vals.append(cond.ravel())
    r, cidx, v = np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)
    n = mass.size
    W = sparse.coo_matrix((v, (r, cidx)), shape=(n, n)).tocsr()
    W = W + W.T
    Lap = sparse.diags(np.asarray(W.sum(axis=1)).ravel()) - W

    weights = (mass / total)
    bmass = 0.0
    for a, ax in enumerate(axes):
        if ax.truncated:
            first = [slice(None)] * len(axes)
            last = [slice(None)] * len(axes)
            first[a], last[a] = 0, -1
            bmass = max(bmass, float(weights[tuple(first)].sum()), float(weights[tuple(last)].sum()))
    return GridOperator(list(axes), weights.ravel(), Lap.tocsc(), bmass, shape)


def grid_poincare(op, max_boundary_mass=1e-6):
    """1 / (smallest nonzero generalized eigenvalue of (L, diag(weights)))."""
    if op.boundary_mass > max_boundary_mass:
        raise OracleError(f"density not resolved: boundary mass {op.boundary_mass:.3g}")
    M = sparse.diags(op.weights).tocsc()
    scale = float(np.median(op.laplacian.diagonal() / op.weights))
    sigma = -1e-9 * scale
    try:
        vals = eigsh(op.laplacian, k=3, M=M, sigma=sigma, which="LM",
                     return_eigenvectors=False, tol=1e-12)
    except Exception as exc:  # ARPACK raises several types
        raise OracleError(f"eigensolver failed: {exc}") from exc
    vals = np.sort(vals)
    if abs(vals[0]) > 1e-6 * vals[1]:
        raise OracleError("zero mode not recovered; operator may be disconnected")
    return float(1.0 / vals[1])


def spectral_oracle(log_density, axes, richardson=True, order=2, return_levels=False):
    """Poincare constant of Langevin dynamics for a density on a grid.

    Solves on the given grid and on one refined by 2 per axis, then
    Richardson-extrapolates assuming error O(h^order).
    """
    coarse = grid_poincare(assemble_grid(log_density, axes, refine=1))
    if not richardson:
        return (coarse, [coarse]) if return_levels else coarse
    fine = grid_poincare(assemble_grid(log_density, axes, refine=2))
    k = 2.0 ** order
    value = (k * fine - coarse) / (k - 1.0)
    return (value, [coarse, fine]) if return_levels else value


def gaussian_target(sigma, n=200, width=8.0):
    """1D N(0, sigma^2): log-density and axis covering ``width`` standard deviations."""
    ld = lambda x: -0.5 * (x / sigma) ** 2
    return ld, [Axis(-width * sigma, width * sigma, n)]


def mixture_target(model, n=400, width=8.0):
    """1D mixture under plain Langevin."""
    if model.dim != 1:
        raise ValueError("grid oracle supports one spatial dimension")
    s = np.sqrt(model.lam_max)
    lo = float(model.means.min()) - width * s
    hi = float(model.means.max()) + width * s
    ld = lambda x: model.log_pdf(x.reshape(-1, 1)).reshape(x.shape)
    return ld, [Axis(lo, hi, n)]


def temperature_target(schedule, n=400):
    """The temperature law alone on [0, beta_max] (reflecting ends)."""
    ld = lambda b: -schedule.c / (1.0 + b)
    return ld, [Axis(0.0, schedule.beta_max, n, kind="uniform", truncated=False)]


def ctld_target(model, schedule, nx=240, nb=120, width=8.0):
    """Joint (x, beta) law r(beta) p^beta(x) for a 1D mixture.

    The x-axis is sinh-stretched (fine near the means, coarse in the wide tails
    of hot temperatures); the beta-axis is log-stretched toward beta = 0.
    """
    if model.dim != 1:
        raise ValueError("grid oracle supports one spatial dimension")
    lam = schedule.lam
    sig_hot = np.sqrt(model.lam_max + schedule.beta_max * lam)
    reach = float(np.max(np.abs(model.means))) + width * sig_hot
    mu = model.means[:, 0]
    w = model.weights
    s2 = model.lam_max

    def ld(x, b):
        var = s2 + b * lam
        comp = np.log(w)[:, None] - 0.5 * (x.ravel()[None, :] - mu[:, None]) ** 2 / var.ravel()[None, :]
        m = comp.max(axis=0)
        lp = m + np.log(np.exp(comp - m).sum(axis=0)) - 0.5 * np.log(2 * np.pi * var.ravel())
        return (lp - schedule.c / (1.0 + b.ravel())).reshape(x.shape)

    axes = [Axis(-reach, reach, nx, kind="sinh", center=0.0, scale=max(1.0, float(np.max(np.abs(mu))))),
            Axis(0.0, schedule.beta_max, nb, kind="log1p", scale=1.0, truncated=False)]
    return ld, axes


# --- finite-state decomposition check ---------------------------------------

@dataclass
class DiscreteMixture:
    """p = sum_j w_j p_j on a finite set, each p_j with a reversible generator.

    ``generators[j]`` is a rate matrix (rows sum to 0) reversible w.r.t. ``components[j]``.
    """

    weights: np.ndarray
    components: np.ndarray
    generators: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.components = np.atleast_2d(np.asarray(self.components, dtype=float))
        self.generators = np.asarray(self.generators, dtype=float).reshape(
            len(self.weights), self.components.shape[1], self.components.shape[1])
        if abs(self.weights.sum() - 1) > 1e-12 or np.any(self.weights <= 0):
            raise ValueError("weights must be positive and sum to 1")
        if not np.allclose(self.components.sum(axis=1), 1.0) or np.any(self.components <= 0):
            raise ValueError("components must be strictly positive distributions")
        for p, L in zip(self.components, self.generators):
            if not np.allclose(L.sum(axis=1), 0.0, atol=1e-12):
                raise ValueError("generator rows must sum to zero")
            F = p[:, None] * L
            if not np.allclose(F, F.T, atol=1e-12):
                raise ValueError("generator is not reversible w.r.t. its component")

    @property
    def p(self):
        return self.weights @ self.components

    def conductance(self):
        return np.einsum("j,jx,jxy->xy", self.weights, self.components, self.generators)


def metropolis_generator(p):
    """Nearest-neighbour Metropolis rates on a path, reversible w.r.t. p."""
    n = len(p)
    L = np.zeros((n, n))
    for x in range(n - 1):
        L[x, x + 1] = min(1.0, p[x + 1] / p[x])
        L[x + 1, x] = min(1.0, p[x] / p[x + 1])
    L[np.diag_indices(n)] = -L.sum(axis=1)
    return L


def discrete_gaussian_instance(n_states, centers, width, weights):
    """Discretized Gaussians on {0..n-1}, each with its own Metropolis generator."""
    s = np.arange(n_states)
    comps = np.array([np.exp(-0.5 * ((s - c) / width) ** 2) for c in centers])
    comps /= comps.sum(axis=1, keepdims=True)
    gens = np.array([metropolis_generator(c) for c in comps])
    return DiscreteMixture(np.asarray(weights, dtype=float), comps, gens)


def chisq_discrete(p, q):
    return float(np.sum((p - q) ** 2 / q))


def projected_generator(weights, components):
    """P(j, k) = w_k / max{chi2(p_j, p_k), chi2(p_k, p_j), 1} for j != k."""
    m = len(weights)
    P = np.zeros((m, m))
    for j in range(m):
        for k in range(m):
            if j != k:
                big = max(chisq_discrete(components[j], components[k]),
                          chisq_discrete(components[k], components[j]), 1.0)
                P[j, k] = weights[k] / big
    return P


@dataclass
class DecompositionReport:
    c_components: float
    c_projected: float
    bound: float
    c_exact: float
    violations: int
    trials: int
    min_slack: float
    adversarial_slack: float

    @property
    def passed(self):
        return self.violations == 0

    def to_dict(self):
        d = asdict(self)
        d["passed"] = self.passed
        return d


def decomposition_check(inst, trials, rng):
    """Test Var_p(g) <= C (1 + Cbar / 2) E(g, g) on random g and on the worst g."""
    w, comps = inst.weights, inst.components
    C = max(poincare_constant_discrete(pj[:, None] * Lj, pj) for pj, Lj in zip(comps, inst.generators))
    P = projected_generator(w, comps)
    Cbar = poincare_constant_discrete(w[:, None] * P, w)
    bound = C * (1.0 + Cbar / 2.0)
    p = inst.p
    Lm = dirichlet_matrix(inst.conductance())

    def ratio(g):
        var = p @ (g - p @ g) ** 2
        return var / (g @ Lm @ g)

    violations, slack = 0, np.inf
    for _ in range(trials):
        g = rng.standard_normal(len(p))
        rg = ratio(g)
        if rg > bound * (1 + 1e-12):
            violations += 1
        slack = min(slack, bound / rg)
    vals, vecs = linalg.eigh(Lm, np.diag(p))
    c_exact = 1.0 / vals[1]
    adv = bound / ratio(vecs[:, 1])
    if adv < 1 - 1e-12:
        violations += 1
    return DecompositionReport(C, Cbar, bound, float(c_exact), violations, trials,
                               float(slack), float(adv))
