"""Estimators, asymptotic covariances and the efficiency comparison.

Fits are over the component means with weights and covariance known.  The
sandwich covariance H^-1 Cov(grad l) H^-1 is estimated by Monte Carlo, with H
from central differences of the batch-mean analytic gradient (common random
numbers across the two sides of each difference).
"""

from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import losses
from .losses import heat_rate
from .temper import noise_channel, schedule_for


class FitError(RuntimeError):
    pass


class SandwichError(RuntimeError):
    pass


# --- permutation handling ----------------------------------------------

def match_permutation(means, reference):
    """Permutation of ``means`` rows closest (squared distance) to ``reference`` rows."""
    means = np.asarray(means, dtype=float)
    reference = np.asarray(reference, dtype=float)
    cost = np.sum((means[:, None, :] - reference[None, :, :]) ** 2, axis=-1)
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty(len(means), dtype=int)
    perm[cols] = rows
    return means[perm]


def permutation_error(means, truth):
    """min over relabelings of ||means - truth||."""
    return float(np.linalg.norm(match_permutation(means, truth) - np.asarray(truth)))


# --- fitting -------------------------------------------------------------

@dataclass
class FitResult:
    means: np.ndarray
    converged: bool
    n_iter: int
    trace: list = field(default_factory=list)

    @property
    def theta(self):
        return self.means.ravel()

    def to_dict(self):
        return {"means": self.means.tolist(), "converged": self.converged, "n_iter": self.n_iter,
                "trace": [list(map(float, t)) for t in self.trace]}


def fit_mle(x, init, template, tol=1e-8, max_iter=500):
    """EM for the means with weights and covariance fixed to ``template``'s."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    K, d = template.means.shape
    if len(x) < 10 * K * d:
        raise FitError(f"need at least {10 * K * d} points, got {len(x)}")
    init = np.asarray(init, dtype=float).reshape(K, d)
    mu = init.copy()
    trace = []
    converged = False
    for it in range(1, max_iter + 1):
        gamma = template.with_means(mu).responsibilities(x)
        tot = gamma.sum(axis=0)
        if np.any(tot < 1e-10):
            raise FitError("a component lost all responsibility")
        new = (gamma.T @ x) / tot[:, None]
        step = float(np.max(np.abs(new - mu)))
        mu = new
        trace.append((it, step))
        if step < tol:
            converged = True
            break
    return FitResult(match_permutation(mu, init), converged, it, trace)


def loss_function(kind, template, data, schedule=None):
    """theta -> (mean loss, mean gradient) for 'mle', 'sm' or 'gsm'."""
    def f(theta):
        m = template.with_means(theta)
        if kind == "gsm":
            return losses.empirical_loss(m, schedule, data)
        if kind == "sm":
            return losses.empirical_sm_loss(m, data)
        if kind == "mle":
            v, g = losses.nll_per_sample(m, data)
            return float(np.mean(v)), g.mean(axis=0)
        raise ValueError(f"unknown loss kind {kind!r}")
    return f


def gradient_descent(f, theta0, tol=1e-7, max_iter=2000, c1=1e-4):
    """Gradient descent with Barzilai-Borwein trial steps and Armijo backtracking."""
    theta = np.asarray(theta0, dtype=float).copy()
    val, g = f(theta)
    best = (val, theta.copy())
    trace = [(0, val, float(np.linalg.norm(g)))]
    step = 1.0
    prev = None
    for it in range(1, max_iter + 1):
        gn = float(np.linalg.norm(g))
        if gn < tol:
            return theta, True, it - 1, trace
        if prev is not None:
            s, y = theta - prev[0], g - prev[1]
            sy = float(s @ y)
            if sy > 0:
                step = float(s @ s) / sy
        for _ in range(60):
            cand = theta - step * g
            cv, cg = f(cand)
            if np.isfinite(cv) and cv <= val - c1 * step * gn * gn:
                break
            step *= 0.5
        else:
            trace.append((it, val, gn))
            return best[1], False, it, trace
        prev = (theta, g)
        theta, val, g = cand, cv, cg
        if val < best[0]:
            best = (val, theta.copy())
        trace.append((it, val, float(np.linalg.norm(g))))
    return best[1], float(np.linalg.norm(g)) < tol, max_iter, trace


def fit_loss(data, kind, init, template, schedule=None, tol=1e-7, max_iter=2000):
    """Minimize an empirical loss over the means.

    ``data`` is an (n, d) array for 'sm'/'mle' and a TemperedSample for 'gsm'.
    """
    init = np.asarray(init, dtype=float).reshape(template.means.shape)
    f = loss_function(kind, template, data, schedule)
    theta, ok, it, trace = gradient_descent(f, init.ravel(), tol, max_iter)
    means = match_permutation(theta.reshape(init.shape), init)
    return FitResult(means, ok, it, trace)


# --- Fisher information and sandwich -------------------------------------

@dataclass
class FisherResult:
    fisher: np.ndarray
    gamma: np.ndarray
    fisher_stderr: np.ndarray
    trace_stderr: float = float("nan")


def _batch_stderr(stack):
    stack = np.asarray(stack)
    return stack.std(axis=0, ddof=1) / np.sqrt(len(stack))


def fisher_information(model, mc, rng, schedule=None, n_batches=10):
    """Fisher information of the means and its inverse.

    With a schedule, uses the tempered joint family p(x | beta) r(beta) with
    (x, beta) drawn from the noise channel.
    """
    x = model.sample(rng, mc)
    if schedule is None:
        g = model.unrotate(model.terms(x).grad_log_density()).reshape(mc, -1)
    else:
        ts = noise_channel(x, schedule, rng)
        t = model.terms(ts.x, ev=model.tempered_eigvals(ts.beta, schedule.lam))
        g = model.unrotate(t.grad_log_density()).reshape(mc, -1)
    F = g.T @ g / mc
    if np.linalg.cond(F) > 1e14:
        raise SandwichError("Fisher information is singular (duplicate means?)")
    parts = np.array_split(np.arange(mc), n_batches)
    Fb = [g[p].T @ g[p] / len(p) for p in parts]
    tr = [np.trace(np.linalg.inv(f)) for f in Fb]
    return FisherResult(F, np.linalg.inv(F), _batch_stderr(Fb),
                        float(np.std(tr, ddof=1) / np.sqrt(n_batches)))


@dataclass
class SandwichCovariance:
    hessian: np.ndarray
    grad_cov: np.ndarray
    gamma: np.ndarray
    operator_norm: float
    trace: float
    mc_stderr: np.ndarray
    trace_stderr: float
    kind: str = ""

    def to_dict(self):
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in asdict(self).items()}


def draw_loss_data(kind, model, schedule, n, rng):
    x = model.sample(rng, n)
    if kind == "gsm":
        return noise_channel(x, schedule, rng)
    return x


def per_sample_grads(kind, model, data, schedule=None):
    return losses.per_sample(kind, model, data, schedule)[1]


def sandwich(model, kind, schedule, mc, rng, h=1e-4, n_batches=10, data=None, hessian="fd"):
    """Asymptotic covariance H^-1 Cov(grad l) H^-1 of the ``kind`` estimator at the truth.

    ``hessian='fd'`` differentiates the batch-mean gradient numerically.
    ``hessian='gauss_newton'`` uses the exact form of the population Hessian at
    the truth (E[M M'] with M the x- and beta-derivatives of grad_theta log p, or
    the Fisher information for 'mle'); it has no finite-difference noise floor,
    which matters when the loss is nearly flat in some direction.
    """
    if kind == "gsm" and schedule is None:
        schedule = schedule_for(model)
    if data is None:
        data = draw_loss_data(kind, model, schedule, mc, rng)
    theta = model.theta
    p = len(theta)
    G = per_sample_grads(kind, model, data, schedule)
    n = len(G)
    parts = np.array_split(np.arange(n), n_batches)
    Hb = np.zeros((n_batches, p, p))
    if hessian == "gauss_newton":
        M = _gauss_newton_factor(kind, model, data, schedule)
        for b, idx in enumerate(parts):
            Hb[b] = np.einsum("npa,nqa->pq", M[idx], M[idx]) / len(idx)
    elif hessian != "fd":
        raise ValueError(f"unknown hessian method {hessian!r}")
    # batch-mean gradient derivatives with common random numbers
    for j in range(p if hessian == "fd" else 0):
        e = np.zeros(p)
        e[j] = h
        gp = per_sample_grads(kind, model.with_means(theta + e), data, schedule)
        gm = per_sample_grads(kind, model.with_means(theta - e), data, schedule)
        diff = (gp - gm) / (2 * h)
        for b, idx in enumerate(parts):
            Hb[b, :, j] = diff[idx].mean(axis=0)
    Hb = 0.5 * (Hb + np.transpose(Hb, (0, 2, 1)))
    sizes = np.array([len(idx) for idx in parts], dtype=float)
    H = np.tensordot(sizes / n, Hb, axes=1)
    C = np.cov(G.T, ddof=1).reshape(p, p)
    evh = np.linalg.eigvalsh(H)
    if evh[0] <= 0:
        raise SandwichError(f"Hessian not positive definite (min eigenvalue {evh[0]:.3g})")
    Hi = np.linalg.inv(H)
    gamma = _psd(Hi @ C @ Hi)
    gb = []
    for b, idx in enumerate(parts):
        Cb = np.cov(G[idx].T, ddof=1).reshape(p, p)
        try:
            Hbi = np.linalg.inv(Hb[b])
        except np.linalg.LinAlgError:
            continue
        gb.append(Hbi @ Cb @ Hbi)
    gb = np.array(gb)
    se = _batch_stderr(gb) if len(gb) > 1 else np.full((p, p), np.nan)
    tr_se = float(np.std(np.trace(gb, axis1=1, axis2=2), ddof=1) / np.sqrt(len(gb))) if len(gb) > 1 else float("nan")
    return SandwichCovariance(H, C, gamma, float(np.linalg.norm(gamma, 2)), float(np.trace(gamma)),
                              se, tr_se, kind)


def _gauss_newton_factor(kind, model, data, schedule):
    """Per-sample factor M (n, p, m) with population Hessian E[M M'] at the truth."""
    if kind == "mle":
        t = model.terms(np.atleast_2d(data))
        return model.unrotate(t.grad_log_density()).reshape(len(data), -1)[..., None]
    if kind == "sm":
        t = model.terms(np.atleast_2d(data))
        J = np.einsum("ab,nkbc,dc->nkad", model.eigvecs, t.score_jacobian(), model.eigvecs)
        return np.transpose(J, (0, 1, 3, 2)).reshape(len(data), -1, model.dim)
    return parameter_derivative_fields(model, schedule, data)["op"]


def _psd(M):
    M = 0.5 * (M + M.T)
    w, V = np.linalg.eigh(M)
    if w[0] < 0:
        if w[0] < -1e-8 * max(1.0, abs(w[-1])):
            raise SandwichError(f"covariance not PSD (min eigenvalue {w[0]:.3g})")
        w = np.maximum(w, 0.0)
        M = (V * w) @ V.T
    return M


# --- smoothness and the Hessian-weighted variance bound ---------------------

@dataclass
class SmoothnessTerms:
    cov_operator_norm: float
    cov_operator_norm_stderr: float
    cov_weighted_norm: float
    cov_weighted_norm_stderr: float
    cov_laplacian_norm: float
    cov_laplacian_norm_stderr: float
    variance_bound_ok: bool
    dirichlet_matrix: np.ndarray = None

    def to_dict(self):
        d = asdict(self)
        d.pop("dirichlet_matrix")
        return d


def parameter_derivative_fields(model, schedule, ts):
    """Per-sample derivative fields of grad_theta log p(x | beta) at (x, beta).

    Returns a dict with
      'op'   : (n, Kd, d+1)  [grad_x, d_beta] of grad_theta log p
      'wt'   : (n, Kd)       op contracted with grad_{(x,beta)} log p(x, beta)
      'lap'  : (n, Kd)       (Lap_x + d_beta^2) grad_theta log p
    """
    c = heat_rate(schedule)
    t = model.terms(ts.x, ev=model.tempered_eigvals(ts.beta, schedule.lam), second=True)
    n = len(ts.beta)
    J = t.score_jacobian()  # [n, k, j(x), l(mu)]
    Q = model.eigvecs
    # grad_x grad_{mu_k,l} log p = J[n,k,j,l]; rotate both spatial indices back
    Jo = np.einsum("ab,nkbc,dc->nkad", Q, J, Q)  # [n, k, j, l] original basis
    Mx = np.transpose(Jo, (0, 1, 3, 2)).reshape(n, -1, model.dim)  # rows (k,l), cols j
    g_lap = t.grad_lap()
    mb = c * model.unrotate(g_lap).reshape(n, -1)
    op = np.concatenate([Mx, mb[..., None]], axis=2)
    score = model.unrotate(t.score)
    dbeta = schedule.r_grad_log(ts.beta) + c * t.lap
    wt = np.einsum("npj,nj->np", Mx, score) + mb * dbeta[:, None]
    lap_x = g_lap - 2.0 * t.grad_half_score_sq()
    lap_b = c * c * (t.grad_bilap() - 2.0 * t.lap[:, None, None] * g_lap)
    lap = model.unrotate(lap_x + lap_b).reshape(n, -1)
    return {"op": op, "wt": wt, "lap": lap}


def _cov_norm_batches(X, n_batches):
    X = X.reshape(len(X), -1)
    full = float(np.linalg.norm(np.atleast_2d(np.cov(X.T)), 2))
    parts = np.array_split(np.arange(len(X)), n_batches)
    norms, ok = [], True
    for p in parts:
        Cb = np.atleast_2d(np.cov(X[p].T))
        nb = float(np.linalg.norm(Cb, 2))
        norms.append(nb)
        ok &= nb <= 6.0 * float(np.mean(np.sum(X[p] ** 2, axis=1)))
    return full, float(np.std(norms, ddof=1) / np.sqrt(n_batches)), ok


def smoothness_terms(model, schedule, mc, rng, n_batches=10):
    """Operator norms of the covariances entering the smoothness bound."""
    ts = noise_channel(model.sample(rng, mc), schedule, rng)
    f = parameter_derivative_fields(model, schedule, ts)
    a, ase, ok1 = _cov_norm_batches(f["op"], n_batches)
    b, bse, ok2 = _cov_norm_batches(f["wt"], n_batches)
    c, cse, ok3 = _cov_norm_batches(f["lap"], n_batches)
    op = f["op"]
    dirichlet = np.einsum("npa,nqa->pq", op, op) / mc
    return SmoothnessTerms(a, ase, b, bse, c, cse, bool(ok1 and ok2 and ok3), dirichlet)


@dataclass
class PSDComparison:
    """min eigenvalue of H - F / C with H the GSM Hessian and F a Fisher information."""

    min_eig: float
    min_eig_stderr: float
    min_eig_data_fisher: float
    c_poincare: float

    @property
    def holds(self):
        return self.min_eig >= -3.0 * self.min_eig_stderr

    def to_dict(self):
        d = asdict(self)
        d["holds"] = bool(self.holds)
        return d


def hessian_fisher_comparison(model, schedule, c_poincare, mc, rng, n_batches=10):
    """Check grad^2 D_GSM >= F / C at the truth.

    H = E[M M'] is the Dirichlet form of grad_theta log p under the joint chain,
    and F the Fisher information of the tempered joint family; the Poincare
    inequality with constant C gives H >= F / C.  The same comparison against
    the clean-data Fisher information is reported alongside.
    """
    x = model.sample(rng, mc)
    ts = noise_channel(x, schedule, rng)
    M = parameter_derivative_fields(model, schedule, ts)["op"]
    t = model.terms(ts.x, ev=model.tempered_eigvals(ts.beta, schedule.lam))
    g = model.unrotate(t.grad_log_density()).reshape(mc, -1)
    g0 = model.unrotate(model.terms(x).grad_log_density()).reshape(mc, -1)

    def min_eig(idx):
        H = np.einsum("npa,nqa->pq", M[idx], M[idx]) / len(idx)
        F = g[idx].T @ g[idx] / len(idx)
        F0 = g0[idx].T @ g0[idx] / len(idx)
        return (float(np.linalg.eigvalsh(H - F / c_poincare)[0]),
                float(np.linalg.eigvalsh(H - F0 / c_poincare)[0]))

    full, full0 = min_eig(np.arange(mc))
    parts = [min_eig(p)[0] for p in np.array_split(np.arange(mc), n_batches)]
    se = float(np.std(parts, ddof=1) / np.sqrt(n_batches))
    return PSDComparison(full, se, full0, float(c_poincare))


@dataclass
class Theorem31Report:
    lhs: float
    rhs: float
    rhs_display_variant: float
    c_poincare: float
    gamma_mle_norm: float
    gamma_mle_joint_norm: float
    smoothness: dict
    psd: dict

    @property
    def bound_holds(self):
        return self.lhs <= self.rhs

    def to_dict(self):
        d = asdict(self)
        d["bound_holds"] = bool(self.bound_holds)
        return d


def theorem31_check(model, schedule, mc, rng, c_poincare=None, c_oracle=None, gsm=None):
    """Compare ||Gamma_GSM|| with 2 C^2 ||Gamma_MLE||^2 (smoothness terms).

    Gamma_MLE here is the inverse Fisher information of the tempered joint
    family, the one the Poincare inequality of the joint chain controls.  The
    Hessian comparison uses ``c_oracle`` when given, else ``c_poincare``.
    """
    from .poincare import total_bound
    if c_poincare is None:
        c_poincare = total_bound(model, schedule).c_total
    gsm = gsm or sandwich(model, "gsm", schedule, mc, rng)
    fj = fisher_information(model, mc, rng, schedule=schedule)
    fd = fisher_information(model, mc, rng)
    sm = smoothness_terms(model, schedule, mc, rng)
    gj = float(np.linalg.norm(fj.gamma, 2))
    rhs = 2.0 * c_poincare ** 2 * gj ** 2 * (sm.cov_weighted_norm + sm.cov_laplacian_norm)
    rhs_disp = 2.0 * c_poincare ** 2 * gj ** 2 * (sm.cov_operator_norm + sm.cov_laplacian_norm)
    psd = hessian_fisher_comparison(model, schedule, c_oracle if c_oracle is not None else c_poincare,
                                    mc, rng)
    return Theorem31Report(gsm.operator_norm, rhs, rhs_disp, c_poincare,
                           float(np.linalg.norm(fd.gamma, 2)), gj, sm.to_dict(), psd.to_dict())


# --- sweeps --------------------------------------------------------------

@dataclass
class EfficiencyRow:
    D: float
    K: int
    n: int
    ratio_sm: float
    ratio_sm_stderr: float
    ratio_gsm: float
    ratio_gsm_stderr: float
    cp_oracle: float
    cp_bound: float
    rhs_thm31: float
    beta_max: float
    seed: int
    error: str = ""
    replicas: int = 0
    n_fit: int = 0
    median_err_mle: float = float("nan")
    median_err_sm: float = float("nan")
    median_err_gsm: float = float("nan")

    def to_dict(self):
        return asdict(self)


def _ratio_se(num, num_se, den, den_se):
    r = num / den
    return r, float(abs(r) * np.hypot(num_se / num, den_se / den))


def replicated_errors(model, n, replicas, seed, schedule=None):
    """Median permutation-matched error of MLE, SM and GSM fits over ``replicas`` datasets.

    Each fit starts from the EM estimate, which itself starts from the truth.
    """
    schedule = schedule or schedule_for(model)
    errs = {"mle": [], "sm": [], "gsm": []}
    for ss in np.random.SeedSequence(seed).spawn(replicas):
        rng = np.random.default_rng(ss)
        x = model.sample(rng, n)
        mle = fit_mle(x, model.means, model)
        errs["mle"].append(permutation_error(mle.means, model.means))
        sm = fit_loss(x, "sm", mle.means, model)
        errs["sm"].append(permutation_error(sm.means, model.means))
        gsm = fit_loss(noise_channel(x, schedule, rng), "gsm", mle.means, model, schedule)
        errs["gsm"].append(permutation_error(gsm.means, model.means))
    return {k: float(np.median(v)) for k, v in errs.items()}


def efficiency_cell(model, mc, seed, with_oracle=True, with_bound=True, D=None, hessian="fd",
                    replicas=0, n_fit=None):
    """Sandwich efficiency ratios (and Poincare numbers) for one instance.

    With ``replicas`` > 0 also runs that many replicated fits on ``n_fit`` points.
    """
    from .poincare import total_bound, spectral_oracle, ctld_target
    ss = np.random.SeedSequence(seed)
    r_f, r_sm, r_gsm, r_thm, r_rep = [np.random.default_rng(s) for s in ss.spawn(5)]
    schedule = schedule_for(model)
    fish = fisher_information(model, mc, r_f)
    tr_mle, tr_se = float(np.trace(fish.gamma)), fish.trace_stderr
    sm = sandwich(model, "sm", schedule, mc, r_sm, hessian=hessian)
    gsm = sandwich(model, "gsm", schedule, mc, r_gsm, hessian=hessian)
    ratio_sm, sm_se = _ratio_se(sm.trace, sm.trace_stderr, tr_mle, tr_se)
    ratio_gsm, gsm_se = _ratio_se(gsm.trace, gsm.trace_stderr, tr_mle, tr_se)
    cp_oracle = float("nan")
    if with_oracle and model.dim == 1:
        ld, axes = ctld_target(model, schedule)
        cp_oracle = spectral_oracle(ld, axes)
    cp_bound = rhs = float("nan")
    if with_bound:
        cp_bound = total_bound(model, schedule).c_total
        rep = theorem31_check(model, schedule, max(mc // 4, 10_000), r_thm, c_poincare=cp_bound, gsm=gsm)
        rhs = rep.rhs
    D = float(np.ptp(model.means[:, 0])) if D is None else D
    row = EfficiencyRow(D, model.n_components, mc, ratio_sm, sm_se, ratio_gsm, gsm_se,
                        cp_oracle, cp_bound, rhs, schedule.beta_max, int(seed))
    if replicas:
        n_fit = int(n_fit or mc)
        med = replicated_errors(model, n_fit, replicas, int(r_rep.integers(2 ** 63)), schedule)
        row.replicas, row.n_fit = int(replicas), n_fit
        row.median_err_mle, row.median_err_sm, row.median_err_gsm = med["mle"], med["sm"], med["gsm"]
    return row


def cell_seeds(seed, n):
    """Independent per-cell seeds derived from one run seed."""
    return [int(c.generate_state(1)[0]) for c in np.random.SeedSequence(seed).spawn(n)]


def separation_sweep(D_grid, mc, seed, workers=1, sigma=1.0, with_oracle=True, with_bound=True,
                     hessian="fd"):
    """Efficiency rows for symmetric two-component mixtures with means at +-D/2."""
    from .mixture import symmetric_mixture
    tasks = [dict(model=symmetric_mixture(D, sigma), mc=mc, seed=cs, with_oracle=with_oracle,
                  with_bound=with_bound, D=float(D), hessian=hessian)
             for D, cs in zip(D_grid, cell_seeds(seed, len(D_grid)))]
    return run_cells(tasks, workers)


def k_sweep(K_grid, radius, mc, seed, workers=1, sigma=1.0, with_oracle=False, with_bound=False,
            hessian="gauss_newton"):
    """Efficiency rows for K equally spaced means on [-radius, radius]."""
    from .mixture import symmetric_mixture
    tasks = [dict(model=symmetric_mixture(2 * radius, sigma, n_components=K), mc=mc, seed=cs,
                  with_oracle=with_oracle, with_bound=with_bound, D=2.0 * radius, hessian=hessian)
             for K, cs in zip(K_grid, cell_seeds(seed, len(K_grid)))]
    return run_cells(tasks, workers)


def run_cell(task):
    """One sweep cell; failures become a flagged row instead of an exception."""
    try:
        return efficiency_cell(**task)
    except Exception as exc:  # recorded per cell; the sweep continues
        nan = float("nan")
        return EfficiencyRow(task["D"], task["model"].n_components, task["mc"], nan, nan, nan, nan,
                             nan, nan, nan, nan, task["seed"], error=f"{type(exc).__name__}: {exc}")


def run_cells(tasks, workers=1):
    if workers <= 1 or len(tasks) <= 1:
        return [run_cell(t) for t in tasks]
    from concurrent.futures import ProcessPoolExecutor
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(run_cell, tasks))
