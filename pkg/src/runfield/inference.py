"""Exact marginal inference for the linear-Gaussian runoff model.

Because the likelihood is Gaussian, the latent vector can be integrated
out in closed form; the hyperparameter posterior is exact up to its
normalizing constant. The objective is evaluated by marginalizing each
year's replicate block analytically in observation space (a handful of
small dense solves) so that only climate-field-sized sparse systems are
factorized per evaluation. The full posterior precision over the complete
latent vector is assembled once, at the optimum.

Hyperparameter uncertainty is summarized by a Laplace approximation in
log space; intervals are mapped back through the reporting transforms.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import Bounds, minimize

from .linalg import FactorizationError, SparseFactor
from .model import (PARAM_NAMES, GaussianSystem, Hyperparameters, ModelError,
                    ModelStructure)
from .priors import hyperprior_logpdf

LOG_2PI = math.log(2.0 * math.pi)

# log-space box constraints for the optimizer
LOG_RHO_BOUNDS = (math.log(1.0), math.log(1000.0))
LOG_SIGMA_BOUNDS = (math.log(0.01), math.log(10.0))
LOG_TAU_BOUNDS = (math.log(1e-4), math.log(1e6))
DEFAULT_BOUNDS = np.array([
    LOG_RHO_BOUNDS, LOG_SIGMA_BOUNDS, LOG_RHO_BOUNDS, LOG_SIGMA_BOUNDS,
    LOG_TAU_BOUNDS, LOG_TAU_BOUNDS, LOG_TAU_BOUNDS,
])


class InferenceError(RuntimeError):
    pass


def log_marginal_posterior(structure: ModelStructure, theta: Hyperparameters,
                           method: str = "collapsed") -> float:
    """Unnormalized log posterior density of theta with the latent field integrated out.

    Returns -inf (with a warning) if the precision assembly breaks down
    numerically at this theta.
    """
    try:
        log_prior = hyperprior_logpdf(theta, structure.prior_config)
    except (ValueError, OverflowError):
        return -np.inf
    try:
        if method == "collapsed":
            logml = _log_marginal_likelihood_collapsed(structure, theta)
        elif method == "full":
            logml = _log_marginal_likelihood_full(structure, theta)
        else:
            raise ValueError(f"unknown method {method!r}")
    except FactorizationError as exc:
        warnings.warn(f"factorization failed at theta={theta.natural_dict()}: {exc}")
        return -np.inf
    return log_prior + logml


def _log_marginal_likelihood_full(structure: ModelStructure,
                                  theta: Hyperparameters) -> float:
    """Direct evaluation on the complete latent system (small problems, tests)."""
    system = structure.system(theta)
    mu = system.prior_mean
    y = system.values
    d = system.noise_precision
    M = system.M

    logdet_prior = _logdet_prior(structure, theta)
    logdet_noise = float(np.sum(np.log(d)))
    Q_post = system.posterior_precision()
    post = SparseFactor(Q_post)
    b = system.Q_prior @ mu + M.T @ (d * y)
    mu_post = post.solve(b)
    quad = float(y @ (d * y) + mu @ (system.Q_prior @ mu) - b @ mu_post)
    n = system.n_obs
    return 0.5 * (logdet_prior + logdet_noise - post.logdet) - 0.5 * n * LOG_2PI - 0.5 * quad


def _logdet_prior(structure: ModelStructure, theta: Hyperparameters) -> float:
    """Block-wise log-determinant of the prior precision."""
    lay = structure.layout
    ld = -2.0 * math.log(structure.prior_config.beta_c.sd)
    ld += SparseFactor(structure.Q_c(theta)).logdet
    ld += lay.r * theta.log_tau_beta
    ld += lay.r * SparseFactor(structure.Q_x(theta)).logdet
    return ld


def _log_marginal_likelihood_collapsed(structure: ModelStructure,
                                       theta: Hyperparameters) -> float:
    """Marginal likelihood with per-year blocks eliminated in observation space.

    Year j's observations satisfy y_j = F_j u + F_j w_j + e_j with
    u = (beta_c, c) and w_j = (beta_j, x_j); marginalizing w_j gives a
    dense n_j x n_j covariance, after which the remaining Gaussian in u
    is handled with climate-sized sparse factorizations.
    """
    lay = structure.layout
    m = lay.m
    sd_bc = structure.prior_config.beta_c.sd
    mu_bc = structure.prior_config.beta_c.mean

    Qc = structure.Q_c(theta)
    Qx = structure.Q_x(theta)
    qc_factor = SparseFactor(Qc)
    qx_factor = SparseFactor(Qx)

    F = structure.F  # (n, 1+m), col 0 = intercept indicator
    P = F[:, 1:].tocsr()
    noise_var = structure.stacked.scales / np.where(
        structure.stacked.is_areal, theta.tau_z, theta.tau_y)

    # P Qx^-1 P^T for all observation pairs at once
    X = qx_factor.solve(np.asarray(P.T.todense()))
    S_all = P @ X
    inv_tau_beta = 1.0 / theta.tau_beta

    n_total = 0
    logdet_noise_marg = 0.0
    quad_y = 0.0
    rows_acc: list[np.ndarray] = []
    cols_acc: list[np.ndarray] = []
    vals_acc: list[np.ndarray] = []
    b_u = np.zeros(1 + m)
    b_u[0] = mu_bc / sd_bc ** 2

    y = structure.stacked.values
    for idx in structure.year_groups:
        if idx.size == 0:
            continue
        n_total += idx.size
        Sigma = S_all[np.ix_(idx, idx)] + inv_tau_beta
        Sigma[np.diag_indices_from(Sigma)] += noise_var[idx]
        try:
            chol = cho_factor(Sigma, lower=True)
        except np.linalg.LinAlgError as exc:
            raise FactorizationError(f"year covariance not SPD: {exc}") from exc
        logdet_noise_marg += 2.0 * float(np.sum(np.log(np.diag(chol[0]))))

        Fj = F[idx]
        support = np.unique(Fj.indices)
        Fd = np.asarray(Fj[:, support].todense())
        rhs = np.column_stack([Fd, y[idx]])
        sol = cho_solve(chol, rhs)
        W, alpha = sol[:, :-1], sol[:, -1]
        quad_y += float(y[idx] @ alpha)
        b_local = Fd.T @ alpha
        np.add.at(b_u, support, b_local)
        S_local = Fd.T @ W
        rr, cc = np.meshgrid(support, support, indexing="ij")
        rows_acc.append(rr.ravel())
        cols_acc.append(cc.ravel())
        vals_acc.append(S_local.ravel())

    if n_total == 0:
        raise InferenceError("no observations in any year group")

    S_u = sp.coo_matrix(
        (np.concatenate(vals_acc), (np.concatenate(rows_acc), np.concatenate(cols_acc))),
        shape=(1 + m, 1 + m)).tocsc()
    Q_u_prior = sp.block_diag(
        [sp.csc_matrix(np.array([[1.0 / sd_bc ** 2]])), Qc], format="csc")
    Q_u_post = (Q_u_prior + S_u).tocsc()
    post_factor = SparseFactor(Q_u_post)
    mu_u_post = post_factor.solve(b_u)

    logdet_u_prior = -2.0 * math.log(sd_bc) + qc_factor.logdet
    quad = quad_y + (mu_bc / sd_bc) ** 2 - float(b_u @ mu_u_post)
    return (-0.5 * n_total * LOG_2PI
            + 0.5 * (logdet_u_prior - post_factor.logdet - logdet_noise_marg)
            - 0.5 * quad)


@dataclass
class LatentFit:
    """MAP hyperparameters plus the exact Gaussian latent conditional at the MAP."""

    theta_map: Hyperparameters
    structure: ModelStructure
    Q_post: sp.csc_matrix
    mu_post: np.ndarray
    log_posterior: float
    converged: bool
    n_evaluations: int
    bound_hits: list[str] = field(default_factory=list)
    quantiles: dict | None = None
    hessian_ok: bool = False
    log_sd: dict[str, float] | None = None
    trace: list[float] = field(default_factory=list)
    _factor: SparseFactor | None = None
    _qx_factor: SparseFactor | None = None

    @property
    def factor(self) -> SparseFactor:
        if self._factor is None:
            self._factor = SparseFactor(self.Q_post)
        return self._factor

    @property
    def qx_factor(self) -> SparseFactor:
        """Factorized annual-field prior precision at the MAP (fresh-replicate variance)."""
        if self._qx_factor is None:
            self._qx_factor = SparseFactor(self.structure.Q_x(self.theta_map))
        return self._qx_factor

    def summary(self) -> dict:
        out = {
            "theta_map": self.theta_map.natural_dict(),
            "theta_map_log": {k: float(v) for k, v in
                              zip(PARAM_NAMES, self.theta_map.to_array())},
            "log_posterior": self.log_posterior,
            "converged": self.converged,
            "n_evaluations": self.n_evaluations,
            "bound_hits": list(self.bound_hits),
            "hessian_ok": self.hessian_ok,
            "n_observations": int(self.structure.n_obs),
            "design": self.structure.design,
            "log_posterior_trace": [float(v) for v in self.trace],
        }
        if self.quantiles is not None:
            out["quantiles"] = self.quantiles
        return out


def latent_functional(fit: LatentFit, a) -> tuple[float, float]:
    """Posterior mean and sd of the linear functional a of the latent vector."""
    if sp.issparse(a):
        a = np.asarray(a.todense()).ravel()
    else:
        a = np.asarray(a, dtype=float).ravel()
    if a.size != fit.mu_post.size:
        raise InferenceError(
            f"functional length {a.size} != latent dimension {fit.mu_post.size}")
    mean = float(a @ fit.mu_post)
    var = float(a @ fit.factor.solve(a))
    return mean, math.sqrt(max(var, 0.0))


def fit_map(structure: ModelStructure, theta0: Hyperparameters, *,
            xatol: float = 1e-4, fatol: float = 1e-7, maxiter: int = 2000,
            maxfev: int | None = None, compute_quantiles: bool = True,
            hessian_step: float = 1e-3) -> LatentFit:
    """Empirical-Bayes fit: maximize the exact marginal posterior over log theta.

    Derivative-free simplex search within box bounds; convergence when the
    simplex diameter falls below xatol in log space. The returned fit holds
    the exact Gaussian latent conditional at the MAP.
    """
    x0 = theta0.to_array()
    if not np.all(np.isfinite(x0)):
        raise ModelError("starting point must be finite")
    x0 = np.clip(x0, DEFAULT_BOUNDS[:, 0], DEFAULT_BOUNDS[:, 1])

    trace: list[float] = []

    def objective(arr: np.ndarray) -> float:
        value = log_marginal_posterior(structure, Hyperparameters.from_array(arr))
        trace.append(float(value))
        return -value

    f0 = objective(x0)
    if not np.isfinite(f0):
        raise InferenceError("log posterior is not finite at the starting point")

    options = {"xatol": xatol, "fatol": fatol, "maxiter": maxiter, "adaptive": True}
    if maxfev is not None:
        options["maxfev"] = maxfev
    res = minimize(objective, x0, method="Nelder-Mead",
                   bounds=Bounds(DEFAULT_BOUNDS[:, 0], DEFAULT_BOUNDS[:, 1]),
                   options=options)
    converged = bool(res.success)
    if not converged:
        warnings.warn(f"hyperparameter search did not converge: {res.message}")
    x_best, f_best = (res.x, res.fun) if res.fun <= f0 else (x0, f0)
    theta_map = Hyperparameters.from_array(x_best)

    bound_hits = [name for name, v, (lo, hi) in
                  zip(PARAM_NAMES, x_best, DEFAULT_BOUNDS)
                  if v <= lo + 1e-9 or v >= hi - 1e-9]
    if bound_hits:
        warnings.warn(f"MAP sits on optimizer bounds for {bound_hits}")

    system = structure.system(theta_map)
    Q_post = system.posterior_precision()
    factor = SparseFactor(Q_post)
    b = system.Q_prior @ system.prior_mean + system.M.T @ (
        system.noise_precision * system.values)
    mu_post = factor.solve(b)

    fit = LatentFit(
        theta_map=theta_map,
        structure=structure,
        Q_post=Q_post,
        mu_post=mu_post,
        log_posterior=-float(f_best),
        converged=converged,
        n_evaluations=int(len(trace)),
        bound_hits=bound_hits,
        trace=trace,
    )
    fit._factor = factor
    if compute_quantiles:
        attach_quantiles(fit, step=hessian_step)
    return fit


def _neg_log_posterior_hessian(structure: ModelStructure, x: np.ndarray,
                               step: float) -> np.ndarray:
    """Central finite-difference Hessian of -log posterior in log space."""
    k = x.size

    def f(arr):
        return -log_marginal_posterior(structure, Hyperparameters.from_array(arr))

    f0 = f(x)
    H = np.zeros((k, k))
    for i in range(k):
        ei = np.zeros(k)
        ei[i] = step
        H[i, i] = (f(x + ei) - 2.0 * f0 + f(x - ei)) / step ** 2
    for i in range(k):
        for j in range(i + 1, k):
            ei = np.zeros(k)
            ej = np.zeros(k)
            ei[i] = step
            ej[j] = step
            val = (f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej))
            H[i, j] = H[j, i] = val / (4.0 * step ** 2)
    return H


Z_975 = 1.959963984540054


def attach_quantiles(fit: LatentFit, step: float = 1e-3) -> None:
    """Laplace quantiles in log space, reported through the natural transforms.

    Ranges and sds are reported on their own scale; precisions are
    reported as standard deviations 1/sqrt(tau). A non-PD Hessian leaves
    the MAP-only table with hessian_ok = False.
    """
    x = fit.theta_map.to_array()
    H = _neg_log_posterior_hessian(fit.structure, x, step)
    try:
        cov = np.linalg.inv(H)
        sds = np.sqrt(np.diag(cov))
        if not np.all(np.isfinite(sds)):
            raise np.linalg.LinAlgError("non-finite Laplace sds")
        np.linalg.cholesky(H)
        hessian_ok = True
    except np.linalg.LinAlgError:
        warnings.warn("Laplace Hessian not positive definite; reporting MAP only")
        hessian_ok = False
        sds = np.full(x.size, np.nan)

    fit.hessian_ok = hessian_ok
    fit.log_sd = {name: float(s) for name, s in zip(PARAM_NAMES, sds)}
    table: dict[str, dict[str, float]] = {}
    for i, name in enumerate(PARAM_NAMES):
        med_log = x[i]
        if hessian_ok:
            lo_log, hi_log = med_log - Z_975 * sds[i], med_log + Z_975 * sds[i]
        else:
            lo_log = hi_log = med_log
        if name.startswith("tau"):
            # report the implied standard deviation 1 / sqrt(tau)
            vals = sorted((math.exp(-0.5 * lo_log), math.exp(-0.5 * hi_log)))
            table[f"sd_{name[4:]}"] = {
                "median": math.exp(-0.5 * med_log), "q025": vals[0], "q975": vals[1]}
        else:
            table[name] = {
                "median": math.exp(med_log),
                "q025": math.exp(lo_log), "q975": math.exp(hi_log)}
    # climatic intercept from the latent conditional
    a = np.zeros(fit.mu_post.size)
    a[fit.structure.layout.idx_beta_c] = 1.0
    mean, sd = latent_functional(fit, a)
    table["beta_c"] = {"median": mean, "q025": mean - Z_975 * sd,
                       "q975": mean + Z_975 * sd}
    fit.quantiles = table


def fit_at_fixed_theta(structure: ModelStructure, theta: Hyperparameters) -> LatentFit:
    """Latent conditional at a fixed theta, skipping the hyperparameter search."""
    system = structure.system(theta)
    Q_post = system.posterior_precision()
    factor = SparseFactor(Q_post)
    b = system.Q_prior @ system.prior_mean + system.M.T @ (
        system.noise_precision * system.values)
    mu_post = factor.solve(b)
    fit = LatentFit(theta_map=theta, structure=structure, Q_post=Q_post,
                    mu_post=mu_post,
                    log_posterior=log_marginal_posterior(structure, theta),
                    converged=True, n_evaluations=1)
    fit._factor = factor
    return fit
