"""Maximum-likelihood estimation of the multivariate mixed model by EM.

The cluster random intercepts are treated as missing data.  Writing
G_i = (Sigma_e + m_i * Sigma_phi)^-1 and r_ij for the fixed-effect
residuals, one EM sweep is:

  E-step:  phi_hat_i = m_i * Sigma_phi @ G_i @ rbar_i
           V_i       = Sigma_phi - m_i * Sigma_phi @ G_i @ Sigma_phi
  M-step:  Sigma_phi <- (1/n) sum_i (phi_hat_i phi_hat_i' + V_i)
           Sigma_e   <- (1/N) sum_i [ sum_j (r_ij - phi_hat_i)(...)' + m_i V_i ]
  GLS:     theta = (gamma_tilde, beta) re-solved at the new components,
           which maximizes the observed likelihood in theta directly.

Both half-steps increase the observed log likelihood, so the iteration is
monotone.  Standard errors come from the central-difference Hessian of the
log likelihood in an unconstrained (Cholesky-log) parameterization.

The log likelihood never materializes the per-cluster covariance densely:

  log det V_i = (m_i - 1) log det Sigma_e + log det(Sigma_e + m_i Sigma_phi)
  r' V_i^-1 r = sum_j r_ij' Sigma_e^-1 r_ij
                + m_i rbar_i' (G_i - Sigma_e^-1) rbar_i.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateData,
    InsufficientDf,
    NotPositiveDefinite,
    SingularInformation,
)
from .matstat import central_f_quantile, cholesky, student_t_quantile
from .types import TestSpec

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 5000
_PSD_FLOOR = 1e-8

_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class ClusterStats:
    """Per-cluster sufficient statistics: size, centered arm code, mean
    outcome vector and raw second-moment matrix."""

    sizes: np.ndarray        # (n,)
    centered_arm: np.ndarray  # (n,), z_i - z_bar
    ybar: np.ndarray         # (n, K)
    yy: np.ndarray           # (n, K, K), sum_j y_ij y_ij'

    @property
    def n(self) -> int:
        return self.sizes.shape[0]

    @property
    def k(self) -> int:
        return self.ybar.shape[1]

    @property
    def total(self) -> int:
        return int(self.sizes.sum())


def cluster_stats(sizes, arms, y, cluster_of_subject) -> ClusterStats:
    """Reduce subject-level data to per-cluster sufficient statistics."""
    sizes = np.asarray(sizes, dtype=float)
    arms = np.asarray(arms, dtype=float)
    y = np.asarray(y, dtype=float)
    cluster_of_subject = np.asarray(cluster_of_subject)
    n = sizes.shape[0]
    k = y.shape[1]
    ybar = np.zeros((n, k))
    yy = np.zeros((n, k, k))
    for i in range(n):
        yi = y[cluster_of_subject == i]
        if yi.shape[0] != int(sizes[i]):
            raise DegenerateData(f"cluster {i}: size {sizes[i]} but {yi.shape[0]} rows")
        ybar[i] = yi.mean(axis=0)
        yy[i] = yi.T @ yi
    z_bar = arms.mean()
    return ClusterStats(
        sizes=sizes, centered_arm=arms - z_bar, ybar=ybar, yy=yy
    )


@dataclass
class FitResult:
    theta_hat: np.ndarray          # (2K,): gamma_tilde then beta
    sigma_phi_hat: np.ndarray
    sigma_e_hat: np.ndarray
    se_beta: np.ndarray | None
    cov_theta: np.ndarray | None   # (2K, 2K) from the observed information
    loglik: float
    iterations: int
    converged: bool
    min_ascent: float              # most negative per-iteration loglik change
    n_clusters: int
    k: int
    flags: list = field(default_factory=list)

    @property
    def gamma_tilde_hat(self) -> np.ndarray:
        return self.theta_hat[: self.k]

    @property
    def beta_hat(self) -> np.ndarray:
        return self.theta_hat[self.k :]

    @property
    def wald(self) -> np.ndarray:
        """Per-endpoint Wald statistics beta_hat_k / se(beta_hat_k)."""
        if self.se_beta is None:
            raise SingularInformation("standard errors unavailable")
        return self.beta_hat / self.se_beta

    def to_dict(self) -> dict:
        return {
            "gamma_tilde": self.gamma_tilde_hat.tolist(),
            "beta": self.beta_hat.tolist(),
            "sigma_phi": self.sigma_phi_hat.tolist(),
            "sigma_e": self.sigma_e_hat.tolist(),
            "se_beta": None if self.se_beta is None else self.se_beta.tolist(),
            "loglik": self.loglik,
            "iterations": self.iterations,
            "converged": self.converged,
            "n_clusters": self.n_clusters,
            "k": self.k,
            "flags": self.flags,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


# ---------------------------------------------------------------------------
# Log likelihood
# ---------------------------------------------------------------------------

def _residual_moments(stats: ClusterStats, theta: np.ndarray):
    """Per-cluster residual means and scatter sums for fixed effects theta."""
    k = stats.k
    gamma = theta[:k]
    beta = theta[k:]
    a = gamma[None, :] + stats.centered_arm[:, None] * beta[None, :]  # (n, K)
    rbar = stats.ybar - a
    # sum_j r_ij r_ij' = yy - m (a ybar' + ybar a') + m a a'
    m = stats.sizes[:, None, None]
    cross = a[:, :, None] * stats.ybar[:, None, :]
    rr = stats.yy - m * (cross + cross.transpose(0, 2, 1)) + m * (
        a[:, :, None] * a[:, None, :]
    )
    return rbar, rr


def loglik(
    stats: ClusterStats,
    theta: np.ndarray,
    sigma_phi: np.ndarray,
    sigma_e: np.ndarray,
) -> float:
    """Gaussian log likelihood of the fitted model, including constants."""
    k = stats.k
    try:
        chol_e = cholesky(sigma_e)
    except NotPositiveDefinite:
        raise
    logdet_e = 2.0 * float(np.log(np.diag(chol_e)).sum())
    e_inv = np.linalg.inv(sigma_e)

    rbar, rr = _residual_moments(stats, theta)
    total = -0.5 * stats.total * k * _LOG_2PI
    for m in np.unique(stats.sizes):
        idx = np.where(stats.sizes == m)[0]
        a_m = sigma_e + m * sigma_phi
        chol_m = cholesky(a_m)
        logdet_m = 2.0 * float(np.log(np.diag(chol_m)).sum())
        g = np.linalg.inv(a_m)
        quad_e = np.einsum("nij,ji->n", rr[idx], e_inv)
        rb = rbar[idx]
        quad_bar = m * np.einsum("ni,ij,nj->n", rb, g - e_inv, rb)
        total += -0.5 * (
            idx.size * ((m - 1.0) * logdet_e + logdet_m) + quad_e.sum() + quad_bar.sum()
        )
    return float(total)


# ---------------------------------------------------------------------------
# EM iteration
# ---------------------------------------------------------------------------

def _gls_theta(stats: ClusterStats, sigma_phi: np.ndarray, sigma_e: np.ndarray):
    """GLS estimate of (gamma_tilde, beta) at fixed variance components.

    The information is block-structured: with G_i = (Sigma_e + m_i S_phi)^-1,
    the 2K x 2K system is [[sum m G, sum c m G], [sum c m G, sum c^2 m G]].
    Returns (theta, info) where info is the 2K x 2K GLS information.
    """
    k = stats.k
    a00 = np.zeros((k, k))
    a01 = np.zeros((k, k))
    a11 = np.zeros((k, k))
    b0 = np.zeros(k)
    b1 = np.zeros(k)
    for m in np.unique(stats.sizes):
        idx = np.where(stats.sizes == m)[0]
        g = np.linalg.inv(sigma_e + m * sigma_phi)
        c = stats.centered_arm[idx]
        yb = stats.ybar[idx]
        a00 += idx.size * m * g
        a01 += c.sum() * m * g
        a11 += (c ** 2).sum() * m * g
        b0 += m * (g @ yb.sum(axis=0))
        b1 += m * (g @ (c[:, None] * yb).sum(axis=0))
    info = np.block([[a00, a01], [a01, a11]])
    rhs = np.concatenate([b0, b1])
    theta = np.linalg.solve(info, rhs)
    return theta, info


def _psd_floor(a: np.ndarray, floor: float = _PSD_FLOOR) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (a + a.T))
    w = np.maximum(w, floor)
    return v @ np.diag(w) @ v.T


def _initial_components(stats: ClusterStats):
    """Moment-based starting values: pooled within-cluster covariance for the
    residual matrix; between-cluster covariance of cluster means minus its
    sampling part for the intercept matrix, floored to PSD."""
    k = stats.k
    theta, _ = _gls_theta(
        stats, np.eye(k), np.eye(k)
    )  # identity-weighted start = per-arm least squares
    rbar, rr = _residual_moments(stats, theta)
    m = stats.sizes
    # within-cluster scatter: sum_j r r' - m rbar rbar'
    within = rr - m[:, None, None] * (rbar[:, :, None] * rbar[:, None, :])
    denom = max(stats.total - stats.n, 1)
    sigma_e = within.sum(axis=0) / denom
    sigma_e = _psd_floor(sigma_e, 1e-6)
    between = (rbar[:, :, None] * rbar[:, None, :]).mean(axis=0)
    sigma_phi = _psd_floor(between - sigma_e / m.mean(), _PSD_FLOOR)
    return theta, sigma_phi, sigma_e


def em_fit(
    stats: ClusterStats,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    init: tuple | None = None,
    compute_se: bool = True,
) -> FitResult:
    """Fit the model by monotone EM over the cluster random intercepts."""
    if stats.n < 2:
        raise DegenerateData("need at least 2 clusters")
    arms = stats.centered_arm
    if np.all(arms <= 0) or np.all(arms >= 0):
        raise DegenerateData("both arms must be present")
    flags = []
    if stats.k == 1 and np.all(stats.sizes == 1):
        flags.append("sigma_phi unidentifiable: all clusters are singletons")

    if init is None:
        theta, sigma_phi, sigma_e = _initial_components(stats)
    else:
        theta, sigma_phi, sigma_e = init
        theta = np.asarray(theta, dtype=float)
        sigma_phi = np.asarray(sigma_phi, dtype=float)
        sigma_e = np.asarray(sigma_e, dtype=float)

    n = stats.n
    total = stats.total
    ll = loglik(stats, theta, sigma_phi, sigma_e)
    min_ascent = np.inf
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        rbar, rr = _residual_moments(stats, theta)
        phi_acc = np.zeros_like(sigma_phi)
        e_acc = np.zeros_like(sigma_e)
        for m in np.unique(stats.sizes):
            idx = np.where(stats.sizes == m)[0]
            g = np.linalg.inv(sigma_e + m * sigma_phi)
            gain = m * sigma_phi @ g                      # E[phi | y] = gain @ rbar
            v = sigma_phi - gain @ sigma_phi              # conditional covariance
            v = 0.5 * (v + v.T)
            phi_hat = rbar[idx] @ gain.T                  # (n_m, K)
            outer_phi = np.einsum("ni,nj->ij", phi_hat, phi_hat)
            phi_acc += outer_phi + idx.size * v
            cross = np.einsum("ni,nj->ij", phi_hat, rbar[idx])
            e_acc += (
                rr[idx].sum(axis=0)
                - m * (cross + cross.T)
                + m * outer_phi
                + m * idx.size * v
            )
        sigma_phi = 0.5 * (phi_acc + phi_acc.T) / n
        sigma_e = 0.5 * (e_acc + e_acc.T) / total
        theta, _ = _gls_theta(stats, sigma_phi, sigma_e)
        ll_new = loglik(stats, theta, sigma_phi, sigma_e)
        min_ascent = min(min_ascent, ll_new - ll)
        if abs(ll_new - ll) < tol * (abs(ll) + 1.0):
            ll = ll_new
            converged = True
            break
        ll = ll_new

    fit = FitResult(
        theta_hat=theta,
        sigma_phi_hat=sigma_phi,
        sigma_e_hat=sigma_e,
        se_beta=None,
        cov_theta=None,
        loglik=ll,
        iterations=iterations,
        converged=converged,
        min_ascent=float(min_ascent),
        n_clusters=n,
        k=stats.k,
        flags=flags,
    )
    if compute_se:
        standard_errors(fit, stats)
    return fit


# ---------------------------------------------------------------------------
# Standard errors from the numerically differentiated log likelihood
# ---------------------------------------------------------------------------

def _pack(theta, sigma_phi, sigma_e) -> np.ndarray:
    """Unconstrained parameter vector: theta, then Cholesky factors of the
    two covariance matrices with log-transformed diagonals."""
    parts = [np.asarray(theta, dtype=float)]
    for mat in (sigma_phi, sigma_e):
        chol = np.linalg.cholesky(_psd_floor(mat, _PSD_FLOOR))
        k = chol.shape[0]
        vals = []
        for i in range(k):
            for j in range(i + 1):
                vals.append(np.log(chol[i, j]) if i == j else chol[i, j])
        parts.append(np.array(vals))
    return np.concatenate(parts)


def _unpack(params: np.ndarray, k: int):
    theta = params[: 2 * k]
    ntri = k * (k + 1) // 2
    mats = []
    pos = 2 * k
    for _ in range(2):
        chol = np.zeros((k, k))
        vals = params[pos : pos + ntri]
        pos += ntri
        idx = 0
        for i in range(k):
            for j in range(i + 1):
                chol[i, j] = np.exp(vals[idx]) if i == j else vals[idx]
                idx += 1
        mats.append(chol @ chol.T)
    return theta, mats[0], mats[1]


def _neg_hessian(fun, x0: np.ndarray) -> np.ndarray:
    """Central-difference Hessian of -fun at x0."""
    p = x0.shape[0]
    h = 1e-4 * np.maximum(1.0, np.abs(x0))
    hess = np.zeros((p, p))
    f0 = fun(x0)
    for i in range(p):
        ei = np.zeros(p)
        ei[i] = h[i]
        fpp = fun(x0 + ei)
        fmm = fun(x0 - ei)
        hess[i, i] = (fpp - 2.0 * f0 + fmm) / (h[i] * h[i])
        for j in range(i):
            ej = np.zeros(p)
            ej[j] = h[j]
            fa = fun(x0 + ei + ej)
            fb = fun(x0 + ei - ej)
            fc = fun(x0 - ei + ej)
            fd = fun(x0 - ei - ej)
            hess[i, j] = hess[j, i] = (fa - fb - fc + fd) / (4.0 * h[i] * h[j])
    return -hess


def standard_errors(fit: FitResult, stats: ClusterStats) -> np.ndarray:
    """Fill se_beta / cov_theta on ``fit`` from the observed information.

    The Hessian is taken in the unconstrained parameterization; the fixed
    effects enter untransformed there, so their covariance block maps back
    directly.  Raises :class:`SingularInformation` when the information
    matrix cannot be inverted.
    """
    k = fit.k
    x0 = _pack(fit.theta_hat, fit.sigma_phi_hat, fit.sigma_e_hat)

    def objective(x):
        theta, s_phi, s_e = _unpack(x, k)
        try:
            return loglik(stats, theta, s_phi, s_e)
        except NotPositiveDefinite:
            return -1e12

    info = _neg_hessian(objective, x0)
    try:
        cov = np.linalg.inv(info)
    except np.linalg.LinAlgError as exc:
        raise SingularInformation(str(exc)) from exc
    diag = np.diag(cov)[: 2 * k]
    if np.any(diag <= 0):
        raise SingularInformation("information matrix is not positive definite")
    fit.cov_theta = cov[: 2 * k, : 2 * k]
    fit.se_beta = np.sqrt(diag[k : 2 * k])
    return fit.se_beta


# ---------------------------------------------------------------------------
# Test decisions from a fit
# ---------------------------------------------------------------------------

def wald_iu_decision(fit: FitResult, alpha: float):
    """One-sided intersection-union decision: reject only if every
    endpoint's Wald statistic clears t_alpha(n - 2K)."""
    n = fit.n_clusters
    k = fit.k
    nu = n - 2 * k
    if nu < 1:
        raise InsufficientDf(f"need n > 2K = {2 * k}, got n = {n}")
    crit = student_t_quantile(1.0 - alpha, nu)
    zeta = fit.wald
    per_endpoint = zeta > crit
    return per_endpoint, bool(per_endpoint.all())


def wald_glh_decision(fit: FitResult, test: TestSpec, alpha: float):
    """F-test decision for a general linear hypothesis on the fitted model.

    Uses Omega_hat = n * cov(beta_hat) from the observed information.
    Returns (F statistic, decision).
    """
    n = fit.n_clusters
    k = fit.k
    contrast = test.effective_contrast(k)
    s = contrast.shape[0]
    df2 = n - s - k
    if df2 < 1:
        raise InsufficientDf(f"need n > S + K = {s + k}, got n = {n}")
    if fit.cov_theta is None:
        raise SingularInformation("covariance of the estimates unavailable")
    cov_beta = fit.cov_theta[k:, k:]
    lb = contrast @ fit.beta_hat
    middle = contrast @ cov_beta @ contrast.T
    fstat = float(lb @ np.linalg.solve(middle, lb) / s)
    crit = central_f_quantile(1.0 - alpha, s, df2)
    return fstat, bool(fstat > crit)
