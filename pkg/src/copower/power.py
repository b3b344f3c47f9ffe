"""Analytic power and sample-size computation.

Joint distribution of the K treatment-effect estimators under the
multivariate mixed model:

* equal cluster sizes:     Omega = (Sigma_e + m * Sigma_phi) / (m * sigma_z2)
* unequal cluster sizes:   Omega is multiplied by the second-order correction
  matrix Theta = [I - CV^2 * {m Sphi (Se + m Sphi)^-1 Se (Se + m Sphi)^-1}]^-1.

Three test families are supported: general linear hypothesis F tests
(omnibus, homogeneity, custom contrast) via the noncentral F distribution,
and the one-sided intersection-union test via multivariate-t rectangle
probabilities.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

import numpy as np
from scipy import special

from . import matstat
from .errors import (
    DegenerateCorrection,
    InsufficientDf,
    NotPositiveDefinite,
    Unattainable,
    ValidationError,
)
from .matstat import (
    central_f_quantile,
    invert_spd,
    is_positive_definite,
    mvt_rectangle,
    noncentral_f_cdf,
    student_t_quantile,
)
from .types import (
    IccSet,
    TestKind,
    TestSpec,
    VarianceComponents,
    icc_to_components,
)

DEFAULT_CLUSTER_CEILING = 10_000
DEFAULT_SIZE_CEILING = 100_000


@dataclass(frozen=True)
class EffectDistribution:
    """Asymptotic covariance of sqrt(n) * (beta_hat - beta) and the implied
    correlation of the per-endpoint Wald statistics."""

    omega: np.ndarray

    @property
    def k(self) -> int:
        return self.omega.shape[0]

    @property
    def omega_diag(self) -> np.ndarray:
        return np.diag(self.omega)

    @property
    def wald_corr(self) -> np.ndarray:
        sd = np.sqrt(self.omega_diag)
        corr = self.omega / np.outer(sd, sd)
        np.fill_diagonal(corr, 1.0)
        return corr


@dataclass(frozen=True)
class PowerResult:
    power: float
    noncentrality: float | None = None
    df: tuple = ()
    critical_values: tuple = ()
    mc_error: float | None = None

    def to_dict(self) -> dict:
        return {
            "power": self.power,
            "noncentrality": self.noncentrality,
            "df": list(self.df),
            "critical_values": list(self.critical_values),
            "mc_error": self.mc_error,
        }


# ---------------------------------------------------------------------------
# Effect-estimator distribution
# ---------------------------------------------------------------------------

def omega_equal(vc: VarianceComponents, m: float, sigma_z2: float) -> EffectDistribution:
    """Covariance of the scaled effect estimators under equal cluster sizes."""
    if m < 1:
        raise ValidationError("cluster size must be >= 1")
    if sigma_z2 <= 0:
        raise ValidationError("allocation variance must be > 0")
    omega = (vc.sigma_e + m * vc.sigma_phi) / (m * sigma_z2)
    return EffectDistribution(omega=0.5 * (omega + omega.T))


def cluster_covariance_inverse(
    vc: VarianceComponents, m: int
) -> tuple[np.ndarray, np.ndarray]:
    """Blocks (A, B) of the structured inverse of the cluster covariance.

    The m-subject cluster covariance V = I_m (x) Sigma_e + J_m (x) Sigma_phi
    has inverse V^-1 = I_m (x) A + J_m (x) B with A = Sigma_e^-1 and
    B = [(Sigma_e + m Sigma_phi)^-1 - Sigma_e^-1] / m.
    """
    if m < 1:
        raise ValidationError("cluster size must be >= 1")
    a = invert_spd(vc.sigma_e)
    b = (invert_spd(vc.sigma_e + m * vc.sigma_phi) - a) / m
    return a, b


def correction_matrix(vc: VarianceComponents, m_bar: float, cv: float) -> np.ndarray:
    """Second-order correction matrix Theta for unequal cluster sizes."""
    if cv < 0:
        raise ValidationError("cv must be >= 0")
    k = vc.k
    if cv == 0.0:
        return np.eye(k)
    total = vc.sigma_e + m_bar * vc.sigma_phi
    total_inv = invert_spd(total)
    inner = m_bar * vc.sigma_phi @ total_inv @ vc.sigma_e @ total_inv
    bracket = np.eye(k) - cv * cv * inner
    bracket = 0.5 * (bracket + bracket.T)
    if not is_positive_definite(bracket, 1e-12):
        raise DegenerateCorrection(
            "correction bracket is singular or not PD; CV is outside the "
            "validity range of the second-order approximation"
        )
    theta = np.linalg.inv(bracket)
    return theta


def correction_factor(rho0: float, m_bar: float, cv: float) -> float:
    """Scalar variance-inflation factor for a single endpoint.

    theta = [1 - CV^2 * m rho0 (1 - rho0) / {1 + (m-1) rho0}^2]^-1, the
    familiar single-endpoint unequal-cluster-size correction.
    """
    denom = (1.0 + (m_bar - 1.0) * rho0) ** 2
    bracket = 1.0 - cv * cv * m_bar * rho0 * (1.0 - rho0) / denom
    if bracket <= 0:
        raise DegenerateCorrection("scalar correction bracket not positive")
    return 1.0 / bracket


def omega_unequal(
    vc: VarianceComponents,
    m_bar: float,
    cv: float,
    sigma_z2: float,
    *,
    correct_covariance: bool = False,
) -> EffectDistribution:
    """Covariance of the scaled effect estimators under variable cluster sizes.

    By default only the variances are inflated, by the diagonal of the
    correction matrix; the covariances keep their equal-size form evaluated
    at the mean cluster size (the design-stage convention).  With
    ``correct_covariance=True`` the full matrix product (base @ Theta,
    symmetrized) is returned instead.
    """
    base = omega_equal(vc, m_bar, sigma_z2).omega
    theta = correction_matrix(vc, m_bar, cv)
    corrected = 0.5 * (base @ theta + theta @ base)
    if correct_covariance:
        return EffectDistribution(omega=corrected)
    omega = base.copy()
    np.fill_diagonal(omega, np.diag(corrected))
    return EffectDistribution(omega=omega)


def effect_distribution(
    vc: VarianceComponents, m_bar: float, cv: float, sigma_z2: float
) -> EffectDistribution:
    """Dispatch between the equal- and unequal-size forms."""
    if cv == 0.0:
        return omega_equal(vc, m_bar, sigma_z2)
    return omega_unequal(vc, m_bar, cv, sigma_z2)


# ---------------------------------------------------------------------------
# Power for the three test families
# ---------------------------------------------------------------------------

def glh_power(
    dist: EffectDistribution, test: TestSpec, n: int, alpha: float
) -> PowerResult:
    """Power of the F test for a general linear hypothesis.

    The noncentrality is tau = n * delta' (L Omega L')^-1 delta and the
    statistic is compared against the central F(S, n-S-K) critical value.
    """
    if not test.is_glh:
        raise ValidationError("glh_power requires a GLH test kind")
    k = dist.k
    contrast = test.effective_contrast(k)
    delta = test.effective_delta(k)
    s = contrast.shape[0]
    df2 = n - s - k
    if df2 < 1:
        raise InsufficientDf(f"need n > S + K = {s + k}, got n = {n}")
    middle = contrast @ dist.omega @ contrast.T
    try:
        tau = float(n * delta @ matstat.solve_spd(middle, delta))
    except NotPositiveDefinite as exc:
        raise ValidationError(f"L Omega L' is not positive definite: {exc}") from exc
    crit = central_f_quantile(1.0 - alpha, s, df2)
    power = 1.0 - noncentral_f_cdf(crit, s, df2, tau)
    return PowerResult(
        power=power, noncentrality=tau, df=(s, df2), critical_values=(crit,)
    )


def iu_power(
    dist: EffectDistribution,
    beta: np.ndarray,
    n: int,
    alpha: float,
    *,
    df: float | None = "auto",
) -> PowerResult:
    """Power of the one-sided intersection-union test.

    Every endpoint's Wald statistic must clear the common critical value
    t_alpha(n - 2K); the joint rejection probability is a multivariate-t
    rectangle probability with shape equal to the Wald correlation matrix.
    Pass ``df=None`` for the multivariate-normal variant.
    """
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    k = dist.k
    if beta.shape != (k,):
        raise ValidationError(f"beta must have length {k}")
    nu = n - 2 * k
    if nu < 1:
        raise InsufficientDf(f"need n > 2K = {2 * k}, got n = {n}")
    df_use = nu if df == "auto" else df
    if df_use is None:
        crit = float(-special.ndtri(alpha))  # normal critical value
    else:
        crit = student_t_quantile(1.0 - alpha, df_use)
    eta = np.sqrt(n) * beta / np.sqrt(dist.omega_diag)
    lower = np.full(k, crit)
    prob, mc_error = mvt_rectangle(lower, eta, dist.wald_corr, df_use)
    return PowerResult(
        power=prob,
        df=(nu,),
        critical_values=tuple(lower),
        mc_error=mc_error,
    )


def power_for_test(
    vc: VarianceComponents,
    test: TestSpec,
    n: int,
    m_bar: float,
    cv: float,
    sigma_z2: float,
    alpha: float,
) -> PowerResult:
    dist = effect_distribution(vc, m_bar, cv, sigma_z2)
    if test.is_glh:
        return glh_power(dist, test, n, alpha)
    return iu_power(dist, test.effect_vector(vc.k), n, alpha)


# ---------------------------------------------------------------------------
# Sample-size solvers
# ---------------------------------------------------------------------------

def _df_floor(test: TestSpec, k: int) -> int:
    if test.is_glh:
        s = test.effective_contrast(k).shape[0]
        return s + k + 1
    return 2 * k + 1


def solve_clusters(
    vc: VarianceComponents,
    test: TestSpec,
    target_power: float,
    m_bar: float,
    cv: float,
    sigma_z2: float,
    alpha: float,
    *,
    step: int = 2,
    ceiling: int = DEFAULT_CLUSTER_CEILING,
) -> tuple[int, PowerResult]:
    """Smallest (even, by default) number of clusters reaching the target.

    Scans upward from the degrees-of-freedom floor; power is monotone in n
    for fixed other inputs, which is verified on the bracketing pair.
    """
    if not alpha < target_power < 1.0:
        raise ValidationError("target power must be in (alpha, 1)")
    k = vc.k
    n = _df_floor(test, k)
    if step == 2 and n % 2 == 1:
        n += 1
    prev_power = None
    while n <= ceiling:
        result = power_for_test(vc, test, n, m_bar, cv, sigma_z2, alpha)
        slack = 2.0 * result.mc_error if result.mc_error else 0.0
        if result.power >= target_power:
            if prev_power is not None and result.power + slack < prev_power - slack:
                raise Unattainable(
                    "power decreased while increasing the number of clusters; "
                    "monotonicity assumption violated"
                )
            return n, result
        prev_power = result.power
        n += step
    raise Unattainable(f"target power {target_power} not reached by n = {ceiling}")


def solve_cluster_size(
    vc: VarianceComponents,
    test: TestSpec,
    target_power: float,
    n: int,
    cv: float,
    sigma_z2: float,
    alpha: float,
    *,
    ceiling: int = DEFAULT_SIZE_CEILING,
) -> tuple[int, PowerResult]:
    """Smallest integer mean cluster size reaching the target power at fixed n.

    Power plateaus as m grows (the endpoint-specific ICC floor), so an
    unattainable target is detected against the m -> infinity limit.
    """
    if not alpha < target_power < 1.0:
        raise ValidationError("target power must be in (alpha, 1)")
    k = vc.k
    if n < _df_floor(test, k):
        raise InsufficientDf(f"n = {n} leaves no residual degrees of freedom")

    # Limiting distribution: Omega -> Sigma_phi / sigma_z2 as m -> infinity
    # (the correction matrix also tends to identity in that limit).
    limit_dist = EffectDistribution(omega=vc.sigma_phi / sigma_z2)
    if test.is_glh:
        limit = glh_power(limit_dist, test, n, alpha).power
    else:
        limit = iu_power(limit_dist, test.effect_vector(k), n, alpha).power
    if limit < target_power:
        raise Unattainable(
            f"target power {target_power} exceeds the large-cluster limit {limit:.4f}"
        )

    m = 1
    while m <= ceiling:
        result = power_for_test(vc, test, n, m, cv, sigma_z2, alpha)
        if result.power >= target_power:
            return m, result
        m += 1
    raise Unattainable(f"target power {target_power} not reached by m = {ceiling}")


# ---------------------------------------------------------------------------
# Power grids
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GridCell:
    rho0_first: float
    rho1_ratio: float
    rho2: float
    feasible: bool
    power: float | None
    mc_error: float | None


def power_grid(
    *,
    rho0_first_values,
    rho1_ratio_values,
    rho2_values,
    rho0_scale,
    sigma_y2,
    beta,
    test: TestSpec,
    n: int,
    m_bar: float,
    cv: float,
    sigma_z2: float,
    alpha: float,
) -> list[GridCell]:
    """Evaluate power on a rectangular ICC grid.

    Axes: the first endpoint's ICC rho0[0]; the ratio rho1 / rho0[0]; and
    the intra-subject ICC rho2.  The remaining endpoint-specific ICCs are
    rho0[0] * rho0_scale.  Infeasible ICC combinations (non-PD implied
    variance components) are flagged per cell, not fatal.
    """
    sigma_y2 = np.atleast_1d(np.asarray(sigma_y2, dtype=float))
    rho0_scale = np.atleast_1d(np.asarray(rho0_scale, dtype=float))
    k = sigma_y2.shape[0]
    if rho0_scale.shape != (k,):
        raise ValidationError("rho0_scale must have one entry per endpoint")
    cells = []
    for rho2 in rho2_values:
        for rho0_first in rho0_first_values:
            for ratio in rho1_ratio_values:
                rho0 = rho0_first * rho0_scale
                rho1 = ratio * rho0_first
                rho1_mat = np.full((k, k), rho1)
                np.fill_diagonal(rho1_mat, rho0)
                rho2_mat = np.full((k, k), rho2)
                np.fill_diagonal(rho2_mat, 1.0)
                try:
                    icc = IccSet(rho0=rho0, rho1=rho1_mat, rho2=rho2_mat, sigma_y2=sigma_y2)
                    vc = icc_to_components(icc)
                    cell_test = TestSpec(kind=test.kind, contrast=test.contrast, beta=np.asarray(beta, dtype=float))
                    result = power_for_test(vc, cell_test, n, m_bar, cv, sigma_z2, alpha)
                    cells.append(
                        GridCell(rho0_first, ratio, rho2, True, result.power, result.mc_error)
                    )
                except (NotPositiveDefinite, ValidationError, DegenerateCorrection):
                    cells.append(GridCell(rho0_first, ratio, rho2, False, None, None))
    return cells


def grid_to_csv(cells: list[GridCell]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["rho0_1", "rho1_ratio", "rho2", "feasible", "power", "mc_error"])
    for c in cells:
        writer.writerow(
            [
                c.rho0_first,
                c.rho1_ratio,
                c.rho2,
                int(c.feasible),
                "" if c.power is None else f"{c.power:.6f}",
                "" if c.mc_error is None else f"{c.mc_error:.2e}",
            ]
        )
    return buf.getvalue()


def result_to_json(result: PowerResult, extra: dict | None = None) -> str:
    payload = result.to_dict()
    if extra:
        payload.update(extra)
    return json.dumps(payload, indent=2)
