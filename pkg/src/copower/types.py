"""Domain types for the multivariate mixed-model design problem.

Two equivalent parameterizations of the within-cluster dependence are
supported and inter-convertible:

* variance components: a between-cluster covariance ``sigma_phi`` and a
  residual covariance ``sigma_e`` (both K x K, positive definite);
* intraclass correlations: endpoint-specific ICCs ``rho0``, inter-subject
  between-endpoint ICCs ``rho1``, intra-subject ICCs ``rho2``, plus the
  marginal variances ``sigma_y2``.

The mapping is one-to-one:

    sigma_phi[k,k]   = rho0[k] * sigma_y2[k]
    sigma_e[k,k]     = (1 - rho0[k]) * sigma_y2[k]
    sigma_phi[k,k']  = rho1[k,k'] * sqrt(sigma_y2[k] * sigma_y2[k'])
    sigma_e[k,k']    = (rho2[k,k'] - rho1[k,k']) * sqrt(sigma_y2[k] * sigma_y2[k'])

with the degeneracies rho1[k,k] = rho0[k] and rho2[k,k] = 1.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import NotPositiveDefinite, ValidationError
from .matstat import is_positive_definite

MAX_ENDPOINTS = 16
PD_TOL = 1e-10


def _as_symmetric(a, name: str, k: int) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.shape != (k, k):
        raise ValidationError(f"{name} must be {k}x{k}, got shape {a.shape}")
    if not np.allclose(a, a.T, atol=1e-10 * max(1.0, np.abs(a).max())):
        raise ValidationError(f"{name} must be symmetric")
    return 0.5 * (a + a.T)


@dataclass(frozen=True)
class IccSet:
    """Intraclass-correlation parameterization of the dependence structure."""

    rho0: np.ndarray
    rho1: np.ndarray
    rho2: np.ndarray
    sigma_y2: np.ndarray

    def __post_init__(self):
        rho0 = np.atleast_1d(np.asarray(self.rho0, dtype=float))
        sigma_y2 = np.atleast_1d(np.asarray(self.sigma_y2, dtype=float))
        k = rho0.shape[0]
        if not 1 <= k <= MAX_ENDPOINTS:
            raise ValidationError(f"endpoint count must be in [1, {MAX_ENDPOINTS}]")
        if sigma_y2.shape != (k,):
            raise ValidationError("sigma_y2 must have one entry per endpoint")
        rho1 = _as_symmetric(self.rho1, "rho1", k)
        rho2 = _as_symmetric(self.rho2, "rho2", k)
        if np.any(rho0 < 0.0) or np.any(rho0 >= 1.0):
            raise ValidationError("rho0 entries must be in [0, 1)")
        if np.any(sigma_y2 <= 0.0):
            raise ValidationError("sigma_y2 entries must be > 0")
        if np.any(np.abs(rho1) > 1.0) or np.any(np.abs(rho2) > 1.0):
            raise ValidationError("ICC magnitudes must not exceed 1")
        if not np.allclose(np.diag(rho1), rho0, atol=1e-12):
            raise ValidationError("rho1 diagonal must equal rho0")
        if not np.allclose(np.diag(rho2), 1.0, atol=1e-12):
            raise ValidationError("rho2 diagonal must equal 1")
        object.__setattr__(self, "rho0", rho0)
        object.__setattr__(self, "rho1", rho1)
        object.__setattr__(self, "rho2", rho2)
        object.__setattr__(self, "sigma_y2", sigma_y2)
        self.rho0.setflags(write=False)
        self.rho1.setflags(write=False)
        self.rho2.setflags(write=False)
        self.sigma_y2.setflags(write=False)

    @property
    def k(self) -> int:
        return self.rho0.shape[0]

    def validate_definite(self) -> None:
        """Raise unless the implied variance components are PD."""
        icc_to_components(self)


@dataclass(frozen=True)
class VarianceComponents:
    """Between-cluster and residual covariance matrices."""

    sigma_phi: np.ndarray
    sigma_e: np.ndarray

    def __post_init__(self):
        sigma_phi = np.atleast_2d(np.asarray(self.sigma_phi, dtype=float))
        k = sigma_phi.shape[0]
        sigma_phi = _as_symmetric(sigma_phi, "sigma_phi", k)
        sigma_e = _as_symmetric(np.atleast_2d(self.sigma_e), "sigma_e", k)
        if not 1 <= k <= MAX_ENDPOINTS:
            raise ValidationError(f"endpoint count must be in [1, {MAX_ENDPOINTS}]")
        if not is_positive_definite(sigma_phi, PD_TOL):
            raise NotPositiveDefinite("sigma_phi is not positive definite")
        if not is_positive_definite(sigma_e, PD_TOL):
            raise NotPositiveDefinite("sigma_e is not positive definite")
        object.__setattr__(self, "sigma_phi", sigma_phi)
        object.__setattr__(self, "sigma_e", sigma_e)
        self.sigma_phi.setflags(write=False)
        self.sigma_e.setflags(write=False)

    @property
    def k(self) -> int:
        return self.sigma_phi.shape[0]

    @property
    def sigma_y2(self) -> np.ndarray:
        return np.diag(self.sigma_phi) + np.diag(self.sigma_e)


@dataclass(frozen=True)
class DesignSpec:
    """Design-stage quantities shared by all power computations."""

    n: int | None
    m_bar: float
    cv: float = 0.0
    z_bar: float = 0.5
    alpha: float = 0.05

    def __post_init__(self):
        if self.n is not None and self.n < 2:
            raise ValidationError("number of clusters must be >= 2")
        if self.m_bar < 1:
            raise ValidationError("mean cluster size must be >= 1")
        if self.cv < 0:
            raise ValidationError("cluster-size CV must be >= 0")
        if not 0.0 < self.z_bar < 1.0:
            raise ValidationError("allocation fraction must be in (0, 1)")
        if not 0.0 < self.alpha < 1.0:
            raise ValidationError("alpha must be in (0, 1)")

    @property
    def sigma_z2(self) -> float:
        """Allocation variance z_bar * (1 - z_bar); 1/4 under 1:1 allocation."""
        return self.z_bar * (1.0 - self.z_bar)


class TestKind(enum.Enum):
    OMNIBUS = "omnibus"
    HOMOGENEITY = "homogeneity"
    CUSTOM_GLH = "custom"
    INTERSECTION_UNION = "iu"


def successive_difference_contrast(k: int) -> np.ndarray:
    """(K-1) x K contrast of successive differences, e_k - e_{k+1}."""
    out = np.zeros((k - 1, k))
    for i in range(k - 1):
        out[i, i] = 1.0
        out[i, i + 1] = -1.0
    return out


@dataclass(frozen=True)
class TestSpec:
    """Which hypothesis is being powered.

    GLH kinds (omnibus, homogeneity, custom) carry a contrast matrix ``L``
    and an alternative ``delta = L @ beta``; the intersection-union test
    carries the per-endpoint effect vector ``beta`` directly.
    """

    kind: TestKind
    contrast: np.ndarray | None = None
    delta: np.ndarray | None = None
    beta: np.ndarray | None = None

    def __post_init__(self):
        if self.kind is TestKind.CUSTOM_GLH:
            if self.contrast is None:
                raise ValidationError("custom GLH test requires a contrast matrix")
            contrast = np.atleast_2d(np.asarray(self.contrast, dtype=float))
            if np.linalg.matrix_rank(contrast) < contrast.shape[0]:
                raise ValidationError("contrast rows must be linearly independent")
            object.__setattr__(self, "contrast", contrast)
        if self.kind is TestKind.INTERSECTION_UNION and self.beta is None and self.delta is None:
            raise ValidationError("intersection-union test requires an effect vector")
        if self.delta is not None:
            object.__setattr__(self, "delta", np.atleast_1d(np.asarray(self.delta, dtype=float)))
        if self.beta is not None:
            object.__setattr__(self, "beta", np.atleast_1d(np.asarray(self.beta, dtype=float)))

    @property
    def is_glh(self) -> bool:
        return self.kind is not TestKind.INTERSECTION_UNION

    def effective_contrast(self, k: int) -> np.ndarray:
        """Resolve the S x K contrast for a GLH kind."""
        if self.kind is TestKind.OMNIBUS:
            return np.eye(k)
        if self.kind is TestKind.HOMOGENEITY:
            if k < 2:
                raise ValidationError("homogeneity test needs at least two endpoints")
            return successive_difference_contrast(k)
        if self.kind is TestKind.CUSTOM_GLH:
            if self.contrast.shape[1] != k:
                raise ValidationError(
                    f"contrast has {self.contrast.shape[1]} columns, expected {k}"
                )
            return self.contrast
        raise ValidationError("intersection-union test has no contrast matrix")

    def effective_delta(self, k: int) -> np.ndarray:
        """Resolve the alternative L @ beta for a GLH kind."""
        contrast = self.effective_contrast(k)
        if self.delta is not None:
            delta = self.delta
        elif self.beta is not None:
            delta = contrast @ self.beta
        else:
            raise ValidationError("GLH test requires delta or beta")
        if delta.shape[0] != contrast.shape[0]:
            raise ValidationError(
                f"delta has length {delta.shape[0]}, expected {contrast.shape[0]}"
            )
        return delta

    def effect_vector(self, k: int) -> np.ndarray:
        if self.beta is None:
            raise ValidationError("test has no per-endpoint effect vector")
        if self.beta.shape[0] != k:
            raise ValidationError(f"beta has length {self.beta.shape[0]}, expected {k}")
        return self.beta


@dataclass(frozen=True)
class EffectModel:
    """Control-arm means and treatment effects per endpoint."""

    gamma: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        gamma = np.atleast_1d(np.asarray(self.gamma, dtype=float))
        beta = np.atleast_1d(np.asarray(self.beta, dtype=float))
        if gamma.shape != beta.shape:
            raise ValidationError("gamma and beta must have equal length")
        if not (np.all(np.isfinite(gamma)) and np.all(np.isfinite(beta))):
            raise ValidationError("effects must be finite")
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "beta", beta)

    @property
    def k(self) -> int:
        return self.beta.shape[0]


# ---------------------------------------------------------------------------
# Parameterization conversions
# ---------------------------------------------------------------------------

def icc_to_components(icc: IccSet) -> VarianceComponents:
    """Map an ICC set to variance-component matrices.

    Raises :class:`NotPositiveDefinite` if the ICC combination implies a
    non-PD matrix; invalid combinations are rejected, never projected.
    """
    sd = np.sqrt(icc.sigma_y2)
    outer = np.outer(sd, sd)
    sigma_phi = icc.rho1 * outer
    sigma_e = (icc.rho2 - icc.rho1) * outer
    np.fill_diagonal(sigma_phi, icc.rho0 * icc.sigma_y2)
    np.fill_diagonal(sigma_e, (1.0 - icc.rho0) * icc.sigma_y2)
    if not is_positive_definite(sigma_phi, PD_TOL):
        raise NotPositiveDefinite("implied sigma_phi is not positive definite")
    if not is_positive_definite(sigma_e, PD_TOL):
        raise NotPositiveDefinite("implied sigma_e is not positive definite")
    return VarianceComponents(sigma_phi=sigma_phi, sigma_e=sigma_e)


def components_to_icc(vc: VarianceComponents) -> IccSet:
    """Exact inverse of :func:`icc_to_components`."""
    sigma_y2 = vc.sigma_y2
    sd = np.sqrt(sigma_y2)
    outer = np.outer(sd, sd)
    rho0 = np.diag(vc.sigma_phi) / sigma_y2
    rho1 = vc.sigma_phi / outer
    rho2 = (vc.sigma_phi + vc.sigma_e) / outer
    np.fill_diagonal(rho1, rho0)
    np.fill_diagonal(rho2, 1.0)
    return IccSet(rho0=rho0, rho1=rho1, rho2=rho2, sigma_y2=sigma_y2)


def bex_expand(rho0: float, rho1: float, rho2: float, sigma_y2) -> IccSet:
    """Block-exchangeable ICC set: scalar ICCs shared across endpoints."""
    sigma_y2 = np.atleast_1d(np.asarray(sigma_y2, dtype=float))
    k = sigma_y2.shape[0]
    rho0_vec = np.full(k, float(rho0))
    rho1_mat = np.full((k, k), float(rho1))
    np.fill_diagonal(rho1_mat, rho0_vec)
    rho2_mat = np.full((k, k), float(rho2))
    np.fill_diagonal(rho2_mat, 1.0)
    return IccSet(rho0=rho0_vec, rho1=rho1_mat, rho2=rho2_mat, sigma_y2=sigma_y2)


def icc_set(rho0, rho1: float, rho2: float, sigma_y2) -> IccSet:
    """ICC set with per-endpoint rho0 but scalar between-endpoint ICCs."""
    rho0 = np.atleast_1d(np.asarray(rho0, dtype=float))
    k = rho0.shape[0]
    rho1_mat = np.full((k, k), float(rho1))
    np.fill_diagonal(rho1_mat, rho0)
    rho2_mat = np.full((k, k), float(rho2))
    np.fill_diagonal(rho2_mat, 1.0)
    return IccSet(rho0=rho0, rho1=rho1_mat, rho2=rho2_mat, sigma_y2=sigma_y2)


def sequence_rho0(kappa: float, upper: float, k: int) -> np.ndarray:
    """K equally spaced endpoint-specific ICCs from kappa to upper inclusive."""
    if not 0.0 < kappa <= upper < 1.0:
        raise ValidationError("require 0 < kappa <= upper < 1")
    if k < 1:
        raise ValidationError("k must be >= 1")
    if k == 1:
        return np.array([kappa])
    return np.linspace(kappa, upper, k)
