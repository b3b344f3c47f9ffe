"""Numerical kernels: small dense SPD algebra, distribution functions, and
multivariate-t rectangle probabilities.

The rectangle-probability routine implements separation-of-variables
randomized quasi Monte Carlo (Cholesky of the shape matrix, sequential
conditional inversion, randomized lattice replicates) and is the workhorse
behind the intersection-union power formula.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special, stats

from .errors import AccuracyNotReached, NonConvergence, NotPositiveDefinite

SYMMETRY_TOL = 1e-12

_F_SERIES_TERM_TOL = 1e-14
_F_SERIES_MAX_TERMS = 100_000

MVT_TARGET_ERROR = 5e-4
_MVT_REPLICATES = 8
_MVT_START_POINTS = 2048
_MVT_POINT_CAP = 2 ** 24


# ---------------------------------------------------------------------------
# SPD matrix algebra
# ---------------------------------------------------------------------------

def check_symmetric(a: np.ndarray, tol: float = 1e-8) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise NotPositiveDefinite(f"expected a square matrix, got shape {a.shape}")
    if not np.allclose(a, a.T, rtol=0.0, atol=tol * max(1.0, np.abs(a).max())):
        raise NotPositiveDefinite("matrix is not symmetric")
    return a


def cholesky(a: np.ndarray) -> np.ndarray:
    """Lower-triangular Cholesky factor of a symmetric PD matrix."""
    a = check_symmetric(a)
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from exc


def solve_spd(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve a @ x = b for symmetric PD ``a``."""
    chol = cholesky(a)
    y = np.linalg.solve(chol, np.asarray(b, dtype=float))
    return np.linalg.solve(chol.T, y)


def invert_spd(a: np.ndarray) -> np.ndarray:
    """Inverse of a symmetric PD matrix, symmetrized on output."""
    inv = solve_spd(a, np.eye(np.asarray(a).shape[0]))
    return 0.5 * (inv + inv.T)


def is_positive_definite(a: np.ndarray, tol: float = 1e-10) -> bool:
    """Eigenvalue check with an absolute floor, used for input validation."""
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        return False
    if not np.allclose(a, a.T, rtol=0.0, atol=1e-8 * max(1.0, np.abs(a).max())):
        return False
    eigvals = np.linalg.eigvalsh(0.5 * (a + a.T))
    return bool(eigvals.min() > tol)


# ---------------------------------------------------------------------------
# Univariate distributions
# ---------------------------------------------------------------------------

def noncentral_f_cdf(x: float, d1: int, d2: int, tau: float) -> float:
    """CDF of the noncentral F distribution.

    Poisson mixture over incomplete-beta terms:

        P(F <= x) = sum_j  Pois(j; tau/2) * I_q(d1/2 + j, d2/2),

    with q = d1*x / (d1*x + d2).  The series is truncated once the running
    Poisson tail (which bounds the remainder, since each beta term is <= 1)
    drops below 1e-14.
    """
    if d1 < 1 or d2 < 1:
        raise ValueError("degrees of freedom must be >= 1")
    if tau < 0:
        raise ValueError("noncentrality must be >= 0")
    if x <= 0.0:
        return 0.0
    if not math.isfinite(x):
        return 1.0
    q = d1 * x / (d1 * x + d2)
    half_tau = 0.5 * tau
    if half_tau == 0.0:
        return float(special.betainc(0.5 * d1, 0.5 * d2, q))

    log_w = -half_tau  # log Poisson weight at j = 0
    cdf = 0.0
    poisson_consumed = 0.0
    j = 0
    while j < _F_SERIES_MAX_TERMS:
        w = math.exp(log_w)
        term = w * float(special.betainc(0.5 * d1 + j, 0.5 * d2, q))
        cdf += term
        poisson_consumed += w
        tail = 1.0 - poisson_consumed
        # Beta terms decrease in j, so the remainder is below tail * current beta.
        if tail < _F_SERIES_TERM_TOL or (j > half_tau and term < _F_SERIES_TERM_TOL):
            return min(max(cdf, 0.0), 1.0)
        j += 1
        log_w += math.log(half_tau) - math.log(j)
    raise NonConvergence(
        f"noncentral F series exceeded {_F_SERIES_MAX_TERMS} terms (tau={tau})"
    )


def central_f_quantile(p: float, d1: int, d2: int) -> float:
    """Quantile of the central F distribution."""
    if not 0.0 < p < 1.0:
        raise ValueError("p must be in (0, 1)")
    return float(stats.f.ppf(p, d1, d2))


def student_t_quantile(p: float, df: float) -> float:
    """Quantile of the Student t distribution."""
    if not 0.0 < p < 1.0:
        raise ValueError("p must be in (0, 1)")
    if df <= 0:
        raise ValueError("df must be > 0")
    return float(stats.t.ppf(p, df))


def student_t_sf(x: float, df: float) -> float:
    """Upper-tail probability of the Student t distribution."""
    return float(stats.t.sf(x, df))


# ---------------------------------------------------------------------------
# Reproducible random streams
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RngStream:
    """Counter-based random stream.

    Identical (base_seed, stream_index) pairs reproduce the same draw
    sequence; distinct stream indices give statistically independent
    sequences (Philox keyed by the pair), so parallel replicates need no
    shared state.
    """

    base_seed: int
    stream_index: int = 0

    def generator(self) -> np.random.Generator:
        key = ((self.base_seed & 0xFFFFFFFFFFFFFFFF) << 64) | (
            self.stream_index & 0xFFFFFFFFFFFFFFFF
        )
        return np.random.Generator(np.random.Philox(key=key))

    def child(self, index: int) -> "RngStream":
        return RngStream(self.base_seed, index)


def rng_gaussian(stream: RngStream, n: int) -> np.ndarray:
    return stream.generator().standard_normal(n)


def rng_gamma(stream: RngStream, shape: float, scale: float, n: int) -> np.ndarray:
    if shape <= 0 or scale <= 0:
        raise ValueError("gamma shape and scale must be > 0")
    return stream.generator().gamma(shape, scale, n)


# ---------------------------------------------------------------------------
# Multivariate t rectangle probabilities
# ---------------------------------------------------------------------------

_LATTICE_PRIMES = np.array(
    [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59], dtype=float
)


def _orthant_batch(
    u: np.ndarray,
    lower: np.ndarray,
    location: np.ndarray,
    chol: np.ndarray,
    df: float | None,
) -> np.ndarray:
    """Probabilities P(T > lower) estimated at a batch of quasi-random points.

    ``u`` has shape (npts, d) where d = K for finite df (one coordinate
    drives the chi scale) and d = K - 1 for the normal case; the final
    conditional probability needs no draw.
    """
    k = lower.shape[0]
    npts = u.shape[0]
    tiny = 1e-15

    if df is not None:
        # Shared chi scale: T = (Z + location) / (chi_df / sqrt(df)), so
        # T > l  <=>  Z > s*l - location.
        s = np.sqrt(2.0 * special.gammaincinv(0.5 * df, u[:, 0]) / df)
        offset = 1
    else:
        s = np.ones(npts)
        offset = 0

    prob = np.ones(npts)
    y = np.zeros((npts, k))
    for i in range(k):
        b = s * lower[i] - location[i]
        if i > 0:
            b = b - y[:, :i] @ chol[i, :i]
        b = b / chol[i, i]
        lo = special.ndtr(b)
        pi = 1.0 - lo
        prob *= pi
        if i < k - 1:
            w = np.clip(lo + u[:, offset + i] * pi, tiny, 1.0 - tiny)
            y[:, i] = special.ndtri(w)
    return prob


def mvt_rectangle(
    lower: np.ndarray,
    location: np.ndarray,
    shape: np.ndarray,
    df: float | None,
    *,
    base_seed: int = 20230,
    target_error: float = MVT_TARGET_ERROR,
) -> tuple[float, float]:
    """P(T_k > lower_k for all k) for a noncentral multivariate t.

    T = (Z + location) / (chi_df / sqrt(df)) with Z ~ N(0, shape): the
    location enters before the common scale divisor, matching the
    noncentral multivariate-t family used in design calculations.  ``shape``
    must be a correlation matrix; ``df=None`` selects the multivariate
    normal limit, where the location reduces to a plain shift.  Returns
    (estimate, mc_error) where mc_error is three times the replicate
    standard error; points are doubled until mc_error < target_error or the
    2^24-point cap is hit (:class:`AccuracyNotReached`).
    """
    lower = np.asarray(lower, dtype=float)
    location = np.asarray(location, dtype=float)
    shape = check_symmetric(shape)
    k = lower.shape[0]
    if location.shape != (k,) or shape.shape != (k, k):
        raise ValueError("dimension mismatch between lower, location and shape")
    if not np.allclose(np.diag(shape), 1.0, atol=1e-8):
        raise ValueError("shape must be a correlation matrix (unit diagonal)")
    if df is not None and df < 1:
        raise ValueError("df must be >= 1 (or None for the normal case)")

    if k == 1:
        if df is None:
            p = float(special.ndtr(location[0] - lower[0]))
        elif location[0] == 0.0:
            p = student_t_sf(lower[0], df)
        else:
            p = float(stats.nct.sf(lower[0], df, location[0]))
        return p, 0.0

    # Variable reordering: integrate the tightest tails first (deterministic
    # variance-reduction heuristic).
    if df is None:
        tails = special.ndtr(location - lower)
    else:
        tails = stats.nct.sf(lower, df, location)
    order = np.argsort(tails, kind="stable")
    a = lower[order]
    loc = location[order]
    if df is None:
        # Normal limit: the location is an exact shift of the limits.
        a = a - loc
        loc = np.zeros(k)
    chol = cholesky(shape[np.ix_(order, order)])

    d = k if df is not None else k - 1
    gen = np.random.Generator(np.random.Philox(key=base_seed))
    lattice = _LATTICE_PRIMES[:d]

    npts = _MVT_START_POINTS
    while True:
        estimates = np.empty(_MVT_REPLICATES)
        j = np.arange(1, npts + 1)[:, None]
        base = j * np.sqrt(lattice)[None, :]
        for r in range(_MVT_REPLICATES):
            shift = gen.random(d)
            u = np.mod(base + shift, 1.0)
            # Baker transform improves lattice uniformity near the edges.
            u = np.abs(2.0 * u - 1.0)
            estimates[r] = _orthant_batch(u, a, loc, chol, df).mean()
        value = float(estimates.mean())
        se = float(estimates.std(ddof=1) / math.sqrt(_MVT_REPLICATES))
        mc_error = 3.0 * se
        if mc_error < target_error:
            return min(max(value, 0.0), 1.0), mc_error
        if npts * _MVT_REPLICATES * 2 > _MVT_POINT_CAP:
            raise AccuracyNotReached(value, mc_error)
        npts *= 2
