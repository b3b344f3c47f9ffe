"""Trial simulation and Monte Carlo verification of analytic power.

Generates cluster randomized trial datasets from the multivariate mixed
model — Gamma-distributed cluster sizes, balanced cluster-level arm
allocation, Cholesky-transformed Gaussian intercepts and residuals — and
estimates empirical power and type I error by repeated simulation plus
maximum-likelihood fitting.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .em import cluster_stats, em_fit, wald_glh_decision, wald_iu_decision
from .errors import CopowerError, InfeasibleAllocation, ValidationError
from .matstat import RngStream, cholesky
from .types import EffectModel, TestKind, TestSpec, VarianceComponents

MIN_CLUSTER_SIZE = 2


@dataclass(frozen=True)
class TrialDataset:
    """One simulated (or imported) trial.

    ``arms`` and ``sizes`` are per cluster; ``y`` stacks the subject-level
    K-variate outcomes, with ``cluster_of_subject`` mapping each row to its
    cluster index.
    """

    arms: np.ndarray                # (n,) 0/1
    sizes: np.ndarray               # (n,) int
    y: np.ndarray                   # (N, K)
    cluster_of_subject: np.ndarray  # (N,) int

    def __post_init__(self):
        if self.sizes.min() < 1:
            raise ValidationError("cluster sizes must be >= 1")
        if self.y.shape[0] != int(self.sizes.sum()):
            raise ValidationError("observation count does not match cluster sizes")
        if not np.isin(self.cluster_of_subject, np.arange(self.n_clusters)).all():
            raise ValidationError("observation references an unknown cluster")

    @property
    def n_clusters(self) -> int:
        return self.arms.shape[0]

    @property
    def k(self) -> int:
        return self.y.shape[1]

    def stats(self):
        return cluster_stats(self.sizes, self.arms, self.y, self.cluster_of_subject)

    def to_csv(self, path) -> None:
        """Write one row per subject: cluster_id, arm, y1..yK."""
        with open(path, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(
                ["cluster_id", "arm"] + [f"y{j + 1}" for j in range(self.k)]
            )
            for row, cid in zip(self.y, self.cluster_of_subject):
                writer.writerow(
                    [int(cid), int(self.arms[cid])] + [f"{v:.10g}" for v in row]
                )

    @classmethod
    def from_csv(cls, path) -> "TrialDataset":
        with open(path, newline="") as handle:
            reader = csv.reader(handle)
            header = next(reader, None)
            if header is None or header[:2] != ["cluster_id", "arm"]:
                raise ValidationError(
                    "expected header starting with cluster_id, arm"
                )
            ycols = header[2:]
            if not ycols or ycols != [f"y{j + 1}" for j in range(len(ycols))]:
                raise ValidationError("outcome columns must be named y1..yK")
            cids, arms_by_row, rows = [], [], []
            for line in reader:
                if not line:
                    continue
                if len(line) != 2 + len(ycols):
                    raise ValidationError(f"malformed row: {line}")
                try:
                    cids.append(int(line[0]))
                    arms_by_row.append(int(line[1]))
                    rows.append([float(v) for v in line[2:]])
                except ValueError as exc:
                    raise ValidationError(f"malformed row: {line}") from exc
        if not rows:
            raise ValidationError("dataset is empty")
        cids = np.asarray(cids)
        arms_by_row = np.asarray(arms_by_row)
        if not np.isin(arms_by_row, (0, 1)).all():
            raise ValidationError("arm must be 0 or 1")
        unique_ids, cluster_idx = np.unique(cids, return_inverse=True)
        arms = np.zeros(unique_ids.size, dtype=int)
        for i in range(unique_ids.size):
            cluster_arms = np.unique(arms_by_row[cluster_idx == i])
            if cluster_arms.size != 1:
                raise ValidationError(
                    f"cluster {unique_ids[i]} has inconsistent arm labels"
                )
            arms[i] = cluster_arms[0]
        sizes = np.bincount(cluster_idx)
        return cls(
            arms=arms,
            sizes=sizes,
            y=np.asarray(rows, dtype=float),
            cluster_of_subject=cluster_idx,
        )


@dataclass
class SimulationReport:
    replicates: int
    rejections: int
    non_converged: int
    converged_flags: list = field(default_factory=list)
    rejection_flags: list = field(default_factory=list)
    min_loglik_ascent: float = math.inf

    def __post_init__(self):
        if self.rejections > self.replicates:
            raise ValidationError("rejections cannot exceed replicates")

    @property
    def effective(self) -> int:
        return self.replicates - self.non_converged

    @property
    def empirical_power(self) -> float:
        if self.effective == 0:
            return math.nan
        return self.rejections / self.effective

    @property
    def mc_se(self) -> float:
        if self.effective == 0:
            return math.nan
        p = self.empirical_power
        return math.sqrt(p * (1.0 - p) / self.effective)

    def to_dict(self) -> dict:
        return {
            "replicates": self.replicates,
            "rejections": self.rejections,
            "non_converged": self.non_converged,
            "empirical_power": self.empirical_power,
            "mc_se": self.mc_se,
            "min_loglik_ascent": self.min_loglik_ascent,
            "converged_flags": self.converged_flags,
            "rejection_flags": self.rejection_flags,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


# ---------------------------------------------------------------------------
# Generation primitives
# ---------------------------------------------------------------------------

def sample_cluster_sizes(
    m_bar: float, cv: float, n: int, stream: RngStream
) -> np.ndarray:
    """Gamma(1/cv^2, m_bar*cv^2) sizes rounded to the nearest integer and
    clamped below at 2; cv=0 gives equal sizes round(m_bar)."""
    if cv < 0:
        raise ValidationError("cv must be >= 0")
    if cv == 0.0:
        return np.full(n, int(round(m_bar)), dtype=int)
    draws = stream.generator().gamma(1.0 / cv ** 2, m_bar * cv ** 2, n)
    return np.maximum(np.rint(draws).astype(int), MIN_CLUSTER_SIZE)


def allocate_arms(n: int, z_bar: float, stream: RngStream) -> np.ndarray:
    """Balanced randomization: exactly n*z_bar treated clusters."""
    treated = n * z_bar
    if abs(treated - round(treated)) > 1e-9:
        raise InfeasibleAllocation(f"n * z_bar = {treated} is not an integer")
    arms = np.zeros(n, dtype=int)
    arms[: int(round(treated))] = 1
    return stream.generator().permutation(arms)


def simulate_trial(
    effect: EffectModel,
    vc: VarianceComponents,
    sizes: np.ndarray,
    arms: np.ndarray,
    stream: RngStream,
) -> TrialDataset:
    """Draw y_ij = gamma + beta z_i + phi_i + e_ij via Cholesky transforms."""
    sizes = np.asarray(sizes, dtype=int)
    arms = np.asarray(arms, dtype=int)
    if sizes.shape != arms.shape:
        raise ValidationError("sizes and arms must have the same length")
    k = vc.k
    gamma = np.asarray(effect.gamma, dtype=float)
    beta = np.asarray(effect.beta, dtype=float)
    if gamma.shape != (k,) or beta.shape != (k,):
        raise ValidationError("effect dimensions do not match the components")
    chol_phi = cholesky(vc.sigma_phi)
    chol_e = cholesky(vc.sigma_e)
    gen = stream.generator()
    n = sizes.shape[0]
    total = int(sizes.sum())
    phi = gen.standard_normal((n, k)) @ chol_phi.T
    resid = gen.standard_normal((total, k)) @ chol_e.T
    cluster_of_subject = np.repeat(np.arange(n), sizes)
    means = gamma[None, :] + arms[:, None] * beta[None, :] + phi
    y = means[cluster_of_subject] + resid
    return TrialDataset(
        arms=arms, sizes=sizes, y=y, cluster_of_subject=cluster_of_subject
    )


# ---------------------------------------------------------------------------
# Replicated simulation
# ---------------------------------------------------------------------------

def _decide(fit, test: TestSpec, alpha: float) -> bool:
    if test.kind is TestKind.INTERSECTION_UNION:
        return wald_iu_decision(fit, alpha)[1]
    return wald_glh_decision(fit, test, alpha)[1]


def empirical_power(
    effect: EffectModel,
    vc: VarianceComponents,
    test: TestSpec,
    n: int,
    m_bar: float,
    cv: float,
    reps: int,
    base_seed: int,
    *,
    z_bar: float = 0.5,
    alpha: float = 0.05,
) -> SimulationReport:
    """Proportion of replicates on which the fitted Wald test rejects.

    Each replicate draws sizes, arms and outcomes from its own
    (base_seed, replicate) stream, fits by EM, and applies the requested
    test; replicates whose fit fails to converge are excluded from the
    proportion and counted separately.
    """
    if reps < 1:
        raise ValidationError("reps must be >= 1")
    rejections = 0
    non_converged = 0
    converged_flags = []
    rejection_flags = []
    min_ascent = math.inf
    for rep in range(reps):
        stream = RngStream(base_seed, 3 * rep)
        sizes = sample_cluster_sizes(m_bar, cv, n, stream)
        arms = allocate_arms(n, z_bar, stream.child(3 * rep + 1))
        data = simulate_trial(effect, vc, sizes, arms, stream.child(3 * rep + 2))
        try:
            fit = em_fit(data.stats())
            ok = fit.converged and fit.se_beta is not None
        except CopowerError:
            fit, ok = None, False
        converged_flags.append(ok)
        if not ok:
            non_converged += 1
            rejection_flags.append(False)
            continue
        min_ascent = min(min_ascent, fit.min_ascent)
        rejected = _decide(fit, test, alpha)
        rejection_flags.append(rejected)
        rejections += int(rejected)
    return SimulationReport(
        replicates=reps,
        rejections=rejections,
        non_converged=non_converged,
        converged_flags=converged_flags,
        rejection_flags=rejection_flags,
        min_loglik_ascent=min_ascent,
    )


def type_i_error(
    effect: EffectModel,
    vc: VarianceComponents,
    test: TestSpec,
    n: int,
    m_bar: float,
    cv: float,
    reps: int,
    base_seed: int,
    *,
    z_bar: float = 0.5,
    alpha: float = 0.05,
) -> SimulationReport:
    """Empirical rejection rate with the first effect forced to zero.

    The remaining effects keep their alternative values, so the IU null is
    of the composite boundary kind where the test is close to (but at most)
    level alpha.
    """
    beta = np.array(effect.beta, dtype=float)
    beta[0] = 0.0
    null_effect = EffectModel(gamma=effect.gamma, beta=beta)
    return empirical_power(
        null_effect, vc, test, n, m_bar, cv, reps, base_seed,
        z_bar=z_bar, alpha=alpha,
    )
