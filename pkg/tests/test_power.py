import numpy as np
import pytest
from scipy import stats

from copower.errors import (
    DegenerateCorrection,
    InsufficientDf,
    Unattainable,
    ValidationError,
)
from copower.power import (
    EffectDistribution,
    cluster_covariance_inverse,
    correction_factor,
    correction_matrix,
    effect_distribution,
    glh_power,
    grid_to_csv,
    iu_power,
    omega_equal,
    omega_unequal,
    power_for_test,
    power_grid,
    solve_cluster_size,
    solve_clusters,
)
from copower.types import (
    TestKind,
    TestSpec,
    VarianceComponents,
    icc_set,
    icc_to_components,
    sequence_rho0,
)
from conftest import random_spd


def table3_inputs(eta, kappa, rho2):
    """Two-endpoint benchmark family: variances (1, 2), effects (eta, 0.7)."""
    rho0 = sequence_rho0(kappa, 0.1, 2)
    icc = icc_set(rho0, kappa / 2.0, rho2, np.array([1.0, 2.0]))
    return icc_to_components(icc), np.array([eta, 0.7])


def test_omega_equal_closed_form():
    rng = np.random.default_rng(3)
    vc = VarianceComponents(sigma_phi=random_spd(rng, 2, 0.1), sigma_e=random_spd(rng, 2))
    m, sigma_z2 = 20, 0.25
    dist = omega_equal(vc, m, sigma_z2)
    expected = (vc.sigma_e + m * vc.sigma_phi) / (m * sigma_z2)
    np.testing.assert_allclose(dist.omega, expected, atol=1e-12)
    np.testing.assert_allclose(np.diag(dist.wald_corr), 1.0)


def test_cluster_covariance_inverse_dense_oracle():
    rng = np.random.default_rng(4)
    for k, m in [(1, 3), (2, 7), (3, 12)]:
        vc = VarianceComponents(
            sigma_phi=random_spd(rng, k, 0.2), sigma_e=random_spd(rng, k)
        )
        a, b = cluster_covariance_inverse(vc, m)
        dense = np.kron(np.eye(m), vc.sigma_e) + np.kron(
            np.ones((m, m)), vc.sigma_phi
        )
        structured = np.kron(np.eye(m), a) + np.kron(np.ones((m, m)), b)
        np.testing.assert_allclose(structured, np.linalg.inv(dense), atol=1e-10)


def test_correction_matrix_identity_at_cv_zero():
    rng = np.random.default_rng(5)
    vc = VarianceComponents(sigma_phi=random_spd(rng, 3, 0.1), sigma_e=random_spd(rng, 3))
    np.testing.assert_allclose(correction_matrix(vc, 40, 0.0), np.eye(3))


def test_correction_scalar_consistency():
    # K=1: the matrix correction reduces to the familiar scalar factor.
    rho0, sigma_y2 = 0.07, 2.3
    vc = VarianceComponents(
        sigma_phi=np.array([[rho0 * sigma_y2]]),
        sigma_e=np.array([[(1 - rho0) * sigma_y2]]),
    )
    theta = correction_matrix(vc, 60, 0.8)
    assert theta[0, 0] == pytest.approx(correction_factor(rho0, 60, 0.8), abs=1e-12)


def test_correction_degenerate_cv():
    assert correction_factor(0.5, 3, 1.0) > 1.0
    with pytest.raises(DegenerateCorrection):
        correction_factor(0.5, 2, 3.0)


def test_omega_unequal_inflates_variances():
    vc, _ = table3_inputs(0.3, 0.05, 0.5)
    base = omega_equal(vc, 60, 0.25).omega
    dist = omega_unequal(vc, 60, 0.8, 0.25)
    assert np.all(np.diag(dist.omega) > np.diag(base))
    # Default convention: covariances keep their equal-size form.
    assert dist.omega[0, 1] == pytest.approx(base[0, 1], abs=1e-12)
    full = omega_unequal(vc, 60, 0.8, 0.25, correct_covariance=True)
    assert full.omega[0, 1] != pytest.approx(base[0, 1], abs=1e-6)
    np.testing.assert_allclose(
        np.diag(full.omega), np.diag(dist.omega), atol=1e-12
    )


def test_effect_distribution_dispatch():
    vc, _ = table3_inputs(0.3, 0.01, 0.2)
    np.testing.assert_allclose(
        effect_distribution(vc, 60, 0.0, 0.25).omega,
        omega_equal(vc, 60, 0.25).omega,
    )


def test_glh_power_null_equals_alpha():
    vc, beta = table3_inputs(0.3, 0.01, 0.2)
    test = TestSpec(kind=TestKind.OMNIBUS, delta=np.zeros(2))
    result = glh_power(effect_distribution(vc, 60, 0.0, 0.25), test, 20, 0.05)
    assert result.power == pytest.approx(0.05, abs=1e-9)
    assert result.noncentrality == pytest.approx(0.0, abs=1e-12)


def test_glh_power_insufficient_df():
    vc, beta = table3_inputs(0.3, 0.01, 0.2)
    test = TestSpec(kind=TestKind.OMNIBUS, beta=beta)
    with pytest.raises(InsufficientDf):
        glh_power(effect_distribution(vc, 60, 0.0, 0.25), test, 4, 0.05)


def test_iu_power_univariate_noncentral_t():
    vc = VarianceComponents(sigma_phi=np.array([[0.05]]), sigma_e=np.array([[0.95]]))
    dist = effect_distribution(vc, 30, 0.0, 0.25)
    n, beta = 24, np.array([0.25])
    result = iu_power(dist, beta, n, 0.05)
    nu = n - 2
    eta = np.sqrt(n) * beta[0] / np.sqrt(dist.omega_diag[0])
    crit = stats.t.ppf(0.95, nu)
    assert result.power == pytest.approx(stats.nct.sf(crit, nu, eta), abs=1e-10)


def test_iu_power_increases_with_n():
    vc, beta = table3_inputs(0.3, 0.01, 0.2)
    dist = effect_distribution(vc, 60, 0.0, 0.25)
    p = [iu_power(dist, beta, n, 0.05).power for n in (10, 16, 24)]
    assert p[0] < p[1] < p[2]


def test_solve_clusters_bracketing():
    vc, beta = table3_inputs(0.3, 0.01, 0.2)
    test = TestSpec(kind=TestKind.INTERSECTION_UNION, beta=beta)
    n, result = solve_clusters(vc, test, 0.8, 60, 0.0, 0.25, 0.05)
    assert n == 16
    assert result.power >= 0.8
    below = power_for_test(vc, test, n - 2, 60, 0.0, 0.25, 0.05)
    assert below.power < 0.8


def test_solve_clusters_rejects_bad_target():
    vc, beta = table3_inputs(0.3, 0.01, 0.2)
    test = TestSpec(kind=TestKind.OMNIBUS, beta=beta)
    with pytest.raises(ValidationError):
        solve_clusters(vc, test, 1.0, 60, 0.0, 0.25, 0.05)


def test_solve_cluster_size_and_limit():
    vc, beta = table3_inputs(0.5, 0.05, 0.2)
    test = TestSpec(kind=TestKind.INTERSECTION_UNION, beta=beta)
    m, result = solve_cluster_size(vc, test, 0.8, 20, 0.0, 0.25, 0.05)
    assert result.power >= 0.8
    assert power_for_test(vc, test, 20, m - 1, 0.0, 0.25, 0.05).power < 0.8
    # With few clusters the large-cluster limit cannot reach the target.
    with pytest.raises(Unattainable):
        solve_cluster_size(vc, test, 0.99, 6, 0.0, 0.25, 0.05)


def test_power_grid_flags_infeasible_cells():
    cells = power_grid(
        rho0_first_values=[0.01, 0.05],
        rho1_ratio_values=[0.5, 40.0],  # ratio 40 implies rho1 >> rho0: not PD
        rho2_values=[0.2],
        rho0_scale=np.array([1.0, 2.0]),
        sigma_y2=np.array([1.0, 2.0]),
        beta=np.array([0.3, 0.7]),
        test=TestSpec(kind=TestKind.INTERSECTION_UNION, beta=np.array([0.3, 0.7])),
        n=16,
        m_bar=60,
        cv=0.0,
        sigma_z2=0.25,
        alpha=0.05,
    )
    feasible = [c.feasible for c in cells]
    assert feasible == [True, False, True, False]
    csv_text = grid_to_csv(cells)
    assert csv_text.splitlines()[0] == "rho0_1,rho1_ratio,rho2,feasible,power,mc_error"
    assert len(csv_text.splitlines()) == 5


def test_homogeneity_reduces_to_difference_test():
    # K=2 homogeneity: single contrast (1, -1); noncentrality matches the
    # scalar formula n * (b1 - b2)^2 / (w11 - 2 w12 + w22).
    vc, beta = table3_inputs(0.3, 0.05, 0.5)
    dist = effect_distribution(vc, 60, 0.0, 0.25)
    test = TestSpec(kind=TestKind.HOMOGENEITY, beta=beta)
    result = glh_power(dist, test, 30, 0.05)
    w = dist.omega
    expected_tau = 30 * (beta[0] - beta[1]) ** 2 / (w[0, 0] - 2 * w[0, 1] + w[1, 1])
    assert result.noncentrality == pytest.approx(expected_tau, abs=1e-10)


def test_custom_contrast_matches_omnibus_for_identity():
    vc, beta = table3_inputs(0.3, 0.05, 0.5)
    dist = effect_distribution(vc, 60, 0.0, 0.25)
    omni = glh_power(dist, TestSpec(kind=TestKind.OMNIBUS, beta=beta), 30, 0.05)
    custom = glh_power(
        dist,
        TestSpec(kind=TestKind.CUSTOM_GLH, contrast=np.eye(2), beta=beta),
        30,
        0.05,
    )
    assert custom.power == pytest.approx(omni.power, abs=1e-12)
