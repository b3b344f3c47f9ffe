import numpy as np
import pytest
from scipy import optimize, stats

from copower.em import (
    ClusterStats,
    cluster_stats,
    em_fit,
    loglik,
    standard_errors,
    wald_glh_decision,
    wald_iu_decision,
)
from copower.errors import DegenerateData, InsufficientDf
from copower.matstat import RngStream
from copower.simulate import allocate_arms, simulate_trial
from copower.types import EffectModel, TestKind, TestSpec, VarianceComponents


def make_dataset(vc, beta, n, sizes, seed, gamma=None):
    k = vc.k
    gamma = np.zeros(k) if gamma is None else gamma
    effect = EffectModel(gamma=gamma, beta=beta)
    stream = RngStream(seed)
    arms = allocate_arms(n, 0.5, stream)
    data = simulate_trial(effect, vc, sizes, arms, stream.child(1))
    return data


def small_dataset(seed=11):
    vc = VarianceComponents(
        sigma_phi=np.array([[0.2, 0.05], [0.05, 0.3]]),
        sigma_e=np.array([[1.0, 0.3], [0.3, 1.5]]),
    )
    sizes = np.array([2, 3, 1, 4])
    data = make_dataset(vc, np.array([0.4, 0.1]), 4, sizes, seed)
    return vc, data


def test_loglik_matches_dense_oracle():
    vc, data = small_dataset()
    st = data.stats()
    theta = np.array([0.1, -0.2, 0.4, 0.1])
    total = 0.0
    z_bar = data.arms.mean()
    k = vc.k
    for i in range(st.n):
        m = int(st.sizes[i])
        c = data.arms[i] - z_bar
        mean = np.tile(theta[:k] + c * theta[k:], m)
        cov = np.kron(np.eye(m), vc.sigma_e) + np.kron(np.ones((m, m)), vc.sigma_phi)
        yi = data.y[data.cluster_of_subject == i].ravel()
        total += stats.multivariate_normal.logpdf(yi, mean, cov)
    ours = loglik(st, theta, vc.sigma_phi, vc.sigma_e)
    assert ours == pytest.approx(total, abs=1e-10)


def test_loglik_invariant_to_subject_order():
    vc, data = small_dataset()
    st = data.stats()
    rng = np.random.default_rng(0)
    perm = rng.permutation(data.y.shape[0])
    st_perm = cluster_stats(
        data.sizes, data.arms, data.y[perm], data.cluster_of_subject[perm]
    )
    theta = np.array([0.1, -0.2, 0.4, 0.1])
    assert loglik(st, theta, vc.sigma_phi, vc.sigma_e) == pytest.approx(
        loglik(st_perm, theta, vc.sigma_phi, vc.sigma_e), abs=1e-10
    )


def test_univariate_singleton_cluster_is_normal_density():
    st = ClusterStats(
        sizes=np.array([1.0, 1.0]),
        centered_arm=np.array([-0.5, 0.5]),
        ybar=np.array([[1.3], [0.2]]),
        yy=np.array([[[1.69]], [[0.04]]]),
    )
    theta = np.array([0.5, 0.4])
    sp = np.array([[0.3]])
    se = np.array([[0.7]])
    means = theta[0] + st.centered_arm * theta[1]
    expected = stats.norm.logpdf(
        st.ybar[:, 0], means, np.sqrt(sp[0, 0] + se[0, 0])
    ).sum()
    assert loglik(st, theta, sp, se) == pytest.approx(expected, abs=1e-12)


def test_em_recovery_large_sample():
    vc = VarianceComponents(sigma_phi=0.1 * np.eye(2), sigma_e=0.9 * np.eye(2))
    n, m = 500, 20
    data = make_dataset(vc, np.zeros(2), n, np.full(n, m), seed=21)
    fit = em_fit(data.stats())
    assert fit.converged
    assert fit.min_ascent > -1e-10
    # beta within 4 MC standard errors of zero
    omega_kk = (0.9 + m * 0.1) / (m * 0.25)
    mc_se = np.sqrt(omega_kk / n)
    assert np.all(np.abs(fit.beta_hat) < 4 * mc_se)
    np.testing.assert_allclose(fit.sigma_phi_hat, vc.sigma_phi, atol=0.02)
    np.testing.assert_allclose(fit.sigma_e_hat, vc.sigma_e, atol=0.02)


def test_em_ascent_across_seeds():
    vc = VarianceComponents(
        sigma_phi=np.array([[0.3, 0.1], [0.1, 0.2]]),
        sigma_e=np.array([[1.0, 0.4], [0.4, 0.8]]),
    )
    for seed in range(5):
        data = make_dataset(vc, np.array([0.2, 0.3]), 12, np.full(12, 8), seed)
        fit = em_fit(data.stats(), compute_se=False)
        assert fit.min_ascent > -1e-10


def test_em_univariate_matches_profile_optimizer():
    vc = VarianceComponents(sigma_phi=np.array([[0.15]]), sigma_e=np.array([[0.85]]))
    data = make_dataset(vc, np.array([0.3]), 20, np.full(20, 10), seed=5)
    st = data.stats()
    fit = em_fit(st, tol=1e-13, compute_se=False)

    from copower.em import _gls_theta

    def negprofile(logvar):
        sp = np.array([[np.exp(logvar[0])]])
        se = np.array([[np.exp(logvar[1])]])
        theta, _ = _gls_theta(st, sp, se)
        return -loglik(st, theta, sp, se)

    res = optimize.minimize(
        negprofile,
        np.log([fit.sigma_phi_hat[0, 0] * 1.6, fit.sigma_e_hat[0, 0] * 0.7]),
        method="Nelder-Mead",
        options={"xatol": 1e-12, "fatol": 1e-13},
    )
    assert fit.sigma_phi_hat[0, 0] == pytest.approx(np.exp(res.x[0]), abs=1e-6)
    assert fit.sigma_e_hat[0, 0] == pytest.approx(np.exp(res.x[1]), abs=1e-6)
    assert fit.loglik == pytest.approx(-res.fun, abs=1e-8)


def test_em_degenerate_inputs():
    vc, data = small_dataset()
    st = data.stats()
    with pytest.raises(DegenerateData):
        em_fit(
            ClusterStats(
                sizes=st.sizes,
                centered_arm=np.zeros(st.n),  # single arm
                ybar=st.ybar,
                yy=st.yy,
            )
        )


def test_em_equivariance():
    vc, data = small_dataset()
    fit = em_fit(data.stats(), compute_se=False)

    shifted = cluster_stats(
        data.sizes, data.arms, data.y + 5.0, data.cluster_of_subject
    )
    fit_shift = em_fit(shifted, compute_se=False)
    np.testing.assert_allclose(
        fit_shift.gamma_tilde_hat, fit.gamma_tilde_hat + 5.0, atol=1e-6
    )
    np.testing.assert_allclose(fit_shift.beta_hat, fit.beta_hat, atol=1e-8)
    np.testing.assert_allclose(fit_shift.sigma_phi_hat, fit.sigma_phi_hat, atol=1e-8)
    np.testing.assert_allclose(fit_shift.sigma_e_hat, fit.sigma_e_hat, atol=1e-8)

    scale = np.array([2.0, 1.0])
    scaled = cluster_stats(
        data.sizes, data.arms, data.y * scale, data.cluster_of_subject
    )
    fit_scale = em_fit(scaled, compute_se=False)
    np.testing.assert_allclose(fit_scale.beta_hat, fit.beta_hat * scale, atol=1e-7)
    outer = np.outer(scale, scale)
    np.testing.assert_allclose(
        fit_scale.sigma_phi_hat, fit.sigma_phi_hat * outer, atol=1e-7
    )
    np.testing.assert_allclose(
        fit_scale.sigma_e_hat, fit.sigma_e_hat * outer, atol=1e-7
    )


def test_equal_sizes_beta_is_arm_mean_difference():
    vc = VarianceComponents(
        sigma_phi=np.array([[0.3, 0.1], [0.1, 0.2]]),
        sigma_e=np.array([[1.0, 0.4], [0.4, 0.8]]),
    )
    n, m = 10, 6
    data = make_dataset(vc, np.array([0.5, 0.2]), n, np.full(n, m), seed=9)
    fit = em_fit(data.stats(), compute_se=False)
    st = data.stats()
    closed_form = (
        st.ybar[data.arms == 1].mean(axis=0) - st.ybar[data.arms == 0].mean(axis=0)
    )
    np.testing.assert_allclose(fit.beta_hat, closed_form, atol=1e-8)


def test_standard_errors_match_plugin_formula():
    # Balanced equal-size data: SE(beta_hat_k) should track the closed-form
    # plug-in sqrt(omega_hat_kk / n) built from the fitted components.
    vc = VarianceComponents(
        sigma_phi=np.array([[0.2, 0.05], [0.05, 0.3]]),
        sigma_e=np.array([[1.0, 0.3], [0.3, 1.5]]),
    )
    n, m = 100, 10
    data = make_dataset(vc, np.array([0.3, 0.4]), n, np.full(n, m), seed=13)
    fit = em_fit(data.stats())
    omega_hat = (fit.sigma_e_hat + m * fit.sigma_phi_hat) / (m * 0.25)
    plugin = np.sqrt(np.diag(omega_hat) / n)
    np.testing.assert_allclose(fit.se_beta, plugin, rtol=0.02)


def test_standard_errors_scaling_in_n():
    vc = VarianceComponents(sigma_phi=0.1 * np.eye(2), sigma_e=0.9 * np.eye(2))
    ses = []
    for n in (50, 200):
        data = make_dataset(vc, np.array([0.3, 0.4]), n, np.full(n, 10), seed=3)
        ses.append(em_fit(data.stats()).se_beta.mean())
    assert ses[1] == pytest.approx(ses[0] / 2.0, rel=0.25)


def test_wald_decisions():
    vc = VarianceComponents(
        sigma_phi=np.array([[0.2, 0.05], [0.05, 0.3]]),
        sigma_e=np.array([[1.0, 0.3], [0.3, 1.5]]),
    )
    n = 30
    data = make_dataset(vc, np.array([1.5, 1.8]), n, np.full(n, 12), seed=1)
    fit = em_fit(data.stats())
    per, joint = wald_iu_decision(fit, 0.05)
    assert joint == bool(per.all())
    fstat, decision = wald_glh_decision(
        fit, TestSpec(kind=TestKind.OMNIBUS, beta=np.array([1.5, 1.8])), 0.05
    )
    assert fstat > 0 and decision
    # Determinism: refitting the same data gives identical decisions.
    fit2 = em_fit(data.stats())
    assert wald_iu_decision(fit2, 0.05)[1] == joint
    assert wald_glh_decision(
        fit2, TestSpec(kind=TestKind.OMNIBUS, beta=np.array([1.5, 1.8])), 0.05
    )[0] == pytest.approx(fstat, abs=1e-10)


def test_wald_insufficient_df():
    vc, data = small_dataset()
    fit = em_fit(data.stats(), compute_se=False)
    with pytest.raises(InsufficientDf):
        wald_iu_decision(fit, 0.05)


def test_wald_glh_zero_estimate_never_rejects():
    vc = VarianceComponents(sigma_phi=0.1 * np.eye(2), sigma_e=0.9 * np.eye(2))
    data = make_dataset(vc, np.array([0.4, 0.1]), 10, np.full(10, 5), seed=2)
    fit = em_fit(data.stats())
    fit.theta_hat = fit.theta_hat.copy()
    fit.theta_hat[fit.k:] = 0.0
    fstat, decision = wald_glh_decision(
        fit, TestSpec(kind=TestKind.OMNIBUS, beta=np.array([0.4, 0.1])), 0.05
    )
    assert fstat == 0.0 and not decision
