import numpy as np
import pytest
from scipy import stats

from copower.errors import NotPositiveDefinite
from copower.matstat import (
    RngStream,
    central_f_quantile,
    cholesky,
    invert_spd,
    is_positive_definite,
    mvt_rectangle,
    noncentral_f_cdf,
    solve_spd,
    student_t_quantile,
    student_t_sf,
)
from conftest import random_spd


def test_spd_kernels_match_numpy():
    rng = np.random.default_rng(1)
    for k in (1, 2, 3, 5):
        a = random_spd(rng, k)
        chol = cholesky(a)
        np.testing.assert_allclose(chol @ chol.T, a, atol=1e-10)
        b = rng.standard_normal(k)
        np.testing.assert_allclose(solve_spd(a, b), np.linalg.solve(a, b), atol=1e-10)
        np.testing.assert_allclose(invert_spd(a), np.linalg.inv(a), atol=1e-10)


def test_spd_kernels_reject_indefinite():
    indefinite = np.array([[1.0, 2.0], [2.0, 1.0]])
    with pytest.raises(NotPositiveDefinite):
        cholesky(indefinite)
    with pytest.raises(NotPositiveDefinite):
        cholesky(np.array([[1.0, 0.5], [0.4, 1.0]]))  # asymmetric
    assert not is_positive_definite(indefinite)
    assert is_positive_definite(np.eye(3))


def test_noncentral_f_cdf_central_case():
    for d1, d2 in [(1, 5), (2, 44), (3, 10)]:
        for x in (0.5, 1.0, 3.2):
            assert noncentral_f_cdf(x, d1, d2, 0.0) == pytest.approx(
                stats.f.cdf(x, d1, d2), abs=1e-12
            )


def test_noncentral_f_cdf_against_scipy():
    rng = np.random.default_rng(2)
    for _ in range(50):
        d1 = int(rng.integers(1, 6))
        d2 = int(rng.integers(2, 60))
        tau = float(rng.uniform(0.1, 40.0))
        x = float(rng.uniform(0.1, 8.0))
        ours = noncentral_f_cdf(x, d1, d2, tau)
        ref = stats.ncf.cdf(x, d1, d2, tau)
        assert ours == pytest.approx(ref, abs=1e-9)


def test_noncentral_f_cdf_edges():
    assert noncentral_f_cdf(0.0, 2, 10, 5.0) == 0.0
    assert noncentral_f_cdf(np.inf, 2, 10, 5.0) == 1.0
    xs = np.linspace(0.1, 10, 25)
    vals = [noncentral_f_cdf(x, 2, 20, 8.0) for x in xs]
    assert np.all(np.diff(vals) > 0)


def test_quantile_wrappers():
    assert central_f_quantile(0.95, 2, 44) == pytest.approx(stats.f.ppf(0.95, 2, 44))
    assert student_t_quantile(0.95, 12) == pytest.approx(stats.t.ppf(0.95, 12))
    assert student_t_sf(1.5, 12) == pytest.approx(stats.t.sf(1.5, 12))


def test_rng_stream_determinism():
    a = RngStream(7, 3).generator().standard_normal(5)
    b = RngStream(7, 3).generator().standard_normal(5)
    c = RngStream(7, 4).generator().standard_normal(5)
    np.testing.assert_array_equal(a, b)
    assert not np.allclose(a, c)
    assert RngStream(7).child(4) == RngStream(7, 4)


def test_mvt_rectangle_univariate_matches_noncentral_t():
    p, err = mvt_rectangle(
        np.array([1.7]), np.array([2.5]), np.eye(1), 14.0
    )
    assert err == 0.0
    assert p == pytest.approx(stats.nct.sf(1.7, 14, 2.5), abs=1e-12)


def test_mvt_rectangle_normal_case_independent():
    # Independent coordinates: the rectangle probability factorizes.
    lower = np.array([0.5, -0.3, 1.0])
    loc = np.array([1.0, 0.0, 0.5])
    p, err = mvt_rectangle(lower, loc, np.eye(3), None)
    expected = np.prod(stats.norm.sf(lower - loc))
    assert p == pytest.approx(expected, abs=max(err, 1e-4))


def test_mvt_rectangle_normal_shift_invariance():
    corr = np.array([[1.0, 0.4], [0.4, 1.0]])
    p1, _ = mvt_rectangle(np.array([0.2, 0.5]), np.array([1.0, 0.8]), corr, None)
    p2, _ = mvt_rectangle(np.array([-0.8, -0.3]), np.zeros(2), corr, None)
    assert p1 == pytest.approx(p2, abs=1e-3)


def test_mvt_rectangle_large_df_approaches_normal():
    corr = np.array([[1.0, 0.3], [0.3, 1.0]])
    lower = np.array([0.4, 0.9])
    loc = np.array([1.2, 1.5])
    p_t, e_t = mvt_rectangle(lower, loc, corr, 1e6)
    p_n, e_n = mvt_rectangle(lower, loc, corr, None)
    assert p_t == pytest.approx(p_n, abs=3e-3)


def test_mvt_rectangle_reports_error_and_bounds():
    corr = np.array([[1.0, 0.5], [0.5, 1.0]])
    p, err = mvt_rectangle(np.array([1.68, 1.68]), np.array([3.0, 3.1]), corr, 46)
    assert 0.0 <= p <= 1.0
    assert 0.0 < err < 5e-4
