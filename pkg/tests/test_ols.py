import numpy as np
import pytest

from oracles import normal_two_sided_p
from staggerdid.ols import fit_ols, normal_p_value, priority_qr, small_sample_factor


def test_priority_qr_keeps_early_columns(rng):
    a = rng.normal(size=50)
    b = rng.normal(size=50)
    X = np.column_stack([a, b, a + b, 2 * a, rng.normal(size=50)])
    kept, Q, R = priority_qr(X)
    assert kept == [0, 1, 4]
    assert np.allclose(Q @ R, X[:, kept], atol=1e-12)
    assert np.allclose(Q.T @ Q, np.eye(3), atol=1e-12)


def test_fit_matches_lstsq_and_marks_dropped(rng):
    X = rng.normal(size=(80, 3))
    X = np.column_stack([X, X[:, 0] - X[:, 2]])
    y = X[:, :3] @ np.array([1.0, -2.0, 0.5]) + rng.normal(size=80)
    fit = fit_ols(X, y, names=["a", "b", "c", "d"])
    ref, *_ = np.linalg.lstsq(X[:, :3], y, rcond=None)
    assert np.allclose(fit.coefficients[:3], ref, rtol=1e-10)
    assert fit.column_map["d"] == "dropped" and np.isnan(fit.coef("d"))
    assert fit.df_resid == 77


def test_clustered_covariance_matches_explicit_sum(rng):
    n, G = 120, 30
    X = np.column_stack([np.ones(n), rng.normal(size=(n, 2))])
    y = X @ np.array([0.3, 1.0, -1.0]) + rng.normal(size=n)
    clusters = rng.integers(0, G, n)
    fit = fit_ols(X, y, clusters)
    bread = np.linalg.inv(X.T @ X)
    e = y - X @ np.linalg.solve(X.T @ X, X.T @ y)
    meat = sum(np.outer(X[clusters == c].T @ e[clusters == c],
                        X[clusters == c].T @ e[clusters == c])
               for c in np.unique(clusters))
    g = len(np.unique(clusters))
    V = g / (g - 1) * (n - 1) / (n - 3) * bread @ meat @ bread
    assert np.allclose(fit.covariance, V, rtol=1e-10)
    assert np.allclose(fit.covariance, fit.covariance.T)
    assert np.linalg.eigvalsh(fit.covariance).min() >= -1e-8 * np.abs(V).max()


def test_small_sample_factor():
    assert small_sample_factor(10, 20, 4) == pytest.approx(10 / 9 * 19 / 16)
    assert np.isnan(small_sample_factor(1, 20, 4))


@pytest.mark.parametrize("z,p,tol", [(1.96, 0.05, 1e-3), (3.0, 0.0027, 1e-4),
                                     (0.0, 1.0, 1e-12)])
def test_normal_p_value_examples(z, p, tol):
    assert abs(normal_p_value(z, 1.0) - p) <= tol
    assert abs(normal_p_value(-z, 1.0) - p) <= tol


def test_normal_p_value_matches_erfc(rng):
    for z in rng.normal(scale=3, size=200):
        assert normal_p_value(z, 1.0) == pytest.approx(normal_two_sided_p(z), rel=1e-12)


def test_zero_se_conventions():
    assert normal_p_value(2.0, 0.0) == 0.0
    assert normal_p_value(0.0, 0.0) == 1.0
    assert np.isnan(normal_p_value(np.nan, 1.0))
