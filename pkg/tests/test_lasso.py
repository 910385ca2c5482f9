import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.base import clone
from sklearn.exceptions import ConvergenceWarning
from sklearn.linear_model import Lasso

from smartlab.lasso import (LassoCD, LassoCVCD, cv_lambda_path, lambda_max, lasso_fit,
                            select_lambda, soft_threshold)


def _problem(seed, n=50, p=10, sparse=False):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, p)) * rng.uniform(0.5, 3.0, size=p) + rng.normal(size=p)
    beta = rng.normal(size=p)
    if sparse:
        beta[p // 2:] = 0.0
    return X, X @ beta + 3.0 + rng.normal(size=n)


def _orthonormal_design(seed, n=40, p=6):
    # centered columns with X'X/n = I, so standardization is a no-op
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(n, p))
    A -= A.mean(axis=0)
    q, _ = np.linalg.qr(A)
    return q * np.sqrt(n)


def test_soft_threshold_values():
    assert soft_threshold(3.0, 1.0) == 2.0
    assert soft_threshold(-3.0, 1.0) == -2.0
    assert soft_threshold(0.5, 1.0) == 0.0
    assert soft_threshold(-1.0, 1.0) == 0.0


def test_zero_penalty_matches_least_squares():
    worst = 0.0
    for seed in range(100):
        X, y = _problem(seed)
        b0, b = lasso_fit(X, y, 0.0)
        ref = np.linalg.lstsq(np.column_stack([np.ones(len(y)), X]), y, rcond=None)[0]
        worst = max(worst, abs(b0 - ref[0]), np.abs(b - ref[1:]).max())
    assert worst <= 1e-8


@pytest.mark.parametrize("seed", range(5))
def test_orthonormal_design_is_soft_thresholding(seed):
    X = _orthonormal_design(seed)
    rng = np.random.default_rng(100 + seed)
    y = X @ rng.normal(size=X.shape[1]) + rng.normal(size=X.shape[0]) + 1.5
    z = X.T @ (y - y.mean()) / len(y)
    for lam in (0.0, 0.1, 0.5, 2.0):
        b0, b = lasso_fit(X, y, lam)
        expected = np.sign(z) * np.maximum(np.abs(z) - lam, 0.0)
        np.testing.assert_allclose(b, expected, atol=1e-10, rtol=0)
        assert b0 == pytest.approx(y.mean() - X.mean(axis=0) @ b, abs=1e-10)


@pytest.mark.parametrize("seed", range(4))
def test_agrees_with_sklearn_on_standardized_design(seed):
    X, y = _problem(seed, n=80, p=12, sparse=True)
    mu, sd = X.mean(axis=0), X.std(axis=0)
    lam = 0.3 * lambda_max(X, y)
    ref = Lasso(alpha=lam, tol=1e-14, max_iter=100_000).fit((X - mu) / sd, y)
    b0, b = lasso_fit(X, y, lam)
    np.testing.assert_allclose(b * sd, ref.coef_, atol=1e-7)
    assert b0 == pytest.approx(ref.intercept_ - (ref.coef_ / sd) @ mu, abs=1e-7)


def test_lambda_max_zeroes_everything():
    X, y = _problem(1)
    _, b = lasso_fit(X, y, lambda_max(X, y))
    assert np.all(b == 0.0)
    _, b = lasso_fit(X, y, 0.99 * lambda_max(X, y))
    assert np.count_nonzero(b) >= 1


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 1.0))
def test_objective_never_increases(seed, frac):
    X, y = _problem(seed, n=30, p=8)
    lam = frac * lambda_max(X, y)
    *_, info = lasso_fit(X, y, lam, return_info=True)
    obj = info["objective"]
    assert info["converged"]
    assert np.all(np.diff(obj) <= 1e-12 * max(1.0, abs(obj[0])))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_support_shrinks_along_penalty(seed):
    # not a theorem in general, but holds for these well-conditioned designs
    X, y = _problem(seed, n=200, p=5)
    lm = lambda_max(X, y)
    l1 = [np.abs(lasso_fit(X, y, f * lm)[1] * X.std(axis=0)).sum()
          for f in (0.01, 0.1, 0.5, 0.9)]
    assert all(a >= b - 1e-9 for a, b in zip(l1, l1[1:]))


def test_constant_column_gets_zero_coefficient():
    X, y = _problem(2)
    X[:, 3] = 7.0
    b0, b = lasso_fit(X, y, 0.0)
    assert b[3] == 0.0
    assert np.isfinite(b0)


def test_nonconvergence_warns():
    X, y = _problem(3)
    with pytest.warns(ConvergenceWarning):
        lasso_fit(X, y, 0.0, max_sweeps=1)


@pytest.mark.parametrize("bad", ["nan_x", "inf_y"])
def test_rejects_non_finite(bad):
    X, y = _problem(4)
    if bad == "nan_x":
        X[0, 0] = np.nan
    else:
        y[1] = np.inf
    with pytest.raises(ValueError):
        lasso_fit(X, y, 0.1)


def test_rejects_negative_penalty_and_bad_shapes():
    X, y = _problem(5)
    with pytest.raises(ValueError):
        lasso_fit(X, y, -0.1)
    with pytest.raises(ValueError):
        lasso_fit(X, y[:-1], 0.1)


def test_estimators_follow_sklearn_protocol():
    est = LassoCD(alpha=0.2, tol=1e-9)
    assert clone(est).get_params() == est.get_params()
    cv = LassoCVCD(rule="1se", random_state=3)
    assert clone(cv).get_params()["rule"] == "1se"
    X, y = _problem(6, n=100)
    fitted = est.fit(X, y)
    assert fitted is est and est.n_features_in_ == 10
    np.testing.assert_allclose(est.predict(X), X @ est.coef_ + est.intercept_)
    assert 0.0 < est.score(X, y) <= 1.0


def test_cv_is_deterministic_given_seed():
    X, y = _problem(7, n=120)
    a = LassoCVCD(random_state=11).fit(X, y)
    b = LassoCVCD(random_state=11).fit(X, y)
    assert a.alpha_ == b.alpha_
    np.testing.assert_array_equal(a.coef_, b.coef_)
    assert a.alpha_ in a.alphas_
    assert len(a.alphas_) == 50 and np.all(np.diff(a.alphas_) < 0)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_one_se_rule_never_picks_smaller_penalty(seed):
    X, y = _problem(seed, n=60, p=8, sparse=True)
    lam_min = select_lambda(X, y, rng=seed, rule="min")
    lam_1se = select_lambda(X, y, rng=seed, rule="1se")
    assert lam_1se >= lam_min


def test_cv_path_shape_and_flat_response():
    X, y = _problem(8, n=100)
    lambdas, folds = cv_lambda_path(X, y, n_folds=5, n_lambdas=20, rng=0, return_folds=True)
    assert folds.shape == (5, 20)
    flat = LassoCVCD().fit(X, np.full(100, 2.5))
    assert np.all(flat.coef_ == 0.0) and flat.intercept_ == pytest.approx(2.5)
    with pytest.raises(ValueError):
        select_lambda(X[:10], y[:10])
    with pytest.raises(ValueError):
        LassoCVCD(rule="bogus").fit(X, y)


def test_path_and_single_fits_converge_silently():
    X, y = _problem(9, n=150, p=10, sparse=True)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        lambdas, _ = cv_lambda_path(X, y, n_folds=3, n_lambdas=10, rng=0)
        for lam in lambdas[::3]:
            lasso_fit(X, y, lam)
