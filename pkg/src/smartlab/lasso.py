"""Lasso regression by cyclic coordinate descent.

Columns are standardized internally (mean 0, population SD 1) and the
intercept is left unpenalized.  Coefficients are always reported on the
original column scale.  The solver works on the Gram matrix, so a sweep
costs O(p^2) regardless of the number of rows.
"""
import warnings

import numpy as np
from numba import njit
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.exceptions import ConvergenceWarning
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y


@njit(cache=True)
def soft_threshold(z, t):
    if z > t:
        return z - t
    if z < -t:
        return z + t
    return 0.0


@njit(cache=True)
def _objective(gram, xty, yty, beta, lam):
    # (1/2n)||y - Xb||^2 + lam*||b||_1 written in Gram form
    p = beta.shape[0]
    quad = 0.0
    lin = 0.0
    l1 = 0.0
    for j in range(p):
        bj = beta[j]
        if bj == 0.0:
            continue
        lin += bj * xty[j]
        l1 += abs(bj)
        acc = 0.0
        for k in range(p):
            acc += gram[j, k] * beta[k]
        quad += bj * acc
    return 0.5 * yty - lin + 0.5 * quad + lam * l1


@njit(cache=True)
def _duality_gap(gram, xty, yty, beta, grad, lam):
    # grad = X'r/n; the dual point is the residual scaled into the feasible box
    bx = 0.0
    bgb = 0.0
    l1 = 0.0
    gmax = 0.0
    p = beta.shape[0]
    for j in range(p):
        bx += beta[j] * xty[j]
        bgb += beta[j] * (xty[j] - grad[j])
        l1 += abs(beta[j])
        if gram[j, j] > 0.0 and abs(grad[j]) > gmax:
            gmax = abs(grad[j])
    r_sq = yty - 2.0 * bx + bgb
    r_y = yty - bx
    s = 1.0 if gmax <= lam else lam / gmax
    primal = 0.5 * r_sq + lam * l1
    dual = s * r_y - 0.5 * s * s * r_sq
    return primal - dual


@njit(cache=True)
def _cd_solve(gram, xty, lam, beta, tol, max_sweeps, history, yty):
    """Run coordinate-descent sweeps in place on ``beta``.

    Stops when the largest coefficient change falls below ``tol`` or the
    duality gap falls below ``1e-15 * yty``.  The second rule matters for
    collinear columns, where the coefficients drift along a flat direction
    long after the fit itself has settled.  Returns (sweeps, last max
    |delta|, converged).  When ``history`` is non-empty the objective after
    each sweep is written into it.
    """
    p = beta.shape[0]
    grad = xty.copy()
    for j in range(p):
        if beta[j] != 0.0:
            for k in range(p):
                grad[k] -= gram[k, j] * beta[j]
    max_delta = 0.0
    active = np.empty(p, dtype=np.int64)
    full = True
    n_active = p
    for j in range(p):
        active[j] = j
    for sweep in range(max_sweeps):
        max_delta = 0.0
        if full:
            n_active = p
            for j in range(p):
                active[j] = j
        for idx in range(n_active):
            j = active[idx]
            gjj = gram[j, j]
            if gjj <= 0.0:
                continue
            old = beta[j]
            new = soft_threshold(grad[j] + gjj * old, lam) / gjj
            d = new - old
            if d != 0.0:
                beta[j] = new
                for k in range(p):
                    grad[k] -= gram[k, j] * d
                if abs(d) > max_delta:
                    max_delta = abs(d)
        if history.shape[0] > sweep:
            history[sweep] = _objective(gram, xty, yty, beta, lam)
        done = max_delta < tol or _duality_gap(gram, xty, yty, beta, grad, lam) <= 1e-15 * yty
        if done and full:
            return sweep + 1, max_delta, True
        if done or full:
            # after a full sweep, iterate on the nonzero set; once that
            # settles, confirm with another full sweep
            full = done
            if not full:
                n_active = 0
                for j in range(p):
                    if beta[j] != 0.0:
                        active[n_active] = j
                        n_active += 1
                if n_active == 0:
                    full = True
    return max_sweeps, max_delta, False


@njit(cache=True)
def _cd_path(gram, xty, yty, lambdas, tol, max_sweeps):
    p = xty.shape[0]
    n_lam = lambdas.shape[0]
    betas = np.zeros((n_lam, p))
    beta = np.zeros(p)
    empty = np.zeros(0)
    worst = 0
    for i in range(n_lam):
        sweeps, _, _ = _cd_solve(gram, xty, lambdas[i], beta, tol, max_sweeps, empty, yty)
        if sweeps > worst:
            worst = sweeps
        betas[i] = beta
    return betas, worst


def _standardize(X, y):
    n = X.shape[0]
    x_mean = X.mean(axis=0)
    Xc = X - x_mean
    x_scale = np.sqrt((Xc * Xc).sum(axis=0) / n)
    # constant columns: keep zero gram diagonal so the solver skips them
    constant = x_scale <= 1e-12 * np.maximum(1.0, np.abs(x_mean))
    x_scale = np.where(constant, 1.0, x_scale)
    Xs = Xc / x_scale
    Xs[:, constant] = 0.0
    y_mean = y.mean()
    yc = y - y_mean
    return Xs, yc, x_mean, x_scale, y_mean


def _gram(Xs, yc):
    n = Xs.shape[0]
    return Xs.T @ Xs / n, Xs.T @ yc / n, float(yc @ yc) / n


def _unstandardize(beta_std, x_mean, x_scale, y_mean):
    coef = beta_std / x_scale
    return coef, y_mean - x_mean @ coef


def lambda_max(X, y):
    """Smallest penalty at which every standardized coefficient is zero."""
    Xs, yc, *_ = _standardize(np.asarray(X, float), np.asarray(y, float))
    return float(np.max(np.abs(Xs.T @ yc)) / Xs.shape[0]) if Xs.shape[1] else 0.0


def lasso_path_grid(lam_max, n_lambdas=50, eps=1e-3):
    if lam_max <= 0:
        return np.zeros(1)
    return np.geomspace(lam_max, lam_max * eps, n_lambdas)


def lasso_fit(X, y, lam, tol=1e-10, max_sweeps=10_000, return_info=False):
    """Fit a Lasso at a single penalty.

    Minimizes ``(1/2n)||y - b0 - X b||^2 + lam * ||b_std||_1`` where the L1
    norm is taken on standardized coefficients.  Returns ``(intercept, coef)``
    or, with ``return_info``, ``(intercept, coef, info)`` where ``info``
    holds the sweep count and per-sweep objective values.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or X.shape[0] < 1 or y.shape != (X.shape[0],):
        raise ValueError(f"bad shapes X={X.shape} y={y.shape}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("non-finite values in design or response")
    if lam < 0:
        raise ValueError("lam must be >= 0")
    Xs, yc, x_mean, x_scale, y_mean = _standardize(X, y)
    gram, xty, yty = _gram(Xs, yc)
    beta = np.zeros(X.shape[1])
    history = np.zeros(max_sweeps if return_info else 0)
    sweeps, delta, converged = _cd_solve(gram, xty, float(lam), beta, float(tol),
                                         int(max_sweeps), history, yty)
    if not converged:
        warnings.warn(
            f"coordinate descent did not converge: {sweeps} sweeps, "
            f"last max coefficient change {delta:.3g} >= tol {tol:.3g}",
            ConvergenceWarning,
        )
    coef, intercept = _unstandardize(beta, x_mean, x_scale, y_mean)
    if return_info:
        return intercept, coef, {"sweeps": sweeps, "max_delta": delta,
                                 "converged": converged, "objective": history[:sweeps].copy()}
    return intercept, coef


def cv_lambda_path(X, y, n_folds=10, n_lambdas=50, eps=1e-3, rng=None,
                   tol=1e-7, max_sweeps=10_000, return_folds=False):
    """K-fold CV error along a log-spaced penalty path.

    Returns ``(lambdas, cv_mse)``.  Folds come from a permutation drawn from
    ``rng`` (a numpy Generator or seed).
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n = X.shape[0]
    lambdas = lasso_path_grid(lambda_max(X, y), n_lambdas, eps)
    rng = np.random.default_rng(rng)
    folds = np.empty(n, dtype=np.int64)
    folds[rng.permutation(n)] = np.arange(n) % n_folds
    fold_mse = np.zeros((n_folds, lambdas.shape[0]))
    for k in range(n_folds):
        test = folds == k
        Xs, yc, x_mean, x_scale, y_mean = _standardize(X[~test], y[~test])
        gram, xty, yty = _gram(Xs, yc)
        betas, _ = _cd_path(gram, xty, yty, lambdas, tol, max_sweeps)
        pred = ((X[test] - x_mean) / x_scale) @ betas.T + y_mean
        fold_mse[k] = ((pred - y[test][:, None]) ** 2).mean(axis=0)
    if return_folds:
        return lambdas, fold_mse
    return lambdas, fold_mse.mean(axis=0)


def _pick(lambdas, fold_mse, rule):
    mse = fold_mse.mean(axis=0)
    best = int(np.argmin(mse))
    if rule == "min":
        return best
    if rule != "1se":
        raise ValueError(f"unknown selection rule {rule!r}")
    se = fold_mse.std(axis=0, ddof=1) / np.sqrt(fold_mse.shape[0])
    # lambdas run high to low, so the first index under the bar is the largest
    return int(np.flatnonzero(mse <= mse[best] + se[best])[0])


def select_lambda(X, y, rng=None, n_folds=10, n_lambdas=50, eps=1e-3, rule="min"):
    """Penalty chosen by K-fold CV; ``lambda_max`` for a flat response.

    ``rule="min"`` takes the CV-error minimizer, ``"1se"`` the largest
    penalty within one standard error of it.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.shape[0] < 20:
        raise ValueError("cross-validated penalty selection needs n >= 20")
    if np.ptp(y) == 0.0:
        return lambda_max(X, y)
    lambdas, fold_mse = cv_lambda_path(X, y, n_folds, n_lambdas, eps, rng, return_folds=True)
    return float(lambdas[_pick(lambdas, fold_mse, rule)])


class LassoCD(RegressorMixin, BaseEstimator):
    """Lasso at a fixed penalty ``alpha``, solved by coordinate descent."""

    def __init__(self, alpha=1.0, tol=1e-10, max_iter=10_000):
        self.alpha = alpha
        self.tol = tol
        self.max_iter = max_iter

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=float, y_numeric=True)
        self.intercept_, self.coef_, info = lasso_fit(
            X, y, self.alpha, self.tol, self.max_iter, return_info=True)
        self.n_iter_ = info["sweeps"]
        self.objective_path_ = info["objective"]
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=float)
        return X @ self.coef_ + self.intercept_


class LassoCVCD(RegressorMixin, BaseEstimator):
    """Lasso with the penalty chosen by K-fold cross-validation.

    The path runs over ``n_alphas`` log-spaced values from ``lambda_max``
    down to ``eps * lambda_max``; the penalty picked by ``rule`` ("min" or
    "1se") is refit on all rows.  The default ``tol`` is looser than
    :class:`LassoCD`'s: penalty selection and the refit are insensitive to
    it, and it halves the cost of a fit.
    """

    def __init__(self, n_folds=10, n_alphas=50, eps=1e-3, rule="min", tol=1e-7,
                 max_iter=10_000, random_state=None):
        self.n_folds = n_folds
        self.rule = rule
        self.n_alphas = n_alphas
        self.eps = eps
        self.tol = tol
        self.max_iter = max_iter
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=float, y_numeric=True)
        if np.ptp(y) == 0.0:
            self.alphas_ = np.array([lambda_max(X, y)])
            self.cv_mse_ = np.zeros(1)
            self.alpha_ = float(self.alphas_[0])
        else:
            if X.shape[0] < 20:
                raise ValueError("cross-validated penalty selection needs n >= 20")
            self.alphas_, fold_mse = cv_lambda_path(
                X, y, self.n_folds, self.n_alphas, self.eps, self.random_state,
                self.tol, self.max_iter, return_folds=True)
            self.cv_mse_ = fold_mse.mean(axis=0)
            self.alpha_ = float(self.alphas_[_pick(self.alphas_, fold_mse, self.rule)])
        self.intercept_, self.coef_ = lasso_fit(X, y, self.alpha_, self.tol, self.max_iter)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=float)
        return X @ self.coef_ + self.intercept_
