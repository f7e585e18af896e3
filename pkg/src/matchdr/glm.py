"""Small GLM toolkit: IRLS for logistic and Poisson models, weighted least
squares, and HC0 sandwich covariances.

All routines take a dense design matrix that already carries an intercept
column when one is wanted. Column names are only used in error messages.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.special import expit

from .errors import NoConvergence, RankDeficient, SeparationError

# |eta| beyond this means fitted probabilities within ~4e-18 of 0 or 1
_SEPARATION_ETA = 40.0
_POISSON_ETA_MAX = 50.0


@dataclass
class GLMFit:
    coef: np.ndarray
    n_iter: int
    converged: bool
    loglik: float
    loglik_path: list = field(default_factory=list)
    fitted: np.ndarray | None = None


def aliased_columns(X, names=None, rtol=1e-10):
    """Return the names (or indices) of columns that are linearly dependent
    on earlier-pivoted columns, found by rank-revealing QR."""
    X = np.asarray(X, dtype=float)
    if X.shape[1] == 0:
        return []
    scale = np.sqrt((X**2).sum(axis=0))
    scale[scale == 0] = 1.0
    _, r, piv = linalg.qr(X / scale, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    if diag.size == 0:
        return []
    rank = int((diag > rtol * diag[0]).sum()) if diag[0] > 0 else 0
    bad = sorted(piv[rank:].tolist())
    zero = [j for j in range(X.shape[1]) if not np.any(X[:, j])]
    bad = sorted(set(bad) | set(zero))
    if names is None:
        return bad
    return [names[j] for j in bad]


def check_full_rank(X, names=None):
    bad = aliased_columns(X, names)
    if bad:
        raise RankDeficient(f"design matrix is rank deficient; aliased columns: {bad}", bad)


def _logistic_loglik(X, y, beta):
    eta = X @ beta
    # log(1 + exp(eta)) computed stably
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


def irls_logistic(X, y, *, max_iter=100, tol=1e-8, max_halvings=10, names=None):
    """Maximum-likelihood logistic regression by Newton/IRLS with step-halving.

    Convergence is declared when the largest absolute coefficient change in
    an iteration falls below ``tol``. Raises ``SeparationError`` when the
    linear predictor diverges, ``NoConvergence`` when ``max_iter`` is hit.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    names = list(names) if names is not None else [f"x{j}" for j in range(p)]
    beta = np.zeros(p)
    ll = _logistic_loglik(X, y, beta)
    path = [ll]
    for it in range(1, max_iter + 1):
        eta = X @ beta
        mu = expit(eta)
        w = mu * (1.0 - mu)
        grad = X.T @ (y - mu)
        hess = (X * w[:, None]).T @ X
        try:
            step = linalg.solve(hess, grad, assume_a="pos")
        except (linalg.LinAlgError, ValueError):
            step = linalg.lstsq(hess, grad)[0]
        t = 1.0
        new = beta + step
        new_ll = _logistic_loglik(X, y, new)
        halvings = 0
        while new_ll < ll - 1e-12 * max(1.0, abs(ll)) and halvings < max_halvings:
            t *= 0.5
            new = beta + t * step
            new_ll = _logistic_loglik(X, y, new)
            halvings += 1
        change = np.max(np.abs(new - beta)) if p else 0.0
        beta, ll = new, new_ll
        path.append(ll)
        if np.max(np.abs(X @ beta)) > _SEPARATION_ETA:
            mag = np.abs(beta)
            mag[[j for j, nm in enumerate(names) if nm == "(intercept)"]] = 0.0
            cutoff = 0.1 * mag.max() if mag.max() > 0 else np.inf
            offending = [names[j] for j in np.argsort(-mag) if mag[j] >= cutoff]
            raise SeparationError(
                f"fitted probabilities reached 0 or 1 (quasi-)separation; offending columns: {offending}",
                offending,
            )
        if change < tol:
            return GLMFit(beta, it, True, ll, path, expit(X @ beta))
    raise NoConvergence(f"IRLS did not converge in {max_iter} iterations (last change {change:.3g})")


def _poisson_loglik(X, y, beta, weights):
    eta = X @ beta
    return float(np.sum(weights * (y * eta - np.exp(eta))))


def irls_poisson(X, y, weights=None, *, max_iter=100, tol=1e-8, max_halvings=10):
    """Poisson log-link GLM by IRLS. Raises ``FloatingPointError`` on
    numerical blow-up so callers can fall back to least squares."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    a = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    if np.any(y < 0):
        raise ValueError("Poisson outcome must be non-negative")
    # start from log of the weighted mean, a standard safe initialization
    beta = np.zeros(p)
    ybar = np.sum(a * y) / np.sum(a)
    intercept = np.flatnonzero(np.all(X == 1.0, axis=0))
    if intercept.size:
        beta[intercept[0]] = np.log(max(ybar, 1e-8))
    with np.errstate(over="raise", invalid="raise"):
        ll = _poisson_loglik(X, y, beta, a)
        path = [ll]
        for it in range(1, max_iter + 1):
            eta = X @ beta
            if np.max(eta) > _POISSON_ETA_MAX:
                raise FloatingPointError("Poisson linear predictor overflow")
            mu = np.exp(eta)
            grad = X.T @ (a * (y - mu))
            hess = (X * (a * mu)[:, None]).T @ X
            step = _newton_step(hess, grad)
            t = 1.0
            new = beta + step
            new_ll = _safe_poisson_ll(X, y, new, a)
            halvings = 0
            while (not np.isfinite(new_ll) or new_ll < ll - 1e-12 * max(1.0, abs(ll))) and halvings < max_halvings:
                t *= 0.5
                new = beta + t * step
                new_ll = _safe_poisson_ll(X, y, new, a)
                halvings += 1
            if not np.isfinite(new_ll):
                raise FloatingPointError("Poisson log-likelihood not finite")
            change = np.max(np.abs(new - beta)) if p else 0.0
            # a level whose counts are all zero sends its coefficient to -inf at
            # a fixed pace; stop once the likelihood has flattened instead
            flat = abs(new_ll - ll) < 1e-10 * (abs(new_ll) + 0.1)
            beta, ll = new, new_ll
            path.append(ll)
            if change < tol or (flat and it > 1):
                fitted = np.exp(X @ beta)
                if not np.all(np.isfinite(fitted)):
                    raise FloatingPointError("Poisson fitted values not finite")
                return GLMFit(beta, it, True, ll, path, fitted)
    raise NoConvergence(f"Poisson IRLS did not converge in {max_iter} iterations")


def _newton_step(hess, grad, rcond=1e-13):
    # explicit conditioning check on the scaled Cholesky factor instead of
    # scipy's LinAlgWarning, which is process-global and not thread safe
    d = np.sqrt(np.diag(hess))
    if not np.all(np.isfinite(d)) or np.any(d == 0):
        raise FloatingPointError("Poisson Hessian has a zero or non-finite diagonal")
    try:
        c, low = linalg.cho_factor(hess / np.outer(d, d), check_finite=False)
    except linalg.LinAlgError as exc:
        raise FloatingPointError("Poisson Hessian is not positive definite") from exc
    diag = np.abs(np.diag(c))
    if diag.min() ** 2 < rcond * diag.max() ** 2:
        raise FloatingPointError("Poisson Hessian is numerically singular")
    return linalg.cho_solve((c, low), grad / d, check_finite=False) / d


def _safe_poisson_ll(X, y, beta, a):
    eta = X @ beta
    if np.max(eta) > _POISSON_ETA_MAX:
        return -np.inf
    return _poisson_loglik(X, y, beta, a)


def weighted_least_squares(X, y, weights=None):
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if weights is None:
        coef = linalg.lstsq(X, y)[0]
    else:
        sw = np.sqrt(np.asarray(weights, dtype=float))
        coef = linalg.lstsq(X * sw[:, None], y * sw)[0]
    return GLMFit(coef, 1, True, np.nan, [], X @ coef)


def cholesky_least_squares(X, y, weights=None, rcond=1e-10):
    """Weighted least squares through the normal equations.

    Much cheaper than ``lstsq`` for tall, narrow designs. Raises
    ``RankDeficient`` when the column-scaled Gram matrix is numerically
    singular, so callers can retry with a rank-revealing path.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    a = np.ones(X.shape[0]) if weights is None else np.asarray(weights, dtype=float)
    Xa = X * a[:, None]
    gram = Xa.T @ X
    d = np.sqrt(np.diag(gram))
    if np.any(d == 0):
        raise RankDeficient("zero column in design", [])
    scaled = gram / np.outer(d, d)
    try:
        c, low = linalg.cho_factor(scaled, check_finite=False)
    except linalg.LinAlgError as exc:
        raise RankDeficient("Gram matrix is not positive definite", []) from exc
    diag = np.abs(np.diag(c))
    if diag.min() ** 2 < rcond * diag.max() ** 2:
        raise RankDeficient("Gram matrix is numerically singular", [])
    coef = linalg.cho_solve((c, low), (Xa.T @ y) / d, check_finite=False) / d
    return GLMFit(coef, 1, True, np.nan, [], X @ coef)


def hc0_covariance(X, resid, working_weights=None, prior_weights=None):
    """HC0 sandwich ``B^-1 M B^-1`` on the working (whitened) scale.

    ``working_weights`` are the GLM IRLS weights (``mu`` for Poisson, 1 for
    Gaussian); ``resid`` are raw response residuals ``y - mu``. With unit
    weights this is ``(X'X)^-1 X' diag(r^2) X (X'X)^-1``.
    """
    X = np.asarray(X, dtype=float)
    r = np.asarray(resid, dtype=float)
    n = X.shape[0]
    ww = np.ones(n) if working_weights is None else np.asarray(working_weights, dtype=float)
    a = np.ones(n) if prior_weights is None else np.asarray(prior_weights, dtype=float)
    bread = (X * (a * ww)[:, None]).T @ X
    meat = (X * (a**2 * r**2)[:, None]).T @ X
    binv = linalg.pinv(bread)
    return binv @ meat @ binv
