"""Pooled outcome regressions and propensity model (ridge and penalized IRLS logistic)."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .scm import MultiEnvDataset, sigmoid

log = logging.getLogger(__name__)

DEFAULT_LAMBDA = 1e-3
LAMBDA_FLOOR = 1e-8
CLIP = (0.01, 0.99)


class PositivityError(ValueError):
    """The pooled sample lacks treated or control rows."""


def _design(X, n=None):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1) if n is None or X.size == n else X.reshape(n, -1)
    return X


@dataclass(frozen=True)
class LinearModel:
    coefficients: np.ndarray
    intercept: float
    ridge_lambda: float = DEFAULT_LAMBDA

    def predict(self, X) -> np.ndarray:
        X = _design(X)
        if len(self.coefficients) == 0:
            return np.full(X.shape[0], self.intercept)
        return X @ self.coefficients + self.intercept


@dataclass(frozen=True)
class LogisticModel:
    coefficients: np.ndarray
    intercept: float
    ridge_lambda: float = DEFAULT_LAMBDA
    clip: tuple[float, float] = CLIP
    grad_norm: float = 0.0
    n_iter: int = 0

    def decision(self, X) -> np.ndarray:
        X = _design(X)
        if len(self.coefficients) == 0:
            return np.full(X.shape[0], self.intercept)
        return X @ self.coefficients + self.intercept

    def predict_raw(self, X) -> np.ndarray:
        return sigmoid(self.decision(X))

    def predict(self, X) -> np.ndarray:
        lo, hi = self.clip
        return np.clip(self.predict_raw(X), lo, hi)


def fit_ridge(X, y, lam: float = DEFAULT_LAMBDA) -> LinearModel:
    """Least squares with an L2 penalty on the slopes only (intercept unpenalized)."""
    y = np.asarray(y, dtype=float).ravel()
    X = _design(X, len(y))
    if len(y) < 1:
        raise ValueError("fit_ridge needs at least one row")
    lam_eff = max(float(lam), LAMBDA_FLOOR)
    y_mean = y.mean()
    if X.shape[1] == 0:
        return LinearModel(np.zeros(0), float(y_mean), lam_eff)
    x_mean = X.mean(axis=0)
    Xc = X - x_mean
    gram = Xc.T @ Xc + lam_eff * np.eye(X.shape[1])
    beta = np.linalg.solve(gram, Xc.T @ (y - y_mean))
    return LinearModel(beta, float(y_mean - x_mean @ beta), lam_eff)


def _logit(p):
    return float(np.log(p / (1.0 - p)))


def fit_logistic(X, t, lam: float = DEFAULT_LAMBDA, max_iter: int = 100, tol: float = 1e-8,
                 clip: tuple[float, float] = CLIP) -> LogisticModel:
    """Ridge-penalized logistic regression by Newton/IRLS with step halving.

    Minimizes ``-loglik(beta, b) + lam/2 * ||beta||^2``. Falls back to an
    intercept-only model (clipped treated fraction) when one class is absent.
    """
    t = np.asarray(t, dtype=float).ravel()
    if not np.all((t == 0.0) | (t == 1.0)):
        raise ValueError("treatment must be binary 0/1")
    X = _design(X, len(t))
    n, q = X.shape
    lam_eff = max(float(lam), 0.0)
    frac = t.mean() if n else 0.5
    if n < 2 or frac in (0.0, 1.0):
        return LogisticModel(np.zeros(q), _logit(np.clip(frac, *clip)), lam_eff, clip)

    A = np.column_stack([X, np.ones(n)])
    pen = np.full(q + 1, lam_eff)
    pen[-1] = 0.0
    theta = np.zeros(q + 1)
    theta[-1] = _logit(frac)

    def objective(th):
        z = A @ th
        # log(1 + exp(z)) - t z, computed stably
        return float(np.sum(np.logaddexp(0.0, z) - t * z) + 0.5 * np.sum(pen * th * th))

    obj = objective(theta)
    gnorm = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        p = sigmoid(A @ theta)
        grad = A.T @ (p - t) + pen * theta
        gnorm = float(np.linalg.norm(grad))
        if gnorm <= tol:
            break
        w = p * (1.0 - p)
        hess = (A * w[:, None]).T @ A + np.diag(pen) + 1e-12 * np.eye(q + 1)
        step = np.linalg.solve(hess, grad)
        scale = 1.0
        while True:
            cand = theta - scale * step
            cand_obj = objective(cand)
            if cand_obj <= obj or scale < 1e-10:
                break
            scale *= 0.5
        theta, obj = cand, cand_obj
    else:
        p = sigmoid(A @ theta)
        gnorm = float(np.linalg.norm(A.T @ (p - t) + pen * theta))
        log.debug("IRLS hit max_iter=%d with gradient norm %.3g", max_iter, gnorm)
    return LogisticModel(theta[:-1].copy(), float(theta[-1]), lam_eff, clip, gnorm, it)


class Nuisances(NamedTuple):
    mu0: LinearModel
    mu1: LinearModel
    pi: LogisticModel


def pooled_nuisances(data: MultiEnvDataset, S: Sequence[int], lam: float = DEFAULT_LAMBDA) -> Nuisances:
    """Fit ``mu_0``, ``mu_1`` and ``pi`` on all environments pooled, using columns ``S``."""
    pooled = data.pooled()
    cols = list(S)
    XS = pooled.X[:, cols]
    treated = pooled.T == 1.0
    n1 = int(treated.sum())
    if n1 == 0 or n1 == len(treated):
        raise PositivityError(
            f"pooled treatment has a single class ({n1} treated of {len(treated)}); "
            "outcome regressions per arm are undefined"
        )
    mu1 = fit_ridge(XS[treated], pooled.Y[treated], lam)
    mu0 = fit_ridge(XS[~treated], pooled.Y[~treated], lam)
    pi = fit_logistic(XS, pooled.T, lam)
    return Nuisances(mu0, mu1, pi)
