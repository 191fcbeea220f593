"""Frequency-weighted logistic regression by Newton-Raphson."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import RankDeficient, Separation

# |coef| beyond this on a logit scale only happens when the MLE runs off to infinity
SEPARATION_BOUND = 20.0


@dataclass
class LogisticFit:
    coef: np.ndarray
    cov: np.ndarray
    n_obs: float
    iterations: int

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov))


def compress_rows(d: np.ndarray, y: np.ndarray, weights=None):
    """Collapse duplicate (design row, y) pairs into frequency weights."""
    w = np.ones(len(y)) if weights is None else np.asarray(weights, float)
    key = np.hstack([d, y[:, None]])
    uniq, inv = np.unique(key, axis=0, return_inverse=True)
    return uniq[:, :-1], uniq[:, -1], np.bincount(inv.reshape(-1), weights=w)


def newton_logistic(d: np.ndarray, y: np.ndarray, weights=None, offset=None,
                    max_iter: int = 50, tol: float = 1e-10) -> LogisticFit:
    """Maximum-likelihood logistic fit; covariance is the inverse observed information."""
    d = np.asarray(d, float)
    y = np.asarray(y, float)
    w = np.ones(len(y)) if weights is None else np.asarray(weights, float)
    off = np.zeros(len(y)) if offset is None else np.asarray(offset, float)
    keep = w > 0
    d, y, w, off = d[keep], y[keep], w[keep], off[keep]
    k = d.shape[1]
    if len(y) == 0 or np.linalg.matrix_rank(d) < k:
        raise RankDeficient(f"design matrix has rank < {k}")
    beta = np.zeros(k)

    def loglik(b):
        eta = d @ b + off
        return float(w @ (y * eta - np.logaddexp(0.0, eta)))

    cur = loglik(beta)
    for it in range(1, max_iter + 1):
        p = expit(d @ beta + off)
        grad = d.T @ (w * (y - p))
        info = (d * (w * p * (1 - p))[:, None]).T @ d
        try:
            step = np.linalg.solve(info, grad)
        except np.linalg.LinAlgError:
            raise Separation("information matrix became singular") from None
        t = 1.0
        while True:
            cand = beta + t * step
            new = loglik(cand)
            if new >= cur - 1e-12 or t < 1e-8:
                break
            t /= 2
        beta, delta = cand, new - cur
        cur = new
        if np.max(np.abs(beta)) > SEPARATION_BOUND:
            raise Separation("coefficients diverge; data look separated")
        if abs(delta) < tol and np.max(np.abs(t * step)) < 1e-8:
            break
    else:
        raise Separation(f"Newton-Raphson did not converge in {max_iter} iterations")
    p = expit(d @ beta + off)
    info = (d * (w * p * (1 - p))[:, None]).T @ d
    try:
        cov = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        raise Separation("observed information is singular at the optimum") from None
    return LogisticFit(beta, cov, float(w.sum()), it)
