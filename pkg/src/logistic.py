"""
Maximum-likelihood logistic regression by iteratively reweighted least squares.

Used for the outcome regression of the G-computation estimator and for the
pooled hazard models of the binned exposure densities. The design may be a
dense array or a scipy sparse matrix.
"""

from __future__ import annotations

import dataclasses
import logging
import warnings
from typing import Optional

import numpy as np
from scipy import sparse, special

from src.errors import EstimationError, SeparationWarning

logger = logging.getLogger(__name__)

IRLS_TOL = 1e-8
IRLS_MAX_ITER = 100
MAX_COEF = 50.0
ETA_CLIP = 35.0


@dataclasses.dataclass
class LogisticFit:
    coef: np.ndarray
    converged: bool
    iterations: int
    max_score: float
    separated: bool = False
    constant: Optional[float] = None  # outcome was constant: predictions are exactly this value

    def predict(self, design) -> np.ndarray:
        n = design.shape[0]
        if self.constant is not None:
            return np.full(n, self.constant)
        return special.expit(np.clip(_matvec(design, self.coef), -ETA_CLIP, ETA_CLIP))


def _matvec(design, coef: np.ndarray) -> np.ndarray:
    return np.asarray(design @ coef).ravel()


def _crossprod(design, w: np.ndarray) -> np.ndarray:
    if sparse.issparse(design):
        weighted = sparse.diags(w) @ design
        return np.asarray((design.T @ weighted).todense())
    return design.T @ (design * w[:, None])


def _score(design, resid: np.ndarray) -> np.ndarray:
    return np.asarray(design.T @ resid).ravel()


def fit_logistic(design, y, weights=None, tol: float = IRLS_TOL, max_iter: int = IRLS_MAX_ITER) -> LogisticFit:
    """
    Fit P(y=1 | x) = expit(x'b). Converged when max |score| < tol (or the
    Newton step stops changing b). A constant outcome or a coefficient that
    diverges past MAX_COEF is reported as separation: the last stable iterate is
    returned with a SeparationWarning.
    """
    y = np.asarray(y, dtype=float)
    n = design.shape[0]
    p = design.shape[1]
    if y.shape != (n,):
        raise EstimationError(f"outcome has shape {y.shape}, design has {n} rows")
    if np.isnan(y).any():
        raise EstimationError("outcome contains missing values")
    if not np.isin(y, (0.0, 1.0)).all():
        raise EstimationError("logistic outcome must be 0/1")
    if n <= p:
        raise EstimationError(f"need more rows than columns, got n={n}, p={p}")
    w_obs = np.ones(n) if weights is None else np.asarray(weights, dtype=float)

    if y.min() == y.max():
        msg = f"outcome is constant ({y[0]:g}); predictions fixed at that value"
        warnings.warn(msg, SeparationWarning, stacklevel=2)
        logger.warning(msg)
        return LogisticFit(np.zeros(p), True, 0, 0.0, separated=True, constant=float(y[0]))

    coef = np.zeros(p)
    stable = coef.copy()
    max_score = np.inf
    for iteration in range(1, max_iter + 1):
        eta = np.clip(_matvec(design, coef), -ETA_CLIP, ETA_CLIP)
        mu = special.expit(eta)
        score = _score(design, w_obs * (y - mu))
        max_score = float(np.max(np.abs(score)))
        if max_score < tol:
            return LogisticFit(coef, True, iteration - 1, max_score)
        info = _crossprod(design, w_obs * mu * (1.0 - mu))
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(info, score, rcond=None)[0]
        stable = coef
        coef = coef + step
        if np.max(np.abs(coef)) > MAX_COEF:
            msg = f"coefficients diverging after {iteration} iterations (quasi-separation)"
            warnings.warn(msg, SeparationWarning, stacklevel=2)
            logger.warning(msg)
            return LogisticFit(stable, False, iteration, max_score, separated=True)
        if np.max(np.abs(step)) < 1e-12 * (1.0 + np.max(np.abs(coef))):
            mu = special.expit(np.clip(_matvec(design, coef), -ETA_CLIP, ETA_CLIP))
            max_score = float(np.max(np.abs(_score(design, w_obs * (y - mu)))))
            return LogisticFit(coef, True, iteration, max_score)

    logger.warning("IRLS stopped after %d iterations, max |score| = %.3g", max_iter, max_score)
    return LogisticFit(coef, False, max_iter, max_score)


def with_intercept(columns, n: int) -> np.ndarray:
    """Stack covariate columns behind an intercept column of length n."""
    cols = [np.asarray(c, dtype=float) for c in columns]
    return np.column_stack([np.ones(n)] + cols)
