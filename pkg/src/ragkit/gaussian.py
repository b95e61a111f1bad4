"""Multivariate Gaussian log-density helpers for small dimensions."""
from __future__ import annotations

import numpy as np

_LOG_2PI = float(np.log(2.0 * np.pi))


def log_density(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> float:
    """Log N(x; mean, cov) for a single point."""
    return float(log_density_many(np.asarray(x, float)[None, :], mean, cov)[0])


def log_density_many(points: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """Log N(x; mean, cov) for each row of ``points``; shape (n,)."""
    points = np.asarray(points, dtype=np.float64)
    mean = np.asarray(mean, dtype=np.float64)
    cov = np.asarray(cov, dtype=np.float64)
    d = mean.shape[0]
    if d == 0:
        return np.zeros(points.shape[0])
    chol = np.linalg.cholesky(cov)
    diff = points - mean
    sol = np.linalg.solve(chol, diff.T)  # (d, n)
    maha = np.sum(sol * sol, axis=0)
    logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
    return -0.5 * (d * _LOG_2PI + logdet + maha)
