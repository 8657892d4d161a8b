"""Gaussian and Gaussian-mixture densities evaluated in log space."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
LOG_2PI = np.log(2.0 * np.pi)


def logsumexp_rows(a, keepdims: bool = False) -> np.ndarray:
    """log(sum(exp(a), axis=1)) for a 2-D array; all -inf rows give -inf."""
    m = a.max(axis=1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.exp(a - m).sum(axis=1, keepdims=True)) + m
    return out if keepdims else out[:, 0]


def gaussian_logpdf(x, mean, cov):
    """Log density of N(mean, cov) at each row of ``x``.

    Handles singular covariances via a pseudo-determinant so that the
    zero-variance degenerate families used in tests stay finite on-support.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    diff = x - mean
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        return _pinv_logpdf(diff, cov)
    sol = solve_triangular(chol, diff.T, lower=True, check_finite=False)
    maha = np.sum(sol**2, axis=0)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return -0.5 * (x.shape[1] * LOG_2PI + logdet + maha)


def _pinv_logpdf(diff, cov):
    vals, vecs = np.linalg.eigh(cov)
    keep = vals > 1e-12 * max(vals.max(), 1.0)
    if not keep.any():
        on = np.all(np.abs(diff) < 1e-12, axis=1)
        return np.where(on, 0.0, -np.inf)
    proj = diff @ vecs[:, keep]
    maha = np.sum(proj**2 / vals[keep], axis=1)
    resid = diff - proj @ vecs[:, keep].T
    off = np.any(np.abs(resid) > 1e-9, axis=1)
    out = -0.5 * (keep.sum() * LOG_2PI + np.sum(np.log(vals[keep])) + maha)
    return np.where(off, -np.inf, out)


@dataclass(frozen=True)
class GaussianMixture:
    """Finite mixture of full-covariance Gaussians."""

    weights: np.ndarray  # (k,)
    means: np.ndarray  # (k, d)
    covs: np.ndarray  # (k, d, d)

    @property
    def k(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def component_logpdf(self, x) -> np.ndarray:
        """(n, k) matrix of log N(x_i; mu_j, Sigma_j)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        try:
            chol = np.linalg.cholesky(self.covs)
        except np.linalg.LinAlgError:
            return np.column_stack(
                [gaussian_logpdf(x, m, c) for m, c in zip(self.means, self.covs)]
            )
        inv = np.linalg.inv(chol)  # (k, d, d), lower triangular
        diff = x[None, :, :] - self.means[:, None, :]  # (k, n, d)
        maha = np.sum(np.matmul(diff, np.transpose(inv, (0, 2, 1))) ** 2, axis=2)
        logdet = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=1, axis2=2)), axis=1)
        return (-0.5 * (x.shape[1] * LOG_2PI + logdet[:, None] + maha)).T

    def joint_logpdf(self, x) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return self.component_logpdf(x) + np.log(self.weights)

    def logpdf(self, x) -> np.ndarray:
        return logsumexp_rows(self.joint_logpdf(x))

    def log_responsibilities(self, x) -> np.ndarray:
        joint = self.joint_logpdf(x)
        return joint - logsumexp_rows(joint, keepdims=True)

    def sample(self, n: int, rng: np.random.Generator):
        """Draw ``n`` points; returns (points, component labels)."""
        labels = rng.choice(self.k, size=n, p=self.weights)
        out = np.empty((n, self.dim))
        for j in range(self.k):
            idx = np.flatnonzero(labels == j)
            if idx.size:
                out[idx] = rng.multivariate_normal(
                    self.means[j], self.covs[j], size=idx.size, method="eigh"
                )
        return out, labels
