"""Squared-exponential kernel, Gram matrices and their hyperparameter gradients.

All hyperparameters are stored in log-space so that unconstrained gradient
steps keep lengthscale and signal variance positive.
"""

import hashlib
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .errors import IllConditionedKernelError, InputDomainError

__all__ = [
    "KernelHyperparams",
    "GramMatrix",
    "rbf",
    "eval_kernel",
    "build_gram",
    "grad_gram",
    "MAX_JITTER",
]

MIN_JITTER = 1e-8
MAX_JITTER = 1e-2


@dataclass(frozen=True)
class KernelHyperparams:
    log_lengthscale: float = 0.0
    log_signal_variance: float = 0.0
    jitter: float = MIN_JITTER

    def __post_init__(self):
        if not self.jitter >= 0:
            raise InputDomainError(f"jitter must be >= 0, got {self.jitter}")

    @property
    def lengthscale(self):
        return float(np.exp(self.log_lengthscale))

    @property
    def signal_variance(self):
        return float(np.exp(self.log_signal_variance))


@dataclass(frozen=True)
class GramMatrix:
    entries: np.ndarray
    jitter: float
    chol: np.ndarray
    inputs_hash: str


def rbf(x1, x2, log_lengthscale, log_signal_variance, xp=np):
    """Cross-covariance matrix between 1-D input arrays ``x1`` and ``x2``.

    ``xp`` selects the array namespace (``numpy`` or ``jax.numpy``) so the
    same expression backs both the eager and the differentiable paths.
    """
    d = x1[:, None] - x2[None, :]
    return xp.exp(log_signal_variance - 0.5 * d * d / xp.exp(2.0 * log_lengthscale))


def _check_finite(*values):
    for v in values:
        if not np.all(np.isfinite(v)):
            raise InputDomainError("kernel inputs must be finite")


def eval_kernel(x1, x2, hp):
    _check_finite(x1, x2)
    d = float(x1) - float(x2)
    return hp.signal_variance * float(np.exp(-0.5 * d * d / hp.lengthscale**2))


def _as_inputs(X):
    X = np.asarray(X, dtype=float).ravel()
    if X.size == 0:
        raise InputDomainError("X must be non-empty")
    _check_finite(X)
    return X


def _hash_inputs(X, hp):
    h = hashlib.sha1(X.tobytes())
    h.update(np.array([hp.log_lengthscale, hp.log_signal_variance]).tobytes())
    return h.hexdigest()


def _symmetric_gram(X, hp):
    K = rbf(X, X, hp.log_lengthscale, hp.log_signal_variance)
    # mirror the upper triangle so entries[i][j] is entries[j][i] bit for bit
    return np.triu(K) + np.triu(K, 1).T


def build_gram(X, hp):
    """Gram matrix with ``jitter * sigma^2`` on the diagonal.

    If the Cholesky factorization fails the jitter is raised tenfold, starting
    from at least ``1e-8``, until it would exceed ``1e-2``.
    """
    X = _as_inputs(X)
    K0 = _symmetric_gram(X, hp)
    sigma2 = hp.signal_variance
    jitter = hp.jitter
    while True:
        K = K0 + np.eye(len(X)) * (jitter * sigma2)
        try:
            L = linalg.cholesky(K, lower=True)
            if np.all(np.isfinite(L)):
                return GramMatrix(K, jitter, L, _hash_inputs(X, hp))
        except (linalg.LinAlgError, ValueError):
            # ValueError: scipy refuses non-finite entries (overflowed sigma^2)
            pass
        nxt = max(jitter * 10.0, MIN_JITTER)
        if nxt > MAX_JITTER:
            raise IllConditionedKernelError("Gram matrix is not positive definite", jitter)
        jitter = nxt


def grad_gram(X, hp):
    """Derivatives of the jitter-free Gram matrix w.r.t. the log-hyperparameters."""
    X = _as_inputs(X)
    K0 = _symmetric_gram(X, hp)
    d = X[:, None] - X[None, :]
    return {
        "log_lengthscale": K0 * (d * d) / hp.lengthscale**2,
        "log_signal_variance": K0,
    }
