"""Exact GP regression with one independent GP per output dimension.

All dimensions share the same time input.  Outputs may optionally be
standardized per dimension before fitting; predictions are always returned in
the original units.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .errors import InputDomainError, InternalStateError
from .kernels import KernelHyperparams, build_gram, grad_gram, rbf

__all__ = [
    "OUTPUT_DIMS",
    "GPModel",
    "PosteriorPrediction",
    "fit_gp",
    "log_marginal_likelihood",
    "lml_gradient",
    "posterior_predict",
    "sample_posterior",
    "predict_batch",
]

OUTPUT_DIMS = (
    "position_x",
    "position_y",
    "velocity",
    "acceleration",
    "preceding_velocity",
    "space_headway",
    "time_headway",
)

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class PosteriorPrediction:
    mean: np.ndarray
    variance: np.ndarray
    clamped: int = 0


@dataclass(frozen=True)
class GPModel:
    """A fitted multi-output GP.

    ``train_outputs`` is kept in raw units; ``chol_cache[j]`` factors
    ``K_j + tau_j^-1 I`` built on the standardized outputs of dimension ``j``.
    """

    train_inputs: np.ndarray
    train_outputs: np.ndarray
    hp: tuple
    log_tau: np.ndarray
    output_mean: np.ndarray
    output_scale: np.ndarray
    chol_cache: tuple = field(repr=False)
    alpha_cache: tuple = field(repr=False)
    jitter_used: tuple = ()

    @property
    def n_dims(self):
        return self.train_outputs.shape[1]

    def standardized_outputs(self):
        return (self.train_outputs - self.output_mean) / self.output_scale


def _noise_variance(log_tau):
    return float(np.exp(-log_tau))


def _covariance(X, hp, log_tau):
    gram = build_gram(X, hp)
    C = gram.entries + np.eye(len(X)) * _noise_variance(log_tau)
    return C, gram.jitter


def fit_gp(X, Y, hp, log_tau, normalize=False, output_mean=None, output_scale=None):
    """Build a :class:`GPModel` and its per-dimension Cholesky/alpha caches.

    ``hp`` is a single :class:`KernelHyperparams` (shared by every dimension)
    or one per output column; ``log_tau`` likewise.  ``output_mean`` and
    ``output_scale`` override the statistics used when ``normalize`` is set,
    e.g. to reuse values pooled over a training set.
    """
    X = np.asarray(X, dtype=float).ravel()
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    if Y.shape[0] != X.shape[0]:
        raise InputDomainError("X and Y must have the same number of rows")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
        raise InputDomainError("training data must be finite")
    d = Y.shape[1]
    if isinstance(hp, KernelHyperparams):
        hp = (hp,) * d
    hp = tuple(hp)
    log_tau = np.broadcast_to(np.asarray(log_tau, dtype=float), (d,)).copy()
    if len(hp) != d:
        raise InputDomainError("need one KernelHyperparams per output dimension")

    if output_mean is not None or output_scale is not None:
        mean = np.broadcast_to(np.asarray(0.0 if output_mean is None else output_mean, dtype=float), (d,)).copy()
        scale = np.broadcast_to(np.asarray(1.0 if output_scale is None else output_scale, dtype=float), (d,)).copy()
        if not np.all(scale > 0):
            raise InputDomainError("output_scale must be positive")
    elif normalize:
        mean = Y.mean(axis=0)
        scale = Y.std(axis=0)
        scale[scale <= 0] = 1.0
    else:
        mean = np.zeros(d)
        scale = np.ones(d)
    Ys = (Y - mean) / scale

    chols, alphas, jitters = [], [], []
    for j in range(d):
        C, jit = _covariance(X, hp[j], log_tau[j])
        L = linalg.cholesky(C, lower=True)
        chols.append(L)
        alphas.append(linalg.cho_solve((L, True), Ys[:, j]))
        jitters.append(jit)
    return GPModel(X, Y, hp, log_tau, mean, scale, tuple(chols), tuple(alphas), tuple(jitters))


def _check_dim(model, dim):
    if not 0 <= dim < model.n_dims:
        raise InputDomainError(f"dimension {dim} out of range")
    if len(model.chol_cache) != model.n_dims or len(model.alpha_cache) != model.n_dims:
        raise InternalStateError("model caches are not built for every dimension")


def log_marginal_likelihood(model, dim):
    """log N(y | 0, K + tau^-1 I) for one output dimension (standardized units)."""
    _check_dim(model, dim)
    L = model.chol_cache[dim]
    a = model.alpha_cache[dim]
    y = model.standardized_outputs()[:, dim]
    n = len(y)
    return float(-0.5 * y @ a - np.sum(np.log(np.diag(L))) - 0.5 * n * LOG_2PI)


def lml_gradient(model, dim):
    """Gradient of :func:`log_marginal_likelihood` w.r.t.
    ``(log_lengthscale, log_signal_variance, log_tau)``.

    The jitter term is held fixed, matching :func:`prgp.kernels.grad_gram`.
    """
    _check_dim(model, dim)
    L = model.chol_cache[dim]
    a = model.alpha_cache[dim]
    n = L.shape[0]
    Cinv = linalg.cho_solve((L, True), np.eye(n))
    Q = np.outer(a, a) - Cinv
    dK = grad_gram(model.train_inputs, model.hp[dim])
    # d(tau^-1 I)/d log_tau = -tau^-1 I
    d_tau = -_noise_variance(model.log_tau[dim]) * np.eye(n)
    return np.array([
        0.5 * np.sum(Q * dK["log_lengthscale"]),
        0.5 * np.sum(Q * dK["log_signal_variance"]),
        0.5 * np.sum(Q * d_tau),
    ])


def _predict_many(model, Z):
    Z = np.asarray(Z, dtype=float).ravel()
    if not np.all(np.isfinite(Z)):
        raise InputDomainError("prediction inputs must be finite")
    means = np.empty((len(Z), model.n_dims))
    variances = np.empty((len(Z), model.n_dims))
    clamped = 0
    for j in range(model.n_dims):
        hp = model.hp[j]
        ks = rbf(Z, model.train_inputs, hp.log_lengthscale, hp.log_signal_variance)
        mu = ks @ model.alpha_cache[j]
        v = linalg.solve_triangular(model.chol_cache[j], ks.T, lower=True)
        var = hp.signal_variance - np.sum(v * v, axis=0)
        neg = var < 0
        clamped += int(np.count_nonzero(neg))
        var[neg] = 0.0
        means[:, j] = mu * model.output_scale[j] + model.output_mean[j]
        variances[:, j] = var * model.output_scale[j] ** 2
    return means, variances, clamped


def posterior_predict(model, x_star):
    """Posterior mean and latent variance at a single time point."""
    if len(model.chol_cache) != model.n_dims:
        raise InternalStateError("model caches are not built")
    means, variances, clamped = _predict_many(model, [x_star])
    return PosteriorPrediction(means[0], variances[0], clamped)


def predict_batch(model, Z):
    """Vectorized :func:`posterior_predict`; returns ``(means, variances, clamped)``."""
    return _predict_many(model, Z)


def sample_posterior(model, Z, eps):
    """Reparameterized draw ``mu + sqrt(nu) * eps`` at each pseudo-input."""
    Z = np.asarray(Z, dtype=float).ravel()
    eps = np.asarray(eps, dtype=float)
    if eps.shape != (len(Z), model.n_dims):
        raise InputDomainError(
            f"eps must have shape {(len(Z), model.n_dims)}, got {eps.shape}")
    means, variances, _ = _predict_many(model, Z)
    return means + np.sqrt(variances) * eps
