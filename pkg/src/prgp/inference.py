"""Physics-regularized GP training.

Each regularizing equation contributes a "shadow" Gaussian over its residuals
evaluated at random pseudo-input times on a reparameterized posterior sample.
The training objective is

    sum_j log N(y_j | 0, K_j + tau_j^-1 I)  +  sum_w gamma_w log N(r_w | omega_w, Kshadow_w(Z))

summed over vehicles, maximized with Adam.  Kernel hyperparameters and noise
precisions are shared by all training vehicles (one set per output
dimension); every vehicle keeps its own Gram matrix and pseudo-inputs.
"""

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from functools import partial

import jax
import jax.numpy as jnp
import numpy as np
from jax.scipy.linalg import cho_solve, solve_triangular

from .errors import InputDomainError, RegularizerDegeneracyError
from .gp import OUTPUT_DIMS, fit_gp, log_marginal_likelihood, predict_batch
from .kernels import KernelHyperparams, rbf
from .physics import SIGN, ModelKind, PhysicsModel, residual_terms

jax.config.update("jax_enable_x64", True)

__all__ = [
    "ShadowGP",
    "TrainConfig",
    "ELBOEstimate",
    "AdamState",
    "TrainResult",
    "ELBOObjective",
    "sample_pseudo_inputs",
    "residuals_at_sample",
    "elbo_estimate",
    "adam_step",
    "train",
    "write_trace_csv",
    "result_to_dict",
    "result_from_dict",
]

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
N_DIMS = len(OUTPUT_DIMS)
FORMAT_VERSION = 1

# KinematicSample field -> column of the 7-d output
FIELD_COLUMNS = {
    "position_y": 1,
    "velocity": 2,
    "acceleration": 3,
    "leader_velocity": 4,
    "space_headway": 5,
    "time_headway": 6,
}


@dataclass(frozen=True)
class ShadowGP:
    equations: tuple = ()
    omega: tuple = ()
    shadow_hp: tuple = ()
    gamma: tuple = ()

    def __post_init__(self):
        for name in ("equations", "omega", "shadow_hp", "gamma"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        W = len(self.equations)
        if not (len(self.omega) == len(self.shadow_hp) == len(self.gamma) == W):
            raise InputDomainError("equations, omega, shadow_hp and gamma must align")
        for g in self.gamma:
            if not (math.isfinite(g) and g >= 0):
                raise InputDomainError(f"gamma must be finite and >= 0, got {g}")

    @property
    def W(self):
        return len(self.equations)

    @classmethod
    def build(cls, equations, gamma=1.0, shadow_hp=None, omega=None):
        equations = tuple(equations)
        W = len(equations)
        gamma = np.broadcast_to(np.asarray(gamma, dtype=float), (W,))
        if shadow_hp is None:
            shadow_hp = (KernelHyperparams(jitter=1e-6),) * W
        elif isinstance(shadow_hp, KernelHyperparams):
            shadow_hp = (shadow_hp,) * W
        if omega is None:
            omega = (0.0,) * W
        return cls(equations, tuple(float(o) for o in omega), tuple(shadow_hp),
                   tuple(float(g) for g in gamma))


@dataclass(frozen=True)
class TrainConfig:
    m: int = 10
    iterations: int = 2000
    learning_rate: float = 1e-2
    seed: int = 0
    gamma_default: float = 1.0
    z_sampling: str = "uniform"
    normalize: bool = True
    train_beta: bool = True
    plateau_tol: float | None = 1e-6
    plateau_window: int = 200
    jitter: float = 1e-8
    shadow_jitter: float = 1e-6
    degeneracy_threshold: float = 0.5
    log_every: int = 200

    def __post_init__(self):
        if self.m < 1:
            raise InputDomainError("m must be >= 1")
        if self.iterations < 1:
            raise InputDomainError("iterations must be >= 1")
        if not self.learning_rate > 0:
            raise InputDomainError("learning_rate must be positive")
        if self.z_sampling not in ("uniform", "jittered_grid"):
            raise InputDomainError(f"unknown z_sampling {self.z_sampling!r}")
        if not (math.isfinite(self.gamma_default) and self.gamma_default >= 0):
            raise InputDomainError("gamma_default must be finite and >= 0")


@dataclass(frozen=True)
class ELBOEstimate:
    total: float
    data_term: float
    reg_terms: np.ndarray
    grad: np.ndarray
    masked: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    param_names: tuple = ()


# --------------------------------------------------------------------------
# pseudo-inputs and residuals


def sample_pseudo_inputs(domain, m, rng, mode="uniform"):
    """``m`` sorted time points in ``domain``.

    ``jittered_grid`` places one point uniformly inside each of ``m`` equal
    cells, so neighbours are less than two cells apart.
    """
    lo, hi = (float(v) for v in domain)
    if m < 1:
        raise InputDomainError("m must be >= 1")
    if not lo < hi:
        raise InputDomainError("domain must satisfy t_min < t_max")
    if mode == "uniform":
        z = rng.uniform(lo, hi, m)
    elif mode == "jittered_grid":
        h = (hi - lo) / m
        z = lo + h * (np.arange(m) + 0.5) + rng.uniform(-0.5 * h, 0.5 * h, m)
    else:
        raise InputDomainError(f"unknown sampling mode {mode!r}")
    return np.sort(z)


def _equation_residual(eq, beta, f, z, xp):
    """Residual of one equation along the rows of ``f``.

    Returns ``(r, ok, avail)`` of length ``m``: ``avail`` marks rows that have
    a successor when the equation needs one, ``ok`` additionally drops rows
    outside the model's domain.  ``r`` is zero wherever ``ok`` is false.
    """
    m = f.shape[0]
    cur = {name: f[:, col] for name, col in FIELD_COLUMNS.items()}
    if eq.needs_next:
        nxt = {k: xp.concatenate([v[1:], v[-1:]]) for k, v in cur.items()}
        dt = xp.concatenate([z[1:] - z[:-1], xp.ones(1)])
        avail = xp.arange(m) < m - 1
    else:
        nxt = None
        dt = xp.ones(m)
        avail = xp.ones(m, dtype=bool)
    obs, pred, ok = residual_terms(eq.kind, beta, cur, nxt, dt, xp, eq.time_shift)
    ok = ok & avail
    r = xp.where(ok, SIGN[eq.kind] * (obs - pred), 0.0)
    return r, ok, avail


@dataclass(frozen=True)
class ResidualSample:
    values: np.ndarray
    valid: np.ndarray
    available: np.ndarray

    @property
    def masked_count(self):
        return int(np.count_nonzero(self.available & ~self.valid))


def residuals_at_sample(f_hat, Z, equations):
    """Evaluate every equation on a posterior sample.

    ``values`` is ``W x m`` with NaN wherever the entry is dropped (no
    successor for ``t + dt`` terms) or masked (outside the model's domain).
    """
    f_hat = np.asarray(f_hat, dtype=float)
    Z = np.asarray(Z, dtype=float).ravel()
    if f_hat.ndim != 2 or f_hat.shape != (len(Z), N_DIMS):
        raise InputDomainError(f"f_hat must be {len(Z)} x {N_DIMS}")
    if np.any(np.diff(Z) < 0):
        raise InputDomainError("Z must be sorted")
    W, m = len(equations), len(Z)
    values = np.full((W, m), np.nan)
    valid = np.zeros((W, m), dtype=bool)
    avail = np.zeros((W, m), dtype=bool)
    for w, eq in enumerate(equations):
        with np.errstate(all="ignore"):
            r, ok, av = _equation_residual(eq, np.asarray(eq.beta), f_hat, Z, np)
        values[w, ok] = r[ok]
        valid[w] = ok
        avail[w] = av
    return ResidualSample(values, valid, avail)


def _masked_gauss_logpdf(r, ok, omega, z, log_ls, log_var, rel_jitter):
    """log N(r[ok] | omega, K[ok, ok]) computed on full-size arrays.

    Masked rows and columns are replaced by the identity, with a zero
    residual, and their log(2 pi) constant is left out.
    """
    m = r.shape[0]
    okf = ok.astype(r.dtype)
    K = rbf(z, z, log_ls, log_var, jnp) + rel_jitter * jnp.exp(log_var) * jnp.eye(m)
    K = K * okf[:, None] * okf[None, :] + jnp.diag(1.0 - okf)
    d = jnp.where(ok, r - omega, 0.0)
    L = jnp.linalg.cholesky(K)
    a = cho_solve((L, True), d)
    return -0.5 * d @ a - jnp.sum(jnp.log(jnp.diag(L))) - 0.5 * jnp.sum(okf) * LOG_2PI


# --------------------------------------------------------------------------
# parameter layout


class _Layout:
    """Slices of the flat parameter vector."""

    def __init__(self, equations):
        self.equations = tuple(equations)
        names = []
        for part in ("log_lengthscale", "log_signal_variance", "log_tau"):
            names += [f"gp.{part}[{dim}]" for dim in OUTPUT_DIMS]
        self.eq_offsets = []
        for w, eq in enumerate(self.equations):
            self.eq_offsets.append(len(names))
            names += [f"eq{w}.omega", f"eq{w}.log_lengthscale", f"eq{w}.log_signal_variance"]
            names += [f"eq{w}.beta[{k}]" for k in range(len(eq.beta))]
        self.names = tuple(names)
        self.size = len(names)

    def gp(self, theta):
        d = N_DIMS
        return theta[:d], theta[d:2 * d], theta[2 * d:3 * d]

    def eq(self, theta, w):
        o = self.eq_offsets[w]
        nb = len(self.equations[w].beta)
        return theta[o], theta[o + 1], theta[o + 2], theta[o + 3:o + 3 + nb]

    def beta_mask(self):
        mask = np.zeros(self.size, dtype=bool)
        for w, eq in enumerate(self.equations):
            o = self.eq_offsets[w] + 3
            mask[o:o + len(eq.beta)] = True
        return mask

    def pack(self, lls, lvar, ltau, shadow):
        parts = [np.asarray(lls, float), np.asarray(lvar, float), np.asarray(ltau, float)]
        for w, eq in enumerate(shadow.equations):
            hp = shadow.shadow_hp[w]
            parts.append(np.array([shadow.omega[w], hp.log_lengthscale, hp.log_signal_variance]))
            parts.append(np.asarray(eq.beta, dtype=float))
        return np.concatenate(parts)

    def unpack_shadow(self, theta, shadow):
        theta = np.asarray(theta, dtype=float)
        eqs, omega, hps = [], [], []
        for w, eq in enumerate(shadow.equations):
            om, lls, lvar, beta = self.eq(theta, w)
            eqs.append(replace(eq, beta=tuple(float(b) for b in beta)))
            omega.append(float(om))
            hps.append(KernelHyperparams(float(lls), float(lvar), shadow.shadow_hp[w].jitter))
        return ShadowGP(tuple(eqs), tuple(omega), tuple(hps), shadow.gamma)


# --------------------------------------------------------------------------
# objective


def _safe_sqrt(v):
    pos = v > 0
    return jnp.where(pos, jnp.sqrt(jnp.where(pos, v, 1.0)), 0.0)


def _vehicle_terms(theta, x, ys, mask, z, eps, *, layout, gammas, mean, scale,
                   gp_jitter, shadow_jitter):
    """Data term, per-equation regularizer and mask counts for one vehicle."""
    lls, lvar, ltau = layout.gp(theta)
    n = x.shape[0]
    mf = mask.astype(x.dtype)
    outer = mf[:, None] * mf[None, :]
    eye = jnp.eye(n)

    def per_dim(lls_j, lvar_j, ltau_j, y_j, jit_j):
        s2 = jnp.exp(lvar_j)
        # the jitter is a numerical device, not a model parameter
        diag = jnp.exp(-ltau_j) + jax.lax.stop_gradient(jit_j * s2)
        C = rbf(x, x, lls_j, lvar_j, jnp) + diag * eye
        C = C * outer + jnp.diag(1.0 - mf)
        L = jnp.linalg.cholesky(C)
        y = y_j * mf
        a = cho_solve((L, True), y)
        lml = -0.5 * y @ a - jnp.sum(jnp.log(jnp.diag(L))) - 0.5 * jnp.sum(mf) * LOG_2PI
        ks = rbf(z, x, lls_j, lvar_j, jnp) * mf[None, :]
        mu = ks @ a
        v = solve_triangular(L, ks.T, lower=True)
        var = s2 - jnp.sum(v * v, axis=0)
        return lml, mu, var

    lml, mu, var = jax.vmap(per_dim)(lls, lvar, ltau, ys.T, gp_jitter)
    f = (mu + _safe_sqrt(var) * eps.T).T * scale + mean  # m x d, raw units
    data = jnp.sum(lml)

    regs, n_masked, n_avail = [], [], []
    for w, eq in enumerate(layout.equations):
        om, s_lls, s_lvar, beta = layout.eq(theta, w)
        fw = f
        if gammas[w] == 0.0:
            # reported only; keep it out of the backward pass entirely
            fw, om, s_lls, s_lvar, beta = jax.lax.stop_gradient((f, om, s_lls, s_lvar, beta))
        r, ok, avail = _equation_residual(eq, beta, fw, z, jnp)
        regs.append(_masked_gauss_logpdf(r, ok, om, z, s_lls, s_lvar, shadow_jitter))
        n_masked.append(jnp.sum(avail & ~ok))
        n_avail.append(jnp.sum(avail))
    if regs:
        return data, jnp.stack(regs), jnp.stack(n_masked), jnp.stack(n_avail)
    zf, zi = jnp.zeros(0), jnp.zeros(0, dtype=jnp.int64)
    return data, zf, zi, zi


class ELBOObjective:
    """Batched ELBO over padded vehicle series, with its gradient.

    ``X`` (V x N), ``Ys`` (V x N x 7, standardized) and ``mask`` (V x N) hold
    the training data; padded entries are excluded exactly.  Call
    :meth:`value_and_grad` with the flat parameter vector and the per-vehicle
    pseudo-inputs ``Z`` (V x m) and noise ``E`` (V x m x 7).
    """

    def __init__(self, shadow, X, Ys, mask, mean, scale, gp_jitter=1e-8, shadow_jitter=1e-6):
        self.shadow = shadow
        self.layout = _Layout(shadow.equations)
        self.gammas = tuple(float(g) for g in shadow.gamma)
        self.X = jnp.asarray(X, dtype=float)
        self.Ys = jnp.asarray(Ys, dtype=float)
        self.mask = jnp.asarray(mask, dtype=bool)
        self.mean = jnp.asarray(mean, dtype=float)
        self.scale = jnp.asarray(scale, dtype=float)
        self.gp_jitter = jnp.broadcast_to(jnp.asarray(gp_jitter, dtype=float), (N_DIMS,))
        terms = partial(_vehicle_terms, layout=self.layout, gammas=self.gammas,
                        mean=self.mean, scale=self.scale, gp_jitter=self.gp_jitter,
                        shadow_jitter=float(shadow_jitter))
        batched = jax.vmap(terms, in_axes=(None, 0, 0, 0, 0, 0))
        g = jnp.asarray(self.gammas)

        def objective(theta, Z, E):
            data, regs, n_masked, n_avail = batched(theta, self.X, self.Ys, self.mask, Z, E)
            data = jnp.sum(data)
            regs = jnp.sum(regs, axis=0)
            active = g > 0
            total = data + jnp.sum(jnp.where(active, g * jnp.where(active, regs, 0.0), 0.0))
            return total, (data, regs, jnp.sum(n_masked, axis=0), jnp.sum(n_avail, axis=0))

        self._value = jax.jit(objective)
        self._value_and_grad = jax.jit(jax.value_and_grad(objective, has_aux=True))

    @property
    def param_names(self):
        return self.layout.names

    def value(self, theta, Z, E):
        total, aux = self._value(jnp.asarray(theta), jnp.asarray(Z), jnp.asarray(E))
        return float(total)

    def value_and_grad(self, theta, Z, E):
        """``(total, data_term, reg_terms, n_masked, n_available, grad)`` as numpy."""
        (total, (data, regs, n_masked, n_avail)), grad = self._value_and_grad(
            jnp.asarray(theta), jnp.asarray(Z), jnp.asarray(E))
        return (float(total), float(data), np.asarray(regs), np.asarray(n_masked),
                np.asarray(n_avail), np.asarray(grad))


def _check_degeneracy(shadow, n_masked, n_avail, threshold):
    for w, eq in enumerate(shadow.equations):
        if shadow.gamma[w] == 0.0 or n_avail[w] == 0:
            continue
        frac = n_masked[w] / n_avail[w]
        if frac > threshold:
            return f"{eq.kind}: {frac:.0%} of residual points outside the model domain"
    return None


def _fill_time_shift(shadow, step):
    eqs = tuple(replace(eq, time_shift=step)
                if eq.kind is ModelKind.NEWELL_L and eq.time_shift is None else eq
                for eq in shadow.equations)
    return replace(shadow, equations=eqs)


def _data_step(times):
    steps = np.concatenate([np.diff(np.asarray(t, dtype=float)) for t in times])
    steps = steps[steps > 0]
    return float(np.median(steps)) if steps.size else 1.0


def elbo_estimate(model, shadow, Z, eps, config=None):
    """Single-sample ELBO estimate and its gradient for one fitted GP.

    The data term is the model's own log marginal likelihood; the
    regularizers use ``f = mu + sqrt(nu) * eps`` at ``Z``.  Gradients run
    through the reparameterization to every hyperparameter, noise precision,
    shadow parameter and equation coefficient.
    """
    config = config or TrainConfig()
    Z = np.asarray(Z, dtype=float).ravel()
    eps = np.asarray(eps, dtype=float)
    if eps.shape != (len(Z), model.n_dims):
        raise InputDomainError(f"eps must have shape {(len(Z), model.n_dims)}")
    if model.n_dims != N_DIMS:
        raise InputDomainError(f"model must have {N_DIMS} output dimensions")
    if np.any(np.diff(Z) < 0):
        raise InputDomainError("Z must be sorted")
    shadow = _fill_time_shift(shadow, _data_step([model.train_inputs]))
    objective = ELBOObjective(
        shadow, model.train_inputs[None, :], model.standardized_outputs()[None],
        np.ones((1, len(model.train_inputs)), dtype=bool), model.output_mean,
        model.output_scale, gp_jitter=np.array(model.jitter_used, dtype=float),
        shadow_jitter=config.shadow_jitter)
    layout = objective.layout
    theta = layout.pack([h.log_lengthscale for h in model.hp],
                        [h.log_signal_variance for h in model.hp], model.log_tau, shadow)
    _, _, regs, n_masked, n_avail, grad = objective.value_and_grad(theta, Z[None], eps[None])
    msg = _check_degeneracy(shadow, n_masked, n_avail, config.degeneracy_threshold)
    if msg:
        raise RegularizerDegeneracyError(msg)
    data = float(sum(log_marginal_likelihood(model, j) for j in range(model.n_dims)))
    total = data + sum(g * float(r) for g, r in zip(shadow.gamma, regs) if g > 0)
    return ELBOEstimate(total, data, regs, grad, n_masked, layout.names)


# --------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    step: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None


def adam_step(params, grad, state, learning_rate, b1=0.9, b2=0.999, eps=1e-8):
    """One bias-corrected Adam descent step; returns ``(params, state)``.

    To ascend an objective pass its negated gradient.
    """
    params = np.asarray(params, dtype=float)
    grad = np.asarray(grad, dtype=float)
    if params.shape != grad.shape:
        raise InputDomainError("params and grad shapes differ")
    m = np.zeros_like(params) if state.m is None else state.m
    v = np.zeros_like(params) if state.v is None else state.v
    t = state.step + 1
    m = b1 * m + (1.0 - b1) * grad
    v = b2 * v + (1.0 - b2) * grad * grad
    m_hat = m / (1.0 - b1**t)
    v_hat = v / (1.0 - b2**t)
    new = params - learning_rate * m_hat / (np.sqrt(v_hat) + eps)
    return new, AdamState(t, m, v)


# --------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    hp: tuple
    log_tau: np.ndarray
    output_mean: np.ndarray
    output_scale: np.ndarray
    shadow: ShadowGP
    trace: np.ndarray
    trace_columns: tuple
    stopped_reason: str
    iterations_run: int
    diagnostics: dict = field(default_factory=dict)

    def condition(self, times, outputs):
        """GP over one vehicle's observations using the learned hyperparameters."""
        return fit_gp(times, outputs, self.hp, self.log_tau,
                      output_mean=self.output_mean, output_scale=self.output_scale)

    def predict(self, times, outputs, t_star):
        """Posterior ``(means, variances)`` at ``t_star`` given one vehicle's data."""
        means, variances, _ = predict_batch(self.condition(times, outputs), t_star)
        return means, variances


def _pad(series, normalize):
    vids = sorted(series)
    n_max = max(len(series[v][0]) for v in vids)
    V = len(vids)
    X = np.zeros((V, n_max))
    Y = np.zeros((V, n_max, N_DIMS))
    mask = np.zeros((V, n_max), dtype=bool)
    for i, vid in enumerate(vids):
        t, y = series[vid]
        n = len(t)
        X[i, :n] = t
        # padded inputs sit past the end so they never coincide with real ones
        X[i, n:] = t[-1] + 1.0 + np.arange(n_max - n)
        Y[i, :n] = y
        mask[i, :n] = True
    real = Y[mask]
    if normalize:
        mean = real.mean(axis=0)
        scale = real.std(axis=0)
        scale[scale <= 0] = 1.0
    else:
        mean, scale = np.zeros(N_DIMS), np.ones(N_DIMS)
    Ys = np.where(mask[..., None], (Y - mean) / scale, 0.0)
    return vids, X, Ys, mask, mean, scale


def _check_series(series):
    if not series:
        raise InputDomainError("no training vehicles")
    clean = {}
    for vid, (t, y) in series.items():
        t = np.asarray(t, dtype=float).ravel()
        y = np.asarray(y, dtype=float)
        if y.shape != (len(t), N_DIMS):
            raise InputDomainError(f"vehicle {vid}: outputs must be n x {N_DIMS}")
        if len(t) < 3:
            raise InputDomainError(f"vehicle {vid}: need at least 3 records")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(y))):
            raise InputDomainError(f"vehicle {vid}: non-finite data")
        if np.ptp(t) <= 0:
            raise InputDomainError(f"vehicle {vid}: zero time span")
        clean[vid] = (t, y)
    return clean


def _init_shadow_scale(shadow, series, hp, log_tau, mean, scale, m, seed, draws=8):
    """Mean squared residual of each equation over initial posterior samples."""
    rng = np.random.default_rng([seed, 0x5EED])
    sums = np.zeros(shadow.W)
    counts = np.zeros(shadow.W)
    for vid in sorted(series):
        t, y = series[vid]
        gp = fit_gp(t, y, hp, log_tau, output_mean=mean, output_scale=scale)
        z = np.linspace(t.min(), t.max(), max(m, 2))
        means, variances, _ = predict_batch(gp, z)
        for _ in range(draws):
            f = means + np.sqrt(variances) * rng.standard_normal(means.shape)
            res = residuals_at_sample(f, z, shadow.equations)
            for w in range(shadow.W):
                ok = res.valid[w]
                sums[w] += np.sum(res.values[w, ok] ** 2)
                counts[w] += np.count_nonzero(ok)
    out = np.ones(shadow.W)
    has = counts > 0
    out[has] = sums[has] / counts[has]
    return np.maximum(out, 1e-12)


def train(series, equations=(), config=None, gamma=None, shadow=None):
    """Fit shared GP hyperparameters with physics regularization.

    ``series`` maps vehicle ids to ``(times, outputs)`` with outputs in
    ``OUTPUT_DIMS`` order.  ``equations`` are :class:`PhysicsModel` instances
    whose ``beta`` seeds the trainable coefficients; ``gamma`` overrides the
    per-equation weights (default ``config.gamma_default``).  A prepared
    ``shadow`` may be passed instead of ``equations``.

    Training stops at the iteration budget, on a plateau of the smoothed
    negative ELBO, or early with the last good parameters when the ELBO turns
    non-finite or a regularizer degenerates.
    """
    config = config or TrainConfig()
    series = _check_series(series)
    vids, X, Ys, mask, mean, scale = _pad(series, config.normalize)
    step = _data_step([series[v][0] for v in vids])

    if shadow is None:
        equations = tuple(e if isinstance(e, PhysicsModel) else PhysicsModel(e) for e in equations)
        shadow = ShadowGP.build(equations, config.gamma_default if gamma is None else gamma)
    shadow = _fill_time_shift(shadow, step)
    if config.m < 2 and any(eq.needs_next for eq in shadow.equations):
        raise InputDomainError("m must be >= 2 for equations with a t + dt term")

    spans = np.array([np.ptp(series[v][0]) for v in vids])
    span = float(np.median(spans))
    var0 = 1.0 if config.normalize else np.maximum(Ys[mask].var(axis=0), 1e-12)
    lls0 = np.full(N_DIMS, math.log(span / 5.0))
    lvar0 = np.log(np.broadcast_to(var0, (N_DIMS,)))
    ltau0 = np.log(10.0 / np.broadcast_to(var0, (N_DIMS,)))
    hp0 = tuple(KernelHyperparams(a, b, config.jitter) for a, b in zip(lls0, lvar0))

    if shadow.W:
        needs_init = all(h == KernelHyperparams(jitter=1e-6) for h in shadow.shadow_hp)
        if needs_init:
            s2 = _init_shadow_scale(shadow, series, hp0, ltau0, mean, scale, config.m, config.seed)
            ls = math.log(0.1 * span / config.m)
            shadow = replace(shadow, shadow_hp=tuple(
                KernelHyperparams(ls, float(np.log(v)), config.shadow_jitter) for v in s2))

    objective = ELBOObjective(shadow, X, Ys, mask, mean, scale, config.jitter, config.shadow_jitter)
    layout = objective.layout
    theta = layout.pack(lls0, lvar0, ltau0, shadow)
    frozen = layout.beta_mask() if not config.train_beta else np.zeros(layout.size, dtype=bool)

    rngs = {vid: np.random.default_rng([config.seed, int(vid)]) for vid in vids}
    domains = [(series[v][0].min(), series[v][0].max()) for v in vids]
    state = AdamState()
    rows = []
    ema = []
    alpha = 2.0 / (config.plateau_window + 1.0)
    stopped = "budget"
    diagnostics = {"vehicles": list(vids), "data_step": step, "masked": np.zeros(shadow.W, dtype=int)}
    last_good = theta.copy()

    for it in range(1, config.iterations + 1):
        Z = np.empty((len(vids), config.m))
        E = np.empty((len(vids), config.m, N_DIMS))
        for i, vid in enumerate(vids):
            Z[i] = sample_pseudo_inputs(domains[i], config.m, rngs[vid], config.z_sampling)
            E[i] = rngs[vid].standard_normal((config.m, N_DIMS))
        total, data, regs, n_masked, n_avail, grad = objective.value_and_grad(theta, Z, E)
        if not (math.isfinite(total) and np.all(np.isfinite(grad))):
            stopped = "non_finite"
            diagnostics["message"] = f"non-finite ELBO or gradient at iteration {it}"
            log.warning(diagnostics["message"])
            theta = last_good
            break
        msg = _check_degeneracy(shadow, n_masked, n_avail, config.degeneracy_threshold)
        if msg:
            stopped = "regularizer_degenerate"
            diagnostics["message"] = f"iteration {it}: {msg}"
            log.warning(diagnostics["message"])
            theta = last_good
            break
        diagnostics["masked"] = diagnostics["masked"] + n_masked
        rows.append([it, -total, data, *regs])
        ema.append(-total if not ema else (1 - alpha) * ema[-1] + alpha * -total)
        last_good = theta
        grad = np.where(frozen, 0.0, grad)
        theta, state = adam_step(theta, -grad, state, config.learning_rate)
        if config.log_every and it % config.log_every == 0:
            log.info("iteration %d  -ELBO %.6g  data %.6g", it, -total, data)
        w = config.plateau_window
        if config.plateau_tol is not None and len(ema) > 2 * w:
            prev, cur = ema[-1 - w], ema[-1]
            if (prev - cur) / max(abs(prev), 1e-12) < config.plateau_tol:
                stopped = "plateau"
                break

    lls, lvar, ltau = (np.asarray(p) for p in layout.gp(theta))
    hp = tuple(KernelHyperparams(float(a), float(b), config.jitter) for a, b in zip(lls, lvar))
    columns = ("iteration", "negative_elbo", "data_term") + tuple(
        f"reg_term_{w}" for w in range(shadow.W))
    trace = np.array(rows, dtype=float).reshape(len(rows), len(columns))
    diagnostics["smoothed_negative_elbo"] = np.array(ema)
    return TrainResult(hp, ltau.copy(), mean, scale, layout.unpack_shadow(theta, shadow),
                       trace, columns, stopped, len(rows), diagnostics)


# --------------------------------------------------------------------------
# persistence


def write_trace_csv(result, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(result.trace_columns)
        for row in result.trace:
            w.writerow([int(row[0])] + [repr(float(v)) for v in row[1:]])


def _hp_dict(hp):
    return {"log_lengthscale": hp.log_lengthscale, "log_signal_variance": hp.log_signal_variance,
            "jitter": hp.jitter}


def result_to_dict(result):
    """JSON-ready description of a trained model (trace excluded)."""
    sh = result.shadow
    return {
        "format_version": FORMAT_VERSION,
        "output_dims": list(OUTPUT_DIMS),
        "hp": [_hp_dict(h) for h in result.hp],
        "log_tau": [float(v) for v in result.log_tau],
        "output_mean": [float(v) for v in result.output_mean],
        "output_scale": [float(v) for v in result.output_scale],
        "shadow": {
            "equations": [{"kind": eq.kind.value, "beta": list(eq.beta), "time_shift": eq.time_shift}
                          for eq in sh.equations],
            "omega": list(sh.omega),
            "shadow_hp": [_hp_dict(h) for h in sh.shadow_hp],
            "gamma": list(sh.gamma),
        },
        "stopped_reason": result.stopped_reason,
        "iterations_run": result.iterations_run,
    }


def result_from_dict(doc):
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise InputDomainError(f"unsupported model format version {version!r}")
    s = doc["shadow"]
    shadow = ShadowGP(
        tuple(PhysicsModel(e["kind"], e["beta"], e["time_shift"]) for e in s["equations"]),
        tuple(s["omega"]), tuple(KernelHyperparams(**h) for h in s["shadow_hp"]), tuple(s["gamma"]))
    columns = ("iteration", "negative_elbo", "data_term") + tuple(
        f"reg_term_{w}" for w in range(shadow.W))
    return TrainResult(
        tuple(KernelHyperparams(**h) for h in doc["hp"]), np.array(doc["log_tau"]),
        np.array(doc["output_mean"]), np.array(doc["output_scale"]), shadow,
        np.zeros((0, len(columns))), columns, doc["stopped_reason"], doc["iterations_run"])


def save_result(result, path):
    with open(path, "w") as fh:
        json.dump(result_to_dict(result), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_result(path):
    with open(path) as fh:
        return result_from_dict(json.load(fh))
