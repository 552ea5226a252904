"""Car-following models as residual operators, plus standalone calibration.

Every model is written as ``observed - predicted`` over a pair of kinematic
samples (the current frame and, for models with a ``t + dt`` term, the next
one).  The array core :func:`residual_terms` is namespace-agnostic so the same
expressions are differentiated by JAX during training.

Units are feet and seconds throughout.
"""

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize
from scipy.stats import qmc

from .errors import CalibrationError, EmptyDataError, InputDomainError, ModelDomainError

__all__ = [
    "ModelKind",
    "PhysicsModel",
    "KinematicSample",
    "SampleBatch",
    "CalibrationResult",
    "FitReport",
    "residual",
    "predict_quantity",
    "observed_quantity",
    "residual_terms",
    "va_coefficients",
    "gipps_beta_from_table",
    "calibrate",
    "batch_from_pairs",
    "synthesize_pairs",
    "parse_kind",
]

VA_POLE_TOL = 1e-6


class ModelKind(str, enum.Enum):
    VEL_DEF = "VelDef"
    ACC_DEF = "AccDef"
    PIPES = "Pipes"
    FORBES = "Forbes"
    GHR = "GHR"
    NEWELL_NL = "NewellNonlinear"
    NEWELL_L = "NewellLinear"
    GIPPS = "Gipps"
    VAN_AERDE = "VanAerde"

    def __str__(self):
        return self.value


N_PARAMS = {
    ModelKind.VEL_DEF: 0,
    ModelKind.ACC_DEF: 0,
    ModelKind.PIPES: 1,
    ModelKind.FORBES: 1,
    ModelKind.GHR: 3,
    ModelKind.NEWELL_NL: 3,
    ModelKind.NEWELL_L: 1,
    ModelKind.GIPPS: 3,
    ModelKind.VAN_AERDE: 4,
}

PREDICTED_QUANTITY = {
    ModelKind.VEL_DEF: "velocity",
    ModelKind.ACC_DEF: "acceleration",
    ModelKind.PIPES: "space_gap",
    ModelKind.FORBES: "space_gap",
    ModelKind.GHR: "acceleration",
    ModelKind.NEWELL_NL: "velocity",
    ModelKind.NEWELL_L: "velocity",
    ModelKind.GIPPS: "velocity",
    ModelKind.VAN_AERDE: "space_gap",
}

# which output dimension the predicted quantity is compared against
QUANTITY_DIM = {"velocity": "velocity", "acceleration": "acceleration", "space_gap": "space_headway"}

NEEDS_NEXT = {
    ModelKind.VEL_DEF, ModelKind.ACC_DEF, ModelKind.GHR,
    ModelKind.NEWELL_NL, ModelKind.NEWELL_L, ModelKind.GIPPS,
}

# residual = SIGN * (observed - predicted); the definition operators and Forbes
# are written the other way round in the residual table
SIGN = {k: 1.0 for k in ModelKind}
SIGN[ModelKind.VEL_DEF] = -1.0
SIGN[ModelKind.ACC_DEF] = -1.0
SIGN[ModelKind.FORBES] = -1.0

PARAM_NAMES = {
    ModelKind.VEL_DEF: (),
    ModelKind.ACC_DEF: (),
    ModelKind.PIPES: ("beta0",),
    ModelKind.FORBES: ("beta0",),
    ModelKind.GHR: ("beta1", "beta2", "beta3"),
    ModelKind.NEWELL_NL: ("nu", "lambda", "l"),
    ModelKind.NEWELL_L: ("l",),
    ModelKind.GIPPS: ("beta0", "beta1", "beta2"),
    ModelKind.VAN_AERDE: ("beta0", "beta1", "beta2", "beta3"),
}

# short names used in run tags ("PRGP-Pipes", "PRGP-NN", ...)
ABBREVIATION = {
    ModelKind.VEL_DEF: "DEF",
    ModelKind.ACC_DEF: "DEF",
    ModelKind.PIPES: "Pipes",
    ModelKind.FORBES: "Forbes",
    ModelKind.GHR: "GHR",
    ModelKind.NEWELL_NL: "NN",
    ModelKind.NEWELL_L: "NL",
    ModelKind.GIPPS: "Gipps",
    ModelKind.VAN_AERDE: "VA",
}

DEFAULT_BOUNDS = {
    ModelKind.VEL_DEF: (),
    ModelKind.ACC_DEF: (),
    ModelKind.PIPES: ((0.05, 20.0),),
    ModelKind.FORBES: ((-20.0, 20.0),),
    ModelKind.GHR: ((1e-3, 200.0), (-2.0, 3.0), (-1.0, 3.0)),
    ModelKind.NEWELL_NL: ((1.0, 200.0), (0.01, 20.0), (-50.0, 300.0)),
    ModelKind.NEWELL_L: ((-100.0, 400.0),),
    ModelKind.GIPPS: ((-50.0, 50.0), (-1e4, 5e4), (-5.0, 5.0)),
    ModelKind.VAN_AERDE: ((-200.0, 200.0), (0.0, 20.0), (0.0, 2e4), (1.0, 200.0)),
}

_ALIASES = {
    "veldef": ModelKind.VEL_DEF, "vel-def": ModelKind.VEL_DEF, "vel_def": ModelKind.VEL_DEF,
    "accdef": ModelKind.ACC_DEF, "acc-def": ModelKind.ACC_DEF, "acc_def": ModelKind.ACC_DEF,
    "pipes": ModelKind.PIPES, "forbes": ModelKind.FORBES, "ghr": ModelKind.GHR,
    "newellnonlinear": ModelKind.NEWELL_NL, "nn": ModelKind.NEWELL_NL, "newell-nl": ModelKind.NEWELL_NL,
    "newelllinear": ModelKind.NEWELL_L, "nl": ModelKind.NEWELL_L, "newell-l": ModelKind.NEWELL_L,
    "gipps": ModelKind.GIPPS, "vanaerde": ModelKind.VAN_AERDE, "va": ModelKind.VAN_AERDE,
}


def parse_kind(name):
    """Map a user-facing model name to its :class:`ModelKind`.

    ``DEF`` is not accepted here because it stands for two operators; see
    :func:`prgp.cli.parse_equations`.
    """
    if isinstance(name, ModelKind):
        return name
    key = str(name).strip().lower().replace(" ", "")
    try:
        return _ALIASES[key]
    except KeyError:
        raise InputDomainError(f"unknown physics model {name!r}") from None


@dataclass(frozen=True)
class PhysicsModel:
    kind: ModelKind
    beta: tuple = ()
    # Newell-linear time translation; None means "use the sample step"
    time_shift: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", parse_kind(self.kind))
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))
        if len(self.beta) != N_PARAMS[self.kind]:
            raise InputDomainError(
                f"{self.kind} takes {N_PARAMS[self.kind]} parameters, got {len(self.beta)}")

    @property
    def predicted_quantity(self):
        return PREDICTED_QUANTITY[self.kind]

    @property
    def needs_next(self):
        return self.kind in NEEDS_NEXT

    @property
    def param_names(self):
        return PARAM_NAMES[self.kind]


@dataclass(frozen=True)
class KinematicSample:
    velocity: float = 0.0
    acceleration: float = 0.0
    leader_velocity: float = 0.0
    space_headway: float = 0.0
    time_headway: float = 0.0
    position_y: float = 0.0
    # time from this sample to the next one
    dt: float = 0.1


FIELDS = ("velocity", "acceleration", "leader_velocity", "space_headway",
          "time_headway", "position_y")


def residual_terms(kind, beta, cur, nxt, dt, xp=np, time_shift=None):
    """Vectorized ``(observed, predicted, valid)`` for one model.

    ``cur`` and ``nxt`` map field names to arrays; ``nxt`` may be ``None`` for
    models without a ``t + dt`` term.  Entries where ``valid`` is false hold
    finite placeholders and must be ignored by the caller.
    """
    kind = parse_kind(kind)
    v = cur["velocity"]
    s = cur["space_headway"]
    true_ = xp.ones_like(v, dtype=bool)

    if kind is ModelKind.PIPES:
        return s, v * beta[0], true_
    if kind is ModelKind.FORBES:
        return s, cur["time_headway"] + v * beta[0], true_
    if kind is ModelKind.VAN_AERDE:
        den = beta[3] - v
        ok = den > VA_POLE_TOL
        den = xp.where(ok, den, 1.0)
        return s, beta[0] + beta[1] * v + beta[2] / den, ok
    if kind is ModelKind.VEL_DEF:
        ok = dt > 0
        return v, (nxt["position_y"] - cur["position_y"]) / xp.where(ok, dt, 1.0), ok
    if kind is ModelKind.ACC_DEF:
        ok = dt > 0
        return cur["acceleration"], (nxt["velocity"] - v) / xp.where(ok, dt, 1.0), ok
    if kind is ModelKind.GHR:
        v1 = nxt["velocity"]
        ok = (v1 > 0) & (s > 0)
        v1 = xp.where(ok, v1, 1.0)
        ss = xp.where(ok, s, 1.0)
        pred = beta[0] * v1 ** beta[1] * (cur["leader_velocity"] - v) / ss ** beta[2]
        return nxt["acceleration"], pred, ok
    if kind is ModelKind.NEWELL_NL:
        nu, lam, gap = beta
        ok = true_ & (nu > 0)
        nu = xp.where(ok, nu, 1.0)
        return nxt["velocity"], nu * (1.0 - xp.exp(-(lam / nu) * (s - gap))), ok
    if kind is ModelKind.NEWELL_L:
        shift = dt if time_shift is None else time_shift
        ok = true_ & (shift > 0)
        return nxt["velocity"], (s - beta[0]) / xp.where(ok, shift, 1.0), ok
    if kind is ModelKind.GIPPS:
        rad = beta[1] + beta[2] * cur["leader_velocity"] ** 2 - 2.0 * s
        ok = rad >= 0
        return nxt["velocity"], xp.sqrt(xp.where(ok, rad, 1.0)) - beta[0], ok
    raise InputDomainError(f"unsupported model {kind}")  # pragma: no cover


def _fields(sample):
    return {name: np.asarray(float(getattr(sample, name))) for name in FIELDS}


def _scalar_terms(model, s, s_next):
    if model.needs_next and s_next is None:
        raise InputDomainError(f"{model.kind} needs the next sample")
    cur = _fields(s)
    nxt = _fields(s_next) if s_next is not None else None
    values = list(cur.values()) + (list(nxt.values()) if nxt else [])
    if not all(np.isfinite(x) for x in values):
        raise InputDomainError("sample fields must be finite")
    if model.needs_next and not s.dt > 0:
        raise InputDomainError("dt must be positive")
    obs, pred, ok = residual_terms(model.kind, model.beta, cur, nxt, np.asarray(s.dt),
                                   np, model.time_shift)
    if not bool(ok):
        raise ModelDomainError(f"{model.kind} is undefined for this sample")
    return float(obs), float(pred)


def residual(model, s, s_next=None):
    """Physics residual ``g`` for one sample (pair)."""
    obs, pred = _scalar_terms(model, s, s_next)
    return SIGN[model.kind] * (obs - pred)


def predict_quantity(model, s, s_next=None):
    """Solve the model for its predicted quantity (velocity, acceleration or gap)."""
    return _scalar_terms(model, s, s_next)[1]


def observed_quantity(model, s, s_next=None):
    return _scalar_terms(model, s, s_next)[0]


def va_coefficients(v_f, k_j, v_m, q_m):
    """Van Aerde ``(c1, c2, c3)`` from free-flow speed, jam density, speed and flow at capacity."""
    if not (k_j > 0 and v_m > 0 and q_m > 0 and v_f >= v_m):
        raise InputDomainError("need k_j > 0, v_m > 0, q_m > 0 and v_f >= v_m")
    a = v_f / (k_j * v_m**2)
    c1 = a * (2.0 * v_m - v_f)
    c2 = a * (v_f - v_m) ** 2
    c3 = 1.0 / q_m - a
    return c1, c2, c3


def va_beta(v_f, k_j, v_m, q_m):
    """Residual parameters ``(beta0..beta3) = (c1, c3, c2, v_f)``."""
    c1, c2, c3 = va_coefficients(v_f, k_j, v_m, q_m)
    return (c1, c3, c2, v_f)


def gipps_beta_from_table(b, tau, B, l):
    """Documented mapping from Gipps' behavioural parameters to the residual betas.

    ``beta0 = b*tau``, ``beta1 = b^2 tau^2 + 2 l`` (the speed-dependent
    ``b * v * tau`` term is dropped) and ``beta2 = -1/B``.
    """
    return (b * tau, b * b * tau * tau + 2.0 * l, -1.0 / B)


# Starting values for PRGP training when no calibration is supplied.
DEFAULT_BETA = {
    ModelKind.VEL_DEF: (),
    ModelKind.ACC_DEF: (),
    ModelKind.PIPES: (3.6,),
    ModelKind.FORBES: (0.81,),
    ModelKind.GHR: (0.8, 2.0, 1.5),
    ModelKind.NEWELL_NL: (40.0, 2.49, 33.16),
    ModelKind.NEWELL_L: (33.16,),
    ModelKind.GIPPS: gipps_beta_from_table(1.0, 0.1, 1.0, 6.0),
    ModelKind.VAN_AERDE: va_beta(11.11, 0.25, 8.33, 0.708),
}


# --------------------------------------------------------------------------
# calibration


@dataclass
class SampleBatch:
    """Column-oriented sample pairs; ``nxt`` is ``None`` when no pair has a successor."""

    cur: dict
    nxt: dict | None
    dt: np.ndarray

    def __len__(self):
        return len(self.dt)

    def subset(self, idx):
        nxt = {k: v[idx] for k, v in self.nxt.items()} if self.nxt is not None else None
        return SampleBatch({k: v[idx] for k, v in self.cur.items()}, nxt, self.dt[idx])


def batch_from_pairs(pairs):
    """Stack ``(sample, next_sample_or_None)`` pairs into a :class:`SampleBatch`.

    Missing successors are stored as NaN so they can be filtered per model.
    """
    pairs = list(pairs)
    cur = {k: np.array([float(getattr(p[0], k)) for p in pairs]) for k in FIELDS}
    have_next = any(p[1] is not None for p in pairs)
    nxt = None
    if have_next:
        nxt = {k: np.array([float(getattr(p[1], k)) if p[1] is not None else np.nan
                            for p in pairs]) for k in FIELDS}
    dt = np.array([float(p[0].dt) for p in pairs])
    return SampleBatch(cur, nxt, dt)


def _usable(kind, batch):
    """Parameter-independent precondition mask."""
    used = {
        ModelKind.VEL_DEF: (["velocity", "position_y"], ["position_y"]),
        ModelKind.ACC_DEF: (["velocity", "acceleration"], ["velocity"]),
        ModelKind.PIPES: (["velocity", "space_headway"], []),
        ModelKind.FORBES: (["velocity", "space_headway", "time_headway"], []),
        ModelKind.GHR: (["velocity", "leader_velocity", "space_headway"], ["velocity", "acceleration"]),
        ModelKind.NEWELL_NL: (["space_headway"], ["velocity"]),
        ModelKind.NEWELL_L: (["space_headway"], ["velocity"]),
        ModelKind.GIPPS: (["leader_velocity", "space_headway"], ["velocity"]),
        ModelKind.VAN_AERDE: (["velocity", "space_headway"], []),
    }[kind]
    ok = np.ones(len(batch), dtype=bool)
    for name in used[0]:
        ok &= np.isfinite(batch.cur[name])
    if used[1]:
        if batch.nxt is None:
            return np.zeros(len(batch), dtype=bool)
        for name in used[1]:
            ok &= np.isfinite(batch.nxt[name])
        ok &= np.isfinite(batch.dt) & (batch.dt > 0)
    if kind is ModelKind.GHR:
        ok &= batch.cur["space_headway"] > 0
    return ok


@dataclass(frozen=True)
class FitReport:
    rmse: float
    mape: float | None
    n_fit: int
    n_holdout: int
    skipped: int
    rmse_fit: float
    converged: bool = True
    starts: int = 0
    mapping: dict = field(default_factory=dict)


@dataclass(frozen=True)
class CalibrationResult:
    model: PhysicsModel
    report: FitReport


def _errors(model, batch):
    obs, pred, ok = residual_terms(model.kind, np.asarray(model.beta), batch.cur, batch.nxt,
                                   batch.dt, np, model.time_shift)
    return obs - pred, ok, obs


def _metrics(model, batch):
    err, ok, obs = _errors(model, batch)
    if not np.any(ok):
        return float("nan"), None
    err, obs = err[ok], obs[ok]
    rmse = float(np.sqrt(np.mean(err**2)))
    keep = np.abs(obs) >= 1e-9
    mape = float(100.0 * np.mean(np.abs(err[keep] / obs[keep]))) if np.any(keep) else None
    return rmse, mape


def calibrate(kind, pairs, bounds=None, seed=0, holdout=0.2, time_shift=None, n_starts=8):
    """Fit model parameters by minimizing squared prediction error.

    Bounded Nelder-Mead from ``n_starts`` Latin-hypercube starts; the best run
    is polished by restarting the simplex at its optimum.  ``pairs`` is a list
    of ``(sample, next_or_None)`` tuples or a :class:`SampleBatch`.
    """
    kind = parse_kind(kind)
    batch = pairs if isinstance(pairs, SampleBatch) else batch_from_pairs(pairs)
    if len(batch) == 0:
        raise EmptyDataError("no samples to calibrate on")
    usable = _usable(kind, batch)
    skipped = int(np.count_nonzero(~usable))
    if not np.any(usable):
        raise EmptyDataError(f"all {len(batch)} samples unusable for {kind}")
    batch = batch.subset(np.flatnonzero(usable))

    rng = np.random.default_rng(seed)
    n = len(batch)
    n_hold = int(round(holdout * n)) if n >= 5 else 0
    perm = rng.permutation(n)
    hold_batch = batch.subset(np.sort(perm[:n_hold])) if n_hold else None
    fit_batch = batch.subset(np.sort(perm[n_hold:]))

    n_params = N_PARAMS[kind]
    if n_params == 0:
        model = PhysicsModel(kind, (), time_shift)
        return _finish(model, fit_batch, hold_batch, skipped, True, 0)

    bounds = tuple(bounds) if bounds is not None else DEFAULT_BOUNDS[kind]
    if len(bounds) != n_params:
        raise InputDomainError(f"{kind} needs {n_params} bounds")
    lo = np.array([b[0] for b in bounds], dtype=float)
    hi = np.array([b[1] for b in bounds], dtype=float)

    obs_scale = float(np.var(_errors(PhysicsModel(kind, tuple((lo + hi) / 2), time_shift),
                                     fit_batch)[2])) + 1.0
    penalty = 1e6 * obs_scale

    def objective(beta):
        err, ok, _ = _errors(PhysicsModel(kind, tuple(beta), time_shift), fit_batch)
        sq = np.where(ok, err * err, penalty)
        val = float(np.mean(sq))
        return val if math.isfinite(val) else penalty

    starts = qmc.scale(qmc.LatinHypercube(d=n_params, seed=seed).random(n_starts), lo, hi)
    opts = dict(xatol=1e-12, fatol=1e-18, maxiter=4000 * n_params, maxfev=8000 * n_params)
    trace = []
    best = None
    for i, x0 in enumerate(starts):
        res = optimize.minimize(objective, x0, method="Nelder-Mead",
                                bounds=list(zip(lo, hi)), options=opts)
        trace.append((i, float(res.fun), bool(res.success), res.x.tolist()))
        # ties go to the lower start index
        if best is None or res.fun < best.fun:
            best = res
    converged = any(t[2] for t in trace)
    for _ in range(3):
        res = optimize.minimize(objective, best.x, method="Nelder-Mead",
                                bounds=list(zip(lo, hi)), options=opts)
        trace.append(("polish", float(res.fun), bool(res.success), res.x.tolist()))
        if res.fun <= best.fun:
            best = res
    if not math.isfinite(best.fun) or best.fun >= penalty:
        raise CalibrationError(f"{kind}: no feasible parameters found", trace)
    if not converged:
        raise CalibrationError(f"{kind}: Nelder-Mead did not converge from any start", trace)
    model = PhysicsModel(kind, tuple(best.x), time_shift)
    return _finish(model, fit_batch, hold_batch, skipped, converged, n_starts)


def _finish(model, fit_batch, hold_batch, skipped, converged, starts):
    rmse_fit, mape_fit = _metrics(model, fit_batch)
    if hold_batch is not None and len(hold_batch):
        rmse, mape = _metrics(model, hold_batch)
        n_hold = len(hold_batch)
    else:
        rmse, mape, n_hold = rmse_fit, mape_fit, 0
    mapping = {}
    if model.kind is ModelKind.GIPPS:
        mapping = {"beta0": "b*tau", "beta1": "b^2*tau^2 + 2*l", "beta2": "-1/B"}
    elif model.kind is ModelKind.VAN_AERDE:
        mapping = {"beta0": "c1", "beta1": "c3", "beta2": "c2", "beta3": "v_f"}
    report = FitReport(rmse, mape, len(fit_batch), n_hold, skipped, rmse_fit, converged, starts, mapping)
    return CalibrationResult(model, report)


# --------------------------------------------------------------------------
# self-consistent synthetic samples


def synthesize_pairs(model, n, seed=0, dt=0.1):
    """Random sample pairs whose observed quantity is exactly the model's prediction."""
    rng = np.random.default_rng(seed)
    kind = model.kind
    if kind is ModelKind.VAN_AERDE:
        v = rng.uniform(0.05, 0.8, n) * model.beta[3]
    else:
        v = rng.uniform(5.0, 40.0, n)
    cur = {
        "velocity": v,
        "acceleration": rng.uniform(-3.0, 3.0, n),
        "leader_velocity": v + rng.uniform(-5.0, 5.0, n),
        "space_headway": rng.uniform(30.0, 200.0, n),
        "time_headway": rng.uniform(1.0, 6.0, n),
        "position_y": rng.uniform(0.0, 2000.0, n),
    }
    nxt = {
        "velocity": rng.uniform(5.0, 40.0, n),
        "acceleration": rng.uniform(-3.0, 3.0, n),
        "leader_velocity": rng.uniform(5.0, 40.0, n),
        "space_headway": rng.uniform(30.0, 200.0, n),
        "time_headway": rng.uniform(1.0, 6.0, n),
        "position_y": cur["position_y"] + rng.uniform(0.5, 4.0, n),
    }
    dts = np.full(n, dt)
    _, pred, ok = residual_terms(kind, np.asarray(model.beta), cur, nxt, dts, np, model.time_shift)
    if not np.all(ok):
        raise ModelDomainError(f"{kind} parameters infeasible for generated states")
    target = {
        ModelKind.PIPES: (cur, "space_headway"),
        ModelKind.FORBES: (cur, "space_headway"),
        ModelKind.VAN_AERDE: (cur, "space_headway"),
        ModelKind.VEL_DEF: (cur, "velocity"),
        ModelKind.ACC_DEF: (cur, "acceleration"),
        ModelKind.GHR: (nxt, "acceleration"),
        ModelKind.NEWELL_NL: (nxt, "velocity"),
        ModelKind.NEWELL_L: (nxt, "velocity"),
        ModelKind.GIPPS: (nxt, "velocity"),
    }[kind]
    target[0][target[1]] = pred
    pairs = []
    for i in range(n):
        a = KinematicSample(**{k: float(cur[k][i]) for k in FIELDS}, dt=dt)
        b = KinematicSample(**{k: float(nxt[k][i]) for k in FIELDS}, dt=dt)
        pairs.append((a, b))
    return pairs
