"""Trajectory ingestion, leader matching, splitting and synthetic platoons."""

import csv
import logging
import math
import warnings
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

from .errors import EmptyDataError, InputDomainError, ModelDomainError, SchemaError
from .physics import KinematicSample, ModelKind, PhysicsModel

__all__ = [
    "TrajectoryRecord",
    "Scene",
    "IngestResult",
    "SynthScene",
    "DEFAULT_COLUMNS",
    "CANONICAL_COLUMNS",
    "parse_ngsim_csv",
    "attach_preceding_velocity",
    "identify_leader",
    "shuffle_split",
    "synth_generate",
    "relative_noise",
    "write_canonical_csv",
    "read_canonical_csv",
    "group_by_vehicle",
    "lane_change_vehicles",
    "kinematic_pairs",
    "vehicle_series",
]

log = logging.getLogger(__name__)

DEFAULT_COLUMNS = {
    "vehicle_id": "Vehicle_ID",
    "frame": "Frame_ID",
    "global_time": "Global_Time",
    "local_x": "Local_X",
    "local_y": "Local_Y",
    "velocity": "v_Vel",
    "acceleration": "v_Acc",
    "preceding_id": "Preceding",
    "space_headway": "Space_Headway",
    "time_headway": "Time_Headway",
}

CANONICAL_COLUMNS = (
    "vehicle_id", "time_s", "local_x_ft", "local_y_ft", "velocity_fps",
    "acceleration_fps2", "preceding_id", "preceding_velocity_fps",
    "space_headway_ft", "time_headway_s",
)

NGSIM_FRAME_SECONDS = 0.1


@dataclass(frozen=True)
class TrajectoryRecord:
    time: float
    vehicle_id: int
    local_x: float
    local_y: float
    velocity: float
    acceleration: float
    preceding_id: int | None
    space_headway: float
    time_headway: float
    preceding_velocity: float | None = None

    @property
    def time_key(self):
        return time_key(self.time)


def time_key(t):
    """Integer milliseconds; frames are matched on this key."""
    return int(round(t * 1000.0))


@dataclass(frozen=True)
class Scene:
    records: tuple
    xi: float = 6.0
    delta: float = 1.0
    lane_width: float = 12.0

    def __post_init__(self):
        if not (self.xi > 0 and self.delta > 0):
            raise InputDomainError("xi and delta must be positive")

    @cached_property
    def by_vehicle(self):
        return group_by_vehicle(self.records)

    @cached_property
    def by_frame(self):
        frames = defaultdict(dict)
        for r in self.records:
            frames[r.time_key][r.vehicle_id] = r
        return dict(frames)

    @property
    def vehicle_ids(self):
        return sorted(self.by_vehicle)


@dataclass
class IngestResult:
    records: list
    skipped: Counter = field(default_factory=Counter)

    @property
    def n_vehicles(self):
        return len({r.vehicle_id for r in self.records})


def group_by_vehicle(records):
    out = defaultdict(list)
    for r in records:
        out[r.vehicle_id].append(r)
    return {vid: sorted(rs, key=lambda r: r.time) for vid, rs in sorted(out.items())}


def _float(text):
    value = float(text)
    if not math.isfinite(value):
        raise ValueError("non-finite")
    return value


def parse_ngsim_csv(path, column_map=None, road_bounds=None):
    """Read an NGSIM-style CSV into :class:`TrajectoryRecord` objects.

    Times come from ``Global_Time`` (epoch milliseconds) when that column is
    present, else from ``Frame_ID`` at 10 Hz, and are shifted so the earliest
    row is at 0 s.  Malformed rows are skipped and counted by reason.
    """
    columns = dict(DEFAULT_COLUMNS)
    columns.update(column_map or {})
    skipped = Counter()
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames
        if not header:
            raise EmptyDataError(f"{path} is empty")
        header = [h.strip() for h in header]
        reader.fieldnames = header
        if columns["global_time"] in header:
            time_col, time_scale = columns["global_time"], 1e-3
        elif columns["frame"] in header:
            time_col, time_scale = columns["frame"], NGSIM_FRAME_SECONDS
        else:
            raise SchemaError(columns["global_time"])
        required = ["vehicle_id", "local_x", "local_y", "velocity", "acceleration",
                    "preceding_id", "space_headway", "time_headway"]
        for key in required:
            if columns[key] not in header:
                raise SchemaError(columns[key])

        raw = []
        seen = set()
        for row in reader:
            try:
                vid = int(float(row[columns["vehicle_id"]]))
                t_raw = _float(row[time_col])
                x = _float(row[columns["local_x"]])
                y = _float(row[columns["local_y"]])
                v = _float(row[columns["velocity"]])
                a = _float(row[columns["acceleration"]])
                pid_text = (row[columns["preceding_id"]] or "").strip()
                pid = int(float(pid_text)) if pid_text else 0
                sh = _float(row[columns["space_headway"]])
                th = _float(row[columns["time_headway"]])
            except (TypeError, ValueError):
                skipped["parse"] += 1
                continue
            if v < 0:
                skipped["negative_velocity"] += 1
                continue
            if road_bounds is not None and not road_bounds[0] <= y <= road_bounds[1]:
                skipped["road_bounds"] += 1
                continue
            if (vid, t_raw) in seen:
                skipped["duplicate"] += 1
                continue
            seen.add((vid, t_raw))
            # NGSIM encodes "no leader" as preceding id 0
            pid = pid if pid > 0 else None
            if pid is not None and sh < 0:
                skipped["negative_headway"] += 1
                continue
            raw.append((t_raw, vid, x, y, v, a, pid, sh, th))
    if not raw:
        if sum(skipped.values()) == 0:
            raise EmptyDataError(f"{path} has no data rows")
        raise EmptyDataError(f"{path}: every row was skipped ({dict(skipped)})")
    t0 = min(r[0] for r in raw)
    # shift in raw units first so epoch milliseconds give clean decimal seconds
    records = [TrajectoryRecord(round((t - t0) * time_scale, 9), *rest) for t, *rest in raw]
    records.sort(key=lambda r: (r.vehicle_id, r.time))
    return IngestResult(records, skipped)


def attach_preceding_velocity(records):
    """Fill ``preceding_velocity`` from the leader's record in the same frame.

    Returns ``(records, fill_rate)`` where the fill rate is over records that
    name a leader.
    """
    index = {(r.vehicle_id, r.time_key): r.velocity for r in records}
    out = []
    wanted = filled = 0
    for r in records:
        pv = None
        if r.preceding_id is not None:
            wanted += 1
            pv = index.get((r.preceding_id, r.time_key))
            filled += pv is not None
        out.append(replace(r, preceding_velocity=pv))
    return out, (filled / wanted if wanted else 1.0)


def identify_leader(scene, vehicle_id, t):
    """Nearest vehicle ahead in the same lane at time ``t``, or ``None``.

    Candidates must be within ``xi`` laterally (inclusive) and more than
    ``delta`` ahead longitudinally; ties go to the lower vehicle id.
    """
    frame = scene.by_frame.get(time_key(t))
    if frame is None or vehicle_id not in frame:
        raise InputDomainError(f"vehicle {vehicle_id} has no record at t={t}")
    ego = frame[vehicle_id]
    best = None
    for vid in sorted(frame):
        if vid == vehicle_id:
            continue
        other = frame[vid]
        gap = other.local_y - ego.local_y
        if abs(other.local_x - ego.local_x) <= scene.xi and gap > scene.delta:
            if best is None or gap < best[0]:
                best = (gap, vid)
    return None if best is None else best[1]


def _sample(r, dt):
    nan = float("nan")
    lead = r.preceding_id is not None
    return KinematicSample(
        velocity=r.velocity,
        acceleration=r.acceleration,
        leader_velocity=r.preceding_velocity if r.preceding_velocity is not None else nan,
        space_headway=r.space_headway if lead else nan,
        time_headway=r.time_headway if lead else nan,
        position_y=r.local_y,
        dt=dt,
    )


def kinematic_pairs(by_vehicle, max_gap=None):
    """``(sample, next_sample)`` pairs along each trajectory.

    The last record of a vehicle, or one followed by a time gap wider than
    ``max_gap``, is paired with ``None``.  Missing leader fields become NaN.
    """
    pairs = []
    for rs in by_vehicle.values():
        for a, b in zip(rs, list(rs[1:]) + [None]):
            if b is not None and max_gap is not None and b.time - a.time > max_gap:
                b = None
            dt = b.time - a.time if b is not None else float("nan")
            pairs.append((_sample(a, dt), _sample(b, float("nan")) if b is not None else None))
    return pairs


def record_outputs(r):
    """The seven GP output values of a record, in ``OUTPUT_DIMS`` order."""
    return (r.local_x, r.local_y, r.velocity, r.acceleration,
            r.preceding_velocity, r.space_headway, r.time_headway)


def vehicle_series(by_vehicle, min_records=3, every=1, vehicles=None):
    """``{vehicle_id: (times, outputs)}`` for GP fitting.

    Records without a matched leader velocity are dropped, then every
    ``every``-th remaining record is kept.  Vehicles left with fewer than
    ``min_records`` points are skipped.
    """
    if every < 1:
        raise InputDomainError("every must be >= 1")
    out = {}
    ids = sorted(by_vehicle) if vehicles is None else list(vehicles)
    for vid in ids:
        rows = [r for r in by_vehicle[vid]
                if r.preceding_id is not None and r.preceding_velocity is not None]
        rows = rows[::every]
        if len(rows) < min_records:
            log.debug("vehicle %s: %d usable records, skipped", vid, len(rows))
            continue
        t = np.array([r.time for r in rows])
        Y = np.array([record_outputs(r) for r in rows], dtype=float)
        out[vid] = (t, Y)
    return out


def shuffle_split(by_vehicle, test_fraction, seed):
    """Split a ``{vehicle_id: records}`` mapping into train/test at vehicle granularity."""
    if not 0.0 < test_fraction < 1.0:
        raise InputDomainError("test_fraction must be strictly between 0 and 1")
    ids = sorted(by_vehicle)
    if len(ids) < 2:
        raise InputDomainError("need at least two vehicles to split")
    n_test = min(max(int(round(test_fraction * len(ids))), 1), len(ids) - 1)
    perm = np.random.default_rng(seed).permutation(len(ids))
    test_ids = {ids[i] for i in perm[:n_test]}
    train = {vid: by_vehicle[vid] for vid in ids if vid not in test_ids}
    test = {vid: by_vehicle[vid] for vid in ids if vid in test_ids}
    return train, test


def lane_change_vehicles(by_vehicle, lane_width=12.0):
    """Ids of vehicles whose lane index (from ``local_x``) changes between frames."""
    out = set()
    for vid, recs in by_vehicle.items():
        lanes = {int(r.local_x // lane_width) for r in recs}
        if len(lanes) > 1:
            out.add(vid)
    return out


# --------------------------------------------------------------------------
# canonical export


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, int):
        return str(value)
    return repr(float(value))


def write_canonical_csv(records, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CANONICAL_COLUMNS)
        for r in sorted(records, key=lambda r: (r.vehicle_id, r.time)):
            w.writerow([
                r.vehicle_id, _fmt(r.time), _fmt(r.local_x), _fmt(r.local_y), _fmt(r.velocity),
                _fmt(r.acceleration), _fmt(r.preceding_id), _fmt(r.preceding_velocity),
                _fmt(r.space_headway), _fmt(r.time_headway),
            ])


def read_canonical_csv(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in CANONICAL_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise SchemaError(missing[0])
        records = []
        for row in reader:
            pid = row["preceding_id"]
            pv = row["preceding_velocity_fps"]
            records.append(TrajectoryRecord(
                time=float(row["time_s"]),
                vehicle_id=int(row["vehicle_id"]),
                local_x=float(row["local_x_ft"]),
                local_y=float(row["local_y_ft"]),
                velocity=float(row["velocity_fps"]),
                acceleration=float(row["acceleration_fps2"]),
                preceding_id=int(pid) if pid else None,
                space_headway=float(row["space_headway_ft"]),
                time_headway=float(row["time_headway_s"]),
                preceding_velocity=float(pv) if pv else None,
            ))
    if not records:
        raise EmptyDataError(f"{path} has no records")
    return records


# --------------------------------------------------------------------------
# synthetic platoons


@dataclass(frozen=True)
class SynthScene:
    observed: Scene
    truth: Scene
    model: PhysicsModel


def _leader_profile(seed, base=30.0):
    rng = np.random.default_rng([seed, 7])
    phase = rng.uniform(0.0, 2.0 * np.pi, 2)

    def profile(t):
        return base + 6.0 * np.sin(2 * np.pi * t / 15.0 + phase[0]) \
            + 3.0 * np.sin(2 * np.pi * t / 6.0 + phase[1])
    return profile


def equilibrium_gap(model, v):
    """Steady-state space headway for a follower cruising at speed ``v``."""
    b = model.beta
    kind = model.kind
    if kind is ModelKind.PIPES:
        return b[0] * v
    if kind is ModelKind.NEWELL_NL:
        nu, lam, gap = b
        if v >= nu:
            raise ModelDomainError("speed at or above Newell free-flow speed")
        return gap - (nu / lam) * math.log(1.0 - v / nu)
    if kind is ModelKind.NEWELL_L:
        return b[0] + v * model.time_shift
    if kind is ModelKind.GIPPS:
        return (b[1] + b[2] * v * v - (v + b[0]) ** 2) / 2.0
    if kind is ModelKind.VAN_AERDE:
        return b[0] + b[1] * v + b[2] / (b[3] - v)
    if kind is ModelKind.GHR:
        return 2.0 * v + 20.0
    raise InputDomainError(f"{kind} cannot drive a synthetic platoon")


def _va_speed(beta, s):
    """Invert the Van Aerde gap equation for the branch below the pole."""
    b0, b1, b2, b3 = beta
    c = s - b0
    if b1 == 0:
        v = b3 - b2 / c if c > 0 else -1.0
    else:
        # b1 v^2 - (b1 b3 + c) v + (c b3 - b2) = 0
        disc = (b1 * b3 + c) ** 2 - 4.0 * b1 * (c * b3 - b2)
        if disc < 0:
            raise ModelDomainError("Van Aerde gap below minimum")
        v = ((b1 * b3 + c) - math.sqrt(disc)) / (2.0 * b1)
    if not 0.0 <= v < b3:
        raise ModelDomainError("no Van Aerde speed for this gap")
    return v


_INSTANT = (ModelKind.PIPES, ModelKind.VAN_AERDE)
_DELAYED = (ModelKind.NEWELL_NL, ModelKind.NEWELL_L, ModelKind.GIPPS, ModelKind.GHR)


def _simulate_follower(model, Yl, Vl, n_lead, dt):
    """Follow a leader whose state is known on frames ``< n_lead``.

    Returns ``(Y, V, A, known)`` where ``known`` counts frames with a speed.
    Instantaneous models set the speed from the current gap; delayed models
    set the next-frame speed (or, for GHR, the acceleration) from the
    current state.
    """
    kind, b = model.kind, model.beta
    N = len(Yl)
    Y, V, A, S = (np.full(N, np.nan) for _ in range(4))
    Y[0] = Yl[0] - equilibrium_gap(model, Vl[0])
    known = 0
    if kind in _DELAYED:
        V[0] = Vl[0]
        known = 1
    try:
        for k in range(n_lead):
            S[k] = Yl[k] - Y[k]
            if not S[k] > 0:
                raise ModelDomainError("follower reached its leader")
            if kind is ModelKind.PIPES:
                V[k] = S[k] / b[0]
                known = k + 1
            elif kind is ModelKind.VAN_AERDE:
                V[k] = _va_speed(b, S[k])
                known = k + 1
            if k + 1 >= N:
                break
            Y[k + 1] = Y[k] + V[k] * dt
            if kind is ModelKind.GHR:
                if k == 0:
                    A[k] = 0.0
                else:
                    if V[k] <= 0 or S[k - 1] <= 0:
                        raise ModelDomainError("GHR needs positive speed and gap")
                    A[k] = b[0] * V[k] ** b[1] * (Vl[k - 1] - V[k - 1]) / S[k - 1] ** b[2]
                V[k + 1] = V[k] + A[k] * dt
            elif kind is ModelKind.NEWELL_NL:
                nu, lam, gap = b
                V[k + 1] = nu * (1.0 - math.exp(-(lam / nu) * (S[k] - gap)))
            elif kind is ModelKind.NEWELL_L:
                V[k + 1] = (S[k] - b[0]) / model.time_shift
            elif kind is ModelKind.GIPPS:
                rad = b[1] + b[2] * Vl[k] ** 2 - 2.0 * S[k]
                if rad < 0:
                    raise ModelDomainError("negative Gipps radicand")
                V[k + 1] = math.sqrt(rad) - b[0]
            if kind in _DELAYED:
                known = k + 2
    except ModelDomainError as exc:
        warnings.warn(f"{exc}; trajectory truncated after {known} frames")
    if kind is not ModelKind.GHR:
        A[:-1] = np.diff(V) / dt
    return Y, V, A, known


def synth_generate(model, n_vehicles, horizon_s, dt, noise_std=None, seed=0,
                   leader_speed=None, lane_center=6.0, sway=0.5, xi=6.0, delta=1.0):
    """Simulate a single-lane platoon and return noisy and noise-free scenes.

    Vehicle 0 follows ``leader_speed`` (a constant or a function of time);
    vehicles ``1..n-1`` follow their predecessor under ``model``.  Positions
    advance by forward Euler, so the velocity and acceleration definitions
    hold exactly on the ground truth.  ``noise_std`` maps output dimension
    names (see :data:`prgp.gp.OUTPUT_DIMS`) to Gaussian noise levels.
    """
    if not dt > 0:
        raise InputDomainError("dt must be positive")
    if n_vehicles < 1:
        raise InputDomainError("need at least one vehicle")
    if model.kind not in _INSTANT + _DELAYED:
        raise InputDomainError(f"{model.kind} is not forward-solvable for speed")
    if model.kind is ModelKind.NEWELL_L and model.time_shift is None:
        model = replace(model, time_shift=dt)
    noise_std = dict(noise_std or {})
    unknown = set(noise_std) - set(_NOISE_FIELDS)
    if unknown:
        raise InputDomainError(f"unknown noise dimensions: {sorted(unknown)}")

    rng = np.random.default_rng(seed)
    n = int(round(horizon_s / dt)) + 1
    # one extra frame so the last kept frame has a forward-difference acceleration
    t = np.arange(n + 1) * dt
    if leader_speed is None:
        leader_speed = _leader_profile(seed)
    if callable(leader_speed):
        v_lead = np.asarray(leader_speed(t), dtype=float)
    else:
        v_lead = np.full(n + 1, float(leader_speed))

    Y = np.full((n_vehicles, n + 1), np.nan)
    V = np.full_like(Y, np.nan)
    A = np.full_like(Y, np.nan)
    n_rec = np.zeros(n_vehicles, dtype=int)
    V[0] = v_lead
    Y[0] = np.concatenate([[0.0], np.cumsum(v_lead[:-1] * dt)])
    A[0, :-1] = np.diff(v_lead) / dt
    known = n + 1
    n_rec[0] = n
    for i in range(1, n_vehicles):
        try:
            Y[i], V[i], A[i], known = _simulate_follower(model, Y[i - 1], V[i - 1], known, dt)
        except ModelDomainError as exc:
            warnings.warn(f"vehicle {i}: {exc}; dropped")
            known = 0
        n_rec[i] = max(min(known - 1, n_rec[i - 1]), 0)

    phases = rng.uniform(0.0, 2.0 * np.pi, n_vehicles)
    truth = []
    for i in range(n_vehicles):
        for k in range(n_rec[i]):
            x = lane_center + sway * math.sin(2 * np.pi * t[k] / 10.0 + phases[i])
            if i > 0:
                pid, s, pv = i - 1, float(Y[i - 1, k] - Y[i, k]), float(V[i - 1, k])
                th = s / V[i, k] if V[i, k] > 1e-6 else 0.0
            else:
                pid, s, pv, th = None, 0.0, None, 0.0
            truth.append(TrajectoryRecord(float(t[k]), i, x, float(Y[i, k]), float(V[i, k]),
                                          float(A[i, k]), pid, s, float(th), pv))
    observed = [_perturb(r, noise_std, rng) for r in truth]
    return SynthScene(Scene(tuple(observed), xi, delta), Scene(tuple(truth), xi, delta), model)


_NOISE_FIELDS = {
    "position_x": "local_x",
    "position_y": "local_y",
    "velocity": "velocity",
    "acceleration": "acceleration",
    "preceding_velocity": "preceding_velocity",
    "space_headway": "space_headway",
    "time_headway": "time_headway",
}


def _perturb(record, noise_std, rng):
    # draw every dimension unconditionally so the stream does not depend on noise levels
    draws = rng.standard_normal(len(_NOISE_FIELDS))
    changes = {}
    for z, (dim, attr) in zip(draws, _NOISE_FIELDS.items()):
        value = getattr(record, attr)
        sd = noise_std.get(dim, 0.0)
        if value is None or sd == 0.0:
            continue
        if attr in ("space_headway", "time_headway") and record.preceding_id is None:
            continue
        changes[attr] = value + sd * z
    if "velocity" in changes:
        changes["velocity"] = max(changes["velocity"], 0.0)
    return replace(record, **changes)


def relative_noise(scene, fraction):
    """Per-dimension noise levels equal to ``fraction`` of each dimension's spread.

    Only records that have a leader contribute, matching what the GP is fit on.
    """
    rows = [r for r in scene.records if r.preceding_id is not None and r.preceding_velocity is not None]
    if not rows:
        raise EmptyDataError("scene has no follower records")
    out = {}
    for dim, attr in _NOISE_FIELDS.items():
        out[dim] = fraction * float(np.std([getattr(r, attr) for r in rows]))
    return out
