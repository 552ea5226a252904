"""Command-line entry point: ``prgp <command> [--config run.json] [flags]``.

Commands
    ingest     NGSIM CSV (or a synthetic spec) -> canonical records CSV
    synth      simulate a noisy platoon -> observed.csv and truth.csv
    calibrate  fit car-following models -> parameter and performance CSVs
    train      fit GP / PRGP on the training split -> model.json and trace.csv
    evaluate   score trained models (and physics baselines) on the test split
    report     train + evaluate end to end, with plots

Flags override values from the JSON config file.  ``PRGP_LOG`` sets the log
level (default WARNING).
"""

import argparse
import csv
import glob
import json
import logging
import os
import sys
from collections import Counter
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import data as dp
from .errors import InputDomainError, PRGPError
from .evaluation import compare_models, emit_plots, emit_report
from .gp import OUTPUT_DIMS, predict_batch
from .inference import (TrainConfig, load_result, result_to_dict, train,
                        write_trace_csv)
from .physics import (ABBREVIATION, DEFAULT_BETA, PARAM_NAMES, PREDICTED_QUANTITY,
                      QUANTITY_DIM, ModelKind, PhysicsModel, batch_from_pairs,
                      calibrate, parse_kind, residual_terms)

log = logging.getLogger("prgp")

ALL_MODELS = ("VelDef", "AccDef", "Pipes", "Forbes", "GHR", "NewellNonlinear",
                 "NewellLinear", "Gipps", "VanAerde")


@dataclass
class RunConfig:
    """Every field has a default; see the README for their meaning."""

    input: str | None = None
    truth: str | None = None
    synth: dict | None = None
    column_map: dict = field(default_factory=dict)
    road_bounds: list | None = None
    seed: int = 0
    out: str = "out"
    case: str = "case"
    test_fraction: float = 1.0 / 3.0
    split_seed: int | None = None
    observe_every: int = 10
    equations: list = field(default_factory=list)
    gamma: float = 1.0
    m: int = 10
    iterations: int = 2000
    learning_rate: float = 1e-2
    z_sampling: str = "uniform"
    plateau_tol: float | None = None
    train_beta: bool = True
    calibrate_models: list = field(default_factory=lambda: list(ALL_MODELS))
    calibration_holdout: float = 0.2
    baselines: bool = True
    sigma_normalize: bool = False
    models: list | None = None

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            doc = json.load(fh)
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise InputDomainError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**doc)

    def validate(self):
        parse_equations(self.equations)
        for name in self.calibrate_models:
            parse_kind(name)
        if self.input is None and self.synth is None:
            raise InputDomainError("config needs either 'input' or 'synth'")
        for p in (self.input, self.truth):
            if p is not None and not os.path.exists(p):
                raise InputDomainError(f"no such file: {p}")
        if not 0.0 < self.test_fraction < 1.0:
            raise InputDomainError("test_fraction must be in (0, 1)")
        if self.observe_every < 1:
            raise InputDomainError("observe_every must be >= 1")
        return self

    def train_config(self):
        return TrainConfig(m=self.m, iterations=self.iterations, learning_rate=self.learning_rate,
                           seed=self.seed, gamma_default=self.gamma, z_sampling=self.z_sampling,
                           plateau_tol=self.plateau_tol, train_beta=self.train_beta)


def parse_equations(spec):
    """Equation list from ``"Pipes,DEF"`` or a JSON list of names / objects.

    ``DEF`` expands to the velocity and acceleration definitions.  Objects may
    carry ``beta``, ``gamma`` and ``time_shift``.  Returns
    ``(models, gammas)`` with ``None`` for unspecified gammas.
    """
    if isinstance(spec, str):
        spec = [s for s in (p.strip() for p in spec.split(",")) if s]
    models, gammas = [], []
    for item in spec or []:
        if isinstance(item, str):
            item = {"kind": item}
        name = item["kind"]
        kinds = ([ModelKind.VEL_DEF, ModelKind.ACC_DEF] if str(name).strip().lower() == "def"
                 else [parse_kind(name)])
        for kind in kinds:
            beta = item.get("beta", DEFAULT_BETA[kind])
            models.append(PhysicsModel(kind, tuple(beta), item.get("time_shift")))
            gammas.append(item.get("gamma"))
    return models, gammas


def run_tag(models, gammas):
    active = [m for m, g in zip(models, gammas) if g > 0]
    if not active:
        return "GP"
    return "PRGP-" + "+".join(dict.fromkeys(ABBREVIATION[m.kind] for m in active))


# --------------------------------------------------------------------------
# data


def _is_canonical(path):
    with open(path, newline="") as fh:
        header = next(csv.reader(fh), [])
    return all(c in header for c in dp.CANONICAL_COLUMNS)


def load_records(path, cfg):
    if _is_canonical(path):
        return dp.read_canonical_csv(path), Counter(), None
    res = dp.parse_ngsim_csv(path, cfg.column_map or None, cfg.road_bounds)
    records, fill = dp.attach_preceding_velocity(res.records)
    return records, res.skipped, fill


def _synth(cfg):
    spec = dict(cfg.synth)
    kind = parse_kind(spec.pop("model", "Pipes"))
    beta = tuple(spec.pop("beta", DEFAULT_BETA[kind]))
    model = PhysicsModel(kind, beta, spec.pop("time_shift", None))
    noise_fraction = spec.pop("noise_fraction", 0.1)
    args = dict(n_vehicles=spec.pop("n_vehicles", 16), horizon_s=spec.pop("horizon_s", 30.0),
                dt=spec.pop("dt", 0.1))
    if spec:
        raise InputDomainError(f"unknown synth keys: {', '.join(sorted(spec))}")
    clean = dp.synth_generate(model, seed=cfg.seed, **args)
    noise = dp.relative_noise(clean.truth, noise_fraction) if noise_fraction else None
    return dp.synth_generate(model, seed=cfg.seed, noise_std=noise, **args)


def load_scenes(cfg):
    """``(observed records, truth records or None)``."""
    if cfg.input is not None:
        records, _, _ = load_records(cfg.input, cfg)
        truth = None
        if cfg.truth is not None:
            truth, _, _ = load_records(cfg.truth, cfg)
        return records, truth
    scene = _synth(cfg)
    return list(scene.observed.records), list(scene.truth.records)


def split_ids(by_vehicle, cfg):
    followers = {v: rs for v, rs in by_vehicle.items()
                 if any(r.preceding_id is not None for r in rs)}
    seed = cfg.seed if cfg.split_seed is None else cfg.split_seed
    train_part, test_part = dp.shuffle_split(followers, cfg.test_fraction, seed)
    return sorted(train_part), sorted(test_part)


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _num(v):
    return "" if v is None else repr(float(v))


# --------------------------------------------------------------------------
# commands


def cmd_ingest(cfg):
    os.makedirs(cfg.out, exist_ok=True)
    if cfg.input is not None:
        records, skipped, fill = load_records(cfg.input, cfg)
    else:
        scene = _synth(cfg)
        records, skipped, fill = list(scene.observed.records), Counter(), None
        dp.write_canonical_csv(scene.truth.records, os.path.join(cfg.out, "truth.csv"))
    dp.write_canonical_csv(records, os.path.join(cfg.out, "records.csv"))
    n_veh = len({r.vehicle_id for r in records})
    rows = [("records", len(records)), ("vehicles", n_veh)]
    if fill is not None:
        rows.append(("preceding_velocity_fill_rate", repr(fill)))
    rows += [(f"skipped_{k}", v) for k, v in sorted(skipped.items())]
    _write_rows(os.path.join(cfg.out, "ingest_summary.csv"), ("key", "value"), rows)
    for k, v in rows:
        print(f"{k}: {v}")
    return 0


def cmd_synth(cfg):
    if cfg.synth is None:
        cfg = replace(cfg, synth={})
    os.makedirs(cfg.out, exist_ok=True)
    scene = _synth(cfg)
    dp.write_canonical_csv(scene.observed.records, os.path.join(cfg.out, "observed.csv"))
    dp.write_canonical_csv(scene.truth.records, os.path.join(cfg.out, "truth.csv"))
    print(f"{len(scene.observed.records)} records, {len(scene.observed.by_vehicle)} vehicles")
    return 0


def _pairs_for(by_vehicle, ids):
    sub = {v: by_vehicle[v] for v in ids if v in by_vehicle}
    # records more than 1.5 frames apart are not consecutive
    steps = [b.time - a.time for rs in sub.values() for a, b in zip(rs, rs[1:])]
    gap = 1.5 * float(np.median(steps)) if steps else None
    return dp.kinematic_pairs(sub, max_gap=gap)


def cmd_calibrate(cfg):
    os.makedirs(cfg.out, exist_ok=True)
    records, _ = load_scenes(cfg)
    by_vehicle = dp.group_by_vehicle(records)
    pairs = _pairs_for(by_vehicle, sorted(by_vehicle))
    params, perf = [], []
    for name in cfg.calibrate_models:
        kind = parse_kind(name)
        res = calibrate(kind, pairs, seed=cfg.seed, holdout=cfg.calibration_holdout)
        rep = res.report
        for pname, value in zip(PARAM_NAMES[kind], res.model.beta):
            params.append((kind.value, pname, _num(value), rep.mapping.get(pname, "")))
        perf.append((kind.value, PREDICTED_QUANTITY[kind], rep.n_fit, rep.n_holdout, rep.skipped,
                     _num(rep.rmse), _num(rep.mape)))
        print(f"{kind.value:16s} {PREDICTED_QUANTITY[kind]:12s} rmse={rep.rmse:.4g} "
              f"mape={'n/a' if rep.mape is None else format(rep.mape, '.4g')}")
    _write_rows(os.path.join(cfg.out, "calibration_params.csv"),
                ("model", "parameter", "value", "mapping"), params)
    _write_rows(os.path.join(cfg.out, "calibration_performance.csv"),
                ("model", "quantity", "n_fit", "n_holdout", "skipped", "rmse", "mape"), perf)
    return 0


def _train_one(cfg, by_vehicle, train_ids, models, gammas):
    gammas = [cfg.gamma if g is None else float(g) for g in gammas]
    tag = run_tag(models, gammas)
    series = dp.vehicle_series(by_vehicle, every=cfg.observe_every, vehicles=train_ids)
    result = train(series, models, cfg.train_config(), gamma=gammas if models else None)
    run_dir = os.path.join(cfg.out, tag)
    os.makedirs(run_dir, exist_ok=True)
    doc = result_to_dict(result)
    doc["tag"] = tag
    doc["train_vehicles"] = [int(v) for v in sorted(series)]
    doc["train_data"] = {str(v): {"times": series[v][0].tolist(), "outputs": series[v][1].tolist()}
                         for v in sorted(series)}
    with open(os.path.join(run_dir, "model.json"), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_trace_csv(result, os.path.join(run_dir, "trace.csv"))
    print(f"{tag}: {result.iterations_run} iterations, stopped: {result.stopped_reason}")
    return tag, result


def cmd_train(cfg):
    os.makedirs(cfg.out, exist_ok=True)
    records, _ = load_scenes(cfg)
    by_vehicle = dp.group_by_vehicle(records)
    train_ids, test_ids = split_ids(by_vehicle, cfg)
    _write_rows(os.path.join(cfg.out, "split.csv"), ("vehicle_id", "role"),
                [(v, "train") for v in train_ids] + [(v, "test") for v in test_ids])
    models, gammas = parse_equations(cfg.equations)
    _train_one(cfg, by_vehicle, train_ids, models, gammas)
    return 0


def _gp_predictions(result, by_obs, by_truth, test_ids, every):
    """Held-out predictions per output dimension for one trained model."""
    series = dp.vehicle_series(by_obs, every=every, vehicles=test_ids)
    ys, yh = [], []
    for vid, (t_obs, y_obs) in series.items():
        truth = [r for r in by_truth[vid] if r.preceding_velocity is not None]
        held = [r for i, r in enumerate(truth) if i % every != 0] if every > 1 else truth
        if not held:
            continue
        t_star = np.array([r.time for r in held])
        means, _, clamped = predict_batch(result.condition(t_obs, y_obs), t_star)
        ys.append(np.array([dp.record_outputs(r) for r in held], dtype=float))
        yh.append(means)
    if not ys:
        raise InputDomainError("no test vehicle has enough records")
    Y, H = np.vstack(ys), np.vstack(yh)
    return {dim: (Y[:, j], H[:, j]) for j, dim in enumerate(OUTPUT_DIMS)}


def _physics_predictions(cfg, by_obs, by_truth, train_ids, test_ids):
    """Calibrate on training vehicles, score each model's own quantity on test vehicles."""
    fit_pairs = _pairs_for(by_obs, train_ids)
    test_pairs = _pairs_for(by_truth, test_ids)
    batch = batch_from_pairs(test_pairs)
    out = {}
    for name in cfg.calibrate_models:
        kind = parse_kind(name)
        res = calibrate(kind, fit_pairs, seed=cfg.seed, holdout=0.0)
        model = res.model
        obs, pred, ok = residual_terms(kind, np.asarray(model.beta), batch.cur, batch.nxt,
                                       batch.dt, np, model.time_shift)
        finite = np.isfinite(obs) & np.isfinite(pred)
        keep = ok & finite
        dim = QUANTITY_DIM[PREDICTED_QUANTITY[kind]]
        out[kind.value] = {dim: (obs[keep], pred[keep], int(np.count_nonzero(finite & ~ok)))}
    return out


def _find_models(cfg):
    if cfg.models:
        return list(cfg.models)
    return sorted(glob.glob(os.path.join(cfg.out, "*", "model.json")))


def cmd_evaluate(cfg, traces=None):
    os.makedirs(cfg.out, exist_ok=True)
    records, truth = load_scenes(cfg)
    by_obs = dp.group_by_vehicle(records)
    by_truth = dp.group_by_vehicle(truth) if truth is not None else by_obs
    train_ids, test_ids = split_ids(by_obs, cfg)
    predictions, traces = {}, dict(traces or {})
    paths = _find_models(cfg)
    if not paths:
        raise InputDomainError(f"no trained models found under {cfg.out}")
    for path in paths:
        with open(path) as fh:
            tag = json.load(fh).get("tag", os.path.basename(os.path.dirname(path)))
        result = load_result(path)
        predictions[tag] = _gp_predictions(result, by_obs, by_truth, test_ids, cfg.observe_every)
        trace_path = os.path.join(os.path.dirname(path), "trace.csv")
        if tag not in traces and os.path.exists(trace_path):
            with open(trace_path, newline="") as fh:
                traces[tag] = [float(r["negative_elbo"]) for r in csv.DictReader(fh)]
    if cfg.baselines:
        predictions.update(_physics_predictions(cfg, by_obs, by_truth, train_ids, test_ids))
    sigma = None
    if cfg.sigma_normalize:
        follow = [r for rs in by_truth.values() for r in rs if r.preceding_velocity is not None]
        Y = np.array([dp.record_outputs(r) for r in follow], dtype=float)
        sigma = {dim: float(Y[:, j].std()) or 1.0 for j, dim in enumerate(OUTPUT_DIMS)}
    report = compare_models(predictions, sigma=sigma)
    emit_report(report, os.path.join(cfg.out, "report.csv"))
    emit_plots(report, traces, predictions, os.path.join(cfg.out, "plots"), case=cfg.case)
    for c in report.cells:
        mape = "n/a" if c.mape is None else f"{c.mape:.3f}"
        print(f"{c.model:18s} {c.dimension:18s} n={c.n:6d} rmse={c.rmse:.4g} mape={mape}")
    return 0


def cmd_report(cfg):
    """GP baseline plus the configured PRGP run, then evaluation and plots."""
    os.makedirs(cfg.out, exist_ok=True)
    records, _ = load_scenes(cfg)
    by_vehicle = dp.group_by_vehicle(records)
    train_ids, test_ids = split_ids(by_vehicle, cfg)
    _write_rows(os.path.join(cfg.out, "split.csv"), ("vehicle_id", "role"),
                [(v, "train") for v in train_ids] + [(v, "test") for v in test_ids])
    models, gammas = parse_equations(cfg.equations)
    paths = []
    for ms, gs in (([], []), (models, gammas)):
        if ms is models and not models:
            continue
        tag, _ = _train_one(cfg, by_vehicle, train_ids, ms, gs)
        paths.append(os.path.join(cfg.out, tag, "model.json"))
    return cmd_evaluate(replace(cfg, models=paths))


COMMANDS = {
    "ingest": cmd_ingest,
    "synth": cmd_synth,
    "calibrate": cmd_calibrate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="prgp", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--input", help="NGSIM or canonical trajectory CSV")
        p.add_argument("--truth", help="noise-free canonical CSV used as evaluation target")
        p.add_argument("--equations", help="comma-separated physics equations, e.g. Pipes,DEF")
        p.add_argument("--gamma", type=float)
        p.add_argument("--iterations", type=int)
        p.add_argument("--m", type=int)
        p.add_argument("--lr", type=float, dest="learning_rate")
        p.add_argument("--test-fraction", type=float, dest="test_fraction")
    return parser


def _configure_logging():
    level = os.environ.get("PRGP_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None):
    _configure_logging()
    args = build_parser().parse_args(argv)
    try:
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
        overrides = {k: v for k, v in vars(args).items()
                     if k not in ("command", "config") and v is not None}
        if "equations" in overrides:
            overrides["equations"] = [s.strip() for s in overrides["equations"].split(",") if s.strip()]
        cfg = replace(cfg, **overrides)
        if args.command == "synth" and cfg.synth is None:
            cfg = replace(cfg, synth={})
        if args.command in ("ingest", "synth") and cfg.input is None and cfg.synth is None:
            cfg = replace(cfg, synth={})
        cfg.validate()
        return COMMANDS[args.command](cfg)
    except (PRGPError, OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
