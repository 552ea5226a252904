"""Synthetic scarce-data benchmark: GP vs. physics-regularized GP.

A platoon is simulated under a known car-following model, observations are
corrupted with Gaussian noise, and followers are split into training and test
vehicles.  Test vehicles are conditioned on every ``observe_every``-th noisy
frame and predicted on the remaining frames, which are scored against the
noise-free trajectories.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .data import (record_outputs, relative_noise, shuffle_split, synth_generate,
                   vehicle_series)
from .gp import OUTPUT_DIMS, predict_batch
from .inference import TrainConfig, train
from .physics import PhysicsModel

__all__ = ["BenchmarkConfig", "Benchmark", "make_benchmark", "held_out_predictions",
           "velocity_rmse", "run_seed"]


@dataclass(frozen=True)
class BenchmarkConfig:
    model: PhysicsModel = field(default_factory=lambda: PhysicsModel("Pipes", (3.6,)))
    n_vehicles: int = 16
    horizon_s: float = 30.0
    dt: float = 0.1
    observe_every: int = 10
    test_fraction: float = 1.0 / 3.0
    noise_fraction: float = 0.1


@dataclass(frozen=True)
class Benchmark:
    config: BenchmarkConfig
    seed: int
    truth: object
    observed: object
    noise_std: dict
    train_ids: tuple
    test_ids: tuple

    def train_series(self):
        return vehicle_series(self.observed.by_vehicle, every=self.config.observe_every,
                              vehicles=self.train_ids)


def make_benchmark(config=None, seed=0):
    config = config or BenchmarkConfig()
    clean = synth_generate(config.model, config.n_vehicles, config.horizon_s, config.dt, seed=seed)
    noise = relative_noise(clean.truth, config.noise_fraction)
    scene = synth_generate(config.model, config.n_vehicles, config.horizon_s, config.dt,
                           noise_std=noise, seed=seed)
    followers = {vid: rs for vid, rs in scene.observed.by_vehicle.items()
                 if any(r.preceding_id is not None for r in rs)}
    train_part, test_part = shuffle_split(followers, config.test_fraction, seed)
    return Benchmark(config, seed, scene.truth, scene.observed, noise,
                     tuple(sorted(train_part)), tuple(sorted(test_part)))


def held_out_predictions(result, bench):
    """``{vid: (times, predicted means, true outputs)}`` on unobserved test frames."""
    every = bench.config.observe_every
    observed = vehicle_series(bench.observed.by_vehicle, every=every, vehicles=bench.test_ids)
    out = {}
    for vid, (t_obs, y_obs) in observed.items():
        truth = [r for r in bench.truth.by_vehicle[vid] if r.preceding_velocity is not None]
        held = [r for i, r in enumerate(truth) if i % every != 0]
        t_star = np.array([r.time for r in held])
        target = np.array([record_outputs(r) for r in held], dtype=float)
        means, _, _ = predict_batch(result.condition(t_obs, y_obs), t_star)
        out[vid] = (t_star, means, target)
    return out


def velocity_rmse(predictions):
    j = OUTPUT_DIMS.index("velocity")
    err = np.concatenate([p[1][:, j] - p[2][:, j] for p in predictions.values()])
    return float(np.sqrt(np.mean(err**2)))


def run_seed(seed, bench_config=None, train_config=None, equations=None):
    """Train pure GP and PRGP on one benchmark draw.

    Returns a dict with both results, their held-out predictions and velocity
    RMSEs.  ``equations`` defaults to the generating model.
    """
    bench = make_benchmark(bench_config, seed)
    train_config = replace(train_config or TrainConfig(plateau_tol=None), seed=seed)
    series = bench.train_series()
    eqs = (bench.config.model,) if equations is None else tuple(equations)
    out = {"benchmark": bench}
    for tag, e in (("GP", ()), ("PRGP", eqs)):
        res = train(series, e, train_config)
        preds = held_out_predictions(res, bench)
        out[tag] = {"result": res, "predictions": preds, "velocity_rmse": velocity_rmse(preds)}
    return out
