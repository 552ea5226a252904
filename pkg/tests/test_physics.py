import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from prgp.errors import EmptyDataError, InputDomainError, ModelDomainError
from prgp.physics import (DEFAULT_BETA, SIGN, KinematicSample, ModelKind, PhysicsModel,
                          calibrate, gipps_beta_from_table, observed_quantity, parse_kind,
                          predict_quantity, residual, synthesize_pairs, va_beta,
                          va_coefficients)

GENERATING = {
    "Pipes": (3.6,),
    "Forbes": (0.81,),
    "GHR": (0.8, 0.6, 1.2),
    "NewellNonlinear": (40.0, 2.49, 33.16),
    "NewellLinear": (33.16,),
    "Gipps": (1.5, 400.0, 0.3),
    "VanAerde": va_beta(11.11, 0.25, 8.33, 0.708),
}

# (c1, c2, c3) for v_f=11.11, k_j=0.25, v_m=8.33, q_m=0.708, computed with
# 30-digit decimal arithmetic
VA_TABLE = (3.55448782153917989764933584478, 4.94964030269971133711587876447,
            0.771981122397887879183659139283)


def S(**kw):
    return KinematicSample(**kw)


def test_pipes_exact_datum():
    m = PhysicsModel("Pipes", (3.6,))
    assert residual(m, S(velocity=10.0, space_headway=36.0)) == pytest.approx(0.0, abs=1e-12)
    assert predict_quantity(m, S(velocity=10.0)) == pytest.approx(36.0, rel=1e-15)


def test_newell_linear_consistent_datum():
    m = PhysicsModel("NewellLinear", (33.16,), time_shift=1.0)
    cur = S(space_headway=73.16, dt=0.1)
    nxt = S(velocity=40.0)
    assert residual(m, cur, nxt) == pytest.approx(0.0, abs=1e-12)


def test_newell_linear_defaults_to_sample_step():
    m = PhysicsModel("NewellLinear", (30.0,))
    assert predict_quantity(m, S(space_headway=33.0, dt=0.5), S()) == pytest.approx(6.0)


def test_va_coefficients_match_decimal_oracle():
    np.testing.assert_allclose(va_coefficients(11.11, 0.25, 8.33, 0.708), VA_TABLE, rtol=1e-14)


def test_va_coefficient_degenerate_cases():
    assert va_coefficients(10.0, 0.2, 5.0, 0.5)[0] == 0.0
    assert va_coefficients(5.0, 0.2, 5.0, 0.5)[1] == 0.0
    with pytest.raises(InputDomainError):
        va_coefficients(4.0, 0.2, 5.0, 0.5)
    with pytest.raises(InputDomainError):
        va_coefficients(10.0, 0.0, 5.0, 0.5)


def test_va_residual_and_perturbation():
    c1, c2, c3 = VA_TABLE
    vf = 11.11
    m = PhysicsModel("VanAerde", va_beta(11.11, 0.25, 8.33, 0.708))
    v = 5.0
    s = c1 + c3 * v + c2 / (vf - v)
    assert residual(m, S(velocity=v, space_headway=s)) == pytest.approx(0.0, abs=1e-12)
    assert residual(m, S(velocity=v, space_headway=s + 1.0)) == pytest.approx(1.0, abs=1e-12)


def test_va_standstill_gap():
    c1, c2, _ = VA_TABLE
    m = PhysicsModel("VanAerde", va_beta(11.11, 0.25, 8.33, 0.708))
    assert predict_quantity(m, S(velocity=0.0)) == pytest.approx(c1 + c2 / 11.11, rel=1e-14)


@given(st.floats(1.0, 40.0), st.floats(0.05, 0.5), st.floats(0.1, 0.95))
def test_va_capacity_identity(v_m, k_m, ratio):
    # consistent set: q_m = k_m * v_m, v_f > v_m
    q_m = k_m * v_m
    v_f = v_m / ratio
    k_j = 1.5 * k_m
    m = PhysicsModel("VanAerde", va_beta(v_f, k_j, v_m, q_m))
    assert predict_quantity(m, S(velocity=v_m)) == pytest.approx(1.0 / k_m, rel=1e-9)


def test_va_pole_is_domain_error():
    m = PhysicsModel("VanAerde", (0.0, 1.0, 1.0, 10.0))
    with pytest.raises(ModelDomainError):
        residual(m, S(velocity=10.0, space_headway=20.0))


def test_gipps_negative_radicand():
    m = PhysicsModel("Gipps", (1.0, 10.0, 0.0))
    with pytest.raises(ModelDomainError):
        residual(m, S(space_headway=100.0, leader_velocity=5.0), S(velocity=3.0))


def test_missing_next_sample():
    with pytest.raises(InputDomainError):
        residual(PhysicsModel("VelDef"), S(velocity=1.0))


def test_non_finite_fields_rejected():
    with pytest.raises(InputDomainError):
        residual(PhysicsModel("Pipes", (3.6,)), S(velocity=math.nan, space_headway=1.0))


def test_vel_def_velocity():
    m = PhysicsModel("VelDef")
    assert predict_quantity(m, S(position_y=100.0, dt=0.1), S(position_y=101.0)) == pytest.approx(10.0)
    # residual written as derivative minus measured velocity
    assert residual(m, S(position_y=100.0, velocity=9.0, dt=0.1), S(position_y=101.0)) == \
        pytest.approx(1.0)


def test_acc_def_and_forbes_signs():
    a = PhysicsModel("AccDef")
    assert residual(a, S(velocity=10.0, acceleration=1.0, dt=0.5), S(velocity=11.0)) == \
        pytest.approx(1.0)
    f = PhysicsModel("Forbes", (0.5,))
    # q^t - q^x + v * beta0
    assert residual(f, S(velocity=10.0, space_headway=30.0, time_headway=2.0)) == \
        pytest.approx(2.0 - 30.0 + 5.0)


def test_ghr_residual():
    m = PhysicsModel("GHR", (0.8, 1.0, 1.0))
    cur = S(velocity=20.0, leader_velocity=22.0, space_headway=40.0, dt=0.1)
    nxt = S(velocity=21.0, acceleration=0.9)
    assert residual(m, cur, nxt) == pytest.approx(0.9 - 0.8 * 21.0 * 2.0 / 40.0)


def test_beta_length_checked():
    with pytest.raises(InputDomainError):
        PhysicsModel("Pipes", (1.0, 2.0))
    with pytest.raises(InputDomainError):
        PhysicsModel("Unknown", ())


def test_parse_kind_aliases():
    assert parse_kind("nn") is ModelKind.NEWELL_NL
    assert parse_kind("Vel-DEF") is ModelKind.VEL_DEF
    assert parse_kind(ModelKind.GIPPS) is ModelKind.GIPPS
    with pytest.raises(InputDomainError):
        parse_kind("DEF")


def test_gipps_table_mapping():
    assert gipps_beta_from_table(1.0, 0.1, 1.0, 6.0) == pytest.approx((0.1, 12.01, -1.0))
    assert DEFAULT_BETA[ModelKind.GIPPS] == pytest.approx((0.1, 12.01, -1.0))


@pytest.mark.parametrize("name", sorted(GENERATING))
@given(seed=st.integers(0, 2**31))
def test_residual_vanishes_on_self_generated_data(name, seed):
    m = PhysicsModel(name, GENERATING[name])
    for cur, nxt in synthesize_pairs(m, 20, seed=seed):
        assert abs(residual(m, cur, nxt)) <= 1e-10 * max(1.0, abs(observed_quantity(m, cur, nxt)))


@pytest.mark.parametrize("name", ["Pipes", "Forbes", "NewellLinear", "VanAerde", "VelDef", "AccDef"])
def test_residual_is_observed_minus_predicted(name, rng):
    m = PhysicsModel(name, GENERATING.get(name, ()))
    for _ in range(20):
        cur = S(velocity=rng.uniform(1, 8), acceleration=rng.normal(), space_headway=rng.uniform(20, 90),
                time_headway=rng.uniform(1, 4), position_y=rng.uniform(0, 100), dt=0.1)
        nxt = S(velocity=rng.uniform(1, 8), position_y=cur.position_y + rng.uniform(0, 2))
        expect = SIGN[m.kind] * (observed_quantity(m, cur, nxt) - predict_quantity(m, cur, nxt))
        assert residual(m, cur, nxt) == expect


@pytest.mark.parametrize("name", sorted(GENERATING))
def test_calibrate_recovers_generating_parameters(name):
    truth = PhysicsModel(name, GENERATING[name])
    res = calibrate(name, synthesize_pairs(truth, 200, seed=3), seed=0)
    np.testing.assert_allclose(res.model.beta, truth.beta, rtol=1e-3)
    assert res.report.rmse < 1e-6


def test_calibrate_pipes_with_noise_matches_least_squares_bound():
    rng = np.random.default_rng(7)
    n = 1000
    v = rng.uniform(10, 40, n)
    s = 3.6 * v + rng.normal(0, 0.5, n)
    pairs = [(S(velocity=a, space_headway=b), None) for a, b in zip(v, s)]
    res = calibrate("Pipes", pairs, seed=1, holdout=0.0)
    assert abs(res.model.beta[0] - 3.6) <= 3 * (0.5 / math.sqrt(n)) / v.mean()


def test_vel_def_calibration_has_no_parameters():
    truth = PhysicsModel("VelDef")
    res = calibrate("VelDef", synthesize_pairs(truth, 50, seed=1))
    assert res.model.beta == ()
    assert res.report.rmse < 1e-9


def test_calibrate_empty_inputs():
    with pytest.raises(EmptyDataError):
        calibrate("Pipes", [])
    nan_pairs = [(S(velocity=math.nan, space_headway=1.0), None)] * 3
    with pytest.raises(EmptyDataError):
        calibrate("Pipes", nan_pairs)


def test_calibration_is_deterministic():
    truth = PhysicsModel("NewellNonlinear", GENERATING["NewellNonlinear"])
    pairs = synthesize_pairs(truth, 60, seed=5)
    a = calibrate("NewellNonlinear", pairs, seed=2)
    b = calibrate("NewellNonlinear", pairs, seed=2)
    assert a.model.beta == b.model.beta
    assert a.report == b.report


def test_calibration_report_maps_gipps_and_va():
    truth = PhysicsModel("Gipps", GENERATING["Gipps"])
    res = calibrate("Gipps", synthesize_pairs(truth, 80, seed=2))
    assert set(res.report.mapping) == {"beta0", "beta1", "beta2"}
