import copy
import hashlib
import math
import pickle

import numpy as np
import pytest
from hypothesis import given, strategies as st

from prgp.errors import EmptyDataError, InputDomainError
from prgp.evaluation import (EvalReport, compare_models, emit_plots, emit_report, mape,
                             mape_detail, rmse, trend_line)
from prgp.gp import OUTPUT_DIMS

finite = st.floats(-1e3, 1e3, allow_nan=False)


def test_rmse_examples():
    assert rmse([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert rmse([0, 0], [3, 4]) == pytest.approx(math.sqrt(12.5), rel=1e-15)
    assert rmse([0, 0], [3, 4], sigma=2.0) == pytest.approx(0.5 * math.sqrt(12.5), rel=1e-15)


def test_rmse_errors():
    with pytest.raises(InputDomainError):
        rmse([1, 2], [1])
    with pytest.raises(InputDomainError):
        rmse([1], [2], sigma=0.0)
    with pytest.raises(EmptyDataError):
        rmse([], [])


def test_mape_examples():
    assert mape([3.0, -2.0], [3.0, -2.0]) == 0.0
    assert mape([10.0], [11.0]) == pytest.approx(10.0, rel=1e-14)
    assert mape_detail([0.0, 10.0], [5.0, 10.0]) == (0.0, 1)
    with pytest.raises(EmptyDataError):
        mape([0.0, 1e-12], [1.0, 1.0])


@given(st.lists(st.tuples(finite, finite, st.floats(0.1, 10)), min_size=1, max_size=30),
       st.randoms(use_true_random=False))
def test_metrics_permutation_invariant_and_sigma_identity(rows, rnd):
    y, yh, s = (np.array(c) for c in zip(*rows))
    perm = list(range(len(rows)))
    rnd.shuffle(perm)
    assert rmse(y[perm], yh[perm], s[perm]) == pytest.approx(rmse(y, yh, s), rel=1e-12, abs=1e-300)
    assert rmse(y, yh, s) == pytest.approx(rmse(y / s, yh / s), rel=1e-12, abs=1e-300)
    if np.any(np.abs(y) >= 1e-9):
        assert mape(y[perm], yh[perm]) == pytest.approx(mape(y, yh), rel=1e-12, abs=1e-300)


def _predictions(rng, models=("GP", "PRGP-Pipes")):
    out = {}
    y = {d: rng.normal(10, 3, 25) for d in OUTPUT_DIMS}
    for name in models:
        out[name] = {d: (y[d], y[d] + rng.normal(0, 0.5, 25)) for d in OUTPUT_DIMS}
    return out


def test_report_has_row_per_model_and_dimension(rng, tmp_path):
    report = compare_models(_predictions(rng))
    assert len(report.cells) == 14
    path = emit_report(report, tmp_path / "r.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == "model,dimension,n,rmse,mape,mask_count"
    assert len(lines) == 15


def test_empty_report_is_header_only(tmp_path):
    path = emit_report(EvalReport(), tmp_path / "r.csv")
    assert path.read_text() == "model,dimension,n,rmse,mape,mask_count\n"


def test_report_csv_is_stable(rng, tmp_path):
    report = compare_models(_predictions(rng))
    a = emit_report(report, tmp_path / "a.csv").read_bytes()
    b = emit_report(report, tmp_path / "b.csv").read_bytes()
    assert a == b


def test_oracle_predictor_scores_zero(rng):
    y = {d: rng.normal(5, 1, 10) for d in OUTPUT_DIMS}
    report = compare_models({"oracle": {d: (v, v.copy()) for d, v in y.items()}})
    assert all(c.rmse == 0.0 and c.mape == 0.0 for c in report.cells)


def test_self_comparison_rows_identical(rng):
    preds = _predictions(rng, ("GP",))
    report = compare_models({"a": preds["GP"], "b": preds["GP"]})
    for d in OUTPUT_DIMS:
        a, b = report.get("a", d), report.get("b", d)
        assert (a.n, a.rmse, a.mape) == (b.n, b.rmse, b.mape)


def test_missing_dimension_is_absent_not_zero(rng):
    y = rng.normal(20, 2, 12)
    preds = {"GP": {"velocity": (y, y + 0.1)}, "Pipes": {"space_headway": (y, y)}}
    report = compare_models(preds, dimensions=("velocity", "space_headway"))
    assert report.get("Pipes", "velocity") is None
    assert ("Pipes", "velocity") in report.absent
    assert ("GP", "space_headway") in report.absent
    assert report.get("Pipes", "space_headway").rmse == 0.0


def test_mask_count_and_normalized_rmse(rng, tmp_path):
    y = rng.normal(0, 4, 30)
    report = compare_models({"M": {"acceleration": (y, y + 1.0, 3)}},
                            sigma={"acceleration": 2.0})
    cell = report.get("M", "acceleration")
    assert cell.mask_count == 3
    assert cell.rmse_normalized == pytest.approx(0.5 * cell.rmse)
    header = emit_report(report, tmp_path / "r.csv").read_text().splitlines()[0]
    assert header.endswith(",rmse_normalized")


def test_compare_models_is_read_only(rng):
    preds = _predictions(rng)
    before = hashlib.sha256(pickle.dumps(preds)).hexdigest()
    snapshot = copy.deepcopy(preds)
    compare_models(preds, sigma={"velocity": 2.0})
    assert hashlib.sha256(pickle.dumps(preds)).hexdigest() == before
    for name in preds:
        for d in preds[name]:
            assert np.array_equal(preds[name][d][1], snapshot[name][d][1])


def test_trend_line_on_identity():
    y = np.linspace(-3, 8, 40)
    slope, icpt = trend_line(y, y)
    assert abs(slope - 1.0) <= 1e-9 and abs(icpt) <= 1e-9
    with pytest.raises(InputDomainError):
        trend_line([1.0, 1.0], [2.0, 3.0])


def test_plot_files_are_named_by_case_model_dimension(rng, tmp_path):
    preds = _predictions(rng)
    report = compare_models(preds)
    traces = {"GP": np.linspace(100, 10, 50)}
    paths = emit_plots(report, traces, preds, tmp_path / "plots", case="synth", ext="png")
    names = {p.rsplit("/", 1)[1] for p in paths}
    assert "synth_GP_velocity.png" in names
    assert "synth_PRGP-Pipes_time_headway.png" in names
    assert "synth_GP_elbo.png" in names
    assert {"synth_all_rmse.png", "synth_all_mape.png"} <= names
    assert len(names) == 14 + 1 + 2
