"""Error metrics, model comparison tables and plots."""

import csv
import math
import os
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import EmptyDataError, InputDomainError
from .gp import OUTPUT_DIMS

__all__ = [
    "rmse",
    "mape",
    "mape_detail",
    "EvalCell",
    "EvalReport",
    "compare_models",
    "emit_report",
    "emit_plots",
    "trend_line",
    "REPORT_COLUMNS",
]

REPORT_COLUMNS = ("model", "dimension", "n", "rmse", "mape", "mask_count")
MAPE_GUARD = 1e-9


def _pair(y, y_hat):
    y = np.asarray(y, dtype=float).ravel()
    y_hat = np.asarray(y_hat, dtype=float).ravel()
    if y.shape != y_hat.shape:
        raise InputDomainError(f"length mismatch: {y.size} vs {y_hat.size}")
    if y.size == 0:
        raise EmptyDataError("no values to score")
    return y, y_hat


def rmse(y, y_hat, sigma=1.0):
    """Root mean squared error of ``(y - y_hat) / sigma``."""
    y, y_hat = _pair(y, y_hat)
    sigma = np.broadcast_to(np.asarray(sigma, dtype=float), y.shape)
    if not np.all(sigma > 0):
        raise InputDomainError("sigma must be positive")
    z = (y - y_hat) / sigma
    return float(np.sqrt(np.mean(z * z)))


def mape_detail(y, y_hat):
    """``(mape_percent, n_excluded)``; targets with ``|y| < 1e-9`` are excluded."""
    y, y_hat = _pair(y, y_hat)
    keep = np.abs(y) >= MAPE_GUARD
    if not np.any(keep):
        raise EmptyDataError("every target is too close to zero for MAPE")
    value = 100.0 * float(np.mean(np.abs(y[keep] - y_hat[keep]) / np.abs(y[keep])))
    return value, int(np.count_nonzero(~keep))


def mape(y, y_hat):
    return mape_detail(y, y_hat)[0]


@dataclass(frozen=True)
class EvalCell:
    model: str
    dimension: str
    n: int
    rmse: float
    mape: float | None
    mask_count: int = 0
    mape_excluded: int = 0
    rmse_normalized: float | None = None


@dataclass(frozen=True)
class EvalReport:
    cells: tuple = ()
    absent: tuple = ()

    def get(self, model, dimension):
        for c in self.cells:
            if c.model == model and c.dimension == dimension:
                return c
        return None

    @property
    def models(self):
        return tuple(dict.fromkeys(c.model for c in self.cells))


def _dim_order(dims):
    known = [d for d in OUTPUT_DIMS if d in dims]
    return known + sorted(d for d in dims if d not in OUTPUT_DIMS)


def compare_models(predictions, sigma=None, dimensions=None):
    """Score each model's predictions per output dimension.

    ``predictions[model][dimension]`` is ``(y_true, y_hat)`` or
    ``(y_true, y_hat, mask_count)``.  Models that do not predict a dimension
    listed in ``dimensions`` get an entry in ``report.absent`` rather than a
    cell.  ``sigma`` optionally maps dimensions to normalizing scales; the
    normalized RMSE is then reported alongside the plain one.
    """
    dims = set(dimensions or ())
    for per_dim in predictions.values():
        dims.update(per_dim)
    order = _dim_order(dims)
    cells, absent = [], []
    for name, per_dim in predictions.items():
        for dim in order:
            if dim not in per_dim:
                if dimensions is not None and dim in dimensions:
                    absent.append((name, dim))
                continue
            entry = per_dim[dim]
            y, y_hat = _pair(entry[0], entry[1])
            masked = int(entry[2]) if len(entry) > 2 else 0
            try:
                mp, excluded = mape_detail(y, y_hat)
            except EmptyDataError:
                mp, excluded = None, y.size
            norm = None
            if sigma is not None and dim in sigma:
                norm = rmse(y, y_hat, sigma[dim])
            cells.append(EvalCell(name, dim, int(y.size), rmse(y, y_hat), mp, masked,
                                  excluded, norm))
    return EvalReport(tuple(cells), tuple(absent))


def _fmt(value):
    if value is None:
        return ""
    return repr(float(value))


def emit_report(report, path):
    """Write the report as CSV; a ``rmse_normalized`` column is added when present."""
    extra = any(c.rmse_normalized is not None for c in report.cells)
    header = REPORT_COLUMNS + (("rmse_normalized",) if extra else ())
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for c in report.cells:
            row = [c.model, c.dimension, c.n, _fmt(c.rmse), _fmt(c.mape), c.mask_count]
            if extra:
                row.append(_fmt(c.rmse_normalized))
            w.writerow(row)
    return path


def trend_line(y, y_hat):
    """Least-squares ``y_hat ~ slope * y + intercept``."""
    y, y_hat = _pair(y, y_hat)
    if y.size < 2 or np.ptp(y) == 0:
        raise InputDomainError("need at least two distinct targets for a trend line")
    with warnings.catch_warnings():
        # nearly constant targets are fine for a plotted trend line
        warnings.simplefilter("ignore", np.exceptions.RankWarning)
        slope, intercept = np.polyfit(y, y_hat, 1)
    return float(slope), float(intercept)


def _safe(name):
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in str(name))


def emit_plots(report, traces, predictions, out_dir, case="case", ext="png"):
    """Scatter, convergence and bar-chart images; returns the written paths.

    ``traces`` maps model names to arrays of negative ELBO per iteration and
    ``predictions`` has the shape accepted by :func:`compare_models`.
    Files are named ``<case>_<model>_<dimension>.<ext>``.
    """
    import matplotlib

    matplotlib.use("Agg")
    from matplotlib import pyplot as plt

    os.makedirs(out_dir, exist_ok=True)
    written = []

    def save(fig, model, dim):
        path = os.path.join(out_dir, f"{_safe(case)}_{_safe(model)}_{_safe(dim)}.{ext}")
        fig.savefig(path, metadata={"Software": None} if ext == "png" else None)
        plt.close(fig)
        written.append(path)

    for name, per_dim in predictions.items():
        for dim in _dim_order(set(per_dim)):
            y, y_hat = _pair(per_dim[dim][0], per_dim[dim][1])
            fig, ax = plt.subplots(figsize=(4.5, 4.5))
            ax.scatter(y, y_hat, s=6, alpha=0.6)
            lo, hi = float(min(y.min(), y_hat.min())), float(max(y.max(), y_hat.max()))
            ax.plot([lo, hi], [lo, hi], color="0.6", lw=0.8, ls="--")
            try:
                slope, icpt = trend_line(y, y_hat)
                xs = np.array([y.min(), y.max()])
                ax.plot(xs, slope * xs + icpt, color="C3", lw=1.2)
                ax.set_title(f"{name} {dim}\ny = {slope:.3f} x + {icpt:.3f}", fontsize=9)
            except InputDomainError:
                ax.set_title(f"{name} {dim}", fontsize=9)
            ax.set_xlabel("ground truth")
            ax.set_ylabel("estimate")
            fig.tight_layout()
            save(fig, name, dim)

    for name, trace in traces.items():
        trace = np.asarray(trace, dtype=float)
        if trace.size == 0:
            continue
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.plot(np.arange(1, trace.size + 1), trace, lw=0.8)
        ax.set_xlabel("iteration")
        ax.set_ylabel("negative ELBO")
        ax.set_yscale("symlog")
        fig.tight_layout()
        save(fig, name, "elbo")

    for metric in ("rmse", "mape"):
        cells = [c for c in report.cells if getattr(c, metric) is not None]
        if not cells:
            continue
        dims = _dim_order({c.dimension for c in cells})
        models = list(dict.fromkeys(c.model for c in cells))
        width = 0.8 / len(models)
        fig, ax = plt.subplots(figsize=(max(6, len(dims) * 1.2), 4))
        for k, model in enumerate(models):
            vals = [getattr(report.get(model, d), metric) if report.get(model, d) else math.nan
                    for d in dims]
            vals = [math.nan if v is None else v for v in vals]
            ax.bar(np.arange(len(dims)) + k * width, vals, width, label=model)
        ax.set_xticks(np.arange(len(dims)) + 0.4 - width / 2)
        ax.set_xticklabels(dims, rotation=30, ha="right", fontsize=8)
        ax.set_ylabel(metric.upper())
        ax.legend(fontsize=7)
        fig.tight_layout()
        save(fig, "all", metric)
    return written
