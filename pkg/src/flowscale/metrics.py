"""Pointwise, sparse, Climdex, and climatology evaluation statistics.

All statistics are computed per grid cell over time and then aggregated over
space, matching the downscaling evaluation protocol: RMSE/bias/Pearson per
cell, sparse variants that ignore days where both series are dry, and a
seven-index Climdex subset (TXx/TXn for temperature; CDD/CWD/Rx1d/Rx5d/SDII
for precipitation) computed per calendar month.
"""

from dataclasses import dataclass, field

import numpy as np

WET_THRESHOLD_MM = 1.0  # ETCCDI wet-day convention

TEMPERATURE_INDICES = ("TXx", "TXn")
PRECIPITATION_INDICES = ("CDD", "CWD", "Rx1d", "Rx5d", "SDII")


@dataclass
class MetricReport:
    rmse: float
    bias: float
    pearson_r: float
    excluded_cells: int = 0  # zero-variance (or all-dry) cells left out of r

    def to_dict(self):
        return {
            "rmse": self.rmse,
            "bias": self.bias,
            "pearson_r": self.pearson_r,
            "excluded_cells": self.excluded_cells,
        }


@dataclass
class ClimdexReport:
    variable: str
    months: list  # [(year, month), ...]
    indices: dict  # name -> (n_months, H, W) array
    flags: dict = field(default_factory=dict)


def _check_aligned(pred, truth):
    if pred.values.shape != truth.values.shape:
        raise ValueError(f"shape mismatch: {pred.values.shape} vs {truth.values.shape}")
    if not np.array_equal(pred.calendar, truth.calendar):
        raise ValueError("calendar mismatch between prediction and truth")


def pointwise_stats(pred, truth):
    """Per-cell RMSE/bias/Pearson over time, averaged over space.

    Cells whose prediction or truth series has zero variance are excluded
    from the correlation average and counted in the report.
    """
    _check_aligned(pred, truth)
    p = pred.values
    t = truth.values
    diff = p - t
    rmse = float(np.sqrt((diff**2).mean(axis=0)).mean())
    bias = float(diff.mean(axis=0).mean())

    pc = p - p.mean(axis=0)
    tc = t - t.mean(axis=0)
    sp = np.sqrt((pc**2).sum(axis=0))
    st = np.sqrt((tc**2).sum(axis=0))
    valid = (sp > 0) & (st > 0)
    excluded = int((~valid).sum())
    if valid.any():
        r_cells = (pc * tc).sum(axis=0)[valid] / (sp[valid] * st[valid])
        pearson = float(r_cells.mean())
    else:
        pearson = float("nan")
    return MetricReport(rmse, bias, pearson, excluded)


def sparse_stats(pred, truth, eps=WET_THRESHOLD_MM):
    """RMSE/bias over days where either series reaches the wet threshold.

    Per cell, days with both values below ``eps`` are dropped and the error
    is divided by the remaining count; cells with no qualifying day are
    excluded entirely.
    """
    if eps < 0:
        raise ValueError("threshold must be nonnegative")
    _check_aligned(pred, truth)
    p = pred.values
    t = truth.values
    keep = (p >= eps) | (t >= eps)
    counts = keep.sum(axis=0)
    valid = counts > 0
    diff = np.where(keep, p - t, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        bias_cells = diff.sum(axis=0) / counts
        rmse_cells = np.sqrt((diff**2).sum(axis=0) / counts)
    return {
        "sparse_rmse": float(rmse_cells[valid].mean()) if valid.any() else float("nan"),
        "sparse_bias": float(bias_cells[valid].mean()) if valid.any() else float("nan"),
        "excluded_cells": int((~valid).sum()),
    }


def month_groups(calendar):
    """Ordered (year, month) keys with the row indices of each month."""
    keys = []
    groups = {}
    for i, (y, m, _) in enumerate(calendar):
        key = (int(y), int(m))
        if key not in groups:
            groups[key] = []
            keys.append(key)
        groups[key].append(i)
    return [(key, np.asarray(groups[key])) for key in keys]


def climdex_temperature(ds):
    """Monthly max (TXx) and min (TXn) of daily maximum temperature."""
    if ds.variable != "max-temperature":
        raise ValueError(f"temperature indices need a max-temperature grid, got {ds.variable}")
    groups = month_groups(ds.calendar)
    if any(len(idx) == 0 for _, idx in groups):
        raise ValueError("empty month in calendar")
    months = [key for key, _ in groups]
    txx = np.stack([ds.values[idx].max(axis=0) for _, idx in groups])
    txn = np.stack([ds.values[idx].min(axis=0) for _, idx in groups])
    return ClimdexReport(ds.variable, months, {"TXx": txx, "TXn": txn})


def _longest_run(mask):
    """Longest run of True along axis 0, per cell."""
    n = mask.shape[0]
    best = np.zeros(mask.shape[1:], dtype=np.int64)
    cur = np.zeros_like(best)
    for i in range(n):
        cur = np.where(mask[i], cur + 1, 0)
        best = np.maximum(best, cur)
    return best


def climdex_precipitation(ds, wet_threshold=WET_THRESHOLD_MM):
    """CDD, CWD, Rx1d, Rx5d, SDII per cell per month.

    Rx5d windows stay inside the month; months shorter than five days get a
    flag and NaN for Rx5d.  SDII is zero (flagged) where a month has no wet
    day.
    """
    if ds.variable != "precipitation":
        raise ValueError(f"precipitation indices need a precipitation grid, got {ds.variable}")
    if wet_threshold <= 0:
        raise ValueError("wet threshold must be positive")
    groups = month_groups(ds.calendar)
    months = [key for key, _ in groups]
    shape = ds.values.shape[1:]
    out = {name: np.zeros((len(groups),) + shape) for name in PRECIPITATION_INDICES}
    rx5d_disabled = []
    sdii_dry = np.zeros((len(groups),) + shape, dtype=bool)
    for mi, (key, idx) in enumerate(groups):
        v = ds.values[idx]
        wet = v >= wet_threshold
        out["CDD"][mi] = _longest_run(~wet)
        out["CWD"][mi] = _longest_run(wet)
        out["Rx1d"][mi] = v.max(axis=0)
        if len(idx) >= 5:
            sums = np.stack([v[i : i + 5].sum(axis=0) for i in range(len(idx) - 4)])
            out["Rx5d"][mi] = sums.max(axis=0)
        else:
            out["Rx5d"][mi] = np.nan
            rx5d_disabled.append(key)
        wet_count = wet.sum(axis=0)
        wet_sum = np.where(wet, v, 0.0).sum(axis=0)
        with np.errstate(invalid="ignore"):
            sdii = np.where(wet_count > 0, wet_sum / np.maximum(wet_count, 1), 0.0)
        out["SDII"][mi] = sdii
        sdii_dry[mi] = wet_count == 0
    flags = {"rx5d_disabled_months": rx5d_disabled, "sdii_no_wet_days": sdii_dry}
    return ClimdexReport(ds.variable, months, out, flags)


def climdex_compare(pred, truth, mode):
    """Per-index comparison between two Climdex reports.

    ``bias`` returns (mean, std) of pred - truth with the std taken over
    months (temperature convention); ``correlation`` pools months and cells
    into one Pearson coefficient per index (precipitation convention).
    """
    if pred.months != truth.months:
        raise ValueError("month sets differ between reports")
    if set(pred.indices) != set(truth.indices):
        raise ValueError("index sets differ between reports")
    out = {}
    for name in pred.indices:
        a = pred.indices[name]
        b = truth.indices[name]
        keep = np.isfinite(a) & np.isfinite(b)
        if mode == "bias":
            d = np.where(keep, a - b, np.nan)
            monthly = np.nanmean(d, axis=(1, 2))
            monthly = monthly[np.isfinite(monthly)]
            out[name] = {"bias": float(monthly.mean()), "std": float(monthly.std())}
        elif mode == "correlation":
            if len(pred.months) < 3:
                raise ValueError("correlation needs at least 3 months")
            av, bv = a[keep], b[keep]
            if av.std() == 0 or bv.std() == 0:
                out[name] = {"correlation": float("nan")}
            else:
                out[name] = {"correlation": float(np.corrcoef(av, bv)[0, 1])}
        else:
            raise ValueError(f"mode must be 'bias' or 'correlation', got {mode!r}")
    return out


def climatology_quantiles(ds, wet_threshold=WET_THRESHOLD_MM):
    """Mean over all days plus P50/P98/P02 over wet days (linear quantiles)."""
    if ds.variable != "precipitation":
        raise ValueError("climatology quantiles are defined for precipitation")
    wet = ds.values[ds.values >= wet_threshold]
    if wet.size == 0:
        raise ValueError("no wet days in the series")
    return {
        "mean": float(ds.values.mean()),
        "P50": float(np.quantile(wet, 0.50)),
        "P98": float(np.quantile(wet, 0.98)),
        "P02": float(np.quantile(wet, 0.02)),
    }


def aggregate_reports(reports):
    """Mean and std over per-fold pointwise reports."""
    out = {}
    for key in ("rmse", "bias", "pearson_r"):
        vals = np.array([getattr(r, key) for r in reports], dtype=np.float64)
        out[key] = {"mean": float(vals.mean()), "std": float(vals.std())}
    return out
