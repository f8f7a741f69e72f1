"""Bias-correction spatial-disaggregation baseline.

Classic structure: per coarse cell and calendar month, an empirical quantile
map from the low-resolution series to the block-aggregated high-resolution
series; application quantile-maps each day, turns it into an anomaly
(additive, temperature) or ratio (multiplicative, precipitation) against the
coarse monthly climatology, interpolates that bilinearly to the fine grid,
and recombines with the fine-scale monthly climatology.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np

from .griddata import GridDataset, block_downsample
from .params import ParameterStore, save_checkpoint, load_checkpoint

RATIO_CAP = 5.0  # keeps near-zero climatology cells from blowing up


@dataclass
class BcsdModel:
    factor: int
    mode: str  # "additive" | "multiplicative"
    n_q: int
    variable: str
    units: str
    src_q: dict = field(default_factory=dict)  # month -> (n_q_m, Hc, Wc)
    dst_q: dict = field(default_factory=dict)
    coarse_clim: dict = field(default_factory=dict)  # month -> (Hc, Wc)
    fine_clim: dict = field(default_factory=dict)  # month -> (H, W)

    def months(self):
        return sorted(self.src_q)


def _mode_for(variable):
    return "multiplicative" if variable == "precipitation" else "additive"


def bcsd_fit(low, high, n_q=100):
    """Fit monthly quantile maps plus climatologies from paired datasets."""
    if n_q < 2:
        raise ValueError("n_q must be >= 2")
    if not np.array_equal(low.calendar, high.calendar):
        raise ValueError("datasets must share one calendar")
    hc, wc = low.values.shape[1:]
    hf, wf = high.values.shape[1:]
    if hf % hc or wf % wc or hf // hc != wf // wc:
        raise ValueError(f"grids {hc}x{wc} and {hf}x{wf} are not related by one factor")
    factor = hf // hc
    coarse = block_downsample(high, factor, mode="mean")
    model = BcsdModel(factor, _mode_for(high.variable), n_q, high.variable, high.units)
    months = {}
    for i, (_, m, _) in enumerate(low.calendar):
        months.setdefault(int(m), []).append(i)
    for m, idx in sorted(months.items()):
        idx = np.asarray(idx)
        n_q_m = min(n_q, len(idx))
        if n_q_m < n_q:
            warnings.warn(
                f"month {m}: only {len(idx)} samples, reducing quantile count to {n_q_m}",
                stacklevel=2,
            )
        probs = np.linspace(0.0, 1.0, n_q_m) if n_q_m > 1 else np.array([0.5])
        model.src_q[m] = np.quantile(low.values[idx], probs, axis=0)
        model.dst_q[m] = np.quantile(coarse.values[idx], probs, axis=0)
        model.coarse_clim[m] = coarse.values[idx].mean(axis=0)
        model.fine_clim[m] = high.values[idx].mean(axis=0)
    return model


def _map_series(v, src, dst):
    """Quantile-map a value series through one cell's (src, dst) quantiles.

    Linear interpolation inside the observed range, linear extrapolation at
    the tails (slope of the outermost segment, or 1 when degenerate).
    """
    if len(src) == 1:
        return dst[0] + (v - src[0])
    out = np.interp(v, src, dst)
    lo_den = src[1] - src[0]
    lo_slope = (dst[1] - dst[0]) / lo_den if lo_den > 0 else 1.0
    hi_den = src[-1] - src[-2]
    hi_slope = (dst[-1] - dst[-2]) / hi_den if hi_den > 0 else 1.0
    below = v < src[0]
    above = v > src[-1]
    out = np.where(below, dst[0] + (v - src[0]) * lo_slope, out)
    out = np.where(above, dst[-1] + (v - src[-1]) * hi_slope, out)
    return out


def quantile_map_day(model, month, field):
    """Apply the month's per-cell quantile maps to one coarse field stack."""
    if month not in model.src_q:
        raise KeyError(f"month {month} was not seen during fitting")
    src = model.src_q[month]
    dst = model.dst_q[month]
    out = np.empty_like(field)
    for i in range(field.shape[-2]):
        for j in range(field.shape[-1]):
            out[..., i, j] = _map_series(field[..., i, j], src[:, i, j], dst[:, i, j])
    return out


def bilinear_upsample(field, factor):
    """Cell-center bilinear interpolation with linear edge extrapolation.

    Affine fields are reproduced exactly (no edge clamping), which is what
    lets the disaggregation recombine anomalies without boundary artifacts.
    """
    hc, wc = field.shape[-2:]

    def axis_coords(n_coarse, n_fine):
        x = (np.arange(n_fine) + 0.5) / factor - 0.5
        if n_coarse == 1:
            return np.zeros(n_fine, dtype=int), np.zeros(n_fine)
        i0 = np.clip(np.floor(x).astype(int), 0, n_coarse - 2)
        return i0, x - i0

    r0, rf = axis_coords(hc, hc * factor)
    c0, cf = axis_coords(wc, wc * factor)
    rows = field[..., r0, :] * (1 - rf)[:, None] + field[..., np.minimum(r0 + 1, hc - 1), :] * rf[:, None]
    out = rows[..., :, c0] * (1 - cf) + rows[..., :, np.minimum(c0 + 1, wc - 1)] * cf
    return out


def bcsd_apply(model, low):
    """Downscale a coarse dataset to the fine grid of the fitted model."""
    hc, wc = low.values.shape[1:]
    sample_fine = next(iter(model.fine_clim.values()))
    if sample_fine.shape != (hc * model.factor, wc * model.factor):
        raise ValueError("input grid does not match the fitted coarse geometry")
    t = low.values.shape[0]
    out = np.empty((t,) + sample_fine.shape)
    for i in range(t):
        m = int(low.calendar[i, 1])
        if m not in model.src_q:
            raise KeyError(f"month {m} was not seen during fitting")
        qm = quantile_map_day(model, m, low.values[i])
        if model.mode == "additive":
            anom = qm - model.coarse_clim[m]
            out[i] = model.fine_clim[m] + bilinear_upsample(anom, model.factor)
        else:
            clim = model.coarse_clim[m]
            with np.errstate(invalid="ignore", divide="ignore"):
                ratio = np.where(clim > 0, qm / np.where(clim > 0, clim, 1.0), 1.0)
            ratio = np.clip(ratio, 0.0, RATIO_CAP)
            out[i] = np.maximum(model.fine_clim[m] * bilinear_upsample(ratio, model.factor), 0.0)
    return GridDataset(out, model.variable, model.units, low.calendar.copy())


# -- persistence -----------------------------------------------------------------


def save_bcsd(path, model):
    store = ParameterStore()
    for m in model.months():
        store.add(f"q/{m:02d}/src", model.src_q[m])
        store.add(f"q/{m:02d}/dst", model.dst_q[m])
        store.add(f"clim/{m:02d}/coarse", model.coarse_clim[m])
        store.add(f"clim/{m:02d}/fine", model.fine_clim[m])
    header = {
        "kind": "bcsd",
        "factor": model.factor,
        "mode": model.mode,
        "n_q": model.n_q,
        "variable": model.variable,
        "units": model.units,
        "months": model.months(),
    }
    save_checkpoint(path, header, store)


def load_bcsd(path):
    header, store = load_checkpoint(path)
    if header.get("kind") != "bcsd":
        raise ValueError(f"checkpoint is a {header.get('kind')!r} model, not bcsd")
    model = BcsdModel(
        header["factor"], header["mode"], header["n_q"], header["variable"], header["units"]
    )
    for m in header["months"]:
        model.src_q[m] = store[f"q/{m:02d}/src"].data
        model.dst_q[m] = store[f"q/{m:02d}/dst"].data
        model.coarse_clim[m] = store[f"clim/{m:02d}/coarse"].data
        model.fine_clim[m] = store[f"clim/{m:02d}/fine"].data
    return model
