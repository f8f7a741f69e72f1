"""Gridded dataset I/O, normalization, resolution projection, CV splits, and
synthetic data generation.

File format "FGRD" (all little-endian):

    magic "FGRD" | version u16 = 1 | variable-id u8
    unit string: length u16 + UTF-8
    extents: time u32, height u32, width u32
    calendar: one u32 per step, year*10000 + month*100 + day
    payload: float32, row-major, time-major

Values live in memory as float64 (normalization round-trips need the
precision) and are quantized to float32 on write; reading a written file
back and re-writing it reproduces the bytes exactly.
"""

import struct
from dataclasses import dataclass, replace

import numpy as np

MAGIC = b"FGRD"
VERSION = 1

VARIABLE_IDS = {"max-temperature": 1, "precipitation": 2}
VARIABLE_NAMES = {v: k for k, v in VARIABLE_IDS.items()}


class FormatError(ValueError):
    """Corrupt or foreign grid file."""


@dataclass
class GridDataset:
    """Time-indexed stack of 2-D single-variable fields.

    ``calendar`` is an integer (T, 3) array of (year, month, day) rows,
    strictly increasing.  ``bounds`` (lat/lon box) and ``resolution`` are
    in-memory metadata only; the file format does not persist them.
    """

    values: np.ndarray  # (T, H, W) float64
    variable: str
    units: str
    calendar: np.ndarray  # (T, 3) ints
    bounds: tuple | None = None
    resolution: str | None = None
    normalized: bool = False  # normalized space is signed even for precipitation

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.calendar = np.asarray(self.calendar, dtype=np.int64)
        if self.values.ndim != 3:
            raise ValueError(f"values must be (time, height, width), got {self.values.shape}")
        if self.variable not in VARIABLE_IDS:
            raise ValueError(f"unknown variable {self.variable!r}")
        if self.calendar.shape != (self.values.shape[0], 3):
            raise ValueError("calendar length must equal the time extent")
        packed = _pack_calendar(self.calendar)
        if np.any(np.diff(packed) <= 0):
            raise ValueError("calendar dates must be strictly increasing")
        if self.variable == "precipitation" and not self.normalized and np.any(self.values < 0):
            raise ValueError("precipitation values must be nonnegative")
        if self.resolution is None:
            self.resolution = f"{self.values.shape[1]}x{self.values.shape[2]}"

    @property
    def shape(self):
        return self.values.shape


def _pack_calendar(cal):
    return cal[:, 0] * 10000 + cal[:, 1] * 100 + cal[:, 2]


def _unpack_calendar(packed):
    packed = packed.astype(np.int64)
    return np.stack([packed // 10000, (packed // 100) % 100, packed % 100], axis=1)


def daily_calendar(n, start=(2000, 1, 1)):
    """n consecutive daily (year, month, day) rows from ``start``."""
    days_in = [31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31]
    y, m, d = start
    out = np.empty((n, 3), dtype=np.int64)
    for i in range(n):
        out[i] = (y, m, d)
        leap = m == 2 and (y % 4 == 0 and (y % 100 != 0 or y % 400 == 0))
        if d < days_in[m - 1] + (1 if leap else 0):
            d += 1
        elif m < 12:
            m, d = m + 1, 1
        else:
            y, m, d = y + 1, 1, 1
    return out


def write_grid(path, ds):
    if ds.normalized:
        raise FormatError("grid files carry physical units; denormalize first")
    if not np.isfinite(ds.values).all():
        raise FormatError("refusing to write non-finite values")
    t, h, w = ds.values.shape
    unit_raw = ds.units.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HB", VERSION, VARIABLE_IDS[ds.variable]))
        fh.write(struct.pack("<H", len(unit_raw)))
        fh.write(unit_raw)
        fh.write(struct.pack("<III", t, h, w))
        fh.write(_pack_calendar(ds.calendar).astype("<u4").tobytes())
        fh.write(ds.values.astype("<f4").tobytes())


def read_grid(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise FormatError(f"truncated grid file {path}")
        out = blob[pos : pos + n]
        pos += n
        return out

    if take(4) != MAGIC:
        raise FormatError(f"bad magic in {path}: not a grid file")
    version, var_id = struct.unpack("<HB", take(3))
    if version != VERSION:
        raise FormatError(f"unsupported grid version {version}")
    if var_id not in VARIABLE_NAMES:
        raise FormatError(f"unknown variable id {var_id}")
    (ulen,) = struct.unpack("<H", take(2))
    units = take(ulen).decode("utf-8")
    t, h, w = struct.unpack("<III", take(12))
    calendar = _unpack_calendar(np.frombuffer(take(4 * t), dtype="<u4"))
    payload = np.frombuffer(take(4 * t * h * w), dtype="<f4").astype(np.float64)
    if pos != len(blob):
        raise FormatError(f"trailing bytes in {path}")
    if not np.isfinite(payload).all():
        raise FormatError(f"non-finite payload in {path}")
    return GridDataset(payload.reshape(t, h, w), VARIABLE_NAMES[var_id], units, calendar)


# -- resolution projection ------------------------------------------------------


def nearest_upsample(ds, factor):
    """Replicate every cell into a factor x factor block."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    if factor == 1:
        return replace(ds, values=ds.values.copy(), resolution=ds.resolution)
    up = np.repeat(np.repeat(ds.values, factor, axis=1), factor, axis=2)
    return replace(ds, values=up, resolution=f"{up.shape[1]}x{up.shape[2]}")


def block_downsample(ds, factor, mode="sample"):
    """Inverse projection: top-left sampling (exact section) or block mean."""
    t, h, w = ds.values.shape
    if h % factor or w % factor:
        raise ValueError(f"extents {h}x{w} not divisible by factor {factor}")
    if mode == "sample":
        down = ds.values[:, ::factor, ::factor].copy()
    elif mode == "mean":
        down = ds.values.reshape(t, h // factor, factor, w // factor, factor).mean(axis=(2, 4))
    else:
        raise ValueError(f"unknown downsample mode {mode!r}")
    return replace(ds, values=down, resolution=f"{down.shape[1]}x{down.shape[2]}")


# -- normalization ----------------------------------------------------------------

SCHEMES = ("temperature-standardize", "precip-log1p-standardize")


@dataclass
class NormalizationParams:
    scheme: str
    mean: float
    std: float

    def to_dict(self):
        return {"scheme": self.scheme, "mean": self.mean, "std": self.std}

    @classmethod
    def from_dict(cls, d):
        return cls(d["scheme"], d["mean"], d["std"])


def normalize_array(values, scheme, params=None):
    """Normalize raw values; fits params when not given."""
    if scheme not in SCHEMES:
        raise ValueError(f"unknown normalization scheme {scheme!r}")
    v = np.asarray(values, dtype=np.float64)
    if scheme == "precip-log1p-standardize":
        if np.any(v < 0):
            raise ValueError("precipitation normalization requires nonnegative values")
        v = np.log1p(v)
    if params is None:
        std = float(v.std())
        if std == 0:
            raise ValueError("cannot standardize a constant field")
        params = NormalizationParams(scheme, float(v.mean()), std)
    return (v - params.mean) / params.std, params


def denormalize_array(values, params):
    v = np.asarray(values, dtype=np.float64) * params.std + params.mean
    if params.scheme == "precip-log1p-standardize":
        v = np.expm1(v)
        v = np.maximum(v, 0.0)
    return v


def normalize(ds, scheme, params=None):
    v, params = normalize_array(ds.values, scheme, params)
    return replace(ds, values=v, normalized=True), params


def denormalize(ds, params):
    return replace(ds, values=denormalize_array(ds.values, params), normalized=False)


def dequantize(values, rng, amount=1e-2):
    """Additive uniform noise to break point masses (training inputs only)."""
    return values + rng.uniform(0.0, amount, size=values.shape)


# -- cross validation ----------------------------------------------------------------


@dataclass(frozen=True)
class CVFold:
    train: tuple  # [start, stop)
    val: tuple


def cv_folds(n_time, holdout, val_len, train_window, k):
    """Sliding-window folds over the trailing holdout block.

    Fold i validates on [n - holdout + i*val_len, +val_len) and trains on the
    ``train_window`` indices immediately before the validation start.
    """
    if holdout != k * val_len:
        raise ValueError(f"holdout {holdout} must equal k*val_len = {k * val_len}")
    if train_window + holdout > n_time:
        raise ValueError(
            f"train_window {train_window} + holdout {holdout} exceeds series length {n_time}"
        )
    folds = []
    for i in range(k):
        val_start = n_time - holdout + i * val_len
        folds.append(
            CVFold(train=(val_start - train_window, val_start), val=(val_start, val_start + val_len))
        )
    return folds


# -- synthetic data --------------------------------------------------------------------


@dataclass
class SynthConfig:
    height: int = 16
    width: int = 16
    factor: int = 4
    samples: int = 256
    bumps: int = 3
    amp_range: tuple = (0.5, 1.5)
    sigma_range: tuple = (1.5, 3.5)
    variable: str = "max-temperature"
    seed: int = 0

    def __post_init__(self):
        if self.height % self.factor or self.width % self.factor:
            raise ValueError("high-res extents must be divisible by the scale factor")


def synth_dataset(config):
    """Gaussian-bump fields plus their block-mean coarsening.

    High-res fields are sums of random bumps; precipitation-like fields are
    additionally gated by a broad wetness bump and stay nonnegative.  The
    low-res dataset is the block mean; the returned pairing index aligns the
    two (training may shuffle it away to stay unpaired).
    """
    rng = np.random.default_rng([config.seed, 0x5EED])
    h, w, t = config.height, config.width, config.samples
    rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
    fields = np.zeros((t, h, w))
    for i in range(t):
        for _ in range(config.bumps):
            amp = rng.uniform(*config.amp_range)
            sig = rng.uniform(*config.sigma_range)
            r0, c0 = rng.uniform(0, h), rng.uniform(0, w)
            fields[i] += amp * np.exp(-((rr - r0) ** 2 + (cc - c0) ** 2) / (2 * sig * sig))
        if config.variable == "precipitation":
            gr, gc = rng.uniform(0, h), rng.uniform(0, w)
            gate = np.exp(-((rr - gr) ** 2 + (cc - gc) ** 2) / (2 * (0.5 * h) ** 2))
            fields[i] *= (gate > 0.7).astype(np.float64)
    cal = daily_calendar(t)
    high = GridDataset(fields, config.variable, "synthetic", cal)
    low = block_downsample(high, config.factor, mode="mean")
    return low, high, np.arange(t)


# -- CSV ingestion ------------------------------------------------------------------------


def from_csv(path, variable, units, height, width, start=(2000, 1, 1)):
    """Read (time,row,col,value) rows into a dataset; missing cells are zero."""
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if rows.shape[1] != 4:
        raise FormatError("expected columns time,row,col,value")
    n_time = int(rows[:, 0].max()) + 1
    values = np.zeros((n_time, height, width))
    ti = rows[:, 0].astype(int)
    ri = rows[:, 1].astype(int)
    ci = rows[:, 2].astype(int)
    if ri.max() >= height or ci.max() >= width:
        raise FormatError("row/col index outside the declared grid")
    values[ti, ri, ci] = rows[:, 3]
    return GridDataset(values, variable, units, daily_calendar(n_time, start))
