"""Command-line surface: train, downscale, sample, interpolate, evaluate,
bcsd, synth, convert-csv.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
divergence.  ``FLOWSCALE_OUT`` sets the default output root; ``--seed``
overrides the configured seed.  Training runs write a resolved-config
snapshot sufficient to reproduce the run.
"""

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import align, autodiff as ad, bcsd as bcsd_mod, griddata as gd, metrics as mx, sampling
from .align import AlignFlowModel, TrainConfig, TrainingDiverged
from .autodiff import NonFiniteError
from .griddata import FormatError
from .params import FormatError as CheckpointFormatError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


def _out_root():
    return Path(os.environ.get("FLOWSCALE_OUT", "."))


# -- config schema ----------------------------------------------------------------

_MODEL_KEYS = {"levels": int, "steps": int, "hidden": int, "critic_widths": list}
_TRAIN_KEYS = {
    "batch": int,
    "total_steps": int,
    "critic_ratio": int,
    "lambda_x": (int, float),
    "lambda_y": (int, float),
    "lambda_gp": (int, float),
    "lr_flow": (int, float),
    "lr_critic": (int, float),
    "seed": int,
    "checkpoint_every": int,
    "clip_grad": (int, float),
}
_TOP_KEYS = {
    "x_grid": str,
    "y_grid": str,
    "output_dir": str,
    "upsample_factor": int,
    "normalize_x": str,
    "normalize_y": str,
    "x_range": list,
    "y_range": list,
    "dequantize": (int, float),
    "model": dict,
    "train": dict,
}


def _check_keys(section, allowed, where):
    for key, value in section.items():
        if key not in allowed:
            raise ConfigError(f"unknown key {key!r} in {where}")
        if not isinstance(value, allowed[key]):
            raise ConfigError(f"{where}.{key} has wrong type {type(value).__name__}")


def load_run_config(path):
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as err:
        raise ConfigError(f"config is not valid JSON: {err}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a JSON object")
    _check_keys(cfg, _TOP_KEYS, "config")
    for name in ("x_grid", "y_grid"):
        if name not in cfg:
            raise ConfigError(f"config is missing required key {name!r}")
    _check_keys(cfg.get("model", {}), _MODEL_KEYS, "config.model")
    _check_keys(cfg.get("train", {}), _TRAIN_KEYS, "config.train")
    for name in ("x_range", "y_range"):
        rng = cfg.get(name)
        if rng is not None and (len(rng) != 2 or rng[0] >= rng[1]):
            raise ConfigError(f"{name} must be [start, stop) with start < stop")
    for name in ("normalize_x", "normalize_y"):
        if name in cfg and cfg[name] not in gd.SCHEMES:
            raise ConfigError(f"{name} must be one of {gd.SCHEMES}")
    return cfg


def _read_grid(path):
    try:
        return gd.read_grid(path)
    except FileNotFoundError:
        raise DataError(f"grid file not found: {path}") from None
    except FormatError as err:
        raise DataError(str(err)) from None


def _default_scheme(variable):
    return (
        "precip-log1p-standardize"
        if variable == "precipitation"
        else "temperature-standardize"
    )


# -- train -------------------------------------------------------------------------


def _prepare_training_arrays(cfg, seed_override=None):
    low = _read_grid(cfg["x_grid"])
    high = _read_grid(cfg["y_grid"])

    def clip(ds, key):
        rng = cfg.get(key)
        if rng is None:
            return ds
        lo, hi = int(rng[0]), int(rng[1])
        if hi > ds.values.shape[0]:
            raise DataError(f"{key} {rng} exceeds series length {ds.values.shape[0]}")
        from dataclasses import replace

        return replace(ds, values=ds.values[lo:hi], calendar=ds.calendar[lo:hi])

    low = clip(low, "x_range")
    high = clip(high, "y_range")

    th, hh, wh = high.values.shape
    tl, hl, wl = low.values.shape
    factor = cfg.get("upsample_factor")
    if factor is None:
        if hh % hl or wh % wl or hh // hl != wh // wl:
            raise DataError(f"cannot derive an upsample factor from {hl}x{wl} -> {hh}x{wh}")
        factor = hh // hl
    elif (hl * factor, wl * factor) != (hh, wh):
        raise DataError(f"upsample_factor {factor} does not map {hl}x{wl} onto {hh}x{wh}")

    scheme_x = cfg.get("normalize_x", _default_scheme(low.variable))
    scheme_y = cfg.get("normalize_y", _default_scheme(high.variable))
    norm_low, params_x = gd.normalize(low, scheme_x)
    norm_high, params_y = gd.normalize(high, scheme_y)
    x_up = gd.nearest_upsample(norm_low, factor)

    seed = seed_override if seed_override is not None else cfg.get("train", {}).get("seed", 0)
    amount = cfg.get("dequantize")
    xv, yv = x_up.values, norm_high.values
    if amount is None:
        amount = 1e-2
    if amount:
        # both training domains: the upsampled X grid carries block-replicated
        # values and precipitation carries a point mass at zero; either one
        # degenerates the flow density without noise
        xv = gd.dequantize(xv, np.random.default_rng([seed, 7001]), amount)
        yv = gd.dequantize(yv, np.random.default_rng([seed, 7002]), amount)

    meta = {
        "factor": factor,
        "x_variable": low.variable,
        "y_variable": high.variable,
        "x_units": low.units,
        "y_units": high.units,
        "normalization": {"x": params_x.to_dict(), "y": params_y.to_dict()},
        "grid": [hh, wh],
    }
    return xv[:, None], yv[:, None], meta


def cmd_train(args):
    cfg = load_run_config(args.config)
    xv, yv, meta = _prepare_training_arrays(cfg, args.seed)
    tcfg_dict = dict(cfg.get("train", {}))
    if args.seed is not None:
        tcfg_dict["seed"] = args.seed
    try:
        tcfg = TrainConfig(**tcfg_dict)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"bad train section: {err}") from None
    mcfg = cfg.get("model", {})

    out_dir = Path(cfg.get("output_dir") or (_out_root() / "train-run"))
    out_dir.mkdir(parents=True, exist_ok=True)

    start_step = 0
    if args.resume:
        model, extra = AlignFlowModel.load(args.resume)
        start_step = int((extra or {}).get("next_step", 0))
        meta = {**meta, **{k: v for k, v in (extra or {}).items() if k == "normalization"}}
    else:
        model = AlignFlowModel(
            (1,) + tuple(meta["grid"]),
            levels=mcfg.get("levels", 2),
            steps=mcfg.get("steps", 4),
            hidden=mcfg.get("hidden", 64),
            critic_widths=tuple(mcfg.get("critic_widths", (64, 128, 256))),
            lambda_x=tcfg.lambda_x,
            lambda_y=tcfg.lambda_y,
            seed=tcfg.seed,
        )

    resolved = {"config": cfg, "meta": meta, "train": tcfg.__dict__, "start_step": start_step}
    with open(out_dir / "resolved-config.json", "w") as fh:
        json.dump(resolved, fh, indent=2, sort_keys=True)

    history = align.train(model, xv, yv, tcfg, out_dir=str(out_dir),
                          start_step=start_step, extra=meta)
    print(f"trained {len(history)} steps -> {out_dir / 'model.ckpt'}")
    return EXIT_OK


# -- downscale / sample / interpolate ------------------------------------------------


def _load_model(path):
    try:
        return AlignFlowModel.load(path)
    except FileNotFoundError:
        raise DataError(f"model file not found: {path}") from None
    except (CheckpointFormatError, ValueError) as err:
        raise DataError(f"cannot load model: {err}") from None


def _provenance(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)


def cmd_downscale(args):
    model, extra = _load_model(args.model)
    if not extra or "normalization" not in extra:
        raise DataError("model checkpoint lacks normalization metadata; re-train via the CLI")
    low = _read_grid(args.input)
    factor = extra["factor"]
    h, w = model.in_shape[1:]
    if (low.values.shape[1] * factor, low.values.shape[2] * factor) != (h, w):
        raise DataError(
            f"input grid {low.values.shape[1]}x{low.values.shape[2]} does not upsample "
            f"to the model grid {h}x{w} with factor {factor}"
        )
    params_x = gd.NormalizationParams.from_dict(extra["normalization"]["x"])
    params_y = gd.NormalizationParams.from_dict(extra["normalization"]["y"])
    norm_low, _ = gd.normalize(low, params_x.scheme, params_x)
    x = gd.nearest_upsample(norm_low, factor).values[:, None]

    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    spec = sampling.SamplingSpec(
        count=args.samples, temperature=args.temperature, seed=args.seed or 0
    )
    paths = []
    with ad.no_grad():
        z, _ = model.fx.forward(ad.Tensor(x))
        for k in range(spec.count):
            if spec.temperature == 0.0:
                pred = model.fy.inverse(z).data[:, 0]
                path = out if spec.count == 1 else out.with_name(f"{out.stem}-{k:03d}{out.suffix}")
            else:
                rng = np.random.default_rng([spec.seed, 0xC04D, k])
                eps = spec.temperature * rng.standard_normal(z.shape)
                pred = model.fy.inverse(ad.add(z, ad.Tensor(eps))).data[:, 0]
                path = out.with_name(f"{out.stem}-{k:03d}{out.suffix}")
            phys = gd.denormalize_array(pred, params_y)
            if extra["y_variable"] == "precipitation":
                phys = np.maximum(phys, 0.0)
            ds = gd.GridDataset(phys, extra["y_variable"], extra["y_units"], low.calendar)
            gd.write_grid(path, ds)
            paths.append(str(path))
    _provenance(
        out.with_suffix(".provenance.json"),
        {"model": str(args.model), "input": str(args.input), "temperature": spec.temperature,
         "samples": spec.count, "seed": spec.seed, "outputs": paths},
    )
    print("\n".join(paths))
    return EXIT_OK


def cmd_sample(args):
    model, extra = _load_model(args.model)
    out_dir = Path(args.out_dir or (_out_root() / "samples"))
    out_dir.mkdir(parents=True, exist_ok=True)
    spec = sampling.SamplingSpec(count=args.count, temperature=0.0, seed=args.seed or 0)
    pairs = sampling.sample_unconditional(model, spec)
    params = extra.get("normalization") if extra else None
    cal = gd.daily_calendar(1)
    for i, (x, y) in enumerate(pairs):
        for tag, arr, key, var_key, unit_key in (
            ("x", x, "x", "x_variable", "x_units"),
            ("y", y, "y", "y_variable", "y_units"),
        ):
            vals = arr[None, 0]
            if params:
                vals = gd.denormalize_array(vals, gd.NormalizationParams.from_dict(params[key]))
            variable = extra.get(var_key, "max-temperature") if extra else "max-temperature"
            if variable == "precipitation":
                vals = np.maximum(vals, 0.0)
            units = extra.get(unit_key, "unknown") if extra else "unknown"
            gd.write_grid(out_dir / f"{tag}-{i:03d}.fgrd", gd.GridDataset(vals, variable, units, cal))
    _provenance(out_dir / "provenance.json", {"model": str(args.model), "count": spec.count, "seed": spec.seed})
    print(f"wrote {len(pairs)} joint sample pairs under {out_dir}")
    return EXIT_OK


def cmd_interpolate(args):
    model, extra = _load_model(args.model)
    grid = _read_grid(args.grid)
    params = extra.get("normalization") if extra else None
    t = grid.values.shape[0]
    if not (0 <= args.i1 < t and 0 <= args.i2 < t):
        raise DataError(f"endpoint indices must lie in [0, {t})")
    vals = grid.values
    if params:
        vals, _ = gd.normalize_array(
            vals, params["y"]["scheme"], gd.NormalizationParams.from_dict(params["y"])
        )
    y1 = vals[args.i1][None]
    y2 = vals[args.i2][None]
    fracs = [i / (args.steps - 1) for i in range(args.steps)] if args.steps > 1 else [0.0]
    seq = sampling.interpolate(model, y1, y2, sampling.InterpolationSpec(fracs))
    out_dir = Path(args.out_dir or (_out_root() / "interpolation"))
    out_dir.mkdir(parents=True, exist_ok=True)
    cal = gd.daily_calendar(1)
    for k, (x, y) in enumerate(seq):
        for tag, arr, key in (("x", x, "x"), ("y", y, "y")):
            vals_k = arr[None, 0]
            if params:
                vals_k = gd.denormalize_array(vals_k, gd.NormalizationParams.from_dict(params[key]))
            variable = extra.get(f"{key}_variable", grid.variable) if extra else grid.variable
            if variable == "precipitation":
                vals_k = np.maximum(vals_k, 0.0)
            units = extra.get(f"{key}_units", grid.units) if extra else grid.units
            gd.write_grid(out_dir / f"{tag}-{k:03d}.fgrd", gd.GridDataset(vals_k, variable, units, cal))
    _provenance(
        out_dir / "provenance.json",
        {"model": str(args.model), "grid": str(args.grid), "i1": args.i1, "i2": args.i2,
         "fractions": fracs},
    )
    print(f"wrote {len(seq)} interpolation steps under {out_dir}")
    return EXIT_OK


# -- evaluate -----------------------------------------------------------------------


def cmd_evaluate(args):
    pred = _read_grid(args.pred)
    truth = _read_grid(args.truth)
    if pred.values.shape != truth.values.shape:
        raise DataError(f"shape mismatch: {pred.values.shape} vs {truth.values.shape}")
    if not np.array_equal(pred.calendar, truth.calendar):
        raise DataError("calendar mismatch between prediction and truth")
    out_dir = Path(args.out_dir or (_out_root() / "evaluation"))
    out_dir.mkdir(parents=True, exist_ok=True)

    is_precip = truth.variable == "precipitation"
    folds = []
    if args.cv:
        try:
            holdout, val_len, window, k = (int(v) for v in args.cv.split(","))
            folds = gd.cv_folds(pred.values.shape[0], holdout, val_len, window, k)
        except ValueError as err:
            raise ConfigError(f"bad --cv geometry: {err}") from None

    def window_report(sl):
        from dataclasses import replace

        p = replace(pred, values=pred.values[sl], calendar=pred.calendar[sl])
        t = replace(truth, values=truth.values[sl], calendar=truth.calendar[sl])
        rep = mx.pointwise_stats(p, t).to_dict()
        if is_precip:
            rep.update(mx.sparse_stats(p, t))
        return rep

    if folds:
        fold_rows = [window_report(slice(*f.val)) for f in folds]
    else:
        fold_rows = [window_report(slice(None))]

    if is_precip:
        rep_p = mx.climdex_precipitation(pred)
        rep_t = mx.climdex_precipitation(truth)
        try:
            climdex = mx.climdex_compare(rep_p, rep_t, "correlation")
        except ValueError as err:
            raise DataError(str(err)) from None
        monthly = {
            name: {
                "pred": np.nanmean(rep_p.indices[name], axis=(1, 2)).tolist(),
                "truth": np.nanmean(rep_t.indices[name], axis=(1, 2)).tolist(),
            }
            for name in mx.PRECIPITATION_INDICES
        }
        months = rep_p.months
    else:
        rep_p = mx.climdex_temperature(pred)
        rep_t = mx.climdex_temperature(truth)
        climdex = mx.climdex_compare(rep_p, rep_t, "bias")
        monthly = {
            name: {
                "pred": rep_p.indices[name].mean(axis=(1, 2)).tolist(),
                "truth": rep_t.indices[name].mean(axis=(1, 2)).tolist(),
            }
            for name in mx.TEMPERATURE_INDICES
        }
        months = rep_p.months

    summary = {
        "variable": truth.variable,
        "folds": fold_rows,
        "pointwise": {
            key: {
                "mean": float(np.mean([row[key] for row in fold_rows])),
                "std": float(np.std([row[key] for row in fold_rows])),
            }
            for key in fold_rows[0]
        },
        "climdex": climdex,
    }
    with open(out_dir / "report.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)

    import csv as _csv

    with open(out_dir / "report.csv", "w", newline="") as fh:
        writer = _csv.writer(fh)
        cols = sorted(fold_rows[0])
        writer.writerow(["fold", *cols])
        for i, row in enumerate(fold_rows):
            writer.writerow([i, *(repr(row[c]) for c in cols)])

    with open(out_dir / "climdex-monthly.csv", "w", newline="") as fh:
        writer = _csv.writer(fh)
        names = sorted(monthly)
        writer.writerow(["year", "month", *(f"{n}_{w}" for n in names for w in ("pred", "truth"))])
        for i, (y, m) in enumerate(months):
            row = [y, m]
            for n in names:
                row += [repr(monthly[n]["pred"][i]), repr(monthly[n]["truth"][i])]
            writer.writerow(row)

    print(json.dumps(summary["pointwise"], indent=2, sort_keys=True))
    return EXIT_OK


# -- bcsd / synth / convert ------------------------------------------------------------


def cmd_bcsd(args):
    if args.bcsd_cmd == "fit":
        low = _read_grid(args.low)
        high = _read_grid(args.high)
        try:
            model = bcsd_mod.bcsd_fit(low, high, n_q=args.n_q)
        except ValueError as err:
            raise DataError(str(err)) from None
        Path(args.output).parent.mkdir(parents=True, exist_ok=True)
        bcsd_mod.save_bcsd(args.output, model)
        print(f"fitted bcsd model -> {args.output}")
        return EXIT_OK
    model = bcsd_mod.load_bcsd(args.model)
    low = _read_grid(args.input)
    try:
        out = bcsd_mod.bcsd_apply(model, low)
    except (KeyError, ValueError) as err:
        raise DataError(str(err)) from None
    Path(args.output).parent.mkdir(parents=True, exist_ok=True)
    gd.write_grid(args.output, out)
    print(f"downscaled -> {args.output}")
    return EXIT_OK


def cmd_synth(args):
    cfg = gd.SynthConfig(
        height=args.height,
        width=args.width,
        factor=args.factor,
        samples=args.samples,
        variable=args.variable,
        seed=args.seed or 0,
    )
    low, high, _ = gd.synth_dataset(cfg)
    Path(args.out_low).parent.mkdir(parents=True, exist_ok=True)
    gd.write_grid(args.out_low, low)
    gd.write_grid(args.out_high, high)
    print(f"wrote {args.out_low} ({low.resolution}) and {args.out_high} ({high.resolution})")
    return EXIT_OK


def cmd_convert_csv(args):
    try:
        ds = gd.from_csv(args.input, args.variable, args.units, args.height, args.width)
    except FileNotFoundError:
        raise DataError(f"csv file not found: {args.input}") from None
    except (FormatError, ValueError) as err:
        raise DataError(str(err)) from None
    gd.write_grid(args.output, ds)
    print(f"converted -> {args.output}")
    return EXIT_OK


# -- parser --------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="flowscale", description=__doc__)
    sub = p.add_subparsers(dest="cmd", required=True)

    t = sub.add_parser("train", help="train an alignment model from a JSON config")
    t.add_argument("config")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--resume", default=None)
    t.set_defaults(fn=cmd_train)

    d = sub.add_parser("downscale", help="cross-map a low-resolution grid")
    d.add_argument("--model", required=True)
    d.add_argument("--input", required=True)
    d.add_argument("--output", required=True)
    d.add_argument("--temperature", type=float, default=0.0)
    d.add_argument("--samples", type=int, default=1)
    d.add_argument("--seed", type=int, default=None)
    d.set_defaults(fn=cmd_downscale)

    s = sub.add_parser("sample", help="draw joint unconditional sample pairs")
    s.add_argument("--model", required=True)
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--out-dir", default=None)
    s.set_defaults(fn=cmd_sample)

    i = sub.add_parser("interpolate", help="latent-space interpolation between two fields")
    i.add_argument("--model", required=True)
    i.add_argument("--grid", required=True, help="high-resolution grid holding the endpoints")
    i.add_argument("--i1", type=int, required=True)
    i.add_argument("--i2", type=int, required=True)
    i.add_argument("--steps", type=int, default=5)
    i.add_argument("--out-dir", default=None)
    i.set_defaults(fn=cmd_interpolate)

    e = sub.add_parser("evaluate", help="pointwise + Climdex evaluation")
    e.add_argument("--pred", required=True)
    e.add_argument("--truth", required=True)
    e.add_argument("--cv", default=None, help="holdout,val_len,train_window,k")
    e.add_argument("--out-dir", default=None)
    e.set_defaults(fn=cmd_evaluate)

    b = sub.add_parser("bcsd", help="quantile-mapping baseline")
    bsub = b.add_subparsers(dest="bcsd_cmd", required=True)
    bf = bsub.add_parser("fit")
    bf.add_argument("--low", required=True)
    bf.add_argument("--high", required=True)
    bf.add_argument("--output", required=True)
    bf.add_argument("--n-q", type=int, default=100)
    ba = bsub.add_parser("apply")
    ba.add_argument("--model", required=True)
    ba.add_argument("--input", required=True)
    ba.add_argument("--output", required=True)
    b.set_defaults(fn=cmd_bcsd)

    y = sub.add_parser("synth", help="generate a synthetic low/high dataset pair")
    y.add_argument("--out-low", required=True)
    y.add_argument("--out-high", required=True)
    y.add_argument("--height", type=int, default=16)
    y.add_argument("--width", type=int, default=16)
    y.add_argument("--factor", type=int, default=4)
    y.add_argument("--samples", type=int, default=256)
    y.add_argument("--variable", default="max-temperature", choices=sorted(gd.VARIABLE_IDS))
    y.add_argument("--seed", type=int, default=None)
    y.set_defaults(fn=cmd_synth)

    c = sub.add_parser("convert-csv", help="convert (time,row,col,value) CSV to a grid file")
    c.add_argument("--input", required=True)
    c.add_argument("--output", required=True)
    c.add_argument("--variable", required=True, choices=sorted(gd.VARIABLE_IDS))
    c.add_argument("--units", required=True)
    c.add_argument("--height", type=int, required=True)
    c.add_argument("--width", type=int, required=True)
    c.set_defaults(fn=cmd_convert_csv)

    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDiverged, NonFiniteError) as err:
        print(f"numeric error: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
