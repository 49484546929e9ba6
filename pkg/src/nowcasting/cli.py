"""Command-line entry point.

    nowcast compress --config configs/repo.json --seed 0 --out runs/repo
    nowcast backtest --config configs/equity.json --model runs/equity/model.json --mask keep_count_uniform:40
    nowcast detect   --config configs/repo.json --model runs/repo/model.json --threshold 0.035
    nowcast report   --out runs/equity

Every command validates its whole configuration before any computation.
Exit codes: 0 success, 2 configuration error, 3 runtime or numerical error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import synthetic
from ._io import atomic_write
from .data import (
    ColumnSchema,
    Dataset,
    MaskSpec,
    load_dataset,
    mask_observation,
    protocol_split,
    save_dataset,
    save_grid,
)
from .errors import ConfigError, DataError, NowcastError
from .models import (
    ConvAutoencoderSpec,
    FunctionalDecoder,
    FunctionalDecoderSpec,
    LinearProjectionSpec,
    load_model,
    save_model,
)
from .optim import TrainConfig, write_history
from .pipeline import backtest, compress_autoencoder, compress_functional, compress_pca
from .pipeline.backtest import BASELINES, mask_seed
from .pipeline.completion import CompletionConfig, complete, decode_at
from .pipeline.outliers import corruption_check, detect_outliers, reconstruction_errors
from .pipeline.reports import format_table, surface_csv, write_backtest

log = logging.getLogger("nowcasting")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
MODEL_KINDS = ("functional", "linear", "conv", "pca")


@dataclass
class RunConfig:
    dataset: Path | None
    grid: Path | None
    schema: dict
    model: dict
    train: TrainConfig
    pretrain: TrainConfig | None
    completion: CompletionConfig
    mask: MaskSpec | None
    threshold: float | None
    seed: int
    out: Path
    test_fraction: float = 0.2
    validation_share: float = 0.25
    baselines: list[str] = field(default_factory=list)
    name: str = "model"


def _path(base: Path, value) -> Path | None:
    if value is None:
        return None
    p = Path(value)
    return p if p.is_absolute() else (base / p)


def _read_header(path: Path) -> list[str]:
    with open(path, newline="") as fh:
        try:
            return [h.strip() for h in next(csv.reader(fh))]
        except StopIteration:
            raise ConfigError(f"dataset file is empty: {path}") from None


def build_config(args) -> RunConfig:
    """Merge the config file with flag overrides and validate everything."""
    doc: dict = {}
    base = Path.cwd()
    if getattr(args, "config", None):
        cpath = Path(args.config)
        if not cpath.exists():
            raise ConfigError(f"config file not found: {cpath}")
        try:
            doc = json.loads(cpath.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{cpath}: invalid JSON ({exc})") from None
        base = cpath.parent
    known = {"name", "dataset", "grid", "schema", "model", "train", "pretrain", "completion", "mask",
             "threshold", "seed", "out", "split", "baselines", "description"}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")

    seed = args.seed if getattr(args, "seed", None) is not None else doc.get("seed")
    if seed is None:
        raise ConfigError("a seed is required (config 'seed' or --seed)")
    out = Path(args.out) if getattr(args, "out", None) else _path(base, doc.get("out"))
    if out is None:
        raise ConfigError("an output directory is required (config 'out' or --out)")

    dataset = _path(base, doc.get("dataset"))
    if dataset is not None and not dataset.exists():
        raise ConfigError(f"dataset file not found: {dataset}")
    grid = _path(base, doc.get("grid"))
    if grid is not None and not grid.exists():
        raise ConfigError(f"grid file not found: {grid}")

    model = dict(doc.get("model", {}))
    kind = model.get("kind", "functional")
    if kind not in MODEL_KINDS:
        raise ConfigError(f"model kind must be one of {MODEL_KINDS}, got {kind!r}")
    model["kind"] = kind
    if getattr(args, "exogenous", None) is not None:
        model["exogenous"] = [c for c in args.exogenous.split(",") if c]
    model.setdefault("exogenous", [])
    if kind != "functional" and model["exogenous"]:
        raise ConfigError("exogenous inputs are only supported by the functional model")
    if "f" in model and (not isinstance(model["f"], int) or model["f"] < 1):
        raise ConfigError(f"model f must be a positive integer, got {model['f']!r}")
    hidden = model.get("hidden", [20, 20])
    if not (isinstance(hidden, list) and hidden and all(isinstance(h, int) and h > 0 for h in hidden)):
        raise ConfigError(f"model hidden must be a non-empty list of positive integers, got {hidden!r}")

    schema = dict(doc.get("schema", {}))
    if dataset is not None:
        header = _read_header(dataset)
        inferred = ColumnSchema.infer(header)
        coords = tuple(schema.get("coords", inferred.coords))
        exo = tuple(model["exogenous"])
        missing = [c for c in (schema.get("date", inferred.date), *coords, *exo,
                               schema.get("value", inferred.value)) if c not in header]
        if missing:
            raise ConfigError(f"{dataset}: columns {missing} not in header {header}")
        schema = {"date": schema.get("date", inferred.date), "coords": list(coords),
                  "exogenous": list(exo), "value": schema.get("value", inferred.value)}
        transforms = model.get("coord_transforms")
        if transforms is not None and len(transforms) != len(coords):
            raise ConfigError(f"coord_transforms needs {len(coords)} entries, got {len(transforms)}")

    try:
        train = TrainConfig.from_dict({**doc.get("train", {}), "seed": int(seed)})
        pretrain = (TrainConfig.from_dict({**doc["pretrain"], "seed": int(seed)})
                    if "pretrain" in doc else None)
        completion = CompletionConfig.from_dict(doc.get("completion", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None

    mask_text = getattr(args, "mask", None)
    mask_doc = doc.get("mask")
    try:
        if mask_text:
            mask = MaskSpec.parse(mask_text)
        elif isinstance(mask_doc, str):
            mask = MaskSpec.parse(mask_doc)
        elif isinstance(mask_doc, dict):
            param = mask_doc.get("parameter")
            if mask_doc.get("mode") == "keep_nodes" and isinstance(param, str):
                mask = MaskSpec.parse("keep_nodes:@" + str(_path(base, param)))
            else:
                mask = MaskSpec(mask_doc.get("mode"), param)
        else:
            mask = None
    except (DataError, ValueError, FileNotFoundError) as exc:
        raise ConfigError(f"bad mask: {exc}") from None

    threshold = getattr(args, "threshold", None)
    if threshold is None:
        threshold = doc.get("threshold")
    if threshold is not None:
        threshold = float(threshold)
        if not threshold >= 0 or math.isnan(threshold):
            raise ConfigError(f"threshold must be >= 0, got {threshold}")

    split = doc.get("split", {})
    tf, vs = float(split.get("test_fraction", 0.2)), float(split.get("validation_share", 0.25))
    if not (0 < tf < 1 and 0 < vs < 1):
        raise ConfigError(f"split fractions must lie in (0, 1): {split}")
    baselines = list(doc.get("baselines", []))
    bad = [b for b in baselines if b not in BASELINES]
    if bad:
        raise ConfigError(f"unknown baselines {bad}; choose from {sorted(BASELINES)}")
    return RunConfig(dataset, grid, schema, model, train, pretrain, completion, mask, threshold,
                     int(seed), out, tf, vs, baselines, str(doc.get("name", kind)))


def _load(cfg: RunConfig) -> Dataset:
    if cfg.dataset is None:
        raise ConfigError("config has no dataset")
    schema = ColumnSchema(cfg.schema["date"], tuple(cfg.schema["coords"]),
                          tuple(cfg.schema["exogenous"]), cfg.schema["value"])
    return load_dataset(cfg.dataset, schema, grid=cfg.grid)


def _split(cfg: RunConfig, ds: Dataset):
    calib, valid, test = protocol_split(ds, cfg.test_fraction, cfg.validation_share)
    return calib, valid, test


def _check_models(paths) -> list[Path]:
    out = []
    for p in paths or []:
        p = Path(p)
        if not p.exists():
            raise ConfigError(f"model file not found: {p}")
        out.append(p)
    return out


def _read_model(path: Path):
    try:
        doc = json.loads(path.read_text())
        model = load_model(path)
    except (json.JSONDecodeError, KeyError, ValueError) as exc:
        raise ConfigError(f"{path}: not a usable model file ({exc})") from None
    return model, doc.get("meta", {})


def _use_exogenous(cfg: RunConfig, names) -> None:
    names = list(names)
    if cfg.dataset is None or names == list(cfg.schema.get("exogenous", [])):
        return
    header = _read_header(cfg.dataset)
    missing = [c for c in names if c not in header]
    if missing:
        raise ConfigError(f"{cfg.dataset}: exogenous columns {missing} required by the models are missing")
    cfg.schema["exogenous"] = names


def _train_block(ds: Dataset, calib: Dataset, valid: Dataset) -> Dataset:
    return Dataset(calib.observations + valid.observations, ds.d, ds.fixed_grid, ds.grid_id,
                   ds.coord_names, ds.exog_names)


def _float_rows(header, rows) -> str:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(repr(float(x)) if isinstance(x, (float, np.floating)) else str(x) for x in row))
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# commands

def cmd_compress(args) -> int:
    cfg = build_config(args)
    if cfg.dataset is None:
        raise ConfigError("config has no dataset")
    ds = _load(cfg)
    calib, valid, test = _split(cfg, ds)
    train_all = _train_block(ds, calib, valid)
    m = cfg.model
    kind = m["kind"]
    f = int(m.get("f", 4))
    if kind == "functional":
        spec = FunctionalDecoderSpec(ds.d, f, len(m["exogenous"]), tuple(m.get("hidden", (20, 20))),
                                     tuple(m["coord_transforms"]) if m.get("coord_transforms") else None)
        res = compress_functional(calib, spec, cfg.train, validation=valid)
    elif kind == "pca":
        res = compress_pca(train_all, f)
    elif kind == "linear":
        res = compress_autoencoder(calib, LinearProjectionSpec(ds.m or 0, f), cfg.train, validation=valid)
    else:
        spec = ConvAutoencoderSpec(tuple(m.get("grid_shape", (10, 8))), f)
        res = compress_autoencoder(calib, spec, cfg.train, validation=valid, pretrain_cfg=cfg.pretrain)
    out = cfg.out
    meta = {"name": cfg.name, "exogenous": m["exogenous"], "training_time": res.training_time,
            "max_iter_hit": res.max_iter_hit, "seed": cfg.seed}
    save_model(res.model, out / "model.json", meta)
    write_history(res.history, out / "history.csv")
    for k, stage in enumerate(res.stage_histories, 1):
        write_history(stage, out / f"history_pretrain{k}.csv")

    # reconstruction report over training and test days
    rows, worst = [], (-1.0, None, None)
    errors = reconstruction_errors(train_all, res.model, cfg.completion)
    init = errors[-1][1] if errors else None
    errors += reconstruction_errors(test, res.model, cfg.completion, init)
    for obs, (err, code), split in zip(list(train_all) + list(test), errors,
                                       ["train"] * len(train_all) + ["test"] * len(test)):
        rows.append((obs.date, split, err))
        if err > worst[0]:
            worst = (err, obs, code)
    atomic_write(out / "reconstruction.csv", _float_rows(["date", "split", "rmse"], rows))
    err, obs, code = worst
    atomic_write(out / "worst_reconstruction.csv",
                 surface_csv(obs, ds.coord_names, decode_at(res.model, code, obs)))
    if res.max_iter_hit:
        log.warning("training stopped at max_iterations before early stopping triggered")
    print(f"{cfg.name}: mean training RMSE {res.mean_rmse:.6g}; worst day {obs.date} ({err:.6g}); "
          f"model written to {out / 'model.json'}")
    return EXIT_OK


def cmd_complete(args) -> int:
    cfg = build_config(args)
    paths = _check_models(args.model)
    if len(paths) != 1:
        raise ConfigError("complete needs exactly one --model")
    if cfg.mask is None:
        raise ConfigError("a mask is required (config 'mask' or --mask)")
    model, meta = _read_model(paths[0])
    _use_exogenous(cfg, meta.get("exogenous", []))
    ds = _load(cfg)
    calib, valid, test = _split(cfg, ds)
    history = _train_block(ds, calib, valid)
    if args.date:
        if args.date not in ds.dates:
            raise ConfigError(f"date {args.date} not in dataset")
        days = [ds.dates.index(args.date)]
    else:
        days = [ds.dates.index(d) for d in test.dates]
    rows, dumps = [], []
    for i in days:
        obs = ds[i]
        visible, _ = mask_observation(obs, cfg.mask, mask_seed(cfg.seed, i), history=history)
        res = complete(model, visible, None, cfg.completion, truth=obs)
        rows.append((obs.date, res.rmse, res.iterations, visible.m))
        keep = np.array([any(np.all(visible.coords == c, axis=1)) for c in obs.coords])
        dumps.append(surface_csv(obs, ds.coord_names, res.values, keep))
    atomic_write(cfg.out / "completion.csv", _float_rows(["date", "rmse", "iterations", "n_visible"], rows))
    body = dumps[0] + "".join(d.split("\n", 1)[1] for d in dumps[1:])
    atomic_write(cfg.out / "completed_surfaces.csv", body)
    print(f"completed {len(rows)} day(s); mean RMSE {np.mean([r[1] for r in rows]):.6g}")
    return EXIT_OK


def cmd_backtest(args) -> int:
    cfg = build_config(args)
    paths = _check_models(args.model)
    if cfg.mask is None:
        raise ConfigError("a mask is required (config 'mask' or --mask)")
    if not paths and not cfg.baselines:
        raise ConfigError("nothing to evaluate: give --model files or config 'baselines'")
    models, times, exo = {}, {}, set()
    for p in paths:
        model, meta = _read_model(p)
        name = meta.get("name", p.stem)
        if name in models:
            name = f"{name}_{len(models)}"
        models[name] = model
        times[name] = meta.get("training_time")
        exo.update(meta.get("exogenous", []))
    if exo:
        _use_exogenous(cfg, sorted(exo))
    for name, model in models.items():
        if isinstance(model, FunctionalDecoder) and model.spec.n_exogenous not in (0, len(exo)):
            raise ConfigError(f"model {name}: exogenous inputs do not match the other models")
    ds = _load(cfg)
    calib, valid, test = _split(cfg, ds)
    train_all = _train_block(ds, calib, valid)
    report = backtest(train_all, test, models, cfg.mask, cfg.completion, cfg.seed,
                      baselines=cfg.baselines, training_times=times, outlier_threshold=cfg.threshold)
    write_backtest(report, cfg.out, ds.coord_names)
    print(format_table(json.loads((cfg.out / "summary.json").read_text())))
    return EXIT_OK


def cmd_detect(args) -> int:
    cfg = build_config(args)
    paths = _check_models(args.model)
    if len(paths) != 1:
        raise ConfigError("detect needs exactly one --model")
    corrupt = args.corrupt is not None
    if cfg.threshold is None and not corrupt:
        raise ConfigError("an outlier threshold is required (--threshold or config 'threshold')")
    if corrupt:
        try:
            k, factor = args.corrupt.split(",")
            k, factor = int(k), float(factor)
        except ValueError:
            raise ConfigError(f"--corrupt expects K,FACTOR, got {args.corrupt!r}") from None
    model, meta = _read_model(paths[0])
    _use_exogenous(cfg, meta.get("exogenous", []))
    ds = _load(cfg)
    if corrupt:
        _, _, test = _split(cfg, ds)
        obs = ds[ds.dates.index(args.date)] if args.date else test[0]
        res = corruption_check(model, obs, k, factor, cfg.seed, cfg=cfg.completion)
        print(f"{obs.date}: corrupted vs original {res.corrupted_vs_original:.6g}; "
              f"corrected vs original {res.corrected_vs_original:.6g}; "
              f"corrupted vs corrected {res.corrupted_vs_corrected:.6g}; success={res.success}")
        atomic_write(cfg.out / f"corruption_{obs.date}.csv",
                     surface_csv(res.corrected, ds.coord_names, original_label="corrected"))
        return EXIT_OK
    report = detect_outliers(ds, model, cfg.threshold, cfg.completion)
    report.write_csv(cfg.out / "outliers.csv")
    for date, obs in report.corrected.items():
        atomic_write(cfg.out / "corrected" / f"{date}.csv",
                     surface_csv(obs, ds.coord_names, original_label="corrected"))
    print(f"{len(report.flagged)} of {len(report.rows)} days above threshold {cfg.threshold}")
    return EXIT_OK


def cmd_report(args) -> int:
    if not args.out:
        raise ConfigError("--out must name a backtest output directory")
    path = Path(args.out) / "summary.json"
    if not path.exists():
        raise ConfigError(f"no backtest summary at {path}")
    print(format_table(json.loads(path.read_text())))
    return EXIT_OK


def cmd_generate(args) -> int:
    if args.seed is None:
        raise ConfigError("a seed is required (--seed)")
    if not args.out:
        raise ConfigError("--out is required")
    out = Path(args.out)
    n = args.n_days
    if args.kind == "smiles":
        ds = synthetic.smiles(n or 500, args.seed, with_forward=True)
    elif args.kind == "swaption":
        ds = synthetic.swaptions(n or 600, args.seed)
    else:
        ds, bad = synthetic.repo_curves(n or 400, args.seed)
        atomic_write(out.with_suffix(".outliers.txt"), "\n".join(bad) + "\n")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out)
    if ds.fixed_grid is not None:
        save_grid(ds.fixed_grid, out.with_suffix(".grid.csv"))
    print(f"wrote {len(ds)} days to {out}")
    return EXIT_OK


# --------------------------------------------------------------------------

def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nowcast", description="Neural nowcasting of curves and surfaces")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, model=True):
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        if model:
            sp.add_argument("--model", action="append", help="trained model file (repeatable for backtest)")
        sp.add_argument("--mask", help="mask spec, e.g. keep_fraction:0.1 or keep_count_uniform:40")
        sp.add_argument("--threshold", type=float)
        sp.add_argument("--exogenous", help="comma-separated exogenous columns for the functional model")

    sp = sub.add_parser("compress", help="train a model on the training block")
    common(sp, model=False)
    sp.set_defaults(func=cmd_compress)
    sp = sub.add_parser("complete", help="complete masked test days with a trained model")
    common(sp)
    sp.add_argument("--date", help="complete one date only")
    sp.set_defaults(func=cmd_complete)
    sp = sub.add_parser("backtest", help="day-by-day completion backtest over the test block")
    common(sp)
    sp.set_defaults(func=cmd_backtest)
    sp = sub.add_parser("detect", help="flag days with large reconstruction error")
    common(sp)
    sp.add_argument("--corrupt", metavar="K,FACTOR", help="run the corruption check instead")
    sp.add_argument("--date", help="observation for the corruption check (default: first test day)")
    sp.set_defaults(func=cmd_detect)
    sp = sub.add_parser("report", help="print the summary table of a backtest directory")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_report)
    sp = sub.add_parser("generate", help="write a synthetic data set")
    sp.add_argument("kind", choices=("smiles", "swaption", "repo"))
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out")
    sp.add_argument("--n-days", type=int)
    sp.set_defaults(func=cmd_generate)
    return p


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NowcastError, FloatingPointError, np.linalg.LinAlgError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
