"""Implementations behind the command-line interface.

This module is imported only after the CLI has pinned thread environment
variables, so the numpy/matplotlib imports here pick them up. Every
command validates its JSON config against an explicit schema (unknown keys
are errors), writes its artifacts under --out, and always drops an
``effective_config.json`` with all defaults resolved so the exact run can
be reproduced from the output directory alone.
"""

from __future__ import annotations

import json
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import attnmap as _attnmap
from . import cv as _cv
from . import data as _data
from . import evaluate as _eval
from . import figures as _figures
from . import model as _model
from . import train as _train
from .errors import (
    ConfigError,
    DegenerateWeightError,
    DomainError,
    FormatError,
    UsageError,
)
from .numerics import RngStream

_TRAIN_FIELD_TYPES = {
    f.name: (int if f.name != "precision" else str) for f in fields(_train.TrainConfig)
}
_TRAIN_FIELD_TYPES.update(
    base_lr=float, feature_dropout_rate=float, key_dropout_rate=float
)

_SYNTH_FIELD_TYPES = {
    "n_patients": int,
    "d": int,
    "patches_min": int,
    "patches_max": int,
    "n_background": int,
    "prevalence_low": float,
    "prevalence_high": float,
    "hazard_scale": float,
    "baseline_rate": float,
    "censor_rate": float,
    "mean_scale": float,
    "noise_sigma": float,
}

SCHEMAS: dict[str, dict[str, type]] = {
    "synth": {**_SYNTH_FIELD_TYPES, "seed": int},
    "train": {
        "dataset": str,
        "model": str,
        "val_fraction": float,
        **_TRAIN_FIELD_TYPES,
    },
    "eval": {
        "dataset": str,
        "checkpoint": str,
        "predictions": str,
        "n_patches": int,
        "auc_times": list,
        "seed": int,
    },
    "cv": {
        "dataset": str,
        "model": str,
        "dropout_rates": list,
        "k_outer": int,
        "k_inner": int,
        "test_patches": int,
        **_TRAIN_FIELD_TYPES,
    },
    "ablate": {
        "dataset": str,
        "head_counts": list,
        "dropout_rates": list,
        "k_outer": int,
        "k_inner": int,
        "test_patches": int,
        **_TRAIN_FIELD_TYPES,
    },
    "attnmap": {
        "checkpoint": str,
        "bag": str,
        "dataset": str,
        "patient": str,
        "coords": str,
        "images": bool,
        "passes": int,
        "group_size": int,
        "seed": int,
    },
    "filter-patches": {
        "patches": list,
        "dir": str,
        "margin": int,
        "min_purple": int,
    },
}

REQUIRED: dict[str, set[str]] = {
    "synth": set(),
    "train": {"dataset"},
    "eval": {"dataset"},
    "cv": {"dataset"},
    "ablate": {"dataset"},
    "attnmap": {"checkpoint"},
    "filter-patches": set(),
}


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}")
    if not isinstance(doc, dict):
        raise ConfigError("config file must hold a JSON object")
    return doc


def check_schema(config: dict, command: str) -> None:
    schema = SCHEMAS[command]
    unknown = sorted(set(config) - set(schema))
    if unknown:
        raise ConfigError(f"unknown config keys for {command}: {unknown}")
    missing = sorted(REQUIRED[command] - set(config))
    if missing:
        raise ConfigError(f"missing required config keys for {command}: {missing}")
    bad = []
    for key, value in config.items():
        want = schema[key]
        ok = isinstance(value, want)
        if want is int:
            ok = isinstance(value, int) and not isinstance(value, bool)
        elif want is float:
            ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        if not ok:
            bad.append(f"{key} (expected {want.__name__})")
    if bad:
        raise ConfigError(f"config keys with wrong types for {command}: {bad}")


def _resolve_seed(args, config: dict) -> int:
    if args.seed is not None:
        return int(args.seed)
    return int(config.get("seed", 0))


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path, doc) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_text(path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _load_dataset(path_str: str) -> _data.Dataset:
    ds = _data.load_manifest(path_str)
    _data.validate_dataset(ds)
    return ds


def _train_config(config: dict, seed: int) -> _train.TrainConfig:
    overrides = {k: config[k] for k in _TRAIN_FIELD_TYPES if k in config and k != "seed"}
    return _train.TrainConfig(seed=seed, **overrides)


def _load_any_checkpoint(path_str: str):
    """Either checkpoint container, dispatched on the magic bytes."""
    with open(path_str, "rb") as fh:
        magic = fh.read(4)
    if magic == _model.CHECKPOINT_MAGIC:
        params, _, metadata = _model.load_checkpoint(path_str)
        return "mhattn", params, metadata
    if magic == _model.BASELINE_MAGIC:
        kind, arrays, metadata = _model.load_baseline_checkpoint(path_str)
        return kind, _model.baseline_params_from_arrays(kind, arrays), metadata
    raise FormatError(f"unrecognized checkpoint magic {magic!r} in {path_str}", offset=0)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    config = load_config(args.config)
    check_schema(config, "synth")
    seed = _resolve_seed(args, config)
    scfg = _data.SyntheticConfig(
        **{k: config[k] for k in _SYNTH_FIELD_TYPES if k in config}
    )
    out = _out_dir(args)
    ds = _data.generate_synthetic(scfg, RngStream(seed, "synth"))
    _data.write_synthetic_dataset(ds, out)
    _write_json(out / "effective_config.json", {**asdict(scfg), "seed": seed})
    oracle = ds.oracle_cindex()
    events = sum(r.event for r in ds.records)
    print(
        f"wrote {len(ds.records)} patients ({events} events) to {out}; "
        f"oracle c-index {oracle:.4f}"
    )
    return 0


def cmd_train(args) -> int:
    config = load_config(args.config)
    check_schema(config, "train")
    seed = _resolve_seed(args, config)
    kind = config.get("model", "mhattn")
    if kind not in _train.MODEL_KINDS:
        raise ConfigError(f"unknown model kind {kind!r}; expected one of {_train.MODEL_KINDS}")
    val_fraction = float(config.get("val_fraction", 0.2))
    if not 0.0 < val_fraction < 0.5:
        raise ConfigError(f"val_fraction must be in (0, 0.5), got {val_fraction}")
    cfg = _train_config(config, seed)
    ds = _load_dataset(config["dataset"])
    k_val = max(2, round(1.0 / val_fraction))
    folds = _cv.stratified_kfold(ds.records, k_val, RngStream(seed, "split"))
    val_ids = set(folds[0])
    train_recs = [r for r in ds.records if r.patient_id not in val_ids]
    val_recs = [r for r in ds.records if r.patient_id in val_ids]
    result = _train.train(
        train_recs, val_recs, ds.bags, cfg, kind=kind, stream=RngStream(seed, "train")
    )
    out = _out_dir(args)
    metadata = {
        "seed": seed,
        "config_hash": cfg.hash(),
        "best_val_cindex": result.best_val_cindex,
        "steps": result.steps,
        "kind": kind,
    }
    if kind == "mhattn":
        ckpt = out / "checkpoint.mhck"
        _model.save_checkpoint(ckpt, result.params, None, metadata)
    else:
        ckpt = out / "checkpoint.mhcb"
        _model.save_baseline_checkpoint(ckpt, kind, result.params, metadata)
    _write_text(out / "history.csv", _train.history_to_csv(result.history))
    _figures.plot_history(result.history, out / "history.png")
    effective = {
        "dataset": config["dataset"],
        "model": kind,
        "val_fraction": val_fraction,
        **asdict(cfg),
    }
    _write_json(out / "effective_config.json", effective)
    best = "n/a" if result.best_val_cindex is None else f"{result.best_val_cindex:.4f}"
    print(
        f"trained {kind} for {len(result.history)} epochs ({result.steps} steps); "
        f"best val c-index {best}; checkpoint at {ckpt}"
    )
    return 0


def _read_predictions_csv(path_str: str, records) -> np.ndarray:
    with open(path_str, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "id,risk":
        raise FormatError(f"{path_str}: predictions CSV must start with header 'id,risk'")
    risks: dict[str, float] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 2:
            raise FormatError(f"{path_str}:{lineno}: expected 2 fields, got {len(parts)}")
        try:
            risks[parts[0]] = float(parts[1])
        except ValueError as exc:
            raise FormatError(f"{path_str}:{lineno}: {exc}")
    missing = [r.patient_id for r in records if r.patient_id not in risks]
    if missing:
        raise DomainError(f"predictions missing for patients: {missing[:5]}")
    return np.array([risks[r.patient_id] for r in records], dtype=np.float64)


def cmd_eval(args) -> int:
    config = load_config(args.config)
    check_schema(config, "eval")
    seed = _resolve_seed(args, config)
    if ("checkpoint" in config) == ("predictions" in config):
        raise ConfigError("eval needs exactly one of 'checkpoint' or 'predictions'")
    ds = _load_dataset(config["dataset"])
    n_patches = int(config.get("n_patches", 1000))
    auc_times = config.get("auc_times", [1.0, 2.0, 3.0, 4.0, 5.0])
    out = _out_dir(args)

    if "checkpoint" in config:
        kind, params, _ = _load_any_checkpoint(config["checkpoint"])
        risks = _eval.predict_risks(
            params, ds.records, ds.bags, RngStream(seed, "eval"), n_patches=n_patches
        )
        source = {"checkpoint": config["checkpoint"], "model": kind}
        pred_lines = ["id,risk"] + [
            f"{r.patient_id},{_data.fmt_float(v)}" for r, v in zip(ds.records, risks)
        ]
        _write_text(out / "predictions.csv", "\n".join(pred_lines) + "\n")
    else:
        risks = _read_predictions_csv(config["predictions"], ds.records)
        source = {"predictions": config["predictions"]}

    times, events = _data.times_events(ds.records)
    cidx = _eval.c_index(risks, times, events)

    auc_values: dict[str, float | None] = {}
    auc_notes: dict[str, str] = {}
    for t in auc_times:
        key = _data.fmt_float(t)
        try:
            auc_values[key] = _eval.ipcw_auc(risks, times, events, float(t))
        except (DomainError, DegenerateWeightError) as exc:
            auc_values[key] = None
            auc_notes[key] = str(exc)

    groups = _eval.tertile_groups(risks)
    km_lines = ["group,time,survival,at_risk"]
    curves = {}
    group_labels = []
    for g in range(3):
        mask = groups == g
        if not mask.any():
            continue
        name = _eval.GROUP_NAMES[g]
        curve = _eval.km_estimator(times[mask], events[mask])
        curves[name] = curve
        group_labels.append((times[mask], events[mask]))
        for t, s, n_at in zip(curve.times, curve.survival, curve.at_risk):
            km_lines.append(f"{name},{_data.fmt_float(t)},{_data.fmt_float(s)},{n_at}")
    _write_text(out / "km_tertiles.csv", "\n".join(km_lines) + "\n")

    logrank_doc = None
    logrank_note = None
    if len(group_labels) >= 2:
        try:
            chi2, dof, p = _eval.logrank(group_labels)
            logrank_doc = {"chi_square": chi2, "dof": dof, "p": p}
        except DomainError as exc:
            logrank_note = str(exc)
    else:
        logrank_note = "fewer than 2 non-empty tertile groups"

    metrics = {
        "cindex": cidx,
        "n_patients": len(ds.records),
        "n_events": int(events.sum()),
        "auc": auc_values,
        "auc_skipped": auc_notes,
        "logrank_tertiles": logrank_doc,
        "logrank_skipped": logrank_note,
        "source": source,
    }
    _write_json(out / "metrics.json", metrics)
    csv_lines = ["metric,value", f"cindex,{_data.fmt_float(cidx)}"]
    for key in sorted(auc_values, key=float):
        v = auc_values[key]
        csv_lines.append(f"auc_t{key},{'' if v is None else _data.fmt_float(v)}")
    if logrank_doc:
        csv_lines.append(f"logrank_chi_square,{_data.fmt_float(logrank_doc['chi_square'])}")
        csv_lines.append(f"logrank_dof,{logrank_doc['dof']}")
        csv_lines.append(f"logrank_p,{_data.fmt_float(logrank_doc['p'])}")
    _write_text(out / "metrics.csv", "\n".join(csv_lines) + "\n")

    _figures.plot_km_curves(curves, out / "km_tertiles.png", title="KM by risk tertile")
    horizons = sorted(auc_values, key=float)
    _figures.plot_auc_over_time(
        [float(k) for k in horizons], [auc_values[k] for k in horizons], out / "auc.png"
    )
    effective = {
        "dataset": config["dataset"],
        **source,
        "n_patches": n_patches,
        "auc_times": [float(t) for t in auc_times],
        "seed": seed,
    }
    effective.pop("model", None)
    _write_json(out / "effective_config.json", effective)
    print(f"c-index {cidx:.4f} over {len(ds.records)} patients; report in {out}")
    return 0


def cmd_cv(args) -> int:
    config = load_config(args.config)
    check_schema(config, "cv")
    seed = _resolve_seed(args, config)
    kind = config.get("model", "mhattn")
    if kind not in _train.MODEL_KINDS:
        raise ConfigError(f"unknown model kind {kind!r}; expected one of {_train.MODEL_KINDS}")
    cfg = _train_config(config, seed)
    rates = [float(r) for r in config.get("dropout_rates", [0.0, 0.2, 0.5, 0.8, 0.95])]
    grid = _cv.GridSpec(dropout_rates=rates, head_counts=[cfg.heads])
    ds = _load_dataset(config["dataset"])
    k_outer = int(config.get("k_outer", 5))
    k_inner = int(config.get("k_inner", 4))
    test_patches = int(config.get("test_patches", 1000))
    report = _cv.nested_cv(
        ds,
        grid,
        cfg,
        kind=kind,
        stream=RngStream(seed, "cv"),
        k_outer=k_outer,
        k_inner=k_inner,
        test_patches=test_patches,
    )
    out = _out_dir(args)
    _write_text(out / "fold_plan.json", report.plan.to_json())
    _write_text(out / "cv_report.json", report.to_json())
    _write_text(out / "cv_folds.csv", _cv.cv_folds_csv(report))
    _write_text(out / "cv_predictions.csv", _cv.cv_predictions_csv(report))
    _figures.plot_cv_folds(
        [fr.test_cindex for fr in report.folds], report.mean_cindex, out / "cv_cindex.png", kind
    )
    effective = {
        "dataset": config["dataset"],
        "model": kind,
        "dropout_rates": rates,
        "k_outer": k_outer,
        "k_inner": k_inner,
        "test_patches": test_patches,
        **asdict(cfg),
    }
    _write_json(out / "effective_config.json", effective)
    print(f"nested CV mean test c-index {report.mean_cindex:.4f} ({kind}); report in {out}")
    return 0


def cmd_ablate(args) -> int:
    config = load_config(args.config)
    check_schema(config, "ablate")
    seed = _resolve_seed(args, config)
    cfg = _train_config(config, seed)
    rates = [float(r) for r in config.get("dropout_rates", [0.0, 0.2, 0.5, 0.8, 0.95])]
    head_counts = [int(h) for h in config.get("head_counts", [1, 4, 8, 16, 32])]
    grid = _cv.GridSpec(dropout_rates=rates, head_counts=head_counts)
    ds = _load_dataset(config["dataset"])
    k_outer = int(config.get("k_outer", 5))
    k_inner = int(config.get("k_inner", 4))
    test_patches = int(config.get("test_patches", 1000))
    rows = _cv.ablation_runner(
        ds,
        head_counts,
        grid,
        cfg,
        stream=RngStream(seed, "ablation"),
        k_outer=k_outer,
        k_inner=k_inner,
        test_patches=test_patches,
    )
    out = _out_dir(args)
    _write_text(out / "ablation.csv", _cv.ablation_csv(rows))
    _write_json(
        out / "ablation.json",
        [
            {
                "heads": row.heads,
                "mean_cindex": row.mean_cindex,
                "fold_cindexes": row.fold_cindexes,
                "selected_rates": row.selected_rates,
            }
            for row in rows
        ],
    )
    _figures.plot_ablation(
        [row.heads for row in rows], [row.mean_cindex for row in rows], out / "ablation.png"
    )
    effective = {
        "dataset": config["dataset"],
        "head_counts": head_counts,
        "dropout_rates": rates,
        "k_outer": k_outer,
        "k_inner": k_inner,
        "test_patches": test_patches,
        **asdict(cfg),
    }
    _write_json(out / "effective_config.json", effective)
    table = ", ".join(f"h={row.heads}: {row.mean_cindex:.4f}" for row in rows)
    print(f"ablation mean test c-index — {table}; report in {out}")
    return 0


def cmd_attnmap(args) -> int:
    config = load_config(args.config)
    check_schema(config, "attnmap")
    seed = _resolve_seed(args, config)
    kind, params, _ = _load_any_checkpoint(config["checkpoint"])
    if kind != "mhattn" or not isinstance(params, _model.ModelParams):
        raise ConfigError("attention maps require a multi-head attention checkpoint")
    if ("bag" in config) == ("dataset" in config):
        raise ConfigError("attnmap needs exactly one of 'bag' or 'dataset'")
    if "bag" in config:
        bag = _data.load_bag(config["bag"])
    else:
        if "patient" not in config:
            raise ConfigError("attnmap with a dataset needs a 'patient' id")
        ds = _load_dataset(config["dataset"])
        bag = ds.bags.get(config["patient"])
    coords = None
    if "coords" in config:
        coords = _attnmap.load_coords_csv(config["coords"])
    images = bool(config.get("images", coords is not None))
    passes = int(config.get("passes", 10))
    group_size = int(config.get("group_size", 32))
    weights, counts = _attnmap.attention_map_export(
        params, bag, RngStream(seed, "attnmap"), passes=passes, group_size=group_size
    )
    assert int(counts.min()) == int(counts.max()) == passes
    out = _out_dir(args)
    _write_text(out / "attnmap.csv", _attnmap.attnmap_csv(weights, coords))
    effective = {
        "checkpoint": config["checkpoint"],
        **({"bag": config["bag"]} if "bag" in config else
           {"dataset": config["dataset"], "patient": config["patient"]}),
        **({"coords": config["coords"]} if coords is not None else {}),
        "images": images,
        "passes": passes,
        "group_size": group_size,
        "seed": seed,
    }
    _write_json(out / "effective_config.json", effective)
    if images:
        if coords is None:
            raise UsageError(
                "rendering heatmaps requires a 'coords' table (CSV already written)"
            )
        for head in range(params.heads):
            grid = _attnmap.weights_to_grid(weights[head], coords)
            _data.write_pgm(out / f"head_{head + 1}.pgm", _attnmap.grid_to_gray(grid))
            _figures.plot_attention_grid(grid, out / f"head_{head + 1}.png", head)
    print(
        f"attention map for bag {bag.patient_id!r} ({bag.n} patches x {params.heads} heads) in {out}"
    )
    return 0


def cmd_filter_patches(args) -> int:
    config = load_config(args.config)
    check_schema(config, "filter-patches")
    paths: list[str] = list(config.get("patches", []))
    if "dir" in config:
        paths += sorted(str(p) for p in Path(config["dir"]).glob("*.ppm"))
    if not paths:
        raise ConfigError("filter-patches needs 'patches' paths or a 'dir' of .ppm files")
    margin = int(config.get("margin", _data.PURPLE_MARGIN))
    min_purple = int(config.get("min_purple", _data.MIN_PURPLE_PIXELS))
    lines = ["path,purple_count,keep"]
    kept = 0
    for p in paths:
        img = _data.read_ppm(p)
        keep, count = _data.filter_background_patch(img, margin=margin, min_purple=min_purple)
        kept += int(keep)
        lines.append(f"{p},{count},{int(keep)}")
    out = _out_dir(args)
    _write_text(out / "filter_report.csv", "\n".join(lines) + "\n")
    _write_json(
        out / "effective_config.json",
        {"patches": paths, "margin": margin, "min_purple": min_purple},
    )
    print(f"kept {kept}/{len(paths)} patches; listing in {out / 'filter_report.csv'}")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "cv": cmd_cv,
    "ablate": cmd_ablate,
    "attnmap": cmd_attnmap,
    "filter-patches": cmd_filter_patches,
}


def run(args) -> int:
    return COMMANDS[args.command](args)
