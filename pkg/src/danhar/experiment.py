"""Run configuration and the end-to-end workflows behind the CLI commands."""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import data as D
from . import tensor as T
from .attention import VARIANTS, AttentionConfig, AttentionTrace
from .model import DEFAULT_PLAN, Model, ModelConfig, build_model, checkpoint_meta, load_checkpoint, save_checkpoint
from .train import TrainConfig, TrainResult, evaluate, train, write_history

log = logging.getLogger(__name__)

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "data": {
        "archive": None,
        "synthetic": None,
        "preset": None,
        "split": None,
        "val_fraction": 0.1,
        "normalize": True,
    },
    "model": {
        "backbone": "residual",
        "channel_plan": list(DEFAULT_PLAN),
        "kernel": 6,
        "pool": 2,
        "attention": {"variant": "channel_then_temporal", "r": 16, "kt": 7},
    },
    "train": {
        "epochs": 500,
        "batch_size": 210,
        "lr": 1e-3,
        "decay_factor": 0.1,
        "decay_every": 50,
        "shuffle": True,
    },
    "ablate": {"seeds": [0, 1, 2], "variants": list(VARIANTS)},
}

SYNTH_DEFAULTS = {"num_classes": 4, "windows_per_class": 250, "axes": 3, "length": 64, "embed_mode": "full"}


class RunConfigError(ValueError):
    pass


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def set_path(d: dict, dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    for k in keys[:-1]:
        d = d.setdefault(k, {})
    d[keys[-1]] = value


def resolve_config(file_cfg: dict | None = None, overrides: dict[str, Any] | None = None) -> dict:
    """defaults < preset < config file < command-line overrides (dotted keys)."""
    file_cfg = file_cfg or {}
    unknown = set(file_cfg) - set(DEFAULTS)
    if unknown:
        raise RunConfigError(f"unknown config sections {sorted(unknown)}")
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    preset_name = overrides.get("data.preset") or file_cfg.get("data", {}).get("preset")
    cfg = copy.deepcopy(DEFAULTS)
    if preset_name:
        p = D.get_preset(preset_name)
        cfg = deep_merge(cfg, {"data": {"split": p.split}, "train": {"batch_size": p.batch_size, "lr": p.lr}})
    cfg = deep_merge(cfg, file_cfg)
    for k, v in overrides.items():
        set_path(cfg, k, v)
    if cfg["data"].get("synthetic") is not None:
        cfg["data"]["synthetic"] = deep_merge(SYNTH_DEFAULTS, cfg["data"]["synthetic"])
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    d = cfg["data"]
    if (d.get("archive") is None) == (d.get("synthetic") is None):
        raise RunConfigError("exactly one of data.archive or data.synthetic must be set")
    if not 0.0 <= float(d.get("val_fraction", 0.0)) < 1.0:
        raise RunConfigError("data.val_fraction must be in [0, 1)")
    seed = cfg["seed"]
    if not isinstance(seed, int) or not 0 <= seed < 2**64:
        raise RunConfigError(f"seed must be an unsigned 64-bit integer, got {seed!r}")
    try:
        train_config(cfg)
        AttentionConfig(**cfg["model"]["attention"])
        for s in cfg["ablate"]["seeds"]:
            if not isinstance(s, int) or s < 0:
                raise ValueError(f"ablation seed {s!r} is not a non-negative integer")
        bad = set(cfg["ablate"]["variants"]) - set(VARIANTS)
        if bad:
            raise ValueError(f"unknown ablation variants {sorted(bad)}")
        # dims are unknown until data loads; check the rest with placeholder sizes
        m = cfg["model"]
        _model_config(cfg, num_classes=2, axes=1, length=max(1, int(m["pool"])) ** (len(m["channel_plan"]) // 2))
    except (TypeError, ValueError) as exc:
        raise RunConfigError(str(exc)) from exc


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(seed=cfg["seed"], **cfg["train"])


def _model_config(cfg: dict, num_classes: int, axes: int, length: int) -> ModelConfig:
    m = cfg["model"]
    return ModelConfig(
        num_classes=num_classes,
        sensor_axes=axes,
        window_length=length,
        backbone=m["backbone"],
        channel_plan=tuple(m["channel_plan"]),
        kernel=m["kernel"],
        pool=m["pool"],
        attention=AttentionConfig(**m["attention"]),
        seed=cfg["seed"],
    )


def load_config_file(path: str | Path | None) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise RunConfigError(f"{path}: invalid JSON: {exc}") from exc


def dump_json(obj: Any, path: str | Path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- data

@dataclass
class Splits:
    train: D.WindowedDataset
    val: D.WindowedDataset
    test: D.WindowedDataset
    norm: tuple[np.ndarray, np.ndarray] | None


def load_dataset(cfg: dict) -> D.WindowedDataset:
    d = cfg["data"]
    if d.get("archive"):
        return D.load_archive(d["archive"])
    s = d["synthetic"]
    return D.synth_generate(
        int(s.get("seed", cfg["seed"])), s["num_classes"], s["windows_per_class"], s["axes"], s["length"], s["embed_mode"]
    )


def make_splits(cfg: dict, ds: D.WindowedDataset) -> Splits:
    d = cfg["data"]
    policy = dict(d.get("split") or {"kind": "random", "fraction": 0.7})
    policy.setdefault("seed", cfg["seed"])
    train_ds, test_ds = D.split(ds, policy)
    vf = float(d.get("val_fraction", 0.0))
    if vf > 0:
        train_ds, val_ds = D.split(train_ds, {"kind": "random", "fraction": 1.0 - vf, "seed": cfg["seed"] + 1})
    else:
        val_ds = test_ds
    norm = None
    if d.get("normalize", True) and ds.norm_mean is None:
        train_ds, test_ds, norm = D.normalize(train_ds, test_ds)
        val_ds = test_ds if vf == 0 else D.apply_normalization(val_ds, *norm)
    return Splits(train_ds, val_ds, test_ds, norm)


# ---------------------------------------------------------------- train

@dataclass
class RunOutcome:
    result: TrainResult
    splits: Splits
    final_acc: float
    best_acc: float
    metrics: dict


def run_training(cfg: dict, ds: D.WindowedDataset | None = None) -> RunOutcome:
    ds = ds if ds is not None else load_dataset(cfg)
    splits = make_splits(cfg, ds)
    h, w = ds.dims
    model = build_model(_model_config(cfg, ds.num_classes, h, w))
    log.info(
        "training %s/%s: %d params (%d attention), %d train / %d val / %d test windows",
        cfg["model"]["backbone"], cfg["model"]["attention"]["variant"], model.num_parameters(),
        model.attention_parameter_count(), len(splits.train), len(splits.val), len(splits.test),
    )
    result = train(model, splits.train, splits.val, train_config(cfg))
    final_m = evaluate(result.model, splits.test)
    best_m = evaluate(result.best_model, splits.test)
    metrics = {
        "final_acc": final_m.accuracy,
        "best_acc": best_m.accuracy,
        "final": final_m.to_dict(),
        "best": best_m.to_dict(),
        "best_epoch": result.best_epoch,
        "class_names": ds.class_names,
        "parameters": model.num_parameters(),
        "attention_parameters": model.attention_parameter_count(),
        "num_train": len(splits.train),
        "num_val": len(splits.val),
        "num_test": len(splits.test),
    }
    return RunOutcome(result, splits, final_m.accuracy, best_m.accuracy, metrics)


def _norm_meta(norm) -> dict:
    if norm is None:
        return {}
    return {"input_norm": {"mean": norm[0].tolist(), "std": norm[1].tolist()}}


def cmd_train(cfg: dict, out: str | Path, figures: bool = True) -> RunOutcome:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    dump_json(cfg, out / "config.json")
    outcome = run_training(cfg)
    meta = _norm_meta(outcome.splits.norm)
    write_history(outcome.result.history, out / "history.csv")
    save_checkpoint(outcome.result.model, out / "final.ckpt", meta=meta)
    save_checkpoint(outcome.result.best_model, out / "best.ckpt", meta=meta)
    dump_json(outcome.metrics, out / "metrics.json")
    if figures:
        from . import plotting

        plotting.plot_history(outcome.result.history, out / "figures" / "history.png")
        plotting.plot_confusion(np.array(outcome.metrics["final"]["confusion"]), outcome.metrics["class_names"],
                                out / "figures" / "confusion_final.png")
    return outcome


# ---------------------------------------------------------------- ablation

ABLATION_COLUMNS = ("variant", "params", "final_acc", "best_acc", "seed", "status")


def cmd_ablate(cfg: dict, out: str | Path, figures: bool = True) -> list[dict]:
    """Train every variant under every seed; rows per (seed, variant) then per-variant means."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    dump_json(cfg, out / "config.json")
    rows = []
    for seed in cfg["ablate"]["seeds"]:
        seeded = deep_merge(cfg, {"seed": seed})
        ds = load_dataset(seeded)
        for variant in cfg["ablate"]["variants"]:
            vcfg = deep_merge(seeded, {"model": {"attention": {"variant": variant}}})
            h, w = ds.dims
            params = build_model(_model_config(vcfg, ds.num_classes, h, w)).num_parameters()
            try:
                oc = run_training(vcfg, ds)
                rows.append({"variant": variant, "params": params, "final_acc": oc.final_acc,
                             "best_acc": oc.best_acc, "seed": seed, "status": "ok"})
            except Exception as exc:  # a failed variant must not stop the sweep
                log.error("variant %s seed %s failed: %s", variant, seed, exc)
                rows.append({"variant": variant, "params": params, "final_acc": float("nan"),
                             "best_acc": float("nan"), "seed": seed, "status": f"failed: {type(exc).__name__}"})
    summary = summarize_ablation(rows, cfg["ablate"]["variants"])
    (out / "ablation.csv").write_text(ablation_csv(rows, summary), encoding="utf-8")
    if figures:
        from . import plotting

        plotting.plot_ablation(summary, out / "figures" / "ablation.png")
    return rows + summary


def summarize_ablation(rows: Sequence[dict], variants: Sequence[str]) -> list[dict]:
    out = []
    for v in variants:
        ok = [r for r in rows if r["variant"] == v and r["status"] == "ok"]
        mine = [r for r in rows if r["variant"] == v]
        out.append({
            "variant": v,
            "params": mine[0]["params"] if mine else 0,
            "final_acc": float(np.mean([r["final_acc"] for r in ok])) if ok else float("nan"),
            "best_acc": float(np.mean([r["best_acc"] for r in ok])) if ok else float("nan"),
            "seed": "mean",
            "status": "ok" if len(ok) == len(mine) else f"{len(mine) - len(ok)} failed",
        })
    return out


def ablation_csv(rows: Sequence[dict], summary: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=ABLATION_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in [*rows, *summary]:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


# ---------------------------------------------------------------- evaluate / export

def load_for_inference(checkpoint: str | Path, archive: str | Path) -> tuple[Model, D.WindowedDataset]:
    model = load_checkpoint(checkpoint)
    ds = D.load_archive(archive)
    cfg = model.config
    if ds.dims != (cfg.sensor_axes, cfg.window_length):
        raise RunConfigError(
            f"archive windows are {ds.dims[0]} x {ds.dims[1]}, checkpoint expects {cfg.sensor_axes} x {cfg.window_length}"
        )
    if ds.num_classes != cfg.num_classes:
        raise RunConfigError(f"archive has {ds.num_classes} classes, checkpoint predicts {cfg.num_classes}")
    norm = checkpoint_meta(checkpoint).get("input_norm")
    if norm and ds.norm_mean is None:
        ds = D.apply_normalization(ds, np.asarray(norm["mean"]), np.asarray(norm["std"]))
    return model, ds


def cmd_evaluate(checkpoint: str | Path, archive: str | Path, out: str | Path, figures: bool = True) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    model, ds = load_for_inference(checkpoint, archive)
    m = evaluate(model, ds)
    result = {**m.to_dict(), "class_names": ds.class_names, "num_windows": len(ds)}
    dump_json(result, out / "metrics.json")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["true\\pred", *ds.class_names])
    for name, row in zip(ds.class_names, m.confusion):
        w.writerow([name, *row.tolist()])
    (out / "confusion.csv").write_text(buf.getvalue(), encoding="utf-8")
    if figures:
        from . import plotting

        plotting.plot_confusion(m.confusion, ds.class_names, out / "figures" / "confusion.png")
    return result


def attention_for_window(model: Model, window: np.ndarray) -> AttentionTrace:
    trace = AttentionTrace()
    with T.no_grad():
        model.forward(window[None], mode="eval", trace=trace)
    return trace


def cmd_export_attention(checkpoint: str | Path, archive: str | Path, indices: Sequence[int], out: str | Path,
                         figures: bool = True) -> list[Path]:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    model, ds = load_for_inference(checkpoint, archive)
    bad = [i for i in indices if not 0 <= i < len(ds)]
    if bad:
        raise IndexError(f"window indices {bad} out of range [0, {len(ds)})")
    written = []
    for i in indices:
        trace = attention_for_window(model, ds.windows[i])
        tbuf, cbuf = io.StringIO(), io.StringIO()
        tw, cw = csv.writer(tbuf, lineterminator="\n"), csv.writer(cbuf, lineterminator="\n")
        tw.writerow(["layer", "h", "w", "weight"])
        cw.writerow(["layer", "channel", "weight"])
        for rec in trace.records:
            if rec.kind == "temporal":
                plane = rec.weights[0, 0]
                for (hh, ww), v in np.ndenumerate(plane):
                    tw.writerow([rec.layer, hh, ww, repr(float(v))])
            else:
                for c, v in enumerate(rec.weights[0]):
                    cw.writerow([rec.layer, c, repr(float(v))])
        for name, buf in ((f"temporal_{i}.csv", tbuf), (f"channel_{i}.csv", cbuf)):
            (out / name).write_text(buf.getvalue(), encoding="utf-8")
            written.append(out / name)
        if figures:
            from . import plotting

            seg = None if ds.segments is None else ds.segments[i]
            temporal = [(r.layer, r.weights[0, 0]) for r in trace.select("temporal")]
            channel = [(r.layer, r.weights[0]) for r in trace.select("channel")]
            if temporal:
                plotting.plot_temporal_attention(ds.windows[i, 0], temporal, out / "figures" / f"temporal_{i}.png", seg)
            if channel:
                plotting.plot_channel_attention(channel, out / "figures" / f"channel_{i}.png")
    return written


def read_attention_csv(path: str | Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------- prepare

def cmd_prepare(out: str | Path, input_csv: str | Path | None = None, preset: str | None = None,
                width: int | None = None, step: int | None = None, synthetic: dict | None = None,
                seed: int = 0) -> dict:
    out = Path(out)
    if synthetic is not None:
        s = deep_merge(SYNTH_DEFAULTS, synthetic)
        ds = D.synth_generate(seed, s["num_classes"], s["windows_per_class"], s["axes"], s["length"], s["embed_mode"])
    else:
        if input_csv is None:
            raise RunConfigError("prepare needs --input or --synthetic")
        p = D.get_preset(preset) if preset else None
        width = width or (p.width if p else None)
        step = step or (p.step if p else None)
        if not width or not step:
            raise RunConfigError("prepare needs --preset or both --width and --step")
        schema = D.CsvSchema(sample_rate=p.sample_rate if p else None)
        series, names = D.load_csv(input_csv, schema)
        if p is not None and p.decimate > 1:
            series = [D.decimate(s, p.decimate) for s in series]
        ds = D.window_all(series, width, step, names)
    out.mkdir(parents=True, exist_ok=True)
    D.save_archive(ds, out / "windows.bin")
    summary = D.summary(ds)
    dump_json(summary, out / "summary.json")
    return summary


def temporal_localization(model: Model, ds: D.WindowedDataset, layer: str | None = None) -> tuple[float, np.ndarray]:
    """Fraction of windows whose mean temporal weight inside the ground-truth span beats the outside mean.

    Weight positions are mapped to input time by their centres.
    """
    if ds.segments is None:
        raise RunConfigError("dataset has no ground-truth segments")
    trace = AttentionTrace()
    with T.no_grad():
        for s in range(0, len(ds), 256):
            model.forward(ds.windows[s:s + 256], mode="eval", trace=trace)
    layer = layer or trace.layers()[-1]
    wt = np.concatenate([r.weights[:, 0] for r in trace.select("temporal", layer)])  # N x H x W'
    length = ds.dims[1]
    centres = (np.arange(wt.shape[-1]) + 0.5) * (length / wt.shape[-1])
    inside = (centres[None] >= ds.segments[:, :1]) & (centres[None] < ds.segments[:, 1:])
    margins = np.empty(len(ds))
    for i in range(len(ds)):
        margins[i] = wt[i][:, inside[i]].mean() - wt[i][:, ~inside[i]].mean()
    return float(np.mean(margins > 0)), margins


def finite_or_none(x: float) -> float | None:
    return None if math.isnan(x) else x
