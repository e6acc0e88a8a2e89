"""Acceptance criteria, one test each.

Every test prints a single ``[PASS]``/``[FAIL]`` line (run with ``-s`` to see
them live; they also appear in the captured output on failure). The suite is
slow, several minutes on one core, so it is marked ``acceptance`` and can be
deselected with ``-m "not acceptance"``.
"""

import os
import time
from pathlib import Path

import numpy as np
import pytest

from danhar import data as D
from danhar import experiment as E
from danhar import tensor as T
from danhar.attention import AttentionConfig, ChannelAttentionParams, TemporalAttentionParams, channel_attention, temporal_attention
from danhar.model import ModelConfig, build_model
from danhar.tensor import Tensor
from danhar.train import cross_entropy

import oracles
from gradcheck import max_rel_error, numeric_grad
from test_attention import identity_channel_params

pytestmark = pytest.mark.acceptance

SMALL_PLAN = [8, 8, 16, 16, 32, 32]


def report(capsys, name, ok, detail):
    with capsys.disabled():
        print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, f"{name}: {detail}"


def synth_config(variant="channel_then_temporal", backbone="residual", seed=0, epochs=30, length=64,
                 embed_mode="full"):
    return E.resolve_config({
        "seed": seed,
        "data": {
            "synthetic": {"num_classes": 4, "windows_per_class": 250, "axes": 3, "length": length,
                          "embed_mode": embed_mode},
            "split": {"kind": "random", "fraction": 0.8},
            "val_fraction": 0,
        },
        "model": {"backbone": backbone, "channel_plan": SMALL_PLAN, "attention": {"variant": variant}},
        "train": {"epochs": epochs, "batch_size": 64, "lr": 1e-3},
    })


def test_gradient_suite(capsys):
    start = time.perf_counter()
    cfg = ModelConfig(num_classes=3, sensor_axes=3, window_length=32, channel_plan=(4, 4, 8, 8),
                      attention=AttentionConfig("channel_then_temporal", 16, 7), seed=5)
    model = build_model(cfg)
    rng = np.random.default_rng(5)
    x = rng.normal(size=(2, 1, 3, 32))
    labels = np.array([0, 2])

    def loss_value():
        # train-mode batch statistics, but the running buffers must not drift between probes
        saved = {k: getattr(s, a).copy() for k, (s, a) in model.named_buffers().items()}
        with T.no_grad():
            v = cross_entropy(model.forward(x, mode="train"), labels).item()
        for k, (s, a) in model.named_buffers().items():
            setattr(s, a, saved[k])
        return v

    saved = {k: getattr(s, a).copy() for k, (s, a) in model.named_buffers().items()}
    model.zero_grad()
    T.backward(cross_entropy(model.forward(x, mode="train"), labels))
    for k, (s, a) in model.named_buffers().items():
        setattr(s, a, saved[k])

    worst, worst_name = 0.0, ""
    for name, p in model.named_parameters().items():
        err = max_rel_error(p.grad, numeric_grad(loss_value, p.data, h=1e-5), floor=1e-6)
        if err > worst:
            worst, worst_name = err, name
    elapsed = time.perf_counter() - start
    ok = worst < 1e-3 and elapsed < 120
    report(capsys, "gradient suite", ok, f"max rel error {worst:.2e} ({worst_name}), {elapsed:.1f}s")


def test_attention_fixtures(capsys):
    rng = np.random.default_rng(0)
    a = Tensor(rng.normal(size=(2, 5, 3, 9)))
    cw = channel_attention(a, ChannelAttentionParams.zeros(5, 16)).data
    tw = temporal_attention(a, TemporalAttentionParams.zeros(7)).data
    zero_ok = bool(np.all(cw == 0.5) and np.all(tw == 0.5))

    # feature maps constant at 1 and 3: avg and max pools agree, so the identity MLP sums to 2 and 6
    fm = np.stack([np.full((3, 4), 1.0), np.full((3, 4), 3.0)])[None]
    got = channel_attention(Tensor(fm), identity_channel_params(2)).data[0]
    expected = oracles.sig(np.array([2.0, 6.0]))
    err = float(np.max(np.abs(got - expected)))
    ok = zero_ok and err < 1e-9
    report(capsys, "attention fixtures", ok, f"zero-parameter weights exactly 0.5: {zero_ok}; identity MLP error {err:.1e}")


def test_synthetic_end_to_end(capsys):
    start = time.perf_counter()
    att = E.run_training(synth_config("channel_then_temporal", "residual"))
    plain = E.run_training(synth_config("none", "plain"))
    elapsed = time.perf_counter() - start
    sizes = (len(att.splits.train), len(att.splits.test))
    ok = att.final_acc >= 0.95 and plain.final_acc >= 0.85 and sizes == (800, 200) and elapsed < 900
    report(capsys, "synthetic end-to-end", ok,
           f"attention residual {att.final_acc:.3f} (>=0.95), plain CNN {plain.final_acc:.3f} (>=0.85), "
           f"{sizes[0]}/{sizes[1]} windows, {elapsed:.0f}s")


ABLATION_EPOCHS = int(os.environ.get("DANHAR_ABLATION_EPOCHS", "10"))


def test_ablation_trend(capsys):
    variants = ("none", "channel_only", "temporal_only", "channel_then_temporal", "temporal_then_channel")
    acc = {v: [] for v in variants}
    for seed in (0, 1, 2):
        ds = E.load_dataset(synth_config(seed=seed))
        for v in variants:
            acc[v].append(E.run_training(synth_config(v, seed=seed, epochs=ABLATION_EPOCHS), ds).final_acc)
    mean = {v: 100 * float(np.mean(a)) for v, a in acc.items()}
    dual = mean["channel_then_temporal"]
    ok = dual >= max(mean["channel_only"], mean["temporal_only"]) - 0.5
    ok = ok and all(mean[v] >= mean["none"] - 0.5 for v in variants[1:])
    detail = ", ".join(f"{v} {m:.2f}" for v, m in mean.items())
    report(capsys, "ablation trend", ok, f"mean accuracy % over 3 seeds, {ABLATION_EPOCHS} epochs: {detail}")


def test_temporal_localization(capsys):
    cfg = synth_config(length=128, embed_mode="segment", epochs=15)
    oc = E.run_training(cfg)
    frac, _ = E.temporal_localization(oc.result.model, oc.splits.test)
    ok = oc.final_acc >= 0.90 and frac >= 0.80
    report(capsys, "temporal localization", ok,
           f"accuracy {oc.final_acc:.3f} (>=0.90), inside>outside in {100 * frac:.1f}% of test windows (>=80%)")


def test_parameter_overhead(capsys):
    m = build_model(ModelConfig(num_classes=6, sensor_axes=3, window_length=200))
    ratio = m.attention_parameter_count() / m.backbone_parameter_count()
    ok = 0 < ratio < 0.03
    report(capsys, "parameter overhead", ok,
           f"{m.attention_parameter_count()} attention / {m.backbone_parameter_count()} backbone = {100 * ratio:.2f}% (<3%)")


def test_determinism(tmp_path, capsys):
    cfg = E.resolve_config({
        "seed": 7,
        "data": {"synthetic": {"windows_per_class": 40, "length": 32}, "val_fraction": 0.2},
        "model": {"channel_plan": [4, 4, 8, 8]},
        "train": {"epochs": 3, "batch_size": 16},
    })
    for name in ("a", "b"):
        E.cmd_train(cfg, tmp_path / name, figures=False)
    files = ("history.csv", "final.ckpt", "best.ckpt")
    same = {f: (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files}
    report(capsys, "determinism", all(same.values()), ", ".join(f"{f} identical={v}" for f, v in same.items()))


def test_windowing_arithmetic(capsys):
    w, o = D.get_preset("wisdm"), D.get_preset("opportunity")
    s = D.LabeledSeries("u", np.zeros((3, 1000)), 20.0, labels=np.zeros(1000, dtype=int))
    n = len(D.sliding_windows(s, w.width, w.step))
    ok = (w.width, w.step) == (200, 10) and abs(w.overlap - 0.95) < 1e-12 and n == 81 == D.window_count(1000, 200, 10)
    ok = ok and (o.width, o.step) == (64, 8)
    report(capsys, "windowing arithmetic", ok,
           f"wisdm {w.width}/{w.step} overlap {w.overlap:.2f}, T=1000 -> {n} windows, opportunity {o.width}/{o.step}")


WISDM = os.environ.get("DANHAR_WISDM_ARCHIVE")


@pytest.mark.skipif(not WISDM, reason="set DANHAR_WISDM_ARCHIVE to a prepared WISDM archive (multi-hour run)")
def test_wisdm_full_recipe(tmp_path, capsys):
    cfg = E.resolve_config({"data": {"archive": str(Path(WISDM).resolve()), "preset": "wisdm", "val_fraction": 0}})
    oc = E.run_training(cfg)
    ok = abs(100 * oc.final_acc - 98.85) <= 1.5
    report(capsys, "wisdm full recipe", ok, f"accuracy {100 * oc.final_acc:.2f}% (target 98.85 +/- 1.5)")
