"""Cross-entropy, Adam, step-decay schedule, the training loop and evaluation metrics."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .data import WindowedDataset
from .model import Model
from .tensor import Tensor

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "lr", "train_loss", "val_loss", "val_acc")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 500
    batch_size: int = 210
    lr: float = 1e-3
    decay_factor: float = 0.1
    decay_every: int = 50
    seed: int = 0
    shuffle: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.decay_every < 1:
            raise ValueError("epochs, batch_size and decay_every must be positive")
        if self.lr < 0:
            raise ValueError(f"learning rate must be non-negative, got {self.lr}")
        if not 0.0 < self.decay_factor <= 1.0:
            raise ValueError(f"decay factor must be in (0, 1], got {self.decay_factor}")

    def to_dict(self) -> dict:
        return asdict(self)


def cross_entropy(logits: Tensor, labels: Sequence[int] | np.ndarray) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2:
        raise T.DimensionError(f"logits must be N x K, got {logits.shape}")
    n, k = logits.shape
    if k < 2:
        raise ValueError(f"cross_entropy needs at least 2 classes, got {k}")
    if labels.shape != (n,):
        raise T.DimensionError(f"{len(labels)} labels for {n} rows of logits")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    return T.scale(T.total(T.pick(T.log_softmax(logits), labels)), -1.0 / n)


def lr_at(epoch: int, config: TrainConfig) -> float:
    return config.lr * config.decay_factor ** (epoch // config.decay_every)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState, lr: float) -> None:
    """One in-place Adam update; a missing gradient counts as zero."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ValueError("Adam state was created for a different parameter list")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise T.DimensionError(f"gradient shape {g.shape} != parameter shape {p.data.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass
class Metrics:
    accuracy: float
    loss: float
    confusion: np.ndarray  # rows: truth, cols: prediction
    precision: list[float]
    recall: list[float]
    predictions: np.ndarray

    @property
    def errors(self) -> int:
        return int(self.confusion.sum() - np.trace(self.confusion))

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "loss": self.loss,
            "errors": self.errors,
            "confusion": self.confusion.tolist(),
            "precision": self.precision,
            "recall": self.recall,
        }


def confusion_matrix(labels: np.ndarray, predictions: np.ndarray, k: int) -> np.ndarray:
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (labels, predictions), 1)
    return cm


def metrics_from_predictions(labels: np.ndarray, predictions: np.ndarray, k: int, loss: float = float("nan")) -> Metrics:
    cm = confusion_matrix(np.asarray(labels), np.asarray(predictions), k)
    diag = np.diag(cm).astype(np.float64)
    col, row = cm.sum(axis=0), cm.sum(axis=1)
    precision = [float(d / c) if c else 0.0 for d, c in zip(diag, col)]
    recall = [float(d / r) if r else 0.0 for d, r in zip(diag, row)]
    return Metrics(float(diag.sum() / cm.sum()), loss, cm, precision, recall, np.asarray(predictions))


def predict_logits(model: Model, windows: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = []
    with T.no_grad():
        for s in range(0, len(windows), batch_size):
            out.append(model.forward(windows[s:s + batch_size], mode="eval").data)
    return np.concatenate(out) if out else np.zeros((0, model.config.num_classes))


def evaluate(model: Model, dataset: WindowedDataset, batch_size: int = 256) -> Metrics:
    if not len(dataset):
        raise ValueError("cannot evaluate on an empty dataset")
    k = model.config.num_classes
    if dataset.num_classes != k:
        raise ValueError(f"dataset has {dataset.num_classes} classes, model predicts {k}")
    logits = predict_logits(model, dataset.windows, batch_size)
    with T.no_grad():
        loss = cross_entropy(Tensor(logits), dataset.labels).item()
    preds = logits.argmax(axis=1)
    return metrics_from_predictions(dataset.labels, preds, k, loss)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float
    val_acc: float


@dataclass
class TrainResult:
    model: Model
    best_model: Model
    best_epoch: int
    history: list[EpochRecord]


def _rng(seed: int, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, seed >> 32, tag]))


def train(
    model: Model,
    train_set: WindowedDataset,
    val_set: Optional[WindowedDataset],
    config: TrainConfig,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> TrainResult:
    """Train ``model`` in place; returns it together with the best-validation snapshot."""
    if not len(train_set):
        raise TrainingError("empty training set")
    params = model.parameters()
    state = AdamState(config.beta1, config.beta2, config.eps)
    rng = _rng(config.seed, 0x5F1)
    n = len(train_set)
    history: list[EpochRecord] = []
    best_acc, best_epoch, best_state = -1.0, -1, None

    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        lr = lr_at(epoch, config)
        order = rng.permutation(n) if config.shuffle else np.arange(n)
        total_loss = 0.0
        for b, s in enumerate(range(0, n, config.batch_size)):
            idx = order[s:s + config.batch_size]
            model.zero_grad()
            try:
                logits = model.forward(train_set.windows[idx], mode="train")
                loss = cross_entropy(logits, train_set.labels[idx])
            except T.NonFiniteError as exc:
                raise TrainingError(f"non-finite values at epoch {epoch}, batch {b}: {exc}") from exc
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            T.backward(loss)
            adam_step(params, [p.grad for p in params], state, lr)
            total_loss += value * len(idx)
        train_loss = total_loss / n

        if val_set is not None and len(val_set):
            vm = evaluate(model, val_set)
            val_loss, val_acc = vm.loss, vm.accuracy
        else:
            val_loss, val_acc = float("nan"), float("nan")
        rec = EpochRecord(epoch, lr, train_loss, val_loss, val_acc)
        history.append(rec)
        # ties keep the earlier epoch; with no validation set the last epoch wins
        if best_state is None or (math.isnan(val_acc) or val_acc > best_acc):
            best_acc, best_epoch, best_state = val_acc, epoch, model.state_dict()
        log.info(
            "epoch %d lr %.3g train_loss %.4f val_loss %.4f val_acc %.4f (%.1fs)",
            epoch, lr, train_loss, val_loss, val_acc, time.perf_counter() - t0,
        )
        if on_epoch is not None:
            on_epoch(rec)

    best = model.clone()
    best.load_state_dict(best_state)
    return TrainResult(model, best, best_epoch, history)


def history_csv(history: Sequence[EpochRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_COLUMNS)
    for r in history:
        w.writerow([r.epoch, repr(r.lr), repr(r.train_loss), repr(r.val_loss), repr(r.val_acc)])
    return buf.getvalue()


def write_history(history: Sequence[EpochRecord], path: str | Path) -> None:
    Path(path).write_text(history_csv(history), encoding="utf-8")


def read_history(path: str | Path) -> list[EpochRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [
        EpochRecord(int(r["epoch"]), float(r["lr"]), float(r["train_loss"]), float(r["val_loss"]), float(r["val_acc"]))
        for r in rows
    ]
