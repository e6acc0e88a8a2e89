"""Sensor-log ingestion, sliding-window segmentation, splits and synthetic activity data."""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .container import read_container, write_container

log = logging.getLogger(__name__)

ARCHIVE_MAGIC = b"DANHARD1"
STD_FLOOR = 1e-8
SYNTH_NOISE = 0.3
DISTRACTOR_GAIN = 0.6


class DataError(ValueError):
    """Malformed input data, with file/line context where available."""


class WindowConfigError(ValueError):
    pass


@dataclass
class LabeledSeries:
    """One contiguous recording: ``channels`` is d x T."""

    subject: str
    channels: np.ndarray
    sample_rate: float
    labels: Optional[np.ndarray] = None  # per-timestep class indices (strict)
    label: Optional[int] = None  # sequence-level class (weak)
    source: str = ""
    start: int = 0  # row index of the first sample in the source

    def __post_init__(self):
        self.channels = np.atleast_2d(np.asarray(self.channels, dtype=np.float64))
        if self.sample_rate <= 0:
            raise DataError(f"sample rate must be positive, got {self.sample_rate}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.length,):
                raise DataError(f"label stream length {self.labels.shape} != series length {self.length}")
        if self.labels is None and self.label is None:
            raise DataError("series needs per-timestep labels or a sequence label")

    @property
    def length(self) -> int:
        return self.channels.shape[1]

    @property
    def axes(self) -> int:
        return self.channels.shape[0]


@dataclass
class WindowedDataset:
    windows: np.ndarray  # N x 1 x H x W
    labels: np.ndarray  # N
    class_names: list[str]
    subjects: list[str] = field(default_factory=list)
    sources: list[str] = field(default_factory=list)
    offsets: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    norm_mean: Optional[np.ndarray] = None
    norm_std: Optional[np.ndarray] = None
    segments: Optional[np.ndarray] = None  # N x 2 [start, end) of the embedded activity

    def __post_init__(self):
        self.windows = np.asarray(self.windows, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.offsets = np.asarray(self.offsets, dtype=np.int64)
        n = len(self.labels)
        if self.windows.shape[0] != n:
            raise DataError(f"{self.windows.shape[0]} windows but {n} labels")
        if n and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise DataError(f"labels must lie in [0, {len(self.class_names)})")
        if not self.subjects:
            self.subjects = [""] * n
        if not self.sources:
            self.sources = [""] * n
        if len(self.offsets) == 0 and n:
            self.offsets = np.zeros(n, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def dims(self) -> tuple[int, int]:
        """(sensor axes H, window length W)."""
        return int(self.windows.shape[2]), int(self.windows.shape[3])

    def subset(self, idx: Sequence[int] | np.ndarray) -> "WindowedDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(
            self,
            windows=self.windows[idx],
            labels=self.labels[idx],
            subjects=[self.subjects[i] for i in idx],
            sources=[self.sources[i] for i in idx],
            offsets=self.offsets[idx],
            segments=None if self.segments is None else self.segments[idx],
        )

    def class_histogram(self) -> dict[str, int]:
        counts = np.bincount(self.labels, minlength=self.num_classes)
        return {name: int(c) for name, c in zip(self.class_names, counts)}


@dataclass(frozen=True)
class DatasetPreset:
    name: str
    width: int
    step: int
    split: dict
    batch_size: int
    lr: float
    sample_rate: float
    decimate: int = 1

    def __post_init__(self):
        if self.width <= 0 or not 0 < self.step <= self.width:
            raise WindowConfigError(f"{self.name}: need width > 0 and 0 < step <= width")

    @property
    def overlap(self) -> float:
        return 1.0 - self.step / self.width


def _seconds_window(seconds: float, rate: float, overlap: float) -> tuple[int, int]:
    width = round(seconds * rate)
    return width, round(width * (1.0 - overlap))


def _build_presets() -> dict[str, DatasetPreset]:
    wisdm_w, wisdm_s = _seconds_window(10.0, 20.0, 0.95)
    pamap_w, pamap_s = _seconds_window(5.12, 33.3, 0.78)
    opp_test = [f"{s}-{r}" for s in (1, 2, 3) for r in (2, 4, 5)]
    presets = [
        DatasetPreset("wisdm", wisdm_w, wisdm_s, {"kind": "random", "fraction": 0.7}, 210, 1e-3, 20.0),
        DatasetPreset("unimib", 151, 151, {"kind": "random", "fraction": 0.7}, 128, 1e-3, 50.0),
        DatasetPreset("pamap2", pamap_w, pamap_s, {"kind": "by_subject", "test": ["5", "6"]}, 300, 5e-4, 100.0, decimate=3),
        DatasetPreset("opportunity", 64, 8, {"kind": "by_subject", "test": opp_test}, 300, 1e-4, 30.0),
        DatasetPreset("weak", 2048, 1024, {"kind": "random", "fraction": 0.7}, 200, 1e-3, 50.0),
    ]
    return {p.name: p for p in presets}


PRESETS: dict[str, DatasetPreset] = _build_presets()


def get_preset(name: str) -> DatasetPreset:
    try:
        return PRESETS[name.lower()]
    except KeyError:
        raise WindowConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


# ---------------------------------------------------------------- windowing

def window_count(length: int, width: int, step: int) -> int:
    if width > length:
        return 0
    return (length - width) // step + 1


def _majority(labels: np.ndarray) -> int:
    counts = np.bincount(labels)
    return int(counts.argmax())  # argmax picks the lowest index on ties


def sliding_windows(
    series: LabeledSeries,
    width: int,
    step: int,
    label_policy: str = "majority",
    class_names: Sequence[str] | None = None,
) -> WindowedDataset:
    """Cut ``series`` into windows ``[i*step, i*step + width)``."""
    if step <= 0 or width <= 0:
        raise WindowConfigError(f"width and step must be positive, got width={width}, step={step}")
    if label_policy not in ("majority", "sequence"):
        raise WindowConfigError(f"label policy must be 'majority' or 'sequence', got {label_policy!r}")
    if label_policy == "majority" and series.labels is None:
        raise WindowConfigError("majority policy needs per-timestep labels")
    if label_policy == "sequence" and series.label is None:
        raise WindowConfigError("sequence policy needs a sequence-level label")

    h = series.axes
    n = window_count(series.length, width, step)
    if class_names is None:
        top = int(series.labels.max()) if series.labels is not None else int(series.label)
        class_names = [str(i) for i in range(top + 1)]
    if n == 0:
        warnings.warn(f"window width {width} exceeds series length {series.length} ({series.subject}); no windows")
        return WindowedDataset(np.zeros((0, 1, h, width)), np.zeros(0, dtype=np.int64), list(class_names))

    starts = np.arange(n, dtype=np.int64) * step
    view = np.lib.stride_tricks.sliding_window_view(series.channels, width, axis=1)[:, starts]  # H x n x W
    windows = np.ascontiguousarray(view.transpose(1, 0, 2))[:, None]
    if label_policy == "majority":
        labels = np.array([_majority(series.labels[s:s + width]) for s in starts], dtype=np.int64)
    else:
        labels = np.full(n, int(series.label), dtype=np.int64)
    return WindowedDataset(
        windows,
        labels,
        list(class_names),
        subjects=[series.subject] * n,
        sources=[series.source] * n,
        offsets=starts + series.start,
    )


def concat_datasets(parts: Sequence[WindowedDataset], class_names: Sequence[str] | None = None) -> WindowedDataset:
    parts = [p for p in parts if len(p)]
    if not parts:
        raise DataError("no windows produced")
    names = list(class_names) if class_names is not None else parts[0].class_names
    return WindowedDataset(
        np.concatenate([p.windows for p in parts]),
        np.concatenate([p.labels for p in parts]),
        names,
        subjects=[s for p in parts for s in p.subjects],
        sources=[s for p in parts for s in p.sources],
        offsets=np.concatenate([p.offsets for p in parts]),
    )


def window_all(
    series_list: Iterable[LabeledSeries],
    width: int,
    step: int,
    class_names: Sequence[str],
    label_policy: str = "majority",
) -> WindowedDataset:
    parts = [sliding_windows(s, width, step, label_policy, class_names) for s in series_list]
    return concat_datasets(parts, class_names)


def decimate(series: LabeledSeries, factor: int) -> LabeledSeries:
    """Keep every ``factor``-th sample."""
    if factor == 1:
        return series
    return replace(
        series,
        channels=series.channels[:, ::factor],
        labels=None if series.labels is None else series.labels[::factor],
        sample_rate=series.sample_rate / factor,
    )


# ---------------------------------------------------------------- CSV ingestion

@dataclass
class CsvSchema:
    subject: str = "subject"
    label: str = "label"
    timestamp: str = "timestamp"
    channels: Optional[list[str]] = None  # None: every remaining column
    sample_rate: Optional[float] = None  # None: inferred from median timestamp step


def load_csv(path: str | Path, schema: CsvSchema | None = None, class_names: Sequence[str] | None = None) -> tuple[list[LabeledSeries], list[str]]:
    """Parse ``subject,label,timestamp,<ch...>`` rows (timestamps in ms).

    Returns the series (one per subject and gap-free segment) and the class
    names, sorted unless ``class_names`` is given.
    """
    schema = schema or CsvSchema()
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [c.strip() for c in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        for col in (schema.subject, schema.label, schema.timestamp):
            if col not in header:
                raise DataError(f"{path}:1: missing column {col!r} in header {header}")
        fixed = {schema.subject, schema.label, schema.timestamp}
        channels = schema.channels or [c for c in header if c not in fixed]
        missing = [c for c in channels if c not in header]
        if missing or not channels:
            raise DataError(f"{path}:1: channel columns {missing or channels} not found")
        i_sub, i_lab, i_ts = header.index(schema.subject), header.index(schema.label), header.index(schema.timestamp)
        i_ch = [header.index(c) for c in channels]

        subjects, labels, stamps, values, lines = [], [], [], [], []
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{line}: expected {len(header)} fields, got {len(row)}")
            try:
                ts = float(row[i_ts])
                vals = [float(row[i]) for i in i_ch]
            except ValueError:
                bad = [header[i] for i in [i_ts, *i_ch] if not _is_float(row[i])]
                raise DataError(f"{path}:{line}: unparseable or missing value in column(s) {bad}") from None
            if not all(map(math.isfinite, vals)) or not math.isfinite(ts):
                raise DataError(f"{path}:{line}: non-finite value")
            subjects.append(row[i_sub].strip())
            labels.append(row[i_lab].strip())
            stamps.append(ts)
            values.append(vals)
            lines.append(line)

    if not subjects:
        raise DataError(f"{path}: no data rows")
    names = list(class_names) if class_names is not None else sorted(set(labels))
    lookup = {n: i for i, n in enumerate(names)}
    unknown = sorted(set(labels) - set(lookup))
    if unknown:
        raise DataError(f"{path}: labels {unknown} not among class names {names}")

    stamps_arr = np.asarray(stamps)
    values_arr = np.asarray(values, dtype=np.float64)
    label_idx = np.array([lookup[l] for l in labels], dtype=np.int64)

    # contiguous subject runs
    runs = []
    start = 0
    for i in range(1, len(subjects) + 1):
        if i == len(subjects) or subjects[i] != subjects[start]:
            runs.append((start, i))
            start = i

    series = []
    for a, b in runs:
        ts = stamps_arr[a:b]
        d = np.diff(ts)
        bad = np.nonzero(d <= 0)[0]
        if len(bad):
            raise DataError(f"{path}:{lines[a + bad[0] + 1]}: timestamps not strictly increasing for subject {subjects[a]!r}")
        if schema.sample_rate:
            period = 1000.0 / schema.sample_rate
        elif len(d):
            period = float(np.median(d))
        else:
            period = 1000.0
        cuts = [0, *(np.nonzero(d > 2 * period)[0] + 1).tolist(), b - a]
        for s, e in zip(cuts[:-1], cuts[1:]):
            series.append(
                LabeledSeries(
                    subject=subjects[a],
                    channels=values_arr[a + s:a + e].T,
                    sample_rate=1000.0 / period,
                    labels=label_idx[a + s:a + e],
                    source=str(path),
                    start=a + s,
                )
            )
    log.info("%s: %d rows, %d series, %d classes", path, len(subjects), len(series), len(names))
    return series, names


def _is_float(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


# ---------------------------------------------------------------- split / normalize

def split(dataset: WindowedDataset, policy: dict) -> tuple[WindowedDataset, WindowedDataset]:
    """``{"kind": "random", "fraction": f, "seed": s}`` or ``{"kind": "by_subject", "test": [...]}``."""
    kind = policy.get("kind")
    n = len(dataset)
    if kind == "random":
        fraction = float(policy.get("fraction", 0.7))
        if not 0.0 < fraction < 1.0:
            raise WindowConfigError(f"train fraction must be in (0, 1), got {fraction}")
        perm = np.random.default_rng(int(policy.get("seed", 0))).permutation(n)
        n_train = int(round(fraction * n))
        train_idx, test_idx = np.sort(perm[:n_train]), np.sort(perm[n_train:])
    elif kind == "by_subject":
        test = {str(s) for s in policy.get("test", [])}
        unknown = sorted(test - set(dataset.subjects))
        if unknown:
            raise DataError(f"test subjects {unknown} not present in dataset")
        mask = np.array([s in test for s in dataset.subjects], dtype=bool)
        train_idx, test_idx = np.nonzero(~mask)[0], np.nonzero(mask)[0]
    else:
        raise WindowConfigError(f"unknown split policy {policy!r}")
    return dataset.subset(train_idx), dataset.subset(test_idx)


def normalize(train: WindowedDataset, test: WindowedDataset) -> tuple[WindowedDataset, WindowedDataset, tuple[np.ndarray, np.ndarray]]:
    """Standardize each sensor axis with statistics of ``train``."""
    if not len(train):
        raise DataError("cannot normalize with an empty training set")
    mean = train.windows.mean(axis=(0, 1, 3))
    std = np.maximum(train.windows.std(axis=(0, 1, 3)), STD_FLOOR)
    return apply_normalization(train, mean, std), apply_normalization(test, mean, std), (mean, std)


def apply_normalization(ds: WindowedDataset, mean: np.ndarray, std: np.ndarray) -> WindowedDataset:
    w = (ds.windows - mean[None, None, :, None]) / std[None, None, :, None]
    return replace(ds, windows=w, norm_mean=np.array(mean), norm_std=np.array(std))


# ---------------------------------------------------------------- synthetic data

def synth_signature(num_classes: int, axes: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-class frequency (cycles/sample), per-class-axis amplitude and phase."""
    k = np.arange(num_classes)
    h = np.arange(axes)
    freq = (3.0 + 2.0 * k) / 64.0
    amp = 0.6 + 0.8 * ((k[:, None] + h[None, :]) % num_classes) / max(num_classes - 1, 1)
    phase = 2.0 * np.pi * (h[None, :] * (k[:, None] + 1)) / (axes * num_classes)
    return freq, amp, phase


def synth_generate(
    seed: int,
    num_classes: int = 4,
    windows_per_class: int = 250,
    axes: int = 3,
    length: int = 64,
    embed_mode: str = "full",
    noise: float = SYNTH_NOISE,
) -> WindowedDataset:
    """Sinusoidal activity windows, ``windows_per_class`` per class, class-major order.

    ``full`` fills the window with the class signature. ``segment`` writes it
    into a random span of ``length // 4`` samples over a background pattern
    shared by all classes; spans are returned in ``segments``.
    """
    if num_classes < 2:
        raise WindowConfigError("synthetic data needs at least 2 classes")
    if embed_mode not in ("full", "segment"):
        raise WindowConfigError(f"embed mode must be 'full' or 'segment', got {embed_mode!r}")
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, seed >> 32, 0x5EED]))
    freq, amp, phase = synth_signature(num_classes, axes)
    n = num_classes * windows_per_class
    labels = np.repeat(np.arange(num_classes), windows_per_class)
    t = np.arange(length, dtype=np.float64)
    shift = rng.uniform(0.0, 2.0 * np.pi, n)
    noise_arr = rng.normal(0.0, noise, (n, axes, length))
    seg_len = max(length // 4, 1)
    seg_start = rng.integers(0, length - seg_len + 1, n)

    # signal[n, h, t]
    arg = 2.0 * np.pi * freq[labels][:, None, None] * t[None, None, :] + phase[labels][:, :, None] + shift[:, None, None]
    signal = amp[labels][:, :, None] * np.sin(arg)
    segments = None
    if embed_mode == "segment":
        bg_phase = 2.0 * np.pi * np.arange(axes) / axes
        background = 0.3 * np.sin(2.0 * np.pi * t[None, :] / length + bg_phase[:, None])
        # faint signature of some other class outside the span; only the span is informative
        other = (labels + rng.integers(1, num_classes, n)) % num_classes
        d_arg = 2.0 * np.pi * freq[other][:, None, None] * t[None, None, :] + phase[other][:, :, None] + shift[:, None, None]
        distractor = DISTRACTOR_GAIN * amp[other][:, :, None] * np.sin(d_arg)
        inside = (t[None, :] >= seg_start[:, None]) & (t[None, :] < seg_start[:, None] + seg_len)
        signal = np.where(inside[:, None, :], signal, background[None] + distractor)
        segments = np.stack([seg_start, seg_start + seg_len], axis=1).astype(np.int64)
    windows = (signal + noise_arr)[:, None]
    return WindowedDataset(
        windows,
        labels,
        [f"class{k}" for k in range(num_classes)],
        subjects=[f"synth{i % 10}" for i in range(n)],
        sources=["synthetic"] * n,
        offsets=np.arange(n, dtype=np.int64),
        segments=segments,
    )


# ---------------------------------------------------------------- archives

def save_archive(ds: WindowedDataset, path: str | Path, extra: dict | None = None) -> None:
    subject_ids = sorted(set(ds.subjects))
    source_ids = sorted(set(ds.sources))
    header = {
        "class_names": ds.class_names,
        "subject_ids": subject_ids,
        "source_ids": source_ids,
        "norm_mean": None if ds.norm_mean is None else ds.norm_mean.tolist(),
        "norm_std": None if ds.norm_std is None else ds.norm_std.tolist(),
        "extra": extra or {},
    }
    arrays = {
        "windows": (ds.windows, "float64"),
        "labels": (ds.labels, "int64"),
        "offsets": (ds.offsets, "int64"),
        "subject_index": (np.array([subject_ids.index(s) for s in ds.subjects] if len(ds) else [], dtype=np.int64), "int64"),
        "source_index": (np.array([source_ids.index(s) for s in ds.sources] if len(ds) else [], dtype=np.int64), "int64"),
    }
    if ds.segments is not None:
        arrays["segments"] = (ds.segments, "int64")
    write_container(path, ARCHIVE_MAGIC, header, arrays)


def load_archive(path: str | Path) -> WindowedDataset:
    header, arrays = read_container(path, ARCHIVE_MAGIC)
    for key in ("windows", "labels", "offsets", "subject_index", "source_index"):
        if key not in arrays:
            raise DataError(f"{path}: archive lacks {key!r}")
    subject_ids, source_ids = header["subject_ids"], header["source_ids"]
    mean, std = header.get("norm_mean"), header.get("norm_std")
    return WindowedDataset(
        arrays["windows"],
        arrays["labels"],
        list(header["class_names"]),
        subjects=[subject_ids[i] for i in arrays["subject_index"]],
        sources=[source_ids[i] for i in arrays["source_index"]],
        offsets=arrays["offsets"],
        norm_mean=None if mean is None else np.asarray(mean),
        norm_std=None if std is None else np.asarray(std),
        segments=arrays.get("segments"),
    )


def summary(ds: WindowedDataset) -> dict:
    h, w = ds.dims
    return {
        "num_windows": len(ds),
        "class_histogram": ds.class_histogram(),
        "dims": {"sensor_axes": h, "window_length": w},
    }
