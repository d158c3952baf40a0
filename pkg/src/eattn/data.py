"""Synthetic sequence tasks and a CSV window loader."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import Rng

SPLIT_FRACTIONS = (0.70, 0.15, 0.15)


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "forecast"          # forecast | classify
    L: int = 64
    L_prime: int = 16               # horizon (forecast) or number of classes (classify)
    n_features: int = 1
    noise_sigma: float = 0.1
    seed: int = 0
    n_samples: int = 512
    n_components: int = 3
    source: str = "synthetic"       # synthetic | csv
    csv_path: str | None = None
    columns: tuple[str, ...] | None = None
    stride: int = 1
    phase_jitter: float = np.pi / 2  # classify: dominant phase drawn from U(0, jitter)

    def __post_init__(self):
        if self.kind not in ("forecast", "classify"):
            raise ValueError(f"task kind must be forecast or classify, got {self.kind!r}")
        if self.kind == "forecast" and self.L_prime < 1:
            raise ValueError("forecast horizon must be >= 1")
        if self.kind == "classify" and self.L_prime < 2:
            raise ValueError("classification needs at least 2 classes")
        if self.L < 1:
            raise ValueError("input length must be >= 1")

    @property
    def horizon(self) -> int:
        return self.L_prime if self.kind == "forecast" else 0

    @property
    def n_classes(self) -> int:
        return self.L_prime if self.kind == "classify" else 0


@dataclass
class DatasetSplit:
    inputs: np.ndarray              # (N, L, F)
    targets: np.ndarray             # (N, L', F) float, or (N,) int labels
    tag: str
    index: np.ndarray = field(default=None)  # source sample / window ids

    def __len__(self) -> int:
        return len(self.inputs)


def _split_counts(n: int) -> tuple[int, int, int]:
    n_train = int(n * SPLIT_FRACTIONS[0])
    n_val = int(n * SPLIT_FRACTIONS[1])
    return n_train, n_val, n - n_train - n_val


def _make_splits(inputs, targets, order) -> tuple[DatasetSplit, DatasetSplit, DatasetSplit]:
    n_train, n_val, _ = _split_counts(len(order))
    parts = (order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:])
    return tuple(DatasetSplit(inputs[ix], targets[ix], tag, ix)
                 for ix, tag in zip(parts, ("train", "val", "test")))


def forecast_frequencies(spec: TaskSpec) -> np.ndarray:
    """Task-level angular frequencies shared by every sample."""
    g = Rng(spec.seed).generator
    periods = g.uniform(4.0, 32.0, size=spec.n_components)
    return 2 * np.pi / periods


def gen_forecast_task(spec: TaskSpec):
    """Sums of sinusoids at fixed task frequencies with per-sample phase and amplitude.

    Inputs are the first L steps, targets the following L' steps of the same
    noisy process.
    """
    if spec.kind != "forecast":
        raise ValueError("gen_forecast_task needs kind='forecast'")
    g = Rng(spec.seed + 1).generator
    omega = forecast_frequencies(spec)
    n, F, T = spec.n_samples, spec.n_features, spec.L + spec.L_prime
    amp = g.uniform(0.5, 1.5, size=(n, 1, F, spec.n_components))
    phase = g.uniform(0, 2 * np.pi, size=(n, 1, F, spec.n_components))
    t = np.arange(T, dtype=np.float64)[None, :, None, None]
    series = np.sum(amp * np.sin(omega * t + phase), axis=-1)
    if spec.noise_sigma > 0:
        series = series + g.normal(0.0, spec.noise_sigma, size=series.shape)
    order = g.permutation(n)
    return _make_splits(series[:, :spec.L], series[:, spec.L:], order)


def class_bands(spec: TaskSpec) -> list[np.ndarray]:
    """DFT bins (1..L/2-1) owned by each class: contiguous bands, seeded class mapping."""
    bins = np.arange(1, (spec.L + 1) // 2)
    if len(bins) < spec.n_classes:
        raise ValueError(f"L={spec.L} too short for {spec.n_classes} frequency bands")
    bands = np.array_split(bins, spec.n_classes)
    perm = Rng(spec.seed).generator.permutation(spec.n_classes)
    return [bands[p] for p in perm]


def gen_classify_task(spec: TaskSpec):
    """Label = band of the dominant frequency.

    Each sample carries one unit-amplitude sinusoid on a bin from its class
    band plus two weaker sinusoids (amplitude <= 0.3) on bins from other
    bands. All frequencies sit on exact DFT bins. The dominant component is
    onset-aligned: its phase varies only within ``phase_jitter``.
    """
    if spec.kind != "classify":
        raise ValueError("gen_classify_task needs kind='classify'")
    g = Rng(spec.seed + 2).generator
    bands = class_bands(spec)
    n, F, L = spec.n_samples, spec.n_features, spec.L
    labels = g.permutation(np.arange(n) % spec.n_classes)
    t = np.arange(L, dtype=np.float64)
    series = np.zeros((n, L, F))
    for i, c in enumerate(labels):
        others = np.concatenate([b for j, b in enumerate(bands) if j != c])
        for f in range(F):
            k = g.choice(bands[c])
            series[i, :, f] += np.sin(2 * np.pi * k * t / L + g.uniform(0, spec.phase_jitter))
            for k2 in g.choice(others, size=2, replace=False):
                a2 = g.uniform(0.1, 0.3)
                series[i, :, f] += a2 * np.sin(2 * np.pi * k2 * t / L + g.uniform(0, 2 * np.pi))
    if spec.noise_sigma > 0:
        series = series + g.normal(0.0, spec.noise_sigma, size=series.shape)
    order = g.permutation(n)
    return _make_splits(series, labels.astype(np.int64), order)


def dft_band_label(x: np.ndarray, bands: list[np.ndarray]) -> int:
    """Label a single-feature series by the band of its largest DFT magnitude."""
    mag = np.abs(np.fft.rfft(np.asarray(x).reshape(-1)))
    mag[0] = 0.0
    k = int(np.argmax(mag))
    for c, b in enumerate(bands):
        if k in b:
            return c
    return -1


def load_csv(path, columns=None, L: int = 6, L_prime: int = 6, stride: int = 1):
    """Sliding windows over a timestamped CSV, split chronologically 70/15/15.

    Column 0 is a timestamp and only fixes row order. ``columns`` selects
    feature columns by header name (default: all remaining columns).
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"CSV file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: insufficient rows (empty file)")
    header, body = rows[0], rows[1:]
    if columns:
        missing = [c for c in columns if c not in header[1:]]
        if missing:
            raise ValueError(f"{path}: unknown columns {missing}")
        col_ix = [header.index(c) for c in columns]
    else:
        col_ix = list(range(1, len(header)))
    values = np.empty((len(body), len(col_ix)))
    for r, row in enumerate(body):
        for j, c in enumerate(col_ix):
            try:
                values[r, j] = float(row[c])
            except (ValueError, IndexError):
                cell = row[c] if c < len(row) else ""
                raise ValueError(
                    f"{path}: non-numeric cell {cell!r} at row {r + 2}, column {header[c]!r}") from None
    window = L + L_prime
    if len(body) < window:
        raise ValueError(f"{path}: insufficient rows ({len(body)} data rows, need {window})")
    starts = np.arange(0, len(body) - window + 1, stride)
    n_train, n_val, n_test = _split_counts(len(starts))
    if min(n_train, n_test) < 1:
        raise ValueError(f"{path}: insufficient rows for a train/val/test split")
    if n_val * stride < window - 1:
        raise ValueError(
            f"{path}: insufficient rows for a leakage-free split "
            f"(validation gap of {n_val} windows is shorter than the window length {window})")
    windows = np.stack([values[s:s + window] for s in starts])
    inputs, targets = windows[:, :L], windows[:, L:]
    idx = np.arange(len(starts))
    parts = (idx[:n_train], idx[n_train:n_train + n_val], idx[n_train + n_val:])
    return tuple(DatasetSplit(inputs[ix], targets[ix], tag, starts[ix])
                 for ix, tag in zip(parts, ("train", "val", "test")))


def zscore(splits, eps: float = 1e-12):
    """Normalise every split with per-feature statistics of the train split's inputs."""
    train = splits[0]
    flat = train.inputs.reshape(-1, train.inputs.shape[-1])
    mu = flat.mean(axis=0)
    sd = flat.std(axis=0) + eps
    out = []
    for s in splits:
        targets = s.targets
        if targets.dtype.kind == "f":
            targets = (targets - mu) / sd
        out.append(DatasetSplit((s.inputs - mu) / sd, targets, s.tag, s.index))
    return tuple(out), (mu, sd)


def build_task(spec: TaskSpec):
    if spec.source == "csv":
        if not spec.csv_path:
            raise ValueError("csv source needs a path")
        if spec.kind != "forecast":
            raise ValueError("CSV input supports forecasting only")
        splits = load_csv(spec.csv_path, spec.columns, spec.L, spec.L_prime, spec.stride)
        return zscore(splits)[0]
    if spec.kind == "forecast":
        return gen_forecast_task(spec)
    return gen_classify_task(spec)


def persistence_forecast(split: DatasetSplit) -> np.ndarray:
    """Repeat the last observed value over the horizon."""
    last = split.inputs[:, -1:, :]
    return np.repeat(last, split.targets.shape[1], axis=1)


def forecast_metrics(pred: np.ndarray, target: np.ndarray) -> dict[str, float]:
    err = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    mse = float(np.mean(err ** 2))
    return {"mse": mse, "mae": float(np.mean(np.abs(err))), "rmse": float(np.sqrt(mse))}
