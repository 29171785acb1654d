"""CSV ingestion, chronological splits, standardization, windowing, synthetic data."""

from __future__ import annotations

import csv
import math
import warnings
from collections.abc import Iterator, Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._io import atomic_write_csv
from .errors import ConfigError, DataError

SPLITS = ("train", "val", "test")
MIN_STD = 1e-8


@dataclass(frozen=True)
class TimeSeriesDataset:
    """A ``(timesteps, D)`` matrix plus split boundaries and train-range statistics.

    ``boundaries`` is ``(train_end, val_end)``: train is ``[0, train_end)``,
    val ``[train_end, val_end)``, test ``[val_end, timesteps)``.
    """

    values: np.ndarray
    names: tuple[str, ...]
    resolution: str = ""
    boundaries: tuple[int, int] | None = None
    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    degenerate: tuple[bool, ...] = field(default=())

    def __post_init__(self):
        if self.values.ndim != 2:
            raise DataError(f"values must be (timesteps, variates), got {self.values.shape}")
        if len(self.names) != self.values.shape[1]:
            raise DataError(f"{len(self.names)} names for {self.values.shape[1]} variates")
        self.values.setflags(write=False)

    @property
    def n_timesteps(self) -> int:
        return self.values.shape[0]

    @property
    def n_variates(self) -> int:
        return self.values.shape[1]

    @property
    def standardized(self) -> bool:
        return self.mean is not None

    def split_range(self, split: str) -> tuple[int, int]:
        if self.boundaries is None:
            raise ConfigError("dataset has no split boundaries; call chronological_split first")
        a, b = self.boundaries
        ranges = {"train": (0, a), "val": (a, b), "test": (b, self.n_timesteps)}
        if split not in ranges:
            raise ConfigError(f"unknown split {split!r}; expected one of {SPLITS}")
        return ranges[split]

    def split_values(self, split: str) -> np.ndarray:
        start, stop = self.split_range(split)
        return self.values[start:stop]

    def inverse_transform(self, values: np.ndarray) -> np.ndarray:
        """Map standardized values (last axis = variates) back to the original scale."""
        if not self.standardized:
            return np.asarray(values, dtype=np.float64)
        return np.asarray(values) * self.std + self.mean

    def transform(self, values: np.ndarray) -> np.ndarray:
        if not self.standardized:
            return np.asarray(values, dtype=np.float64)
        return (np.asarray(values) - self.mean) / self.std


def _parse_float(cell: str) -> float | None:
    try:
        return float(cell)
    except ValueError:
        return None


def load_csv(path: str | Path, resolution: str = "", delimiter: str = ",") -> TimeSeriesDataset:
    """Read a numeric CSV, one row per timestep.

    The first row is a header when any of its cells fails to parse as a number.
    A leading column whose first data cell is non-numeric is treated as a
    timestamp and dropped. Row numbers in errors are 1-based file lines.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: no such file")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [(i + 1, row) for i, row in enumerate(csv.reader(fh, delimiter=delimiter)) if row and any(c.strip() for c in row)]
    if not rows:
        raise DataError(f"{path}: file is empty")

    header = None
    if any(_parse_float(c) is None for c in rows[0][1]):
        header = [c.strip() for c in rows[0][1]]
        rows = rows[1:]
    if not rows:
        raise DataError(f"{path}: header but no data rows")

    width = len(rows[0][1])
    skip_first = _parse_float(rows[0][1][0]) is None
    if header is not None and len(header) != width:
        raise DataError(f"{path}: header has {len(header)} columns, row {rows[0][0]} has {width}")

    data = np.empty((len(rows), width - int(skip_first)))
    for k, (line, row) in enumerate(rows):
        if len(row) != width:
            raise DataError(f"{path}: row {line} has {len(row)} columns, expected {width}")
        cells = row[1:] if skip_first else row
        for j, cell in enumerate(cells):
            value = _parse_float(cell)
            if value is None:
                raise DataError(f"{path}: row {line}, column {j + 1 + int(skip_first)}: cannot parse {cell!r} as a number")
            data[k, j] = value
    if data.shape[1] == 0:
        raise DataError(f"{path}: no numeric columns")

    if header is not None:
        names = tuple(header[1:] if skip_first else header)
    else:
        names = tuple(f"v{j + 1}" for j in range(data.shape[1]))
    return TimeSeriesDataset(values=data, names=names, resolution=resolution)


def save_csv(path: str | Path, ds: TimeSeriesDataset) -> None:
    """Write values with a header row; floats use shortest round-trip repr."""
    atomic_write_csv(path, ds.names, ([repr(float(v)) for v in row] for row in ds.values))


def chronological_split(
    ds: TimeSeriesDataset,
    ratios: Sequence[float] = (0.7, 0.1, 0.2),
    min_length: int = 1,
) -> TimeSeriesDataset:
    """Prefix-train / middle-val / suffix-test split with floor-rounded boundaries.

    Each split must contain at least ``min_length`` steps (pass ``L + T`` to
    require room for one window).
    """
    if len(ratios) != 3 or any(not r > 0 for r in ratios):
        raise ConfigError(f"split ratios must be three positive numbers, got {tuple(ratios)}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must sum to 1, got {sum(ratios)}")
    n = ds.n_timesteps
    train_end = math.floor(n * ratios[0])
    val_end = math.floor(n * (ratios[0] + ratios[1]))
    lengths = {"train": train_end, "val": val_end - train_end, "test": n - val_end}
    for split, length in lengths.items():
        if length < max(min_length, 1):
            raise ConfigError(f"{split} split has {length} steps; need at least {max(min_length, 1)}")
    return replace(ds, boundaries=(train_end, val_end))


def standardize(ds: TimeSeriesDataset) -> TimeSeriesDataset:
    """Per-variate z-scoring with mean and std from the train range only.

    A std below 1e-8 is replaced by 1 and the variate is marked degenerate.
    """
    train = ds.split_values("train")
    mean = train.mean(axis=0)
    std = train.std(axis=0)
    degenerate = std < MIN_STD
    if degenerate.any():
        names = [n for n, d in zip(ds.names, degenerate) if d]
        warnings.warn(f"constant variates in train range, std set to 1: {names}", RuntimeWarning, stacklevel=2)
    std = np.where(degenerate, 1.0, std)
    values = (ds.values - mean) / std
    return replace(ds, values=values, mean=mean, std=std, degenerate=tuple(bool(d) for d in degenerate))


def restore(ds: TimeSeriesDataset) -> TimeSeriesDataset:
    """Undo :func:`standardize`."""
    if not ds.standardized:
        return ds
    return replace(ds, values=ds.inverse_transform(ds.values), mean=None, std=None, degenerate=())


@dataclass(frozen=True)
class WindowBatch:
    """Aligned input/target windows; ``origins`` index the first input step."""

    inputs: np.ndarray
    targets: np.ndarray
    origins: np.ndarray

    def __len__(self) -> int:
        return len(self.origins)

    def take(self, index) -> "WindowBatch":
        return WindowBatch(self.inputs[index], self.targets[index], self.origins[index])

    def batches(self, batch_size: int, order: np.ndarray | None = None) -> Iterator["WindowBatch"]:
        order = np.arange(len(self)) if order is None else np.asarray(order)
        for start in range(0, len(order), batch_size):
            yield self.take(order[start : start + batch_size])


def window(ds: TimeSeriesDataset, split: str, lookback: int, horizon: int, stride: int = 1) -> WindowBatch:
    """All ``(L, T)`` windows inside one split, ordered by origin."""
    if lookback < 1 or horizon < 1 or stride < 1:
        raise ConfigError(f"lookback, horizon and stride must be >= 1, got {lookback}, {horizon}, {stride}")
    start, stop = ds.split_range(split)
    values = ds.values[start:stop]
    need = lookback + horizon
    if len(values) < need:
        raise ConfigError(f"{split} split has {len(values)} steps; need at least {need} (L + T)")
    views = sliding_window_view(values, need, axis=0)[::stride]  # (count, D, L+T)
    views = np.moveaxis(views, -1, 1)
    inputs = np.ascontiguousarray(views[:, :lookback])
    targets = np.ascontiguousarray(views[:, lookback:])
    origins = start + stride * np.arange(len(views))
    return WindowBatch(inputs, targets, origins)


@dataclass(frozen=True)
class SynthSpec:
    length: int = 10_000
    n_variates: int = 4
    periods: tuple[float, ...] = (8.0, 64.0)
    amplitudes: tuple[float, ...] = (1.0, 1.0)
    noise: float = 0.1
    seed: int = 0


def synth_multiscale(spec: SynthSpec) -> TimeSeriesDataset:
    """Sum of sinusoids per variate with seeded random phases plus Gaussian noise."""
    if len(spec.periods) != len(spec.amplitudes):
        raise ConfigError("periods and amplitudes must have equal length")
    if any(p <= 0 for p in spec.periods) or len(set(spec.periods)) != len(spec.periods):
        raise ConfigError(f"periods must be distinct and positive, got {spec.periods}")
    if spec.length < 1 or spec.n_variates < 1 or spec.noise < 0:
        raise ConfigError("length and n_variates must be >= 1 and noise >= 0")
    rng = np.random.default_rng(spec.seed)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=(spec.n_variates, len(spec.periods)))
    t = np.arange(spec.length, dtype=np.float64)[:, None]
    values = np.zeros((spec.length, spec.n_variates))
    for k, (period, amplitude) in enumerate(zip(spec.periods, spec.amplitudes)):
        values += amplitude * np.sin(2.0 * np.pi * t / period + phases[:, k])
    if spec.noise > 0:
        values += spec.noise * rng.standard_normal(values.shape)
    names = tuple(f"s{j + 1}" for j in range(spec.n_variates))
    return TimeSeriesDataset(values=values, names=names, resolution="synthetic")
