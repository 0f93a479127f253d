"""Dataset ingestion, synthetic series, chronological splits and windowing."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

FEATURE_MODES = ("M", "S", "MS")


class IngestionError(ValueError):
    def __init__(self, message: str, row: int | None = None, column: int | None = None):
        self.row = row
        self.column = column
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class SplitError(ValueError):
    def __init__(self, message: str, segments: Sequence[str]):
        self.segments = list(segments)
        super().__init__(message)


@dataclass(frozen=True)
class Dataset:
    name: str
    times: np.ndarray
    values: np.ndarray
    columns: tuple[str, ...]
    target_index: int
    features_mode: str = "M"

    def __post_init__(self):
        if self.features_mode not in FEATURE_MODES:
            raise ValueError(f"features_mode must be one of {FEATURE_MODES}")
        if self.values.ndim != 2 or self.values.shape[0] == 0 or self.values.shape[1] == 0:
            raise ValueError("values must be a non-empty T x C matrix")
        if len(self.times) != self.values.shape[0]:
            raise ValueError("times and values disagree on T")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("values must be finite")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("timestamps must be strictly increasing")

    @property
    def n_timesteps(self) -> int:
        return self.values.shape[0]

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]

    @property
    def input_columns(self) -> list[int]:
        return [self.target_index] if self.features_mode == "S" else list(range(self.n_channels))

    @property
    def output_columns(self) -> list[int]:
        return list(range(self.n_channels)) if self.features_mode == "M" else [self.target_index]

    @property
    def c_in(self) -> int:
        return len(self.input_columns)

    @property
    def c_out(self) -> int:
        return len(self.output_columns)

    @property
    def target_in(self) -> int:
        """Position of the target channel among the input channels."""
        return self.input_columns.index(self.target_index)


def _parse_time(text: str) -> float:
    try:
        return float(text)
    except ValueError:
        return _epoch(datetime.fromisoformat(text))


def _epoch(stamp: datetime) -> float:
    # Naive timestamps are read as UTC so DST never breaks monotonicity.
    if stamp.tzinfo is None:
        stamp = stamp.replace(tzinfo=timezone.utc)
    return stamp.timestamp()


def load_csv_dataset(path, features_mode: str = "M", target_name: str = "OT", name: str | None = None) -> Dataset:
    """Read a ``date,<feature>...`` CSV. Rows/columns in errors are 0-based; row 0 is the header."""
    path = Path(path)
    if features_mode not in FEATURE_MODES:
        raise IngestionError(f"unknown features mode {features_mode!r}")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise IngestionError("empty file", row=0)
    header = [h.strip() for h in rows[0]]
    if not header or header[0] != "date":
        raise IngestionError("first column must be named 'date'", row=0, column=0)
    if len(header) < 2:
        raise IngestionError("no feature columns", row=0, column=1)
    features = header[1:]
    if target_name not in features:
        raise IngestionError(f"target column {target_name!r} missing", row=0)
    body = rows[1:]
    if len(body) < 2:
        raise IngestionError("need at least 2 data rows", row=len(rows))
    times = np.empty(len(body))
    values = np.empty((len(body), len(features)))
    for r, row in enumerate(body, start=1):
        if len(row) != len(header):
            raise IngestionError(f"expected {len(header)} cells, found {len(row)}", row=r)
        try:
            times[r - 1] = _parse_time(row[0])
        except ValueError:
            raise IngestionError(f"unparseable timestamp {row[0]!r}", row=r, column=0) from None
        for c, cell in enumerate(row[1:], start=1):
            try:
                v = float(cell)
            except ValueError:
                raise IngestionError(f"non-numeric cell {cell!r}", row=r, column=c) from None
            if not math.isfinite(v):
                raise IngestionError(f"non-finite cell {cell!r}", row=r, column=c)
            values[r - 1, c - 1] = v
    if np.any(np.diff(times) <= 0):
        bad = int(np.argmax(np.diff(times) <= 0)) + 2
        raise IngestionError("timestamps not strictly increasing", row=bad, column=0)
    return Dataset(
        name=name or path.stem,
        times=times,
        values=values,
        columns=tuple(features),
        target_index=features.index(target_name),
        features_mode=features_mode,
    )


def gen_synthetic(
    channels: int,
    timesteps: int,
    seasonal_period: float = 24,
    noise_std: float = 0.1,
    seed: int = 0,
    path=None,
    name: str = "synthetic",
    trend: float = 0.3,
) -> Dataset:
    """Seasonal mixture + linear trend + Gaussian noise, one column per channel.

    The last column is named ``OT``. When ``path`` is given the series is
    also written as CSV in the format :func:`load_csv_dataset` reads.
    """
    if channels < 1 or timesteps < 2:
        raise ValueError("need channels >= 1 and timesteps >= 2")
    rng = np.random.default_rng(seed)
    t = np.arange(timesteps, dtype=float)
    amp = rng.uniform(0.5, 1.5, size=(2, channels))
    phase = rng.uniform(0.0, 2 * np.pi, size=(2, channels))
    slope = rng.uniform(-trend, trend, size=channels) / timesteps
    offset = rng.normal(0.0, 1.0, size=channels)
    w = 2 * np.pi / seasonal_period
    values = (
        amp[0] * np.sin(w * t[:, None] + phase[0])
        + amp[1] * np.sin(2 * w * t[:, None] + phase[1])
        + slope * t[:, None]
        + offset
    )
    if noise_std > 0:
        values = values + rng.normal(0.0, noise_std, size=values.shape)
    columns = tuple(f"x{i}" for i in range(channels - 1)) + ("OT",)
    start = datetime(2016, 7, 1)
    stamps = [start + timedelta(hours=i) for i in range(timesteps)]
    ds = Dataset(
        name=name,
        times=np.array([_epoch(s) for s in stamps]),
        values=values,
        columns=columns,
        target_index=channels - 1,
    )
    if path is not None:
        write_csv(ds, path, stamps)
    return ds


def write_csv(dataset: Dataset, path, stamps=None) -> None:
    if stamps is None:
        stamps = [datetime.fromtimestamp(t, timezone.utc).replace(tzinfo=None) for t in dataset.times]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("date",) + dataset.columns)
        for stamp, row in zip(stamps, dataset.values):
            w.writerow([stamp.isoformat(sep=" ")] + [repr(float(v)) for v in row])


@dataclass(frozen=True)
class Segment:
    name: str
    start: int
    stop: int
    values: np.ndarray

    def __len__(self) -> int:
        return self.stop - self.start


def chrono_split(
    values: np.ndarray,
    ratios: Sequence[float] = (0.7, 0.1, 0.2),
    min_len: int = 0,
) -> tuple[Segment, Segment, Segment]:
    """Contiguous train/val/test segments at floor of the cumulative ratios."""
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ValueError("ratios must be three positive numbers")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)!r}")
    if isinstance(values, Dataset):
        values = values.values
    T = len(values)
    # Exact decimal arithmetic so e.g. 0.7 * 17420 floors to 12194, not 12193.
    fr = [Fraction(repr(float(r))) for r in ratios]
    b1 = math.floor(fr[0] * T)
    b2 = math.floor((fr[0] + fr[1]) * T)
    bounds = {"train": (0, b1), "val": (b1, b2), "test": (b2, T)}
    short = [n for n, (a, b) in bounds.items() if b - a < min_len]
    if short:
        detail = ", ".join(f"{n} has {bounds[n][1] - bounds[n][0]} rows" for n in short)
        raise SplitError(f"segment too short for seq_len + pred_len = {min_len}: {detail}", short)
    return tuple(Segment(n, a, b, values[a:b]) for n, (a, b) in bounds.items())


class Normalizer:
    """Per-channel z-score fitted on the training segment."""

    def __init__(self, mean: np.ndarray, std: np.ndarray):
        self.mean = np.asarray(mean, dtype=float)
        std = np.asarray(std, dtype=float)
        self.std = np.where(std > 0, std, 1.0)

    @classmethod
    def fit(cls, train_values: np.ndarray) -> "Normalizer":
        return cls(train_values.mean(axis=0), train_values.std(axis=0))

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def invert(self, z: np.ndarray) -> np.ndarray:
        return z * self.std + self.mean


@dataclass(frozen=True)
class WindowSet:
    """Stride-1 supervision windows over one segment, materialized lazily.

    ``label_len`` is carried for interface parity; the heads do not use it.
    """

    values: np.ndarray
    seq_len: int
    label_len: int
    pred_len: int
    in_cols: tuple[int, ...]
    out_cols: tuple[int, ...]
    warning: bool = False
    _inputs: np.ndarray = field(init=False, repr=False, compare=False)
    _targets: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        n = len(self)
        span = self.seq_len + self.pred_len
        if n:
            view = sliding_window_view(self.values, span, axis=0)[:n]  # n x C x span
            view = view.transpose(0, 2, 1)
            object.__setattr__(self, "_inputs", view[:, : self.seq_len][:, :, list(self.in_cols)])
            object.__setattr__(self, "_targets", view[:, self.seq_len :][:, :, list(self.out_cols)])
        else:
            object.__setattr__(self, "_inputs", np.empty((0, self.seq_len, len(self.in_cols))))
            object.__setattr__(self, "_targets", np.empty((0, self.pred_len, len(self.out_cols))))

    def __len__(self) -> int:
        return max(0, len(self.values) - self.seq_len - self.pred_len + 1)

    @property
    def inputs(self) -> np.ndarray:
        return self._inputs

    @property
    def targets(self) -> np.ndarray:
        return self._targets

    def batch(self, idx) -> tuple[np.ndarray, np.ndarray]:
        return self._inputs[idx], self._targets[idx]


def make_windows(
    segment,
    seq_len: int,
    label_len: int,
    pred_len: int,
    in_cols: Sequence[int] | None = None,
    out_cols: Sequence[int] | None = None,
) -> WindowSet:
    values = segment.values if isinstance(segment, Segment) else np.asarray(segment)
    if values.ndim == 1:
        values = values[:, None]
    cols = tuple(range(values.shape[1]))
    short = len(values) < seq_len + pred_len
    if short:
        warnings.warn(
            f"segment of length {len(values)} is shorter than seq_len + pred_len = {seq_len + pred_len}",
            stacklevel=2,
        )
    return WindowSet(
        values=values,
        seq_len=seq_len,
        label_len=label_len,
        pred_len=pred_len,
        in_cols=tuple(in_cols) if in_cols is not None else cols,
        out_cols=tuple(out_cols) if out_cols is not None else cols,
        warning=short,
    )


@dataclass(frozen=True)
class Dims:
    seq_len: int
    pred_len: int
    c_in: int
    c_out: int
    target_in: int = 0

    def __post_init__(self):
        if min(self.seq_len, self.pred_len, self.c_in, self.c_out) < 1:
            raise ValueError("all dimensions must be positive")
        if self.c_out not in (1, self.c_in):
            raise ValueError("c_out must equal c_in or 1")


@dataclass(frozen=True)
class ForecastData:
    """Normalized, windowed train/val/test sets for one dataset."""

    name: str
    train: WindowSet
    val: WindowSet
    test: WindowSet
    normalizer: Normalizer
    dims: Dims


def prepare_data(
    dataset: Dataset,
    seq_len: int = 96,
    label_len: int = 48,
    pred_len: int = 96,
    ratios: Sequence[float] = (0.7, 0.1, 0.2),
) -> ForecastData:
    train, val, test = chrono_split(dataset.values, ratios, min_len=seq_len + pred_len)
    norm = Normalizer.fit(train.values)
    z = norm.apply(dataset.values)
    sets = [
        make_windows(z[s.start : s.stop], seq_len, label_len, pred_len, dataset.input_columns, dataset.output_columns)
        for s in (train, val, test)
    ]
    dims = Dims(seq_len, pred_len, dataset.c_in, dataset.c_out, dataset.target_in)
    return ForecastData(dataset.name, *sets, normalizer=norm, dims=dims)
