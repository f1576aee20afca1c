"""Univariate time-series containers, lag matrices, chronological splits and scaling."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class SeriesError(ValueError):
    """Raised for malformed series, splits, or CSV input."""


@dataclass(frozen=True)
class TimeSeries:
    values: np.ndarray
    name: str = "series"
    granularity: str = ""

    def __post_init__(self):
        arr = np.array(self.values, dtype=float).reshape(-1)
        if arr.size < 2:
            raise SeriesError(f"series {self.name!r} needs at least 2 values, got {arr.size}")
        bad = np.flatnonzero(~np.isfinite(arr))
        if bad.size:
            raise SeriesError(f"series {self.name!r} has non-finite value at index {bad[0]}")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    def __len__(self):
        return self.values.size


@dataclass(frozen=True)
class LagDataset:
    """Supervised view of a series.

    Row ``i`` of ``inputs`` is ``[y[i+p-1], ..., y[i]]`` (most recent lag first)
    and ``targets[i]`` is ``y[i+p]``.
    """

    inputs: np.ndarray
    targets: np.ndarray
    lag_count: int

    def __len__(self):
        return self.targets.size


@dataclass(frozen=True)
class SplitSpec:
    train_len: int
    calibration_len: int = 0
    test_len: int = 0

    def __post_init__(self):
        for name in ("train_len", "calibration_len", "test_len"):
            if getattr(self, name) < 0:
                raise SeriesError(f"{name} must be non-negative")

    @property
    def total(self) -> int:
        return self.train_len + self.calibration_len + self.test_len

    @classmethod
    def with_calibration(cls, train_len: int, test_len: int, fraction: float = 0.1) -> "SplitSpec":
        """Carve the last ``fraction`` of a training segment off as calibration data."""
        cal = int(math.floor(train_len * fraction))
        return cls(train_len - cal, cal, test_len)


@dataclass(frozen=True)
class Scaler:
    mean: float
    std: float

    def __post_init__(self):
        if not (self.std > 0 and math.isfinite(self.std)):
            raise SeriesError("scaler std must be strictly positive")

    @classmethod
    def fit(cls, values) -> "Scaler":
        arr = np.asarray(values, dtype=float)
        std = float(arr.std())
        if std == 0.0:
            raise SeriesError("cannot fit a scaler on a constant segment (std = 0)")
        return cls(float(arr.mean()), std)

    def transform(self, values):
        return (np.asarray(values, dtype=float) - self.mean) / self.std

    def inverse(self, values):
        return np.asarray(values, dtype=float) * self.std + self.mean


def load_csv(path, column: str, name: str | None = None, granularity: str = "") -> TimeSeries:
    """Read one numeric column of a headed UTF-8 CSV file into a :class:`TimeSeries`.

    Row numbers in error messages count data rows from 1 (the header is row 0).
    """
    path = Path(path)
    if not path.is_file():
        raise SeriesError(f"file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or column not in reader.fieldnames:
            raise SeriesError(f"column {column!r} not found in {path} (have {reader.fieldnames})")
        values = []
        for row_idx, row in enumerate(reader, start=1):
            cell = (row.get(column) or "").strip()
            try:
                val = float(cell)
            except ValueError:
                raise SeriesError(f"row {row_idx}: non-numeric value {cell!r} in column {column!r}") from None
            if not math.isfinite(val):
                raise SeriesError(f"row {row_idx}: non-finite value {cell!r} in column {column!r}")
            values.append(val)
    return TimeSeries(np.array(values), name=name or path.stem, granularity=granularity)


def write_csv(path, series: TimeSeries) -> None:
    """Write ``t,value`` rows; ``repr`` floats keep the file loss-free."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "value"])
        for t, v in enumerate(series.values):
            w.writerow([t, repr(float(v))])


def lag_matrix(values, p: int) -> np.ndarray:
    """Lag vectors for every target index ``t >= p`` of a raw array."""
    arr = np.asarray(values, dtype=float)
    n = arr.size - p
    return np.column_stack([arr[p - k : p - k + n] for k in range(1, p + 1)])


def make_lags(series: TimeSeries | np.ndarray, p: int) -> LagDataset:
    values = series.values if isinstance(series, TimeSeries) else np.asarray(series, dtype=float)
    if p < 1:
        raise SeriesError(f"lag count must be >= 1, got {p}")
    if p >= values.size:
        raise SeriesError(f"lag count {p} must be smaller than the series length {values.size}")
    return LagDataset(lag_matrix(values, p), values[p:].copy(), p)


def split(series: TimeSeries, spec: SplitSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Cut ``series`` into contiguous train / calibration / test arrays.

    Plain arrays are returned because segments may be empty.
    """
    n = len(series)
    if spec.total != n:
        raise SeriesError(f"split lengths sum to {spec.total}, series has {n} values")
    b = split_bounds(spec)
    return tuple(series.values[lo:hi] for lo, hi in (b["train"], b["calibration"], b["test"]))


def split_bounds(spec: SplitSpec) -> dict[str, tuple[int, int]]:
    """Half-open index ranges of each segment."""
    a = spec.train_len
    b = a + spec.calibration_len
    return {"train": (0, a), "calibration": (a, b), "test": (b, b + spec.test_len)}
