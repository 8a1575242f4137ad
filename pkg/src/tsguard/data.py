"""Hourly per-station traffic: CSV ingestion, synthesis, normalisation, windowing, splits."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

HOURS_PER_WEEK = 168
OFFSETS = (24, 2, 1)
CSV_COLUMNS = ("station_id", "hour_index", "value")
DEFAULT_NOISE_SCALE = 0.06


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class StationSeries:
    station_id: str
    values: np.ndarray
    vmin: float | None = None
    vmax: float | None = None

    @property
    def normalized(self) -> bool:
        return self.vmin is not None

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class WindowedDataset:
    """Parallel arrays, one entry per window.

    ``X[i] = (v[t-24], v[t-2], v[t-1])`` and ``Y[i] = v[t]`` for ``t = hours[i]``.
    """

    station_ids: np.ndarray
    X: np.ndarray
    Y: np.ndarray
    hours: np.ndarray

    def __len__(self) -> int:
        return len(self.Y)

    def subset(self, idx) -> "WindowedDataset":
        return WindowedDataset(self.station_ids[idx], self.X[idx], self.Y[idx], self.hours[idx])

    def with_inputs(self, X: np.ndarray) -> "WindowedDataset":
        return replace(self, X=np.asarray(X, dtype=np.float64))

    @staticmethod
    def concat(parts: Sequence["WindowedDataset"]) -> "WindowedDataset":
        return WindowedDataset(
            np.concatenate([p.station_ids for p in parts]),
            np.concatenate([p.X for p in parts]),
            np.concatenate([p.Y for p in parts]),
            np.concatenate([p.hours for p in parts]),
        )


def load_csv(path) -> list[StationSeries]:
    """Read ``station_id,hour_index,value`` rows into one series per station."""
    text = Path(path).read_text(encoding="utf-8")
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None:
        raise DataError(f"{path}: empty file")
    missing = [c for c in CSV_COLUMNS if c not in reader.fieldnames]
    if missing:
        raise DataError(f"{path}: missing column(s) {', '.join(missing)}")
    rows: dict[str, dict[int, float]] = {}
    for lineno, row in enumerate(reader, start=2):
        sid = row["station_id"]
        try:
            hour = int(row["hour_index"])
            value = float(row["value"])
        except (TypeError, ValueError):
            raise DataError(f"{path}:{lineno}: non-numeric hour_index or value") from None
        if not math.isfinite(value):
            raise DataError(f"{path}:{lineno}: non-finite value")
        hours = rows.setdefault(sid, {})
        if hour in hours:
            raise DataError(f"{path}:{lineno}: duplicate row for station {sid} hour {hour}")
        hours[hour] = value
    if not rows:
        raise DataError(f"{path}: no data rows")
    out = []
    for sid in sorted(rows):
        hours = rows[sid]
        ordered = sorted(hours)
        for expected, got in enumerate(ordered, start=ordered[0]):
            if got != expected:
                raise DataError(f"station {sid}: missing hour {expected}")
        out.append(StationSeries(sid, np.array([hours[h] for h in ordered], dtype=np.float64)))
    return out


def write_csv(series: Iterable[StationSeries], path) -> None:
    lines = [",".join(CSV_COLUMNS)]
    for s in series:
        lines.extend(f"{s.station_id},{h},{v!r}" for h, v in enumerate(s.values.tolist()))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def generate_synthetic(n_stations: int = 100, n_weeks: int = 8, seed: int = 0,
                       noise_scale: float = DEFAULT_NOISE_SCALE) -> list[StationSeries]:
    """Daily cycle times a weekday/weekend level on a per-station baseline, plus noise.

    Values are positive raw volumes; normalise before use.
    """
    if n_stations < 1 or n_weeks < 2:
        raise DataError("need at least 1 station and 2 weeks")
    if noise_scale < 0:
        raise DataError("noise_scale must be nonnegative")
    rng = np.random.default_rng(seed)
    hours = np.arange(n_weeks * HOURS_PER_WEEK)
    hour_of_day = hours % 24
    day_of_week = (hours // 24) % 7
    out = []
    width = len(str(n_stations - 1))
    for s in range(n_stations):
        base = rng.uniform(50.0, 500.0)
        peak = rng.uniform(11.0, 16.0)
        floor = rng.uniform(0.05, 0.2)
        weekend = rng.uniform(0.5, 0.8)
        daily = 0.5 * (1.0 + np.cos(2.0 * np.pi * (hour_of_day - peak) / 24.0))
        weekly = np.where(day_of_week >= 5, weekend, 1.0)
        level = base * (floor + (1.0 - floor) * daily * weekly)
        noise = rng.normal(0.0, noise_scale * base, size=hours.size)
        values = np.abs(level + noise) + 1e-3 * base
        out.append(StationSeries(f"s{s:0{width}d}", values))
    return out


def normalize(series: StationSeries, train_hours: int | None = None) -> StationSeries:
    """Min-max scale with statistics from the first ``train_hours`` values (all if None)."""
    if len(series) == 0:
        raise DataError(f"station {series.station_id}: empty series")
    fit = series.values if train_hours is None else series.values[:train_hours]
    if fit.size == 0:
        raise DataError(f"station {series.station_id}: no training hours")
    lo, hi = float(fit.min()), float(fit.max())
    if hi == lo:
        raise DataError(f"station {series.station_id}: constant training series")
    return StationSeries(series.station_id, (series.values - lo) / (hi - lo), lo, hi)


def denormalize(series: StationSeries) -> StationSeries:
    if not series.normalized:
        raise DataError(f"station {series.station_id}: not normalised")
    return StationSeries(series.station_id, series.values * (series.vmax - series.vmin) + series.vmin)


def window(series: StationSeries, offsets: Sequence[int] = OFFSETS) -> WindowedDataset:
    """One window per target hour ``t`` in ``[max(offsets), len)``, oldest lag first."""
    start = max(offsets)
    n = len(series)
    if n <= start:
        raise DataError(f"station {series.station_id}: series of length {n} too short for lag {start}")
    t = np.arange(start, n)
    X = np.stack([series.values[t - o] for o in sorted(offsets, reverse=True)], axis=1)
    return WindowedDataset(np.full(t.size, series.station_id, dtype=object), X, series.values[t].copy(), t)


def split(dataset: WindowedDataset, train_weeks: int = 7, test_weeks: int = 1,
          ) -> tuple[WindowedDataset, WindowedDataset]:
    """Partition by target hour: the first ``train_weeks`` go to train, the next ``test_weeks`` to test."""
    boundary = train_weeks * HOURS_PER_WEEK
    end = (train_weeks + test_weeks) * HOURS_PER_WEEK
    if len(dataset) == 0 or dataset.hours.max() < end - 1:
        raise DataError(f"series must span {train_weeks + test_weeks} weeks ({end} hours)")
    train = dataset.hours < boundary
    test = (dataset.hours >= boundary) & (dataset.hours < end)
    return dataset.subset(train), dataset.subset(test)


def select_stations(all_series: Sequence[StationSeries], count: int, seed: int) -> list[StationSeries]:
    """Uniform sample without replacement, returned sorted by station id."""
    if count > len(all_series) or count < 1:
        raise DataError(f"cannot select {count} of {len(all_series)} stations")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(all_series), size=count, replace=False)
    return sorted((all_series[i] for i in idx), key=lambda s: s.station_id)


def mean_normalized_std(series: Sequence[StationSeries], train_hours: int | None = None) -> float:
    return float(np.mean([normalize(s, train_hours).values.std() for s in series]))


def prepare(series: Sequence[StationSeries], train_weeks: int = 7, test_weeks: int = 1,
            ) -> tuple[WindowedDataset, WindowedDataset]:
    """Normalise each station on its training hours, window, and split."""
    train_parts, test_parts = [], []
    for s in series:
        tr, te = split(window(normalize(s, train_weeks * HOURS_PER_WEEK)), train_weeks, test_weeks)
        train_parts.append(tr)
        test_parts.append(te)
    return WindowedDataset.concat(train_parts), WindowedDataset.concat(test_parts)
