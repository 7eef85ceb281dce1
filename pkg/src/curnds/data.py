"""
Loading, validation and smoothing of daily epidemic series.

The canonical input is a CSV with the exact header

    date,recovered_cum,confirmed_active,deceased_cum,tests_cum

one row per consecutive day. ``confirmed_active`` is the active confirmed
stock C_k (not cumulative confirmations); the other three are cumulative.
"""
from __future__ import annotations

import csv
import datetime as dt
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import DataError, GapError, SchemaError, StateError

COLUMNS = ("date", "recovered_cum", "confirmed_active", "deceased_cum", "tests_cum")
MIN_LENGTH = 8
SMOOTHING_WINDOW = 7


@dataclass(frozen=True)
class EpidemicSeries:
    """Observed daily series R_k, C_k, D_{C,k}, T_k with population metadata.

    Attributes
    ----------
    dates : tuple of datetime.date
        Consecutive calendar days, one per observation.
    recovered, confirmed_active, deceased_confirmed, tests : np.ndarray
        Float arrays of equal length.
    population : int
        Total population P0 at the first date.
    smoothed : bool
        Whether :func:`smooth_7day` has been applied.
    """

    dates: tuple
    recovered: np.ndarray
    confirmed_active: np.ndarray
    deceased_confirmed: np.ndarray
    tests: np.ndarray
    population: int
    smoothed: bool = False

    def __post_init__(self):
        arrays = {}
        for name in ("recovered", "confirmed_active", "deceased_confirmed", "tests"):
            a = np.array(getattr(self, name), dtype=float)
            a.setflags(write=False)
            object.__setattr__(self, name, a)
            arrays[name] = a
        object.__setattr__(self, "dates", tuple(self.dates))
        n = len(self.dates)
        if any(len(a) != n for a in arrays.values()):
            raise DataError("all series must have the same length as dates")
        if n < MIN_LENGTH:
            raise DataError(f"series length {n} is below the minimum of {MIN_LENGTH}")
        for k in range(1, n):
            if self.dates[k] - self.dates[k - 1] != dt.timedelta(days=1):
                raise GapError(f"date gap before {self.dates[k].isoformat()}")
        for name, a in arrays.items():
            if not np.all(np.isfinite(a)):
                raise DataError(f"{name} contains non-finite values")
            bad = np.flatnonzero(a < 0)
            if bad.size:
                raise DataError(f"negative {name} at row {int(bad[0])}")
        if int(self.population) != self.population or self.population <= 0:
            raise DataError("population must be a positive integer")
        object.__setattr__(self, "population", int(self.population))
        observed = self.recovered + self.confirmed_active + self.deceased_confirmed
        if observed.max() > self.population:
            raise DataError("population is smaller than the observed R+C+D_C total")

    def __len__(self):
        return len(self.dates)

    @property
    def n(self):
        """Number of one-day transitions (length minus one)."""
        return len(self.dates) - 1

    def observed(self):
        """Stack of the four observed series, shape (4, length), order R, C, D_C, T."""
        return np.vstack([self.recovered, self.confirmed_active, self.deceased_confirmed, self.tests])

    def check_monotone(self):
        for name in ("recovered", "deceased_confirmed", "tests"):
            a = getattr(self, name)
            # one-ulp slack for rounding in the moving average
            tol = 1e-12 * max(1.0, float(np.abs(a).max()))
            bad = np.flatnonzero(np.diff(a) < -tol)
            if bad.size:
                raise DataError(f"cumulative series {name} decreases at row {int(bad[0]) + 1}")

    def window(self, start, stop):
        """Sub-series of rows ``start:stop``, keeping population and smoothing flag."""
        return replace(
            self,
            dates=self.dates[start:stop],
            recovered=self.recovered[start:stop],
            confirmed_active=self.confirmed_active[start:stop],
            deceased_confirmed=self.deceased_confirmed[start:stop],
            tests=self.tests[start:stop],
        )

    def to_dict(self):
        return {
            "dates": [d.isoformat() for d in self.dates],
            "recovered": self.recovered.tolist(),
            "confirmed_active": self.confirmed_active.tolist(),
            "deceased_confirmed": self.deceased_confirmed.tolist(),
            "tests": self.tests.tolist(),
            "population": self.population,
            "smoothed": self.smoothed,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            dates=[dt.date.fromisoformat(s) for s in d["dates"]],
            recovered=d["recovered"],
            confirmed_active=d["confirmed_active"],
            deceased_confirmed=d["deceased_confirmed"],
            tests=d["tests"],
            population=d["population"],
            smoothed=bool(d.get("smoothed", False)),
        )


def series_from_arrays(recovered, confirmed_active, deceased_confirmed, tests, population,
                       start=dt.date(2020, 9, 1), smoothed=False):
    """Build a series with consecutive dates beginning at ``start``."""
    n = len(recovered)
    dates = [start + dt.timedelta(days=k) for k in range(n)]
    return EpidemicSeries(dates, recovered, confirmed_active, deceased_confirmed, tests,
                          population, smoothed)


def load_csv(path, population):
    """Read a daily series CSV into an unsmoothed :class:`EpidemicSeries`.

    Raw decreases in the cumulative columns are accepted here; they are
    checked only after smoothing.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8-sig") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        missing = [c for c in COLUMNS if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing column(s) {', '.join(missing)}")
        if tuple(header) != COLUMNS:
            raise SchemaError(f"{path}: header must be exactly {','.join(COLUMNS)}")
        dates, values = [], []
        for i, row in enumerate(reader):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(COLUMNS):
                raise SchemaError(f"{path}: row {i} has {len(row)} fields, expected {len(COLUMNS)}")
            try:
                day = dt.date.fromisoformat(row[0].strip())
            except ValueError:
                raise DataError(f"{path}: row {i} has an invalid date {row[0]!r}") from None
            try:
                vals = [float(c) for c in row[1:]]
            except ValueError:
                raise DataError(f"{path}: row {i} has a non-numeric value") from None
            if any(not math.isfinite(v) for v in vals):
                raise DataError(f"{path}: row {i} has a non-finite value")
            if any(v < 0 for v in vals):
                raise DataError(f"{path}: negative value at row {i}")
            if dates and day - dates[-1] != dt.timedelta(days=1):
                if day <= dates[-1]:
                    raise GapError(f"{path}: dates not increasing at {day.isoformat()}")
                missing_day = dates[-1] + dt.timedelta(days=1)
                raise GapError(f"{path}: date gap, {missing_day.isoformat()} is missing")
            dates.append(day)
            values.append(vals)
    if not values:
        raise DataError(f"{path}: no data rows")
    v = np.array(values)
    return EpidemicSeries(dates, v[:, 0], v[:, 1], v[:, 2], v[:, 3], population, smoothed=False)


def trailing_mean(x, window=SMOOTHING_WINDOW):
    """Trailing moving average; the window is truncated at the left boundary."""
    x = np.asarray(x, dtype=float)
    return np.array([x[max(0, k - window + 1):k + 1].mean() for k in range(len(x))])


def smooth_7day(series):
    """Apply the trailing 7-day mean to every observed series."""
    if series.smoothed:
        raise StateError("series is already smoothed")
    out = replace(
        series,
        recovered=trailing_mean(series.recovered),
        confirmed_active=trailing_mean(series.confirmed_active),
        deceased_confirmed=trailing_mean(series.deceased_confirmed),
        tests=trailing_mean(series.tests),
        smoothed=True,
    )
    out.check_monotone()
    return out
