"""
Forecast protocols and error metrics.

A progressive forecast runs the fitted model forward from the last training
day, feeding each prediction into the next step. A rolling forecast refits on
a sliding window and scores one-step-ahead predictions. Both return a
:class:`ForecastResult`; :func:`error_metrics` turns predicted/actual pairs
into the mean and median of absolute and percentage errors.
"""
from __future__ import annotations

import csv
import datetime as dt
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, PolicyError
from .fitting import FitConfig, encode, fit
from .model import FullState, simulate
from .spline import NATURAL_LINEAR

log = logging.getLogger(__name__)

FORECAST_SERIES = ("R", "C", "D_C")
PROGRESSIVE = "progressive"
ROLLING = "rolling"
METRIC_FIELDS = ("abs_mean", "abs_median", "rel_mean", "rel_median")


@dataclass
class ForecastResult:
    """Predicted (and, when known, actual) values of R, C and D_C.

    ``days`` are indices relative to the first day of the series the
    predictions refer to; ``dates`` are the matching calendar days.
    """

    protocol: str
    horizon: int
    days: np.ndarray
    dates: tuple
    predicted: dict
    actual: dict | None = None
    method: str = "CURNDS"
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.protocol not in (PROGRESSIVE, ROLLING):
            raise ArgumentError(f"unknown forecast protocol {self.protocol!r}")
        self.days = np.asarray(self.days, dtype=int)
        for name in FORECAST_SERIES:
            v = np.asarray(self.predicted[name], dtype=float)
            if len(v) != self.horizon:
                raise ArgumentError(f"{name}: expected {self.horizon} predictions, got {len(v)}")
            self.predicted[name] = v
            if self.actual is not None:
                self.actual[name] = np.asarray(self.actual[name], dtype=float)

    def metrics(self):
        """Per-series :class:`MetricRow`; needs actuals."""
        if self.actual is None:
            raise ArgumentError("no actual values to score against")
        return {s: error_metrics(self.predicted[s], self.actual[s]) for s in FORECAST_SERIES}

    def rows(self):
        """Long-format plot data: (day, date, series, predicted, actual)."""
        out = []
        for name in FORECAST_SERIES:
            for i in range(self.horizon):
                act = None if self.actual is None else float(self.actual[name][i])
                out.append((int(self.days[i]), self.dates[i].isoformat(), name,
                            float(self.predicted[name][i]), act))
        return out

    def write_csv(self, path, header_lines=()):
        with open(path, "w", newline="") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            w = csv.writer(fh)
            w.writerow(("day", "date", "method", "series", "predicted", "actual"))
            for day, date, name, pred, act in self.rows():
                w.writerow((day, date, self.method, name, repr(pred), "" if act is None else repr(act)))

    def to_dict(self):
        return {
            "protocol": self.protocol,
            "method": self.method,
            "horizon": self.horizon,
            "days": self.days.tolist(),
            "dates": [d.isoformat() for d in self.dates],
            "predicted": {k: v.tolist() for k, v in self.predicted.items()},
            "actual": None if self.actual is None else {k: v.tolist() for k, v in self.actual.items()},
        }


@dataclass(frozen=True)
class MetricRow:
    """Error summary of one series. Relative errors are percentages."""

    abs_mean: float
    abs_median: float
    rel_mean: float
    rel_median: float
    count: int
    rel_excluded: int

    def to_dict(self):
        return {"abs_mean": self.abs_mean, "abs_median": self.abs_median,
                "rel_mean": self.rel_mean, "rel_median": self.rel_median,
                "count": self.count, "rel_excluded": self.rel_excluded}


def _median(x):
    # average of the two central order statistics for even counts
    x = np.sort(np.asarray(x, dtype=float))
    m = len(x)
    if m % 2:
        return float(x[m // 2])
    return float((x[m // 2 - 1] + x[m // 2]) / 2.0)


def error_metrics(predicted, actual):
    """Absolute and percentage errors of ``predicted`` against ``actual``.

    Days with ``actual == 0`` are left out of the percentage errors and counted
    in ``rel_excluded``. If every actual is zero the relative entries are NaN.
    Means use correctly rounded summation, so they do not depend on ordering.
    """
    p = np.asarray(predicted, dtype=float)
    y = np.asarray(actual, dtype=float)
    if p.ndim != 1 or y.ndim != 1 or len(p) != len(y):
        raise ArgumentError(f"predicted and actual lengths differ ({p.shape} vs {y.shape})")
    if len(y) == 0:
        raise ArgumentError("error metrics need at least one value")
    err = np.abs(y - p)
    keep = y > 0
    rel = 100.0 * err[keep] / y[keep]
    nan = float("nan")
    return MetricRow(
        abs_mean=math.fsum(err) / len(err),
        abs_median=_median(err),
        rel_mean=math.fsum(rel) / len(rel) if len(rel) else nan,
        rel_median=_median(rel) if len(rel) else nan,
        count=len(y),
        rel_excluded=int(np.count_nonzero(~keep)),
    )


class MetricsTable:
    """Method x series x {abs, rel} x {mean, median}, in insertion order."""

    def __init__(self):
        self.rows = {}

    def add(self, method, series_name, row):
        self.rows.setdefault(method, {})[series_name] = row

    def add_forecast(self, result):
        for name, row in result.metrics().items():
            self.add(result.method, name, row)

    @property
    def methods(self):
        return list(self.rows)

    def get(self, method, series_name):
        return self.rows[method][series_name]

    def header(self):
        cols = ["method"]
        for name in FORECAST_SERIES:
            cols += [f"{name}_{f}" for f in METRIC_FIELDS]
        return cols

    def table(self):
        out = []
        for method, per in self.rows.items():
            line = [method]
            for name in FORECAST_SERIES:
                r = per.get(name)
                line += [float("nan")] * 4 if r is None else [getattr(r, f) for f in METRIC_FIELDS]
            out.append(line)
        return out

    def write_csv(self, path, header_lines=()):
        with open(path, "w", newline="") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            w = csv.writer(fh)
            w.writerow(self.header())
            for line in self.table():
                w.writerow([line[0]] + [repr(float(v)) for v in line[1:]])

    def to_dict(self):
        return {m: {s: r.to_dict() for s, r in per.items()} for m, per in self.rows.items()}


def _future_dates(series, days):
    start = series.dates[0]
    return tuple(start + dt.timedelta(days=int(k)) for k in days)


def _actual_for(actual_series, dates):
    """Values of R, C, D_C on ``dates`` from a longer series, or None if any is missing."""
    if actual_series is None:
        return None
    pos = {d: i for i, d in enumerate(actual_series.dates)}
    if not all(d in pos for d in dates):
        return None
    idx = [pos[d] for d in dates]
    return {"R": actual_series.recovered[idx], "C": actual_series.confirmed_active[idx],
            "D_C": actual_series.deceased_confirmed[idx]}


def check_extrapolation(params, last_day, horizon):
    """Raise PolicyError if an unclamped natural-linear spline is needed past its knots."""
    for name, sp in zip(("r", "d", "rtilde", "dtilde", "h"), params.splines()):
        beyond = last_day + horizon - 1 > sp.span[1]
        if beyond and sp.extrapolation == NATURAL_LINEAR and sp.clamp is None:
            raise PolicyError(f"rate {name} would be extrapolated linearly without clamping "
                              f"past day {sp.span[1]:g}")


def last_state(fit_result):
    """Full state on the last training day: observed R, C, D_C, T plus the fitted latent stocks."""
    s = fit_result.series
    lat = fit_result.latent
    return FullState(lat.N[-1], lat.S[-1], lat.U[-1], lat.D_U[-1], s.recovered[-1],
                     s.confirmed_active[-1], s.deceased_confirmed[-1], s.tests[-1])


def progressive_forecast(fit_result, series=None, horizon=5, actual=None, extrapolation=None):
    """Iterate the fitted model ``horizon`` days past the end of training.

    Parameters
    ----------
    fit_result : FitResult
    series : EpidemicSeries, optional
        The training series; defaults to the one stored in the fit.
    horizon : int
    actual : EpidemicSeries, optional
        A series covering the forecast dates, used to fill ``actual``.
    extrapolation : str, optional
        Override the splines' extrapolation policy.
    """
    if isinstance(horizon, bool) or int(horizon) != horizon or horizon < 1:
        raise ArgumentError("horizon must be an integer >= 1")
    horizon = int(horizon)
    series = series if series is not None else fit_result.series
    if len(series) != len(fit_result.series) or series.dates[0] != fit_result.series.dates[0]:
        raise ArgumentError("the series does not match the one the fit was produced on")
    params = fit_result.params
    if extrapolation is not None:
        params = params.with_extrapolation(extrapolation)
    n = series.n
    check_extrapolation(params, n, horizon)
    traj = simulate(last_state(fit_result), params, horizon, start_day=n)
    days = np.arange(n + 1, n + horizon + 1)
    predicted = {name: traj.column(name)[1:] for name in FORECAST_SERIES}
    dates = _future_dates(series, days)
    result = ForecastResult(PROGRESSIVE, horizon, days, dates, predicted, _actual_for(actual, dates))
    result.extra["latent"] = {name: traj.column(name)[1:] for name in ("N", "S", "U", "D_U", "T")}
    return result


def shifted_theta(fit_result):
    """Warm start for the window one day later: rates re-sampled one day on,
    latent initials taken from day 1 of the fitted path."""
    params = fit_result.params
    shifted = [sp.with_values(sp(sp.knots + 1.0)) for sp in params.splines()]
    theta = encode(type(params)(params.powers, *shifted, u0=params.u0, s0=params.s0, du0=params.du0))
    lat = fit_result.latent
    theta[-3:] = lat.U[1], lat.S[1], lat.D_U[1]
    return theta


def curnds_one_step(window_series, config, warm=None, workers=1):
    """Fit one window and predict the next day. Returns (prediction dict, fit)."""
    extra = () if warm is None else (warm,)
    res = fit(window_series, config, workers=workers, extra_starts=extra)
    fc = progressive_forecast(res, window_series, 1)
    return {name: float(fc.predicted[name][0]) for name in FORECAST_SERIES}, res


def rolling_predictions(series, window, predictor, method):
    """Generic rolling protocol.

    ``predictor(window_series, position)`` returns next-day values of R, C and
    D_C. Positions run over the last training day ``k = window-1 .. L-2``.
    """
    L = len(series)
    if isinstance(window, bool) or int(window) != window:
        raise ArgumentError("window must be an integer")
    window = int(window)
    if window < 10:
        raise ArgumentError("rolling window must be at least 10 days")
    if window >= L:
        raise ArgumentError(f"window {window} leaves no day to predict in a series of {L}")
    preds = {name: [] for name in FORECAST_SERIES}
    for pos, k in enumerate(range(window - 1, L - 1)):
        win = series.window(k - window + 1, k + 1)
        out = predictor(win, pos)
        for name in FORECAST_SERIES:
            preds[name].append(out[name])
        log.info("%s rolling position %d/%d", method, pos + 1, L - window)
    days = np.arange(window, L)
    actual = {"R": series.recovered[window:], "C": series.confirmed_active[window:],
              "D_C": series.deceased_confirmed[window:]}
    dates = tuple(series.dates[window:])
    return ForecastResult(ROLLING, L - window, days, dates, preds, actual, method=method)


def rolling_forecast(series, window=30, config=None, warm_start=True, workers=1):
    """Refit CURNDS on each window of ``window`` days and predict the next day.

    With ``warm_start`` the previous window's solution, shifted by one day, is
    added to the random multi-start pool.
    """
    config = config or FitConfig()
    state = {"prev": None}

    def predictor(win, pos):
        warm = shifted_theta(state["prev"]) if (warm_start and state["prev"] is not None) else None
        out, res = curnds_one_step(win, config, warm, workers)
        state["prev"] = res
        return out

    return rolling_predictions(series, window, predictor, "CURNDS")
