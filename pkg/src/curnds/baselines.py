"""
Reference forecasters: a discrete SEIR model and Holt's linear-trend smoothing.

SEIR is fit by free-running simulation from (e0, i0) with the infectious
stock I matched to active confirmed cases C, and the cumulative removal
splits matched to R and D_C. Holt smoothing is applied to each series on its
own.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__
from .errors import ArgumentError, DegenerateError
from .fitting import (BOUND_MARGIN, BoundedProblem, FitConfig, InternalScaling,
                      default_weights, multistart)
from .forecast import (PROGRESSIVE, ForecastResult, _actual_for,
                       _future_dates, rolling_predictions)

SEIR_FIELDS = ("beta_c", "sigma", "gamma", "cfr", "e0", "i0")
SEIR_STOCKS = ("S", "E", "I", "R", "D")


@dataclass(frozen=True)
class SeirParams:
    beta_c: float
    sigma: float
    gamma: float
    cfr: float
    e0: float
    i0: float

    def __post_init__(self):
        for name in ("beta_c", "sigma", "gamma"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ArgumentError(f"{name} must lie in [0, 1], got {v}")
        if not 0.0 <= self.cfr <= 1.0:
            raise ArgumentError("cfr must lie in [0, 1]")
        if not (self.e0 >= 0 and self.i0 >= 0):
            raise ArgumentError("e0 and i0 must be non-negative")

    def as_array(self):
        return np.array([getattr(self, f) for f in SEIR_FIELDS])

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**{f: float(d[f]) for f in SEIR_FIELDS})


def seir_run(theta, population, r0, dc0, steps):
    """Batched SEIR simulation.

    ``theta`` has rows (beta_c, sigma, gamma, cfr, e0, i0). Returns an array of
    shape (5, B, steps + 1) holding S, E, I, R, D, where R and D start from the
    observed cumulative counts.
    """
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    beta, sigma, gamma, cfr, e0, i0 = theta.T
    B = theta.shape[0]
    out = np.empty((5, B, steps + 1))
    S = np.maximum(population - r0 - dc0 - e0 - i0, 0.0)
    E, I = e0.copy(), i0.copy()
    R, D = np.full(B, float(r0)), np.full(B, float(dc0))
    out[:, :, 0] = S, E, I, R, D
    for k in range(steps):
        inf = np.minimum(beta * S * I / population, S)
        onset = sigma * E
        removed = gamma * I
        S, E, I = S - inf, E + inf - onset, I + onset - removed
        R, D = R + (1.0 - cfr) * removed, D + cfr * removed
        out[:, :, k + 1] = S, E, I, R, D
    return out


def seir_simulate(params, population, r0, dc0, steps):
    """Single-trajectory SEIR run; dict of stock name to array of length steps + 1."""
    out = seir_run(params.as_array(), population, r0, dc0, steps)
    return {name: out[i, 0] for i, name in enumerate(SEIR_STOCKS)}


class SeirObjective:
    """Weighted SSE of simulated I, R, D against observed C, R, D_C (days 0..n)."""

    def __init__(self, series, config):
        self.series = series
        self.X = series.observed()[:3]
        w = (np.asarray(config.weights, dtype=float) if config.weights is not None
             else default_weights(series))
        self.weights = w[:3]
        self.lo, self.hi = seir_bounds(series)

    def residuals(self, thetas):
        thetas = np.clip(np.atleast_2d(thetas), self.lo, self.hi)
        s = self.series
        sim = seir_run(thetas, s.population, s.recovered[0], s.deceased_confirmed[0], s.n)
        R, C, D = self.X
        return np.stack([R - sim[3], C - sim[2], D - sim[4]], axis=1)

    def __call__(self, thetas):
        res = self.residuals(thetas)
        return np.einsum("bik,i->b", res ** 2, self.weights)


def seir_bounds(series):
    free = float(series.population - series.recovered[0] - series.deceased_confirmed[0])
    lo = np.array([BOUND_MARGIN, BOUND_MARGIN, BOUND_MARGIN, 0.0, 0.0, 0.0])
    hi = np.array([1 - BOUND_MARGIN, 1 - BOUND_MARGIN, 1 - BOUND_MARGIN, 1.0, free, free])
    return lo, hi


def seir_starts(series, config):
    rng = np.random.default_rng(config.seed)
    C = series.confirmed_active[:-1]
    if np.any(C <= 0):
        raise DegenerateError("confirmed stock is not positive on every training day")
    dR = np.diff(series.recovered)
    dD = np.diff(series.deceased_confirmed)
    gamma_hat = float(np.clip(np.mean((dR + dD) / C), 1e-3, 0.9))
    removed = float(np.sum(dR + dD))
    cfr_hat = float(np.sum(dD) / removed) if removed > 0 else 0.0
    C0 = float(series.confirmed_active[0])
    lo, hi = seir_bounds(series)
    starts = np.empty((config.k0, 6))
    for i in range(config.k0):
        starts[i] = (10.0 ** rng.uniform(-2.0, math.log10(0.9)), rng.uniform(0.05, 0.9),
                     gamma_hat * rng.uniform(0.7, 1.3), cfr_hat,
                     C0 * rng.uniform(0.0, 2.0), C0 * rng.uniform(0.9, 1.1))
    return np.clip(starts, lo, hi)


@dataclass
class SeirFit:
    params: SeirParams
    objective: float
    series: object
    config: FitConfig
    trajectory: dict
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "artifact": "curnds",
            "version": __version__,
            "method": "SEIR",
            "seed": self.config.seed,
            "config": self.config.to_dict(),
            "objective": self.objective,
            "params": self.params.to_dict(),
            "diagnostics": self.diagnostics,
        }


def seir_fit(series, config=None, workers=1):
    """Fit :class:`SeirParams` with the shared multi-start L-BFGS-B driver."""
    config = config or FitConfig()
    if len(series) < 10:
        raise ArgumentError("fitting needs a series of at least 10 days")
    obj = SeirObjective(series, config)
    lo, hi = obj.lo, obj.hi
    scale = np.ones(6)
    scale[4:] = max(float(series.confirmed_active[0]), 1.0)
    problem = BoundedProblem(obj, InternalScaling(scale, [], lo, hi), lo, hi)
    best, diagnostics = multistart(problem, list(seir_starts(series, config)), config, workers)
    params = SeirParams(*(float(v) for v in best.theta))
    traj = seir_simulate(params, series.population, series.recovered[0],
                         series.deceased_confirmed[0], series.n)
    return SeirFit(params, float(obj(best.theta[None, :])[0]), series, config, traj, diagnostics)


def _seir_continue(seir, horizon):
    """Simulate ``horizon`` days past the end of training from the fitted path."""
    s = seir.series
    total = seir_simulate(seir.params, s.population, s.recovered[0], s.deceased_confirmed[0],
                          s.n + horizon)
    return {"R": total["R"][s.n + 1:], "C": total["I"][s.n + 1:], "D_C": total["D"][s.n + 1:]}


def seir_forecast(seir, horizon=5, actual=None):
    """Progressive SEIR forecast continuing the fitted free-run trajectory."""
    if isinstance(horizon, bool) or int(horizon) != horizon or horizon < 1:
        raise ArgumentError("horizon must be an integer >= 1")
    horizon = int(horizon)
    s = seir.series
    days = np.arange(s.n + 1, s.n + horizon + 1)
    dates = _future_dates(s, days)
    return ForecastResult(PROGRESSIVE, horizon, days, dates, _seir_continue(seir, horizon),
                          _actual_for(actual, dates), method="SEIR")


def seir_rolling(series, window=30, config=None, workers=1):
    config = config or FitConfig()

    def predictor(win, pos):
        pred = _seir_continue(seir_fit(win, config, workers), 1)
        return {k: float(v[0]) for k, v in pred.items()}

    return rolling_predictions(series, window, predictor, "SEIR")


@dataclass(frozen=True)
class HoltParams:
    """Smoothing constants and the initial level and trend."""

    level_alpha: float
    trend_beta: float
    level0: float
    trend0: float
    sse: float = 0.0

    def __post_init__(self):
        for name in ("level_alpha", "trend_beta"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ArgumentError(f"{name} must lie strictly inside (0, 1), got {v}")


def _holt_pass(y, a, b):
    """Run the recursions for arrays of constants ``a``, ``b``.

    Returns the final level, final trend and one-step SSE, each shaped like ``a``.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    level = np.full(a.shape, y[0])
    trend = np.full(a.shape, y[1] - y[0])
    sse = np.zeros(a.shape)
    for t in range(1, len(y)):
        pred = level + trend
        sse += (y[t] - pred) ** 2
        new_level = a * y[t] + (1.0 - a) * pred
        trend = b * (new_level - level) + (1.0 - b) * trend
        level = new_level
    return level, trend, sse


def holt_fit(values):
    """Choose (level_alpha, trend_beta) by a coarse grid then a finer grid around its best."""
    y = np.asarray(values, dtype=float)
    if y.ndim != 1 or len(y) < 3:
        raise ArgumentError("Holt smoothing needs at least 3 values")
    if not np.all(np.isfinite(y)):
        raise ArgumentError("Holt smoothing needs finite values")
    eps = 1e-3

    def search(ga, gb):
        A, B = np.meshgrid(ga, gb, indexing="ij")
        _, _, sse = _holt_pass(y, A, B)
        # first minimum in grid order keeps ties deterministic
        i = np.unravel_index(np.argmin(sse), sse.shape)
        return float(A[i]), float(B[i]), float(sse[i])

    coarse = np.linspace(0.05, 0.95, 19)
    a0, b0, _ = search(coarse, coarse)
    fine = np.linspace(-0.05, 0.05, 41)
    a1, b1, sse = search(np.clip(a0 + fine, eps, 1 - eps), np.clip(b0 + fine, eps, 1 - eps))
    return HoltParams(a1, b1, float(y[0]), float(y[1] - y[0]), sse)


def holt_forecast(values, horizon, params=None):
    """``horizon`` forecasts ``l_t + h b_t`` past the last value."""
    if isinstance(horizon, bool) or int(horizon) != horizon or horizon < 1:
        raise ArgumentError("horizon must be an integer >= 1")
    y = np.asarray(values, dtype=float)
    params = params or holt_fit(y)
    level, trend, _ = _holt_pass(y, params.level_alpha, params.trend_beta)
    return float(level) + np.arange(1, int(horizon) + 1) * float(trend)


def _series_values(series):
    return {"R": series.recovered, "C": series.confirmed_active, "D_C": series.deceased_confirmed}


def holt_progressive(series, horizon=5, actual=None):
    if isinstance(horizon, bool) or int(horizon) != horizon or horizon < 1:
        raise ArgumentError("horizon must be an integer >= 1")
    horizon = int(horizon)
    preds = {name: holt_forecast(v, horizon) for name, v in _series_values(series).items()}
    days = np.arange(series.n + 1, series.n + horizon + 1)
    dates = _future_dates(series, days)
    return ForecastResult(PROGRESSIVE, horizon, days, dates, preds, _actual_for(actual, dates),
                          method="ES")


def holt_rolling(series, window=30):
    def predictor(win, pos):
        return {name: float(holt_forecast(v, 1)[0]) for name, v in _series_values(win).items()}

    return rolling_predictions(series, window, predictor, "ES")


BASELINES = ("seir", "es")
