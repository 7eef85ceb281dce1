"""Noiseless series generated from known parameters, for oracle tests and demos."""
from __future__ import annotations

import datetime as dt

import numpy as np

from .data import series_from_arrays
from .fitting import FitConfig, spline_knots
from .model import CurndsParams, FullState, PowerParams, simulate
from .spline import HOLD_LAST, UNIT_CLAMP, RateSpline

# infection and confirmation power indices estimated for the wild-type period
WILD_TYPE_POWERS = {"alpha": 0.9, "beta": 0.05, "rho": 0.3, "mu": 0.4}


def generate(params, population, r0, c0, dc0, t0, length, start=dt.date(2020, 9, 1)):
    """Simulate ``length`` days and return (series, trajectory)."""
    n0 = population - (params.u0 + params.s0 + params.du0 + r0 + c0 + dc0)
    init = FullState(n0, params.s0, params.u0, params.du0, r0, c0, dc0, t0)
    traj = simulate(init, params, length - 1)
    series = series_from_arrays(traj.column("R"), traj.column("C"), traj.column("D_C"),
                                traj.column("T"), population, start=start)
    return series, traj


def wild_type_params(length=30, config=None, extrapolation=HOLD_LAST):
    """Ground-truth parameters of a wild-type-like outbreak on ``length`` days.

    Knots follow ``config`` (default knot counts) so the truth lies exactly in
    the fitted model class.
    """
    config = config or FitConfig()
    probe = series_from_arrays(np.zeros(length), np.ones(length), np.zeros(length),
                               np.zeros(length), 10)
    knots = spline_knots(config, probe)

    def curve(k, base, amp, phase):
        x = k / k[-1]
        return base * (1.0 + amp * np.sin(2.0 * np.pi * x + phase))

    r = RateSpline(knots[0], curve(knots[0], 0.07, 0.15, 0.0), UNIT_CLAMP, extrapolation)
    d = RateSpline(knots[1], curve(knots[1], 0.002, 0.2, 1.0), UNIT_CLAMP, extrapolation)
    rt = RateSpline(knots[2], curve(knots[2], 0.08, 0.2, 2.0), UNIT_CLAMP, extrapolation)
    dtl = RateSpline(knots[3], curve(knots[3], 0.004, 0.25, 0.5), UNIT_CLAMP, extrapolation)
    h = RateSpline(knots[4], curve(knots[4], 0.003, 0.1, 1.5), UNIT_CLAMP, extrapolation)
    powers = PowerParams(phi=0.25, psi=0.7, **WILD_TYPE_POWERS)
    return CurndsParams(powers, r, d, rt, dtl, h, u0=1300.0, s0=400.0, du0=20.0)


def wild_type_series(length=30, config=None):
    """(series, params, trajectory) for the default wild-type-like scenario."""
    params = wild_type_params(length, config)
    series, traj = generate(params, 8_500_000, r0=55_000.0, c0=3_000.0, dc0=5_800.0,
                            t0=1_500_000.0, length=length)
    return series, params, traj
