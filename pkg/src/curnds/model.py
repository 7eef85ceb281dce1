"""
Discrete-time CURNDS dynamics.

Seven stocks: non-infected N, self-healed S, unaware infected U, uncertified
deaths D_U, recovered R, active confirmed C and confirmed deaths D_C, plus the
cumulative test count T. One day moves

    N -> U    phi * U**alpha * N**beta
    U -> C    psi * U**rho * C**mu
    U -> S    rtilde(k) * U
    U -> D_U  dtilde(k) * U
    C -> R    r(k) * C
    C -> D_C  d(k) * C
    T += h(k) * (N + S + U)

All flows use the day-k state. When the outflows of a stock exceed it, they
are scaled down together so the stock lands on exactly zero.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, fields

import numpy as np

from .errors import ArgumentError, DegenerateError, InfeasibleError
from .spline import RateSpline

STOCKS = ("N", "S", "U", "D_U", "R", "C", "D_C")
COMPARTMENTS = STOCKS + ("T",)
POWER_MAX = 2.0


@dataclass(frozen=True)
class PowerParams:
    alpha: float
    beta: float
    rho: float
    mu: float
    phi: float
    psi: float

    def __post_init__(self):
        for name in ("alpha", "beta", "rho", "mu"):
            v = getattr(self, name)
            if not 0.0 < v <= POWER_MAX:
                raise ArgumentError(f"power {name}={v} outside (0, {POWER_MAX}]")
        for name in ("phi", "psi"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ArgumentError(f"rate scalar {name}={v} outside (0, 1)")


@dataclass(frozen=True)
class CurndsParams:
    """Power indices, rate scalars, the five rate splines and latent initials."""

    powers: PowerParams
    r_spline: RateSpline
    d_spline: RateSpline
    rtilde_spline: RateSpline
    dtilde_spline: RateSpline
    h_spline: RateSpline
    u0: float = 0.0
    s0: float = 0.0
    du0: float = 0.0

    def __post_init__(self):
        for name in ("u0", "s0", "du0"):
            if not getattr(self, name) >= 0:
                raise ArgumentError(f"{name} must be non-negative")

    def rates(self, days):
        """Clamped r, d, rtilde, dtilde, h at ``days``; array of shape (5, len(days))."""
        days = np.asarray(days, dtype=float)
        return np.vstack([s(days) for s in self.splines()])

    def splines(self):
        return (self.r_spline, self.d_spline, self.rtilde_spline, self.dtilde_spline, self.h_spline)

    def rate_sum_violations(self, n):
        """Days k < n where r+d > 1 or rtilde+dtilde > 1."""
        r, d, rt, dt, _ = self.rates(np.arange(n))
        return np.flatnonzero((r + d > 1.0) | (rt + dt > 1.0))

    def with_extrapolation(self, policy):
        return CurndsParams(
            self.powers,
            *[RateSpline(s.knots, s.values, s.clamp, policy) for s in self.splines()],
            u0=self.u0, s0=self.s0, du0=self.du0,
        )

    def to_dict(self):
        p = self.powers
        return {
            "alpha": p.alpha, "beta": p.beta, "rho": p.rho, "mu": p.mu,
            "phi": p.phi, "psi": p.psi,
            "r": self.r_spline.to_dict(), "d": self.d_spline.to_dict(),
            "rtilde": self.rtilde_spline.to_dict(), "dtilde": self.dtilde_spline.to_dict(),
            "h": self.h_spline.to_dict(),
            "u0": self.u0, "s0": self.s0, "du0": self.du0,
        }

    @classmethod
    def from_dict(cls, d):
        powers = PowerParams(d["alpha"], d["beta"], d["rho"], d["mu"], d["phi"], d["psi"])
        return cls(powers, *(RateSpline.from_dict(d[k]) for k in ("r", "d", "rtilde", "dtilde", "h")),
                   u0=float(d["u0"]), s0=float(d["s0"]), du0=float(d["du0"]))


@dataclass(frozen=True)
class FullState:
    N: float
    S: float
    U: float
    D_U: float
    R: float
    C: float
    D_C: float
    T: float

    def __post_init__(self):
        for f in fields(self):
            if not getattr(self, f.name) >= 0:
                raise InfeasibleError(f"state component {f.name} is negative")

    def total(self):
        return self.N + self.S + self.U + self.D_U + self.R + self.C + self.D_C

    def as_array(self):
        return np.array([getattr(self, c) for c in COMPARTMENTS])


@dataclass(frozen=True)
class LatentPath:
    """Unobserved trajectories N, S, U, D_U over the fitted days."""

    N: np.ndarray
    S: np.ndarray
    U: np.ndarray
    D_U: np.ndarray

    def __len__(self):
        return len(self.N)

    def to_dict(self):
        return {k: getattr(self, k).tolist() for k in ("N", "S", "U", "D_U")}

    @classmethod
    def from_dict(cls, d):
        return cls(*(np.asarray(d[k], dtype=float) for k in ("N", "S", "U", "D_U")))


@dataclass(frozen=True)
class Trajectory:
    """States for consecutive days; ``values`` has shape (len(days), 8)."""

    days: np.ndarray
    values: np.ndarray

    def __len__(self):
        return len(self.days)

    def __getitem__(self, i):
        return FullState(*(float(v) for v in self.values[i]))

    def column(self, name):
        return self.values[:, COMPARTMENTS.index(name)]

    def totals(self):
        return self.values[:, :len(STOCKS)].sum(axis=1)

    def write_csv(self, path, header_lines=()):
        with open(path, "w", newline="") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            w = csv.writer(fh)
            w.writerow(("day",) + COMPARTMENTS)
            for day, row in zip(self.days, self.values):
                w.writerow([int(day)] + [repr(float(v)) for v in row])


def power_flow(scale, a, pa, b, pb):
    """``scale * a**pa * b**pb``, defined as 0 when either base is 0."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    pos = (a > 0) & (b > 0)
    sa = np.where(pos, a, 1.0)
    sb = np.where(pos, b, 1.0)
    return np.where(pos, scale * sa ** pa * sb ** pb, 0.0)


def cap_outflows(stock, total):
    """Factor in [0, 1] that scales ``total`` outflow down to at most ``stock``."""
    safe = np.where(total > stock, total, 1.0)
    return np.where(total > stock, stock / safe, 1.0)


def advance(N, S, U, D_U, C, powers, rates):
    """One day of the unobserved block driven by confirmed stock ``C``.

    ``powers`` holds (alpha, beta, rho, mu, phi, psi) and ``rates`` holds
    (r, d, rtilde, dtilde, h) at day k; any argument may be an array for
    batched evaluation. Returns next (N, S, U, D_U), the confirmation flow g
    and the test increment.
    """
    alpha, beta, rho, mu, phi, psi = powers
    r, d, rt, dt, h = rates
    f = np.minimum(power_flow(phi, U, alpha, N, beta), N)
    g = power_flow(psi, U, rho, C, mu)
    heal = rt * U
    die = dt * U
    out = g + heal + die
    capped = out > U
    scale = cap_outflows(U, out)
    g, heal, die = g * scale, heal * scale, die * scale
    U_next = np.where(capped, 0.0, U - out) + f
    return N - f, S + heal, U_next, D_U + die, g, h * (N + S + U)


def resolve_confirmed(C, g, r, d):
    """Recoveries and confirmed deaths from C with the cap rule, plus next C."""
    rec = r * C
    dead = d * C
    out = rec + dead
    capped = out > C
    scale = cap_outflows(C, out)
    rec, dead = rec * scale, dead * scale
    return rec, dead, np.where(capped, 0.0, C - out) + g


def initial_state(series, params):
    """Day-0 state; N_0 closes the population identity."""
    N0 = series.population - (params.u0 + params.s0 + params.du0 + series.recovered[0]
                              + series.confirmed_active[0] + series.deceased_confirmed[0])
    if N0 < 0:
        raise InfeasibleError(f"latent initial stocks exceed the population (N_0 = {N0:.6g})")
    return FullState(N0, params.s0, params.u0, params.du0, float(series.recovered[0]),
                     float(series.confirmed_active[0]), float(series.deceased_confirmed[0]),
                     float(series.tests[0]))


def _powers_tuple(p):
    return (p.alpha, p.beta, p.rho, p.mu, p.phi, p.psi)


def step(state, params, k):
    N, S, U, D_U, R, C, D_C, T = state.as_array()
    rates = params.rates([k])[:, 0]
    N1, S1, U1, DU1, g, dT = advance(N, S, U, D_U, C, _powers_tuple(params.powers), rates)
    rec, dead, C1 = resolve_confirmed(C, g, rates[0], rates[1])
    return FullState(float(N1), float(S1), float(U1), float(DU1), float(R + rec), float(C1),
                     float(D_C + dead), float(T + dT))


def simulate(initial, params, horizon, start_day=0):
    """Iterate :func:`step` ``horizon`` times; returns ``horizon + 1`` states."""
    if int(horizon) != horizon or horizon < 1:
        raise ArgumentError("horizon must be an integer >= 1")
    horizon = int(horizon)
    days = np.arange(start_day, start_day + horizon + 1)
    rates = params.rates(days[:-1])
    powers = _powers_tuple(params.powers)
    out = np.empty((horizon + 1, len(COMPARTMENTS)))
    out[0] = initial.as_array()
    N, S, U, D_U, R, C, D_C, T = out[0]
    for i in range(horizon):
        rk = rates[:, i]
        N, S, U, D_U, g, dT = advance(N, S, U, D_U, C, powers, rk)
        rec, dead, C = resolve_confirmed(C, g, rk[0], rk[1])
        R, D_C, T = R + rec, D_C + dead, T + dT
        out[i + 1] = (N, S, U, D_U, R, C, D_C, T)
    return Trajectory(days, out)


def latent_path(params, series):
    """Unobserved trajectories driven by the observed confirmed stock."""
    s0 = initial_state(series, params)
    C = series.confirmed_active
    n = series.n
    rates = params.rates(np.arange(n))
    powers = _powers_tuple(params.powers)
    out = np.empty((4, n + 1))
    out[:, 0] = (s0.N, s0.S, s0.U, s0.D_U)
    N, S, U, D_U = out[:, 0]
    for k in range(n):
        N, S, U, D_U, _, _ = advance(N, S, U, D_U, C[k], powers, rates[:, k])
        out[:, k + 1] = (N, S, U, D_U)
    return LatentPath(*out)


def effective_reproduction(params, latent, series):
    """Per-day N_k/P0 * phi / (r + d + rtilde + dtilde) with spline rates at integer k."""
    if len(latent) != len(series):
        raise ArgumentError("latent path length does not match the series")
    r, d, rt, dt, _ = params.rates(np.arange(len(series)))
    denom = r + d + rt + dt
    if np.any(denom <= 1e-12):
        k = int(np.flatnonzero(denom <= 1e-12)[0])
        raise DegenerateError(f"total removal rate vanishes at day {k}")
    return latent.N / series.population * params.powers.phi / denom
