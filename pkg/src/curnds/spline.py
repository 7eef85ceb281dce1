"""
Natural cubic splines for time-varying rates.

A rate is stored by its values at the knots (cardinal parameterization), so
box bounds on the coefficients are bounds on the rate itself. Evaluation is
linear in the values before clamping, which :func:`basis_matrix` exposes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError

HOLD_LAST = "hold-last"
NATURAL_LINEAR = "natural-linear"
EXTRAPOLATIONS = (HOLD_LAST, NATURAL_LINEAR)
UNIT_CLAMP = (0.0, 1.0)


def _tridiagonal_solve(lower, diag, upper, rhs):
    """Thomas algorithm. ``lower[0]`` and ``upper[-1]`` are ignored."""
    n = len(diag)
    c = np.zeros(n)
    d = np.zeros(n)
    c[0] = upper[0] / diag[0]
    d[0] = rhs[0] / diag[0]
    for i in range(1, n):
        denom = diag[i] - lower[i] * c[i - 1]
        c[i] = upper[i] / denom if i < n - 1 else 0.0
        d[i] = (rhs[i] - lower[i] * d[i - 1]) / denom
    x = np.zeros(n)
    x[-1] = d[-1]
    for i in range(n - 2, -1, -1):
        x[i] = d[i] - c[i] * x[i + 1]
    return x


def natural_second_derivatives(knots, values):
    """Second derivatives at the knots of the interpolating natural cubic spline."""
    x = np.asarray(knots, dtype=float)
    y = np.asarray(values, dtype=float)
    h = np.diff(x)
    m = np.zeros(len(x))
    if len(x) > 2:
        slopes = np.diff(y) / h
        rhs = 6.0 * np.diff(slopes)
        m[1:-1] = _tridiagonal_solve(h[:-1], 2.0 * (h[:-1] + h[1:]), h[1:], rhs)
    return m


@dataclass(frozen=True)
class RateSpline:
    """Natural cubic spline through ``(knots[j], values[j])``.

    ``clamp`` is an interval ``(lo, hi)`` applied at evaluation time, or None
    to disable clamping. ``extrapolation`` is ``"hold-last"`` (boundary knot
    value) or ``"natural-linear"`` (boundary tangent line).
    """

    knots: np.ndarray
    values: np.ndarray
    clamp: tuple | None = UNIT_CLAMP
    extrapolation: str = HOLD_LAST

    def __post_init__(self):
        knots = np.array(self.knots, dtype=float)
        values = np.array(self.values, dtype=float)
        if knots.ndim != 1 or len(knots) < 3:
            raise ArgumentError("a rate spline needs at least 3 knots")
        if values.shape != knots.shape:
            raise ArgumentError("values must have one entry per knot")
        if not np.all(np.isfinite(knots)) or not np.all(np.diff(knots) > 0):
            raise ArgumentError("knots must be finite and strictly increasing")
        if not np.all(np.isfinite(values)):
            raise ArgumentError("spline values must be finite")
        if self.extrapolation not in EXTRAPOLATIONS:
            raise ArgumentError(f"unknown extrapolation policy {self.extrapolation!r}")
        clamp = self.clamp
        if clamp is not None:
            lo, hi = float(clamp[0]), float(clamp[1])
            if not lo <= hi:
                raise ArgumentError("clamp interval must satisfy lo <= hi")
            clamp = (lo, hi)
        knots.setflags(write=False)
        values.setflags(write=False)
        m = natural_second_derivatives(knots, values)
        m.setflags(write=False)
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "clamp", clamp)
        object.__setattr__(self, "_m", m)

    @property
    def second_derivatives(self):
        return self._m

    @property
    def span(self):
        return float(self.knots[0]), float(self.knots[-1])

    def boundary_slopes(self):
        x, y, m = self.knots, self.values, self._m
        h0, h1 = x[1] - x[0], x[-1] - x[-2]
        left = (y[1] - y[0]) / h0 - h0 * (2 * m[0] + m[1]) / 6.0
        right = (y[-1] - y[-2]) / h1 + h1 * (2 * m[-1] + m[-2]) / 6.0
        return left, right

    def raw(self, t):
        """Unclamped evaluation, vectorized over ``t``."""
        t = np.asarray(t, dtype=float)
        x, y, m = self.knots, self.values, self._m
        j = np.clip(np.searchsorted(x, t, side="right") - 1, 0, len(x) - 2)
        h = x[j + 1] - x[j]
        a = x[j + 1] - t
        b = t - x[j]
        out = (m[j] * a ** 3 + m[j + 1] * b ** 3) / (6.0 * h) \
            + (y[j] / h - m[j] * h / 6.0) * a + (y[j + 1] / h - m[j + 1] * h / 6.0) * b
        # exact cardinal values on the knots
        out = np.where(t == x[j], y[j], np.where(t == x[j + 1], y[j + 1], out))
        below, above = t < x[0], t > x[-1]
        if below.any() or above.any():
            if self.extrapolation == HOLD_LAST:
                out = np.where(below, y[0], np.where(above, y[-1], out))
            else:
                s0, s1 = self.boundary_slopes()
                out = np.where(below, y[0] + s0 * (t - x[0]),
                               np.where(above, y[-1] + s1 * (t - x[-1]), out))
        return out if out.ndim else float(out)

    def __call__(self, t):
        v = self.raw(t)
        if self.clamp is not None:
            v = np.clip(v, self.clamp[0], self.clamp[1])
            return v if np.ndim(v) else float(v)
        return v

    def with_values(self, values):
        return RateSpline(self.knots, values, self.clamp, self.extrapolation)

    def to_dict(self):
        return {
            "knots": self.knots.tolist(),
            "values": self.values.tolist(),
            "clamp": None if self.clamp is None else list(self.clamp),
            "extrapolation": self.extrapolation,
        }

    @classmethod
    def from_dict(cls, d):
        clamp = d.get("clamp", UNIT_CLAMP)
        return cls(d["knots"], d["values"], None if clamp is None else tuple(clamp),
                   d.get("extrapolation", HOLD_LAST))


def build(knots, values, clamp=UNIT_CLAMP, extrapolation=HOLD_LAST):
    return RateSpline(knots, values, clamp, extrapolation)


def evaluate(spline, t):
    """Clamped spline value at time(s) ``t``."""
    return spline(t)


def default_knots(n, m):
    """``m + 2`` equally spaced knots on ``[0, n - 1]``."""
    if not (isinstance(m, (int, np.integer)) and 1 <= m <= n - 2):
        raise ArgumentError(f"interior knot count must satisfy 1 <= m <= n-2 (n={n}, m={m})")
    return np.linspace(0.0, n - 1.0, m + 2)


def basis_matrix(knots, t, extrapolation=HOLD_LAST):
    """Cardinal basis V with ``V[i, j]`` the unclamped value at ``t[i]`` of the
    spline that is 1 at knot j and 0 at the others."""
    knots = np.asarray(knots, dtype=float)
    t = np.atleast_1d(np.asarray(t, dtype=float))
    eye = np.eye(len(knots))
    return np.column_stack([RateSpline(knots, e, None, extrapolation).raw(t) for e in eye])
