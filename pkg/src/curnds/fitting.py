"""
Parameter estimation by single shooting and multi-start screening.

The decision vector theta has the fixed layout

    [alpha, beta, rho, mu, phi, psi,
     r values, d values, rtilde values, dtilde values, h values,
     u0, s0, du0]

where each block of spline values holds one rate per knot. The latent stocks
N, S, U, D_U are simulated from (u0, s0, du0) inside the objective, so the
dynamic constraints hold by construction and only box bounds remain. The
objective is a weighted sum of squared one-step innovations of R, C, D_C and
T, plus a quadratic penalty on days where r+d or rtilde+dtilde exceed 1.

The optimizer works in internal coordinates: phi and psi on a log10 scale,
latent initials divided by max(C_0, 1), h values divided by the scale of the
preliminary testing rate. Everything else is used as is.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import minimize

from . import __version__
from .errors import ArgumentError, ConfigError, DegenerateError, FitFailure
from .model import (POWER_MAX, CurndsParams, LatentPath, PowerParams, advance,
                    resolve_confirmed)
from .spline import HOLD_LAST, UNIT_CLAMP, RateSpline, basis_matrix, default_knots

log = logging.getLogger(__name__)

SERIES_NAMES = ("R", "C", "D_C", "T")
SPLINE_NAMES = ("r", "d", "rtilde", "dtilde", "h")
PENALTY_WEIGHT = 1e6
BOUND_MARGIN = 1e-6
FD_RELATIVE_STEP = 1e-6


@dataclass(frozen=True)
class FitConfig:
    """Knot counts, screening budgets and solver tolerances.

    ``knots_*`` are interior knot counts. ``weights`` is None (inverse
    squared series means) or four positive numbers for R, C, D_C, T.
    """

    knots_r: int = 3
    knots_d: int = 3
    knots_rtilde: int = 3
    knots_dtilde: int = 3
    knots_h: int = 3
    k0: int = 32
    i0: int = 200
    k1: int = 4
    power_grid: tuple = (0.1, 0.5, 0.9)
    max_iterations: int = 2000
    gradient_tolerance: float = 1e-8
    step_tolerance: float = 1e-12
    weights: tuple | None = None
    seed: int = 0

    def __post_init__(self):
        for name in ("knots_r", "knots_d", "knots_rtilde", "knots_dtilde", "knots_h"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or not 1 <= v <= 6:
                raise ConfigError(f"{name} must be an integer in [1, 6], got {v!r}")
        for name in ("k0", "i0", "k1", "max_iterations"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if self.k1 > self.k0:
            raise ConfigError(f"k1 ({self.k1}) must not exceed k0 ({self.k0})")
        grid = tuple(float(g) for g in self.power_grid)
        if not grid or any(not 0 < g <= POWER_MAX for g in grid):
            raise ConfigError(f"power_grid values must lie in (0, {POWER_MAX}]")
        object.__setattr__(self, "power_grid", grid)
        for name in ("gradient_tolerance", "step_tolerance"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and v >= 0 and math.isfinite(v)):
                raise ConfigError(f"{name} must be a non-negative number")
        if self.weights is not None:
            w = tuple(float(x) for x in self.weights)
            if len(w) != 4 or any(not (x > 0 and math.isfinite(x)) for x in w):
                raise ConfigError("weights must be four positive numbers (R, C, D_C, T)")
            object.__setattr__(self, "weights", w)
        if not isinstance(self.seed, (int, np.integer)) or isinstance(self.seed, bool):
            raise ConfigError("seed must be an integer")

    @property
    def knot_counts(self):
        return (self.knots_r, self.knots_d, self.knots_rtilde, self.knots_dtilde, self.knots_h)

    def to_dict(self):
        d = asdict(self)
        d["power_grid"] = list(self.power_grid)
        d["weights"] = None if self.weights is None else list(self.weights)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown fit config key(s): {', '.join(sorted(unknown))}")
        d = dict(d)
        if "power_grid" in d:
            d["power_grid"] = tuple(d["power_grid"])
        if d.get("weights") is not None:
            d["weights"] = tuple(d["weights"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


class Layout:
    """Slices of the decision vector for a given knot configuration."""

    def __init__(self, knot_counts):
        self.knot_counts = tuple(knot_counts)
        self.spline_slices = []
        i = 6
        for m in self.knot_counts:
            self.spline_slices.append(slice(i, i + m + 2))
            i += m + 2
        self.latent = slice(i, i + 3)
        self.size = i + 3

    def __len__(self):
        return self.size


def free_parameter_count(config):
    return len(Layout(config.knot_counts))


def spline_knots(config, series):
    n = series.n
    return [default_knots(n, m) for m in config.knot_counts]


def theta_bounds(config, series):
    lay = Layout(config.knot_counts)
    lo = np.zeros(len(lay))
    hi = np.ones(len(lay))
    lo[:4], hi[:4] = BOUND_MARGIN, POWER_MAX
    lo[4:6], hi[4:6] = BOUND_MARGIN, 1.0 - BOUND_MARGIN
    lo[lay.latent], hi[lay.latent] = 0.0, float(series.population)
    return lo, hi


def clip_theta(theta, config, series):
    lo, hi = theta_bounds(config, series)
    return np.clip(theta, lo, hi)


def decode(theta, config, series, extrapolation=HOLD_LAST):
    """Map a decision vector to :class:`CurndsParams`, clipping to the box."""
    theta = np.asarray(theta, dtype=float)
    lay = Layout(config.knot_counts)
    if theta.shape != (len(lay),):
        raise ArgumentError(f"decision vector must have length {len(lay)}, got {theta.shape}")
    if not np.all(np.isfinite(theta)):
        raise ArgumentError("decision vector contains non-finite entries")
    t = clip_theta(theta, config, series)
    knots = spline_knots(config, series)
    splines = [RateSpline(k, t[s], UNIT_CLAMP, extrapolation)
               for k, s in zip(knots, lay.spline_slices)]
    u0, s0, du0 = t[lay.latent]
    return CurndsParams(PowerParams(*t[:6]), *splines, u0=u0, s0=s0, du0=du0)


def encode(params):
    p = params.powers
    return np.concatenate([
        [p.alpha, p.beta, p.rho, p.mu, p.phi, p.psi],
        *[s.values for s in params.splines()],
        [params.u0, params.s0, params.du0],
    ])


def default_weights(series):
    means = series.observed().mean(axis=1)
    return 1.0 / np.maximum(means, 1.0) ** 2


def preliminary_rates(series, knots_r, knots_d, extrapolation=HOLD_LAST):
    """Spline fits of the crude daily rates dR_k / C_k and dD_{C,k} / C_k."""
    n = series.n
    C = series.confirmed_active[:n]
    if np.any(C <= 0):
        k = int(np.flatnonzero(C <= 0)[0])
        raise DegenerateError(f"confirmed stock is not positive at day {k}")
    r_hat = np.clip(np.diff(series.recovered) / C, 0.0, 1.0)
    d_hat = np.clip(np.diff(series.deceased_confirmed) / C, 0.0, 1.0)
    out = []
    for m, y in ((knots_r, r_hat), (knots_d, d_hat)):
        knots = default_knots(n, m)
        V = basis_matrix(knots, np.arange(n))
        coef, *_ = np.linalg.lstsq(V, y, rcond=None)
        out.append(RateSpline(knots, np.clip(coef, 0.0, 1.0), UNIT_CLAMP, extrapolation))
    return tuple(out)


def preliminary_testing_rate(series, knots_h, extrapolation=HOLD_LAST):
    """Spline fit of dT_k / (P0 - R_k - C_k - D_{C,k}), ignoring latent deaths."""
    n = series.n
    pool = series.population - (series.recovered + series.confirmed_active
                                + series.deceased_confirmed)[:n]
    h_hat = np.clip(np.diff(series.tests) / np.maximum(pool, 1.0), 0.0, 1.0)
    knots = default_knots(n, knots_h)
    V = basis_matrix(knots, np.arange(n))
    coef, *_ = np.linalg.lstsq(V, h_hat, rcond=None)
    return RateSpline(knots, np.clip(coef, 0.0, 1.0), UNIT_CLAMP, extrapolation)


class ShootingObjective:
    """Batched weighted least-squares shooting objective for one series."""

    def __init__(self, series, config):
        if series.n < 2:
            raise ArgumentError("series too short to fit")
        self.series = series
        self.config = config
        self.layout = Layout(config.knot_counts)
        n = series.n
        self.n = n
        self.bases = [basis_matrix(k, np.arange(n)) for k in spline_knots(config, series)]
        self.X = series.observed()
        self.weights = (np.asarray(config.weights, dtype=float) if config.weights is not None
                        else default_weights(series))
        self.lo, self.hi = theta_bounds(config, series)
        self.fixed_stock = (self.X[0, 0] + self.X[1, 0] + self.X[2, 0])

    def rates(self, thetas):
        """Clamped rates, shape (5, B, n)."""
        return np.stack([np.clip(thetas[:, s] @ V.T, 0.0, 1.0)
                         for s, V in zip(self.layout.spline_slices, self.bases)])

    def evaluate(self, thetas):
        """Residuals (B, 4, n), penalty (B,), latent (4, B, n+1) for clipped thetas."""
        thetas = np.clip(np.atleast_2d(thetas), self.lo, self.hi)
        B = thetas.shape[0]
        n = self.n
        R, C, D, T = self.X
        P0 = self.series.population
        powers = tuple(thetas[:, i] for i in range(6))
        rates = self.rates(thetas)
        u0, s0, du0 = (thetas[:, self.layout.latent.start + i] for i in range(3))
        N = np.maximum(P0 - (u0 + s0 + du0 + self.fixed_stock), 0.0)
        S, U, DU = s0, u0, du0
        latent = np.empty((4, B, n + 1))
        latent[:, :, 0] = N, S, U, DU
        res = np.empty((B, 4, n))
        for k in range(n):
            rk = rates[:, :, k]
            N, S, U, DU, g, dT = advance(N, S, U, DU, C[k], powers, rk)
            rec, dead, C_next = resolve_confirmed(C[k], g, rk[0], rk[1])
            res[:, 0, k] = R[k + 1] - (R[k] + rec)
            res[:, 1, k] = C[k + 1] - C_next
            res[:, 2, k] = D[k + 1] - (D[k] + dead)
            res[:, 3, k] = T[k + 1] - (T[k] + dT)
            latent[:, :, k + 1] = N, S, U, DU
        over = (np.maximum(rates[0] + rates[1] - 1.0, 0.0) ** 2
                + np.maximum(rates[2] + rates[3] - 1.0, 0.0) ** 2)
        return res, PENALTY_WEIGHT * over.sum(axis=1), latent

    def __call__(self, thetas):
        res, pen, _ = self.evaluate(thetas)
        return np.einsum("bik,i->b", res ** 2, self.weights) + pen

    def value(self, theta):
        return float(self(np.asarray(theta, dtype=float)[None, :])[0])


class InternalScaling:
    """Affine/log map between theta and the optimizer's coordinates.

    ``z = theta / scale`` except at ``log_idx``, where ``z = log10(theta)``.
    """

    def __init__(self, scale, log_idx, lo, hi):
        self.scale = np.asarray(scale, dtype=float)
        self.log_idx = np.asarray(log_idx, dtype=int)
        self.z_lo, self.z_hi = self.to_z(lo), self.to_z(hi)

    @classmethod
    def for_curnds(cls, series, config, h_scale):
        lay = Layout(config.knot_counts)
        scale = np.ones(len(lay))
        scale[lay.spline_slices[4]] = max(h_scale, 1e-12)
        scale[lay.latent] = max(float(series.confirmed_active[0]), 1.0)
        lo, hi = theta_bounds(config, series)
        return cls(scale, [4, 5], lo, hi)

    def to_z(self, theta):
        z = np.array(theta, dtype=float) / self.scale
        z[..., self.log_idx] = np.log10(np.maximum(np.asarray(theta)[..., self.log_idx], 1e-300))
        return z

    def to_theta(self, z):
        theta = np.array(z, dtype=float) * self.scale
        theta[..., self.log_idx] = 10.0 ** np.asarray(z)[..., self.log_idx]
        return theta


def fd_gradient(func, z, lo, hi, rel_step=FD_RELATIVE_STEP):
    """Value and central-difference gradient of a batched function.

    Coordinates at a bound fall back to one-sided differences inside the box.
    """
    z = np.asarray(z, dtype=float)
    P = len(z)
    h = rel_step * np.maximum(np.abs(z), 1.0)
    up = np.minimum(z + h, hi)
    dn = np.maximum(z - h, lo)
    pts = np.repeat(z[None, :], 2 * P + 1, axis=0)
    idx = np.arange(P)
    pts[1 + idx, idx] = up
    pts[1 + P + idx, idx] = dn
    vals = func(pts)
    f0 = vals[0]
    denom = up - dn
    grad = np.where(denom > 0, (vals[1:P + 1] - vals[P + 1:]) / np.where(denom > 0, denom, 1.0), 0.0)
    return f0, grad


@dataclass
class StartOutcome:
    index: int
    theta: np.ndarray
    objective: float
    iterations: int
    success: bool
    message: str


class BoundedProblem:
    """A batched objective on a box, minimized by L-BFGS-B in scaled coordinates.

    ``objective`` maps a (B, P) array of parameter vectors to B values.
    """

    def __init__(self, objective, scaling, lo, hi):
        self.objective = objective
        self.scaling = scaling
        self.lo, self.hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
        self.bounds = list(zip(self.scaling.z_lo, self.scaling.z_hi))

    def batch(self, zs):
        return self.objective(self.scaling.to_theta(zs))

    def value_and_grad(self, z, scale=1.0):
        f, g = fd_gradient(self.batch, z, self.scaling.z_lo, self.scaling.z_hi)
        return float(f) / scale, g / scale

    def run(self, index, theta, maxiter, config):
        z0 = np.clip(self.scaling.to_z(theta), self.scaling.z_lo, self.scaling.z_hi)
        f0 = self.batch(z0[None, :])[0]
        if not np.isfinite(f0):
            return StartOutcome(index, theta, math.inf, 0, False, "non-finite start")
        # normalized so the relative-reduction test is meaningful for tiny objectives
        scale = max(float(f0), 1e-300)
        res = minimize(self.value_and_grad, z0, args=(scale,), jac=True, method="L-BFGS-B",
                       bounds=self.bounds,
                       options={"maxiter": int(maxiter), "gtol": config.gradient_tolerance,
                                "ftol": config.step_tolerance, "maxcor": 20, "maxls": 40})
        z = np.clip(res.x, self.scaling.z_lo, self.scaling.z_hi)
        f = float(self.batch(z[None, :])[0])
        if not np.isfinite(f) or f > f0:
            z, f = z0, float(f0)
        theta_out = np.clip(self.scaling.to_theta(z), self.lo, self.hi)
        return StartOutcome(index, theta_out, f, int(res.nit), bool(res.success), str(res.message))


def _run_stage(problem, jobs, maxiter, config, workers):
    def one(job):
        idx, theta = job
        return problem.run(idx, theta, maxiter, config)

    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(one, jobs))
    return [one(j) for j in jobs]


def _select(outcomes, k):
    # order-independent: by objective, then start index
    ranked = sorted(outcomes, key=lambda o: (o.objective, o.index))
    return ranked[:k]


def multistart(problem, starts, config, workers=1):
    """Two-stage screening: ``config.i0`` iterations from every start, then
    up to ``config.max_iterations`` for the ``config.k1`` best.

    Returns the best :class:`StartOutcome` and a diagnostics dict.
    """
    jobs = list(enumerate(starts))
    stage1 = _run_stage(problem, jobs, config.i0, config, workers)
    finite = [o for o in stage1 if np.isfinite(o.objective)]
    if not finite:
        raise FitFailure("all starts are infeasible",
                         {"stage1": [o.message for o in stage1]})
    survivors = _select(finite, config.k1)
    log.info("stage 1 survivors: %s", [(o.index, o.objective) for o in survivors])

    stage2 = _run_stage(problem, [(o.index, o.theta) for o in survivors],
                        config.max_iterations, config, workers)
    for before, after in zip(survivors, stage2):
        if after.objective > before.objective:
            after.theta, after.objective = before.theta, before.objective
    best = _select(stage2, 1)[0]
    diagnostics = {
        "stage1_objectives": [o.objective for o in stage1],
        "survivors": [o.index for o in survivors],
        "handoff_objectives": [o.objective for o in survivors],
        "stage2_objectives": [o.objective for o in stage2],
        "stage2_iterations": [o.iterations for o in stage2],
        "message": best.message,
    }
    return best, diagnostics


def generate_starts(series, config, extrapolation=HOLD_LAST):
    """The k0 random starting vectors (rows), reproducible from ``config.seed``."""
    rng = np.random.default_rng(config.seed)
    lay = Layout(config.knot_counts)
    r_sp, d_sp = preliminary_rates(series, config.knots_r, config.knots_d, extrapolation)
    h_sp = preliminary_testing_rate(series, config.knots_h, extrapolation)
    n = series.n
    r_level = max(float(np.mean(r_sp(np.arange(n)))), 1e-4)
    d_level = max(float(np.mean(d_sp(np.arange(n)))), 1e-5)
    C0 = float(series.confirmed_active[0])
    grid = np.asarray(config.power_grid)
    lo, hi = theta_bounds(config, series)
    starts = np.empty((config.k0, len(lay)))
    for i in range(config.k0):
        theta = np.empty(len(lay))
        theta[:4] = rng.choice(grid, size=4) + rng.uniform(-0.05, 0.05, size=4)
        theta[4:6] = 10.0 ** rng.uniform(-6.0, math.log10(0.9), size=2)
        theta[lay.spline_slices[0]] = r_sp.values
        theta[lay.spline_slices[1]] = d_sp.values
        theta[lay.spline_slices[2]] = r_level * rng.uniform(0.5, 2.0)
        theta[lay.spline_slices[3]] = d_level * rng.uniform(0.5, 2.0)
        theta[lay.spline_slices[4]] = h_sp.values
        theta[lay.latent] = (rng.uniform(0.0, 5.0 * C0), rng.uniform(0.0, C0), rng.uniform(0.0, C0))
        starts[i] = np.clip(theta, lo, hi)
    return starts, h_sp


@dataclass
class FitResult:
    """Outcome of :func:`fit`. ``residuals`` has shape (4, n) in R, C, D_C, T order."""

    params: CurndsParams
    objective: float
    residuals: np.ndarray
    latent: LatentPath
    converged: bool
    start_index: int
    free_parameter_count: int
    series: object
    config: FitConfig
    theta: np.ndarray
    penalty: float = 0.0
    diagnostics: dict = field(default_factory=dict)

    def residual_summary(self):
        out = {}
        for name, r in zip(SERIES_NAMES, self.residuals):
            out[name] = {"sse": float(np.sum(r ** 2)), "rms": float(np.sqrt(np.mean(r ** 2))),
                         "max_abs": float(np.max(np.abs(r)))}
        return out

    def to_dict(self):
        return {
            "artifact": "curnds",
            "version": __version__,
            "seed": self.config.seed,
            "config": self.config.to_dict(),
            "objective": self.objective,
            "penalty": self.penalty,
            "converged": self.converged,
            "start_index": self.start_index,
            "free_parameter_count": self.free_parameter_count,
            "params": self.params.to_dict(),
            "theta": self.theta.tolist(),
            "residual_summary": self.residual_summary(),
            "residuals": {k: r.tolist() for k, r in zip(SERIES_NAMES, self.residuals)},
            "latent": self.latent.to_dict(),
            "series": self.series.to_dict(),
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_dict(cls, d):
        from .data import EpidemicSeries

        series = EpidemicSeries.from_dict(d["series"])
        return cls(
            params=CurndsParams.from_dict(d["params"]),
            objective=float(d["objective"]),
            residuals=np.array([d["residuals"][k] for k in SERIES_NAMES], dtype=float),
            latent=LatentPath.from_dict(d["latent"]),
            converged=bool(d["converged"]),
            start_index=int(d["start_index"]),
            free_parameter_count=int(d["free_parameter_count"]),
            series=series,
            config=FitConfig.from_dict(d["config"]),
            theta=np.asarray(d["theta"], dtype=float),
            penalty=float(d.get("penalty", 0.0)),
            diagnostics=d.get("diagnostics", {}),
        )


def evaluate_theta(series, config, theta, extrapolation=HOLD_LAST, **extra):
    """Package a decision vector as a :class:`FitResult` without optimizing."""
    obj = ShootingObjective(series, config)
    theta = clip_theta(np.asarray(theta, dtype=float), config, series)
    res, pen, latent = obj.evaluate(theta[None, :])
    value = float(np.einsum("ik,i->", res[0] ** 2, obj.weights) + pen[0])
    return FitResult(
        params=decode(theta, config, series, extrapolation),
        objective=value,
        residuals=res[0],
        latent=LatentPath(*latent[:, 0, :]),
        converged=extra.pop("converged", True),
        start_index=extra.pop("start_index", -1),
        free_parameter_count=free_parameter_count(config),
        series=series,
        config=config,
        theta=theta,
        penalty=float(pen[0]),
        diagnostics=extra.pop("diagnostics", {}),
    )


def objective(series, theta, config):
    """Weighted SSE plus rate-sum penalty at one decision vector."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (free_parameter_count(config),):
        raise ArgumentError(f"decision vector must have length {free_parameter_count(config)}")
    if not np.all(np.isfinite(theta)):
        raise ArgumentError("decision vector contains non-finite entries")
    return ShootingObjective(series, config).value(theta)


def fit(series, config=None, workers=1, extra_starts=(), extrapolation=HOLD_LAST):
    """Estimate CURNDS parameters by two-stage multi-start screening.

    Stage 1 runs ``config.i0`` L-BFGS-B iterations from each of the ``k0``
    random starts (plus any ``extra_starts``, indexed after them); stage 2
    continues the ``k1`` best for up to ``config.max_iterations``.
    The series should already be smoothed.
    """
    config = config or FitConfig()
    if len(series) < 10:
        raise ArgumentError("fitting needs a series of at least 10 days")
    starts, h_sp = generate_starts(series, config, extrapolation)
    h_scale = float(np.max(h_sp.values)) if np.max(h_sp.values) > 0 else 1.0
    lo, hi = theta_bounds(config, series)
    problem = BoundedProblem(ShootingObjective(series, config),
                             InternalScaling.for_curnds(series, config, h_scale), lo, hi)
    extra = [clip_theta(np.asarray(t, dtype=float), config, series) for t in extra_starts]
    best, diagnostics = multistart(problem, list(starts) + extra, config, workers)
    return evaluate_theta(series, config, best.theta, extrapolation,
                          converged=best.success, start_index=best.index,
                          diagnostics=diagnostics)
