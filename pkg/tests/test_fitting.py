import json

import numpy as np
import pytest

from curnds.data import series_from_arrays
from curnds.errors import ArgumentError, ConfigError, DegenerateError
from curnds.fitting import (FitConfig, FitResult, Layout, ShootingObjective, decode, encode,
                            evaluate_theta, fd_gradient, fit, free_parameter_count,
                            generate_starts, objective, preliminary_rates, spline_knots,
                            theta_bounds)
from curnds.model import latent_path
from curnds.spline import RateSpline, default_knots
from curnds.synthetic import wild_type_series

SMALL = FitConfig(k0=4, i0=30, k1=2, max_iterations=60)


@pytest.fixture(scope="module")
def wild():
    return wild_type_series(30)


def test_layout_size_default():
    cfg = FitConfig()
    assert free_parameter_count(cfg) == 4 + 2 + 5 * 5 + 3 == 34
    assert free_parameter_count(cfg) < 60


def test_layout_size_independent_of_length():
    cfg = FitConfig(knots_h=5)
    sizes = set()
    for L in (12, 30, 90):
        s, _, _ = wild_type_series(L, cfg)
        sizes.add(len(encode(decode(np.zeros(free_parameter_count(cfg)) + 0.01, cfg, s))))
    assert sizes == {36}


def test_config_validation():
    with pytest.raises(ConfigError):
        FitConfig(k0=2, k1=3)
    with pytest.raises(ConfigError):
        FitConfig(knots_r=0)
    with pytest.raises(ConfigError):
        FitConfig(weights=(1, 1, 0, 1))
    with pytest.raises(ConfigError):
        FitConfig.from_dict({"k0": 4, "bogus": 1})
    assert FitConfig.from_dict(FitConfig(k0=5, k1=2).to_dict()) == FitConfig(k0=5, k1=2)


def test_decode_round_trip(wild):
    series, params, _ = wild
    theta = encode(params)
    assert np.array_equal(encode(decode(theta, FitConfig(), series)), theta)


def test_decode_clips_power():
    series, params, _ = wild_type_series(30)
    theta = encode(params)
    theta[0] = 2.5
    theta[4] = 0.0
    p = decode(theta, FitConfig(), series)
    assert p.powers.alpha == 2.0
    assert p.powers.phi == 1e-6


def test_decode_wrong_length(wild):
    series, params, _ = wild
    with pytest.raises(ArgumentError):
        decode(encode(params)[:-1], FitConfig(), series)
    with pytest.raises(ArgumentError):
        objective(series, np.full(34, np.nan), FitConfig())


def test_objective_zero_on_self_generated(wild):
    series, params, _ = wild
    value = objective(series, encode(params), FitConfig())
    scale = float(np.max(series.observed()))
    assert 0.0 <= value <= 1e-12 * scale ** 2


def test_objective_increases_under_knot_perturbation(wild):
    series, params, _ = wild
    cfg = FitConfig()
    theta = encode(params)
    base = objective(series, theta, cfg)
    lay = Layout(cfg.knot_counts)
    for sl in lay.spline_slices:
        for j in range(sl.start, sl.stop):
            t = theta.copy()
            t[j] *= 1.01
            assert objective(series, t, cfg) > base


def test_penalty_on_rate_sum(wild):
    series, params, _ = wild
    cfg = FitConfig()
    theta = encode(params)
    lay = Layout(cfg.knot_counts)
    theta[lay.spline_slices[0]] = 0.7
    theta[lay.spline_slices[1]] = 0.5
    obj = ShootingObjective(series, cfg)
    _, pen, _ = obj.evaluate(theta[None, :])
    assert pen[0] == pytest.approx(1e6 * 0.04 * series.n, rel=1e-9)
    assert objective(series, theta, cfg) >= 1e6 * 0.04


def test_latent_matches_model_core(wild):
    series, params, traj = wild
    res = evaluate_theta(series, FitConfig(), encode(params))
    lat = latent_path(params, series)
    np.testing.assert_allclose(res.latent.U, lat.U, rtol=1e-12)
    np.testing.assert_allclose(res.latent.U, traj.column("U"), rtol=1e-9)
    assert res.residuals.shape == (4, series.n)


def _series_with_rates(r_fn, d_fn, n=29):
    k = np.arange(n + 1, dtype=float)
    C = 1000 + 300 * np.sin(k / 5.0)
    R = np.concatenate([[5000.0], 5000.0 + np.cumsum(r_fn(k[:-1]) * C[:-1])])
    D = np.concatenate([[100.0], 100.0 + np.cumsum(d_fn(k[:-1]) * C[:-1])])
    return series_from_arrays(R, C, D, 1e5 + 100 * k, 1_000_000)


def test_preliminary_constant_rate():
    s = _series_with_rates(lambda k: np.full_like(k, 0.02), lambda k: np.zeros_like(k))
    r, d = preliminary_rates(s, 3, 3)
    assert np.max(np.abs(r(np.arange(s.n)) - 0.02)) <= 1e-8
    assert np.all(d.values == 0.0)


def test_preliminary_recovers_spline_rate():
    knots = default_knots(29, 3)
    truth = RateSpline(knots, 0.05 * (1 + 0.3 * np.sin(knots / 6.0)))
    s = _series_with_rates(truth, lambda k: 0.001 + 0 * k)
    r, _ = preliminary_rates(s, 3, 3)
    rmse = np.sqrt(np.mean((r.values - truth.values) ** 2)) / np.sqrt(np.mean(truth.values ** 2))
    assert rmse < 0.02


def test_preliminary_degenerate():
    k = np.arange(12, dtype=float)
    C = 100 + k
    C[4] = 0.0
    s = series_from_arrays(1000 + k, C, 10 + 0 * k, 1e4 + k, 100_000)
    with pytest.raises(DegenerateError):
        preliminary_rates(s, 3, 3)


def test_fd_gradient_quadratic():
    A = np.diag([1.0, 4.0, 9.0])

    def f(zs):
        return 0.5 * np.einsum("bi,ij,bj->b", zs, A, zs)

    z = np.array([0.3, -0.7, 1.1])
    f0, g = fd_gradient(f, z, np.full(3, -5.0), np.full(3, 5.0))
    assert f0 == pytest.approx(f(z[None, :])[0])
    np.testing.assert_allclose(g, A @ z, rtol=1e-8)
    # at a bound the one-sided difference stays inside the box
    _, g = fd_gradient(f, np.array([5.0, 0.0, 0.0]), np.full(3, -5.0), np.full(3, 5.0))
    assert g[0] == pytest.approx(5.0, rel=1e-4)


def test_forward_difference_richardson_ratio(wild):
    series, params, _ = wild
    cfg = FitConfig()
    theta = encode(params)
    obj = ShootingObjective(series, cfg)
    rng = np.random.default_rng(8)
    lo, hi = theta_bounds(cfg, series)
    lay = Layout(cfg.knot_counts)
    # an interior point away from the optimum, direction on the rate block
    theta = theta * rng.uniform(0.97, 1.03, len(theta))
    v = np.zeros(len(theta))
    v[lay.spline_slices[0]] = rng.normal(size=5)
    v[lay.spline_slices[2]] = rng.normal(size=5)
    v /= np.linalg.norm(v)

    def f(t):
        return obj(np.clip(t, lo, hi)[None, :])[0]

    eps = 1e-4
    ref = (f(theta + eps * v) - f(theta - eps * v)) / (2 * eps)
    h = 2e-3
    e1 = abs((f(theta + h * v) - f(theta)) / h - ref)
    e2 = abs((f(theta + h / 2 * v) - f(theta)) / (h / 2) - ref)
    assert 1.7 < e1 / e2 < 2.3


def test_starts_reproducible_and_in_bounds(wild):
    series, _, _ = wild
    a, _ = generate_starts(series, SMALL)
    b, _ = generate_starts(series, SMALL)
    assert np.array_equal(a, b)
    lo, hi = theta_bounds(SMALL, series)
    assert np.all(a >= lo) and np.all(a <= hi)
    c, _ = generate_starts(series, FitConfig(k0=4, i0=30, k1=2, max_iterations=60, seed=1))
    assert not np.array_equal(a, c)


@pytest.fixture(scope="module")
def small_fit(wild):
    return fit(wild[0], SMALL)


def test_fit_result_shape(small_fit, wild):
    r = small_fit
    assert r.objective >= 0
    assert r.free_parameter_count == 34
    assert 0 <= r.start_index < SMALL.k0
    assert r.residuals.shape == (4, wild[0].n)
    assert len(r.latent) == len(wild[0])


def test_monotone_screening(small_fit):
    d = small_fit.diagnostics
    assert len(d["survivors"]) == SMALL.k1
    assert small_fit.objective <= min(d["handoff_objectives"]) * (1 + 1e-12)
    assert sorted(d["handoff_objectives"]) == d["handoff_objectives"]


def test_fit_improves_on_starts(small_fit, wild):
    starts, _ = generate_starts(wild[0], SMALL)
    obj = ShootingObjective(wild[0], SMALL)
    assert small_fit.objective <= obj(starts).min()


def test_fit_deterministic_across_workers(small_fit, wild):
    again = fit(wild[0], SMALL, workers=2)
    assert json.dumps(again.to_dict(), sort_keys=True) == json.dumps(small_fit.to_dict(), sort_keys=True)


def test_fit_result_json_round_trip(small_fit):
    d = json.loads(json.dumps(small_fit.to_dict()))
    back = FitResult.from_dict(d)
    assert back.objective == small_fit.objective
    assert np.array_equal(back.theta, small_fit.theta)
    assert back.series.dates == small_fit.series.dates


def test_extra_start_index_and_warm_start(wild):
    series, params, _ = wild
    res = fit(series, SMALL, extra_starts=[encode(params)])
    # the exact truth is the best possible start and keeps its index
    assert res.start_index == SMALL.k0
    assert res.objective <= objective(series, encode(params), SMALL) + 1e-30


def test_fit_too_short():
    k = np.arange(9, dtype=float)
    s = series_from_arrays(1000 + k, 100 + k, 10 + k, 1e4 + k, 100_000)
    with pytest.raises(ArgumentError):
        fit(s, SMALL)


def test_spline_knots_follow_series_length(wild):
    knots = spline_knots(FitConfig(), wild[0])
    assert all(k[0] == 0 and k[-1] == wild[0].n - 1 for k in knots)
