import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from curnds.data import series_from_arrays
from curnds.errors import ArgumentError, DegenerateError, InfeasibleError
from curnds.model import (CurndsParams, FullState, LatentPath, PowerParams,
                          effective_reproduction, initial_state, latent_path, power_flow,
                          simulate, step)
from curnds.spline import RateSpline, default_knots


def const_params(alpha=1.0, beta=1.0, rho=1.0, mu=1.0, phi=0.0, psi=0.0,
                 r=0.0, d=0.0, rt=0.0, dt=0.0, h=0.0, u0=0.0, s0=0.0, du0=0.0, n=30):
    knots = default_knots(n, 3)

    def sp(v):
        return RateSpline(knots, np.full(5, v))

    return CurndsParams(PowerParams(alpha, beta, rho, mu, phi, psi), sp(r), sp(d), sp(rt), sp(dt), sp(h),
                        u0=u0, s0=s0, du0=du0)


def random_params(rng, n=100):
    knots = default_knots(n, 3)

    def sp(lo, hi):
        return RateSpline(knots, rng.uniform(lo, hi, 5))

    powers = PowerParams(*rng.uniform(0.05, 2.0, 4), phi=10 ** rng.uniform(-4, -0.1),
                         psi=10 ** rng.uniform(-4, -0.1))
    return CurndsParams(powers, sp(0, 0.5), sp(0, 0.5), sp(0, 0.5), sp(0, 0.5), sp(0, 0.01))


def random_state(rng):
    v = rng.uniform(0, 1, 8) * np.array([1e6, 1e4, 1e4, 1e3, 1e4, 1e4, 1e3, 1e6])
    return FullState(*v)


def series_for(P0, R0, C0, D0, T0=0.0, length=10):
    ones = np.ones(length)
    return series_from_arrays(R0 * ones, C0 * ones, D0 * ones, T0 * ones, P0)


def test_initial_state_identity():
    s = initial_state(series_for(1000, 0, 0, 0), const_params())
    assert s.N == 1000


def test_initial_state_arithmetic():
    s = initial_state(series_for(1000, 20, 15, 5), const_params(u0=50, s0=10, du0=0))
    assert s.N == 900
    assert (s.U, s.S, s.R, s.C, s.D_C) == (50, 10, 20, 15, 5)


def test_initial_state_infeasible():
    with pytest.raises(InfeasibleError):
        initial_state(series_for(1000, 20, 15, 5), const_params(u0=900, s0=100))


def test_zero_flow_step_is_identity():
    st0 = FullState(1000, 5, 100, 1, 20, 50, 2, 300)
    assert step(st0, const_params(), 3) == st0


def test_bilinear_step_example():
    p = const_params(phi=1e-4, psi=1e-3)
    st0 = FullState(1000, 0, 100, 0, 0, 50, 0, 0)
    st1 = step(st0, p, 0)
    assert st1.N == pytest.approx(990, rel=1e-15)
    assert st1.U == pytest.approx(105, rel=1e-15)
    assert st1.C == pytest.approx(55, rel=1e-15)
    assert (st1.S, st1.D_U, st1.R, st1.D_C, st1.T) == (0, 0, 0, 0, 0)


def test_power_flow_against_high_precision():
    mpmath.mp.dps = 50
    ref = mpmath.mpf("0.02") * mpmath.power(mpmath.mpf("1e4"), mpmath.mpf("0.9")) \
        * mpmath.power(mpmath.mpf("8e6"), mpmath.mpf("0.05"))
    got = power_flow(0.02, 1e4, 0.9, 8e6, 0.05)
    assert float(got) == pytest.approx(float(ref), rel=1e-14)
    p = const_params(alpha=0.9, beta=0.05, phi=0.02)
    st1 = step(FullState(8e6, 0, 1e4, 0, 0, 0, 0, 0), p, 0)
    assert 8e6 - st1.N == pytest.approx(float(ref), rel=1e-9)


def test_empty_compartment_generates_no_flow():
    assert power_flow(0.5, 0.0, 0.3, 100.0, 0.2) == 0.0
    assert power_flow(0.5, 10.0, 0.3, 0.0, 0.2) == 0.0


def test_power_law_homogeneity():
    rng = np.random.default_rng(0)
    for _ in range(50):
        a, b = rng.uniform(0.05, 2, 2)
        U, N, c = rng.uniform(1, 1e4), rng.uniform(1, 1e7), rng.uniform(0.1, 10)
        f1 = power_flow(0.01, U, a, N, b)
        f2 = power_flow(0.01, c * U, a, N, b)
        assert f2 == pytest.approx(c ** a * f1, rel=1e-12)


def test_bilinear_reduction():
    rng = np.random.default_rng(1)
    for _ in range(20):
        phi, psi = rng.uniform(1e-7, 1e-5, 2)
        st0 = FullState(1e5, 0, 500, 0, 0, 200, 0, 0)
        st1 = step(st0, const_params(phi=phi, psi=psi), 0)
        assert st1.N == pytest.approx(1e5 - phi * 500 * 1e5, rel=1e-15)
        assert st1.C == pytest.approx(200 + psi * 500 * 200, rel=1e-15)
        assert st1.U == pytest.approx(500 + phi * 500 * 1e5 - psi * 500 * 200, rel=1e-15)


def test_simulate_horizon_validation():
    with pytest.raises(ArgumentError):
        simulate(FullState(1, 0, 0, 0, 0, 0, 0, 0), const_params(), 0)


def test_zero_model_constant_trajectory():
    st0 = FullState(1000, 5, 100, 1, 20, 50, 2, 300)
    traj = simulate(st0, const_params(n=100), 100)
    assert len(traj) == 101
    np.testing.assert_array_equal(traj.values, np.tile(st0.as_array(), (101, 1)))


def test_conservation_and_monotone_stocks():
    rng = np.random.default_rng(2)
    for _ in range(50):
        traj = simulate(random_state(rng), random_params(rng), 100)
        tot = traj.totals()
        np.testing.assert_allclose(tot, tot[0], rtol=1e-9)
        assert np.all(traj.values >= 0)
        for name in ("D_U", "D_C", "R", "S", "T"):
            assert np.all(np.diff(traj.column(name)) >= 0)
        assert np.all(np.diff(traj.column("N")) <= 0)


def test_cap_drives_stock_to_zero():
    p = const_params(rt=0.8, dt=0.6)
    st1 = step(FullState(1000, 0, 100, 0, 0, 0, 0, 0), p, 0)
    assert st1.U == 0.0
    assert st1.S == pytest.approx(100 * 0.8 / 1.4)
    assert st1.D_U == pytest.approx(100 * 0.6 / 1.4)
    p = const_params(alpha=1, beta=1, phi=0.5)
    st1 = step(FullState(10, 0, 100, 0, 0, 0, 0, 0), p, 0)
    assert st1.N == 0.0 and st1.U == 110


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_conservation_property(seed):
    rng = np.random.default_rng(seed)
    traj = simulate(random_state(rng), random_params(rng), 100)
    tot = traj.totals()
    assert np.max(np.abs(tot - tot[0])) <= 1e-9 * tot[0]


def test_latent_path_matches_full_simulation():
    rng = np.random.default_rng(4)
    p = random_params(rng, n=29)
    st0 = FullState(1e6, 10, 500, 0, 100, 300, 10, 1000)
    traj = simulate(st0, p, 29)
    series = series_from_arrays(traj.column("R"), traj.column("C"), traj.column("D_C"),
                                traj.column("T"), int(round(traj.totals()[0])))
    p = CurndsParams(p.powers, *p.splines(), u0=500, s0=10, du0=0)
    lat = latent_path(p, series)
    np.testing.assert_allclose(lat.U, traj.column("U"), rtol=1e-9)
    np.testing.assert_allclose(lat.D_U, traj.column("D_U"), rtol=1e-9, atol=1e-9)


def test_effective_reproduction_identity():
    p = const_params(phi=0.4, r=0.1, d=0.1, rt=0.1, dt=0.1, n=9)
    series = series_for(1000, 0, 10, 0)
    lat = LatentPath(np.full(10, 1000.0), np.zeros(10), np.zeros(10), np.zeros(10))
    np.testing.assert_allclose(effective_reproduction(p, lat, series), 1.0, rtol=1e-15)


def test_effective_reproduction_degenerate():
    p = const_params(phi=0.4, n=9)
    series = series_for(1000, 0, 10, 0)
    lat = LatentPath(np.full(10, 1000.0), np.zeros(10), np.zeros(10), np.zeros(10))
    with pytest.raises(DegenerateError):
        effective_reproduction(p, lat, series)


def test_params_serialization_round_trip():
    rng = np.random.default_rng(9)
    p = random_params(rng)
    q = CurndsParams.from_dict(p.to_dict())
    assert q.powers == p.powers
    np.testing.assert_array_equal(q.h_spline.values, p.h_spline.values)
