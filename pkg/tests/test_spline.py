import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from gtfuse import geometry as geo
from gtfuse.errors import InsufficientCoverage, OutOfDomain, UnsupportedOrder
from gtfuse.spline import (EuclidSpline, KnotGrid, So3Spline, TimeOffsetSpline, blending_matrix,
                           covering_grid, cumulative_basis, eval_euclid, eval_so3, fit_spline,
                           map_time, so3_body_rates, unmap_time)


def _cardinal(x, k):
    # Cox-de Boor recursion for the cardinal B-spline with support [0, k]
    if k == 1:
        return np.where((x >= 0) & (x < 1), 1.0, 0.0)
    return (x * _cardinal(x, k - 1) + (k - x) * _cardinal(x - 1, k - 1)) / (k - 1)


def _de_boor_cumulative(u, k):
    b = np.stack([_cardinal(u + (k - 1) - l, k) for l in range(k)], axis=-1)
    return np.cumsum(b[..., ::-1], axis=-1)[..., ::-1]


def _random_euclid(rng, order, count=12, dim=3, dt=0.1, t0=2.0):
    return EuclidSpline(KnotGrid(t0, dt, count), order, rng.normal(size=(count, dim)))


def _random_so3(rng, count=12, dt=0.1, t0=2.0, step=0.6):
    R = [Rotation.random(random_state=rng).as_matrix()]
    for _ in range(count - 1):
        R.append(R[-1] @ geo.so3_exp(step * rng.normal(size=3)))
    return So3Spline(KnotGrid(t0, dt, count), np.array(R))


def _interior_times(grid, order, n, rng, margin=1e-3):
    lo, hi = grid.domain(order)
    return rng.uniform(lo + margin, hi - margin, n)


# ------------------------------------------------------------- basis

def test_linear_basis():
    u = np.linspace(0, 1, 11)
    np.testing.assert_allclose(cumulative_basis(u, 2, 1.0), np.c_[np.ones(11), u], atol=1e-15)


@pytest.mark.parametrize("k", [2, 3, 4])
def test_cumulative_basis_matches_de_boor(k):
    u = np.linspace(0, 1, 1000, endpoint=False)
    np.testing.assert_allclose(cumulative_basis(u, k, 1.0), _de_boor_cumulative(u, k), atol=1e-14)


@pytest.mark.parametrize("k", [2, 3, 4])
def test_cumulative_basis_partition(k):
    u = np.linspace(0, 1, 1000, endpoint=False)
    B = cumulative_basis(u, k, 1.0)
    np.testing.assert_allclose(B[:, 0], 1.0, atol=1e-15)
    assert np.all(np.diff(B, axis=1) <= 1e-15)


def test_cubic_blending_matrix_values():
    M = blending_matrix(4) * 6
    np.testing.assert_allclose(M, [[6, 0, 0, 0], [5, 3, -3, 1], [1, 3, 3, -2], [0, 0, 0, 1]],
                               atol=1e-14)


@pytest.mark.parametrize("k", [1, 5, 6])
def test_unsupported_order(k):
    with pytest.raises(UnsupportedOrder):
        blending_matrix(k)


# -------------------------------------------------------- grid & domain

def test_domain_boundaries(rng):
    s = _random_euclid(rng, 4, count=8)
    lo, hi = s.grid.domain(4)
    assert (lo, hi) == pytest.approx((2.0, 2.5))
    s(lo)
    s(hi)
    for t in (lo - 1e-9, hi + 1e-9):
        with pytest.raises(OutOfDomain):
            s(t)


def test_end_of_domain_is_continuous(rng):
    s = _random_euclid(rng, 4, count=8)
    hi = s.grid.domain(4)[1]
    np.testing.assert_allclose(s(hi), s(hi - 1e-10), atol=1e-8)


def test_covering_grid_covers():
    g = covering_grid(1.03, 7.21, 0.05, 4)
    lo, hi = g.domain(4)
    assert lo <= 1.03 and hi >= 7.21
    assert hi - 7.21 < 0.05 + 1e-12


# ------------------------------------------------------------ Euclidean

def test_constant_spline(rng):
    c = rng.normal(size=3)
    s = EuclidSpline(KnotGrid(0.0, 0.1, 10), 4, np.tile(c, (10, 1)))
    t = _interior_times(s.grid, 4, 50, rng)
    np.testing.assert_allclose(s(t), np.tile(c, (50, 1)), atol=1e-14)
    np.testing.assert_allclose(s(t, 1), 0, atol=1e-12)
    np.testing.assert_allclose(s(t, 2), 0, atol=1e-10)


@pytest.mark.parametrize("order", [2, 4])
def test_linear_precision(rng, order):
    d = rng.normal(size=3)
    grid = KnotGrid(0.0, 0.2, 10)
    s = EuclidSpline(grid, order, np.arange(10)[:, None] * d)
    t = _interior_times(grid, order, 100, rng)
    np.testing.assert_allclose(s(t, 1), np.tile(d / 0.2, (100, 1)), rtol=1e-12)
    # value is the line through the control points at their centre times
    c = grid.centres(order)
    expect = ((t - c[0]) / 0.2)[:, None] * d
    np.testing.assert_allclose(s(t), expect, atol=1e-12)


def test_linear_spline_hits_control_points(rng):
    s = _random_euclid(rng, 2)
    knots = s.grid.t0 + s.grid.dt * np.arange(s.grid.count)
    np.testing.assert_allclose(s(knots), s.cps, atol=1e-14)


@pytest.mark.parametrize("order", [2, 3, 4])
def test_derivatives_finite_difference(rng, order):
    s = _random_euclid(rng, order, dt=0.05)
    h = 1e-5 * s.grid.dt
    # keep away from knots so the stencil stays inside one segment
    i = rng.integers(0, s.grid.n_segments(order), 50)
    t = s.grid.t0 + (i + rng.uniform(0.1, 0.9, 50)) * s.grid.dt
    fd1 = (s(t + h) - s(t - h)) / (2 * h)
    np.testing.assert_allclose(s(t, 1), fd1, rtol=1e-6, atol=1e-6 * np.abs(fd1).max())
    if order > 2:
        fd2 = (s(t + h, 1) - s(t - h, 1)) / (2 * h)
        np.testing.assert_allclose(s(t, 2), fd2, rtol=1e-6, atol=1e-6 * np.abs(fd2).max())


@pytest.mark.parametrize("order", [2, 4])
def test_locality(rng, order):
    s = _random_euclid(rng, order, count=14)
    j = 6
    cps = s.cps.copy()
    cps[j] += 1.0
    s2 = s.with_cps(cps)
    t = np.linspace(*s.grid.domain(order), 2001)
    seg, _ = s.grid.locate(t, order)
    changed = np.any(s2(t) != s(t), axis=1)
    affected = (seg >= j - order + 1) & (seg <= j)
    assert not np.any(changed & ~affected)
    # inside the affected span the value does change (except where the weight vanishes)
    assert changed[affected].mean() > 0.9


def test_cumulative_matches_point_form(rng):
    s = _random_euclid(rng, 4)
    t = _interior_times(s.grid, 4, 100, rng)
    i, W = s.weights(t)
    idx = i[:, None] + np.arange(4)
    np.testing.assert_allclose(np.einsum("nk,nkd->nd", W, s.cps[idx]), eval_euclid(s, t), atol=1e-13)


# ---------------------------------------------------------------- SO(3)

def test_so3_constant(rng):
    R = Rotation.random(random_state=rng).as_matrix()
    s = So3Spline(KnotGrid(0.0, 0.1, 8), np.tile(R, (8, 1, 1)))
    t = _interior_times(s.grid, 4, 40, rng)
    np.testing.assert_allclose(eval_so3(s, t), np.tile(R, (40, 1, 1)), atol=1e-14)
    w, Rd, Rdd = so3_body_rates(s, t)
    assert np.abs(w).max() == 0 and np.abs(Rd).max() == 0 and np.abs(Rdd).max() == 0


def test_so3_geodesic_constant_rate(rng):
    w0 = 0.7
    axis = np.array([0.0, 0.0, 1.0])
    R0 = Rotation.random(random_state=rng).as_matrix()
    grid = KnotGrid(0.0, 0.05, 30)
    c = grid.centres(4)
    s = So3Spline(grid, R0 @ geo.so3_exp(w0 * c[:, None] * axis))
    lo, hi = grid.domain(4)
    knots = np.arange(lo, hi + 1e-12, grid.dt)
    expect = R0 @ geo.so3_exp(w0 * knots[:, None] * axis)
    np.testing.assert_allclose(eval_so3(s, knots), expect, atol=1e-9)
    t = _interior_times(grid, 4, 100, rng)
    w, _, _ = so3_body_rates(s, t)
    np.testing.assert_allclose(w, np.tile([0, 0, w0], (100, 1)), atol=1e-6)


def test_so3_continuity_at_knots(rng):
    s = _random_so3(rng)
    lo, hi = s.grid.domain(4)
    knots = np.arange(lo + s.grid.dt, hi - 1e-9, s.grid.dt)
    eps = 1e-11
    np.testing.assert_allclose(eval_so3(s, knots - eps), eval_so3(s, knots + eps), atol=1e-9)


def test_so3_always_rotation(rng):
    s = _random_so3(rng, count=40, step=1.0)
    t = rng.uniform(*s.grid.domain(4), 10 ** 6)
    R = eval_so3(s, t)
    err = np.abs(np.swapaxes(R, -1, -2) @ R - np.eye(3)).max()
    assert err < 1e-9
    assert np.abs(np.linalg.det(R) - 1).max() < 1e-9


def test_so3_rate_derivatives_finite_difference(rng):
    s = _random_so3(rng, dt=0.05)
    i = rng.integers(0, s.grid.n_segments(4), 50)
    t = s.grid.t0 + (i + rng.uniform(0.1, 0.9, 50)) * s.grid.dt
    h = 1e-5 * s.grid.dt
    w, Rd, Rdd = so3_body_rates(s, t)
    fd = (eval_so3(s, t + h) - eval_so3(s, t - h)) / (2 * h)
    np.testing.assert_allclose(Rd, fd, rtol=1e-6, atol=1e-6 * np.abs(fd).max())
    _, Rd_p, _ = so3_body_rates(s, t + h)
    _, Rd_m, _ = so3_body_rates(s, t - h)
    fd2 = (Rd_p - Rd_m) / (2 * h)
    np.testing.assert_allclose(Rdd, fd2, rtol=1e-6, atol=1e-6 * np.abs(fd2).max())
    # omega is the body rate (R^T Rdot)^v
    np.testing.assert_allclose(w, geo.vee(np.swapaxes(eval_so3(s, t), -1, -2) @ Rd), atol=1e-12)


def test_so3_locality(rng):
    s = _random_so3(rng, count=14)
    j = 6
    cps = s.cps.copy()
    cps[j] = cps[j] @ geo.so3_exp([0.1, -0.2, 0.3])
    s2 = s.with_cps(cps)
    t = np.linspace(*s.grid.domain(4), 2001)
    seg, _ = s.grid.locate(t, 4)
    changed = np.any(eval_so3(s2, t) != eval_so3(s, t), axis=(1, 2))
    affected = (seg >= j - 3) & (seg <= j)
    assert not np.any(changed & ~affected)


# ---------------------------------------------------------- time offset

def test_map_time_identity_and_constant():
    g = KnotGrid(0.0, 20.0, 4)
    tau = np.linspace(0, 60, 7)
    np.testing.assert_array_equal(map_time(TimeOffsetSpline.constant(g, 0.0), tau), tau)
    np.testing.assert_allclose(map_time(TimeOffsetSpline.constant(g, 0.25), tau), tau + 0.25,
                               atol=1e-15)


def test_map_time_drift_one_ms_per_minute():
    off = TimeOffsetSpline(EuclidSpline(KnotGrid(0.0, 60.0, 2), 2, [0.0, 0.001]))
    assert float(map_time(off, 30.0)) == pytest.approx(30.0005, abs=1e-12)


def test_map_time_out_of_domain():
    off = TimeOffsetSpline.constant(KnotGrid(0.0, 20.0, 3), 0.1)
    with pytest.raises(OutOfDomain):
        map_time(off, 40.5)


def test_unmap_time_inverts(rng):
    off = TimeOffsetSpline(EuclidSpline(KnotGrid(0.0, 20.0, 4), 2, [0.1, 0.1003, 0.0998, 0.1004]))
    tau = rng.uniform(1, 59, 100)
    np.testing.assert_allclose(unmap_time(off, map_time(off, tau)), tau, atol=1e-12)


# --------------------------------------------------------------- fitting

def test_fit_recovers_euclid(rng):
    s = _random_euclid(rng, 4, count=20, dt=0.05)
    t = np.linspace(*s.grid.domain(4), 600)
    fit = fit_spline(t, s.grid, values=s(t))
    np.testing.assert_allclose(fit.cps, s.cps, atol=1e-8)


def test_fit_pairs_interface_constant():
    g = KnotGrid(0.0, 0.1, 8)
    lo, hi = g.domain(4)
    samples = [(t, np.array([1.0, -2.0])) for t in np.linspace(lo, hi, 100)]
    fit = fit_spline(samples, g)
    np.testing.assert_allclose(fit.cps, np.tile([1.0, -2.0], (8, 1)), atol=1e-12)


def test_fit_sinusoid_300hz():
    # 0.3 m at 1 Hz, sampled at 300 Hz, 0.05 s knots
    t = np.arange(0, 10, 1 / 300)
    y = 0.3 * np.sin(2 * np.pi * t)
    g = covering_grid(t[0], t[-1], 0.05, 4)
    fit = fit_spline(t, g, values=y)
    assert np.abs(fit(t)[:, 0] - y).max() < 1e-5


def test_fit_recovers_so3(rng):
    s = _random_so3(rng, count=20, dt=0.05, step=0.3)
    t = np.linspace(*s.grid.domain(4), 600)
    fit = fit_spline(t, s.grid, values=eval_so3(s, t), iterations=10)
    np.testing.assert_allclose(fit.cps, s.cps, atol=1e-8)


def test_fit_gap_raises(rng):
    g = KnotGrid(0.0, 0.1, 12)
    t = np.linspace(*g.domain(4), 300)
    t = t[(t < 0.3) | (t > 0.5)]
    with pytest.raises(InsufficientCoverage):
        fit_spline(t, g, values=np.zeros((len(t), 3)))
