import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from drough.controlled import (PathError, compose, compose_difference, compose_self_derivative,
                               composition_bound_ratio, constant_history, controlled_distance,
                               controlled_distance_report, controlled_norm, controlled_path, difference_path,
                               k_decomposition, linear_history, remainder)
from drough.driver import driver_metric_report, enhance_deterministic, sample_brownian, sample_fbm
from drough.scale import SPECTRAL, GridError, GridFn2, Grid, holder_norm2, norm_array
from drough.semigroup import NonlinearitySpec, eval_G, frac_laplacian_multiplier

K = 6
M = 2 * K + 1
GRID = Grid.with_delay(1.0, 24, 0.25)
DRV = sample_fbm(3, 0.45, GRID, 2, 4)


def coeffs(rng, shape=()):
    k = np.abs(np.arange(-K, K + 1))
    return (rng.standard_normal(shape + (M,)) + 1j * rng.standard_normal(shape + (M,))) / (1 + k) ** 1.5


def rough_path(seed, driver=DRV, start=0, stop=None, delayed=False, theta=0.0):
    """Path driven by X plus a smooth drift, with honest Gubinelli derivatives."""
    rng = np.random.default_rng(seed)
    stop = driver.grid.n_points if stop is None else stop
    L = stop - start
    c = coeffs(rng, (driver.d,))
    times = driver.grid.times[start:stop]
    y = coeffs(rng) + np.einsum("li,im->lm", driver.X[start:stop], c) + np.sin(times)[:, None] * coeffs(rng)
    yp = np.broadcast_to(c, (L, driver.d, M)).copy()
    yb = None
    if delayed:
        cb = 0.3 * coeffs(rng, (driver.d,))
        m = driver.m
        y = y + np.einsum("li,im->lm", driver.X[start - m:stop - m], cb)
        yb = np.broadcast_to(cb, (L, driver.d, M)).copy()
    return controlled_path(driver, start, y, yp, yb, theta)


# remainder


def test_remainder_without_derivatives_is_increment():
    p = rough_path(0)
    q = controlled_path(DRV, 0, p.y, np.zeros_like(p.y_prime))
    s, t = np.array([0, 3, 10]), np.array([5, 9, 24])
    assert np.array_equal(remainder(q)(s, t), p.y[t] - p.y[s])


def test_remainder_vanishes_for_driver_multiple():
    rng = np.random.default_rng(1)
    c = coeffs(rng, (2,))
    y = np.einsum("li,im->lm", DRV.X, c)
    p = controlled_path(DRV, 0, y, np.broadcast_to(c, (GRID.n_points, 2, M)).copy())
    s, t = np.triu_indices(GRID.n_points, 1)
    assert np.abs(remainder(p)(s, t)).max() <= 1e-14


def test_remainder_of_square_against_linear_driver():
    drv = enhance_deterministic(lambda t: t, GRID, 4)
    t = GRID.times
    y = (t ** 2)[:, None] * np.ones(M)
    yp = (2 * t)[:, None, None] * np.ones((1, M))
    p = controlled_path(drv, 0, y, yp)
    s_idx, t_idx = np.triu_indices(GRID.n_points, 1)
    want = ((t[t_idx] - t[s_idx]) ** 2)[:, None] * np.ones(M)
    assert np.allclose(remainder(p)(s_idx, t_idx), want, atol=1e-14)


def test_delayed_remainder_vanishes_for_lagged_multiple():
    rng = np.random.default_rng(4)
    m, n = GRID.delay_steps, GRID.n_points
    c, cb = coeffs(rng, (2,)), coeffs(rng, (2,))
    y = np.einsum("li,im->lm", DRV.X[m:], c) + np.einsum("li,im->lm", DRV.X[:n - m], cb)
    L = n - m
    p = controlled_path(DRV, m, y, np.broadcast_to(c, (L, 2, M)).copy(), np.broadcast_to(cb, (L, 2, M)).copy())
    s, t = np.triu_indices(L, 1)
    assert np.abs(remainder(p)(s + m, t + m)).max() <= 1e-14


@given(st.integers(0, 2**16), st.floats(-3, 3), st.floats(-3, 3))
@settings(max_examples=25, deadline=None)
def test_remainder_is_linear(seed, a, b):
    m = GRID.delay_steps
    p, q = rough_path(seed, start=m, delayed=True), rough_path(seed + 1, start=m, delayed=True)
    combo = controlled_path(DRV, m, a * p.y + b * q.y, a * p.y_prime + b * q.y_prime,
                            a * p.ybar_prime + b * q.ybar_prime)
    s, t = np.triu_indices(p.L, 1)
    s, t = s + m, t + m
    lhs = remainder(combo)(s, t)
    rhs = a * remainder(p)(s, t) + b * remainder(q)(s, t)
    assert np.abs(lhs - rhs).max() <= 1e-12 * (1 + np.abs(rhs).max())


def test_zero_delay_without_bar_is_bitwise_plain():
    drv = sample_brownian(0, Grid.uniform(1.0, 16), 2, 4)
    p = rough_path(2, driver=drv)
    q = controlled_path(drv, 0, p.y, p.y_prime, np.zeros_like(p.y_prime))
    s, t = np.triu_indices(p.L, 1)
    assert remainder(p)(s, t).tobytes() == remainder(q)(s, t).tobytes()
    a, b = controlled_norm(p, 0.4), controlled_norm(q, 0.4)
    assert a.holder_R_alpha == b.holder_R_alpha and a.holder_R_2alpha == b.holder_R_2alpha


def test_delayed_remainder_needs_history_of_driver():
    p = rough_path(0, delayed=False)
    q = controlled_path(DRV, 0, p.y, p.y_prime, p.y_prime)
    with pytest.raises(GridError):
        remainder(q)


def test_shape_checks():
    with pytest.raises(PathError):
        controlled_path(DRV, 0, np.zeros((3, M)), np.zeros((3, 1, M)))
    with pytest.raises(GridError):
        controlled_path(DRV, GRID.n_points - 1, np.zeros((3, M)), np.zeros((3, 2, M)))


# norms and distances


def test_zero_path_norm():
    p = controlled_path(DRV, 8, np.zeros((10, M)), np.zeros((10, 2, M)), np.zeros((10, 2, M)))
    assert controlled_norm(p, 0.4).total == 0.0


def test_constant_path_norm():
    c = coeffs(np.random.default_rng(5))
    p = constant_history(DRV, c, theta=0.3)
    assert controlled_norm(p, 0.4).total == pytest.approx(norm_array(c, 0.3), rel=1e-14)


@pytest.mark.parametrize("seed", range(6))
def test_increment_bound_by_norm(seed):
    alpha, theta = 0.4, 0.2
    m = GRID.delay_steps
    p = rough_path(seed, start=m, delayed=True, theta=theta)
    y = p.y
    dy = GridFn2(GRID, lambda s, t: y[t - m] - y[s - m], SPECTRAL, 1, m, GRID.n_points)
    lhs = holder_norm2(dy, alpha, theta - alpha)
    rho = driver_metric_report(DRV, None, alpha, (0, GRID.n_points)).rho
    assert lhs <= (1 + rho) * controlled_norm(p, alpha).total


def test_distance_of_shift_is_shift_norm():
    p = rough_path(1)
    c = coeffs(np.random.default_rng(9))
    q = controlled_path(DRV, 0, p.y + c, p.y_prime)
    rep = controlled_distance_report(q, p, 0.3, 0.4, 0.1)
    assert rep.sup_y == pytest.approx(norm_array(c, 0.1), rel=1e-13)
    assert rep.holder_R_alpha <= 1e-13 and rep.holder_R_2alpha <= 1e-13
    assert controlled_distance(p, p, 0.3, 0.4, 0.1) == 0.0


def test_distance_checks_windows():
    with pytest.raises(GridError):
        controlled_distance(rough_path(0, stop=10), rough_path(0, stop=12), 0.3, 0.4, 0.0)


def test_distance_is_symmetric():
    m = GRID.delay_steps
    p, q = rough_path(0, start=m, delayed=True), rough_path(1, start=m, delayed=True)
    assert controlled_distance(p, q, 0.3, 0.4, 0.0) == pytest.approx(controlled_distance(q, p, 0.3, 0.4, 0.0),
                                                                     rel=1e-13)


# histories


def test_linear_history_has_zero_remainder():
    rng = np.random.default_rng(0)
    h = linear_history(DRV, coeffs(rng), coeffs(rng, (2,)))
    assert h.L == GRID.delay_steps + 1
    s, t = np.triu_indices(h.L, 1)
    assert np.abs(remainder(h)(s, t)).max() <= 1e-14


def test_constant_history_shape():
    h = constant_history(DRV, np.ones(M))
    assert h.y.shape == (GRID.delay_steps + 1, M) and not h.y_prime.any()


# composition


def lagged_pair(seed, lo=None):
    m = GRID.delay_steps
    lo = m if lo is None else lo
    p = rough_path(seed, start=lo)
    q = rough_path(seed + 100, start=lo - m, stop=GRID.n_points - m)
    return p, q


def test_affine_composition_drops_delay_slot():
    p, q = lagged_pair(0)
    zero_q = controlled_path(DRV, q.start, np.zeros_like(q.y), np.zeros_like(q.y_prime))
    G = NonlinearitySpec("affine", a=(2.0,), b=(0.0,), offset=(0.5,))
    c = compose(G, p, zero_q)
    want = 2.0 * p.y
    want[:, K] += 0.5
    assert np.allclose(c.y[:, 0], want)
    assert np.allclose(c.y_prime[:, 0], 2.0 * p.y_prime)
    assert not c.ybar_prime.any()


def test_frac_composition_delayed_derivative():
    p, q = lagged_pair(1)
    G = NonlinearitySpec("frac_laplacian_affine", a=1.0, b=0.7, sigma=0.3)
    c = compose(G, p, q, r=0.25)
    m = GRID.delay_steps
    lagged = q.y_prime[p.start - m - q.start: p.stop - m - q.start]
    assert np.allclose(c.ybar_prime[:, 0], 0.7 * lagged * frac_laplacian_multiplier(K, 0.3))
    assert c.theta == pytest.approx(-0.3)


def test_identity_composition_returns_path():
    p = rough_path(2)
    c = compose(NonlinearitySpec("affine", a=1.0, b=0.0), p, None)
    assert np.array_equal(c.y[:, 0], p.y) and np.array_equal(c.y_prime[:, 0], p.y_prime)
    assert c.ybar_prime is None


def test_compose_checks_delay_and_coverage():
    p, q = lagged_pair(0)
    G = NonlinearitySpec("affine")
    with pytest.raises(GridError):
        compose(G, p, q, r=0.5)
    with pytest.raises(GridError):
        compose(G, p, q.window(q.start + 2, q.stop))


def test_composition_bound_ratio_finite():
    G = NonlinearitySpec("smooth_bounded", a=1.0, b=0.5, cutoff=4)
    ratios = [composition_bound_ratio(G, *lagged_pair(s), alpha=0.4) for s in range(50)]
    assert np.all(np.isfinite(ratios)) and max(ratios) > 0


def test_self_derivative_precondition():
    m = GRID.delay_steps
    G = NonlinearitySpec("affine", a=(0.5, -1.0), b=(1.0, 0.2))
    p, q = lagged_pair(3)
    z = q.y[p.start - m - q.start: p.stop - m - q.start]
    good = controlled_path(DRV, p.start, p.y, eval_G(G, p.y, z))
    out = compose_self_derivative(G, good, q)
    assert out.y.shape == (good.L, 2, M)
    bad_yp = good.y_prime.copy()
    bad_yp[5] += 1e-3
    with pytest.raises(PathError, match=f"node {p.start + 5}"):
        compose_self_derivative(G, controlled_path(DRV, p.start, p.y, bad_yp), q)
    assert np.isfinite(composition_bound_ratio(G, good, q, 0.4, self_derivative=True))


def test_composition_difference_zero_for_same_inputs():
    p, q = lagged_pair(4)
    G = NonlinearitySpec("smooth_bounded", a=1.0, b=0.5, cutoff=4)
    assert compose_difference(G, p, q, p, q).lhs == 0.0


def test_composition_difference_affine_is_linear():
    p, q = lagged_pair(5)
    u, v = lagged_pair(6)
    G = NonlinearitySpec("affine", a=1.5, b=-0.5)
    res = compose_difference(G, p, q, u, v)
    direct = controlled_norm(compose(G, difference_path(p, u), difference_path(q, v)), 0.4).total
    assert res.lhs == pytest.approx(direct, rel=1e-12)


def test_composition_difference_ratio_finite():
    G = NonlinearitySpec("smooth_bounded", a=1.0, b=0.5, cutoff=4)
    ratios = [compose_difference(G, *lagged_pair(s), *lagged_pair(s + 1)).ratio for s in range(10)]
    assert np.all(np.isfinite(ratios))


@pytest.mark.parametrize("pair", [(8, 9), (8, 20), (10, 24)])
def test_k_decomposition_sums_to_remainder(pair):
    p, q = lagged_pair(7)
    G = NonlinearitySpec("smooth_bounded", a=1.0, b=0.5, cutoff=4)
    dec = k_decomposition(G, p, q, *pair, quad_points=24)
    assert np.abs(dec.total - dec.R).max() <= 1e-10 * (1 + np.abs(dec.R).max())
