"""Controlled and delayed controlled paths, their norms, distances and compositions.

A path lives on consecutive nodes ``start .. start+L-1`` of its driver's grid.
Arrays carry the node axis first and the mode axis last:

* ``y``: ``(L, *cshape, M)``
* ``y_prime`` and ``ybar_prime``: ``(L, *cshape, d, M)``

``ybar_prime=None`` marks a non-delayed controlled path; its remainder never
touches the lagged increments. Component norms are summed over components
(``||y'|| = sum_i ||y'^i||``), and the Hölder parts are seminorms.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .driver import DelayedRoughDriver, rough_distance
from .scale import GridError, GridFn2, SPECTRAL, holder_norm2, norm_array
from .semigroup import NonlinearitySpec, eval_D2G, eval_DG, eval_G


class PathError(ValueError):
    """Inconsistent controlled path data."""


@dataclass(frozen=True, eq=False)
class DelayedControlledPath:
    driver: DelayedRoughDriver
    start: int
    y: np.ndarray
    y_prime: np.ndarray
    ybar_prime: np.ndarray | None = None
    theta: float = 0.0

    def __post_init__(self):
        L = self.y.shape[0]
        d = self.driver.d
        want = self.y.shape[:-1] + (d, self.y.shape[-1])
        if self.y_prime.shape != want:
            raise PathError(f"y_prime has shape {self.y_prime.shape}, expected {want}")
        if self.ybar_prime is not None and self.ybar_prime.shape != want:
            raise PathError(f"ybar_prime has shape {self.ybar_prime.shape}, expected {want}")
        if self.start < 0 or self.start + L > self.driver.grid.n_points:
            raise GridError("path nodes fall outside the driver grid")

    @property
    def L(self) -> int:
        return self.y.shape[0]

    @property
    def stop(self) -> int:
        return self.start + self.L

    @property
    def grid(self):
        return self.driver.grid

    @property
    def cshape(self) -> tuple:
        return self.y.shape[1:-1]

    @property
    def delayed(self) -> bool:
        return self.ybar_prime is not None

    def window(self, lo: int, hi: int) -> "DelayedControlledPath":
        """Sub-path on global nodes ``lo .. hi-1``."""
        if not self.start <= lo < hi <= self.stop:
            raise GridError("window outside the path")
        a, b = lo - self.start, hi - self.start
        yb = None if self.ybar_prime is None else self.ybar_prime[a:b]
        return replace(self, start=lo, y=self.y[a:b], y_prime=self.y_prime[a:b], ybar_prime=yb)

    def ybar_or_zero(self) -> np.ndarray:
        return np.zeros_like(self.y_prime) if self.ybar_prime is None else self.ybar_prime

    def remainder(self) -> GridFn2:
        return remainder(self)


def controlled_path(driver, start, y, y_prime, ybar_prime=None, theta=0.0) -> DelayedControlledPath:
    return DelayedControlledPath(driver, int(start), np.asarray(y), np.asarray(y_prime),
                                 None if ybar_prime is None else np.asarray(ybar_prime), float(theta))


def _contract(deriv: np.ndarray, dX: np.ndarray, n_cdims: int) -> np.ndarray:
    """``sum_i deriv[..., i, :] * dX[..., i]`` with ``deriv`` carrying component axes."""
    dX = dX.reshape(dX.shape[:-1] + (1,) * n_cdims + (dX.shape[-1],))
    return np.einsum("...im,...i->...m", deriv, dX)


def remainder(p: DelayedControlledPath) -> GridFn2:
    """``R_{t,s} = dy_{t,s} - y'_s dX_{t,s} - ybar'_s dX_{t-r,s-r}`` on the path's nodes."""
    drv, off, m = p.driver, p.start, p.driver.m
    if p.delayed and p.start < m:
        raise GridError("delayed remainder needs X on [t-r, s-r]: path starts before time 0")
    y, yp, yb = p.y, p.y_prime, p.ybar_prime
    nc = len(p.cshape)

    def fn(s, t):
        s, t = np.broadcast_arrays(np.asarray(s), np.asarray(t))
        out = y[t - off] - y[s - off] - _contract(yp[s - off], drv.increment(s, t), nc)
        if yb is not None:
            out = out - _contract(yb[s - off], drv.increment(s - m, t - m), nc)
        return out

    return GridFn2(p.grid, fn, SPECTRAL, 1 + nc, p.start, p.stop)


def _components(arr: np.ndarray) -> np.ndarray:
    """Flatten component axes: ``(L, ..., M) -> (L, C, M)``."""
    return arr.reshape(arr.shape[0], -1, arr.shape[-1])


def _sup(arr: np.ndarray, theta: float) -> float:
    if arr.shape[0] == 0:
        return 0.0
    return float(norm_array(_components(arr), theta).max(axis=0).sum())


def _holder1(arr: np.ndarray, grid, start: int, alpha: float, theta: float) -> float:
    """Sum over components of the Hölder seminorm of ``delta arr``."""
    if arr.shape[0] < 2:
        return 0.0
    comps = _components(arr)
    total = 0.0
    for c in range(comps.shape[1]):
        v = comps[:, c]
        f = GridFn2(grid, lambda s, t, v=v: v[t - start] - v[s - start], SPECTRAL, 1, start, start + len(v))
        total += holder_norm2(f, alpha, theta)
    return total


def _holder_remainder(f: GridFn2, alpha: float, theta: float) -> float:
    if f.stop - f.start < 2:
        return 0.0
    if f.value_ndim == 1:
        return holder_norm2(f, alpha, theta)
    total = 0.0
    probe = f.fn(np.array(f.start), np.array(f.start))
    for idx in np.ndindex(*probe.shape[:-1]):
        g = GridFn2(f.grid, lambda s, t, idx=idx: f.fn(s, t)[(Ellipsis,) + idx + (slice(None),)],
                    SPECTRAL, 1, f.start, f.stop)
        total += holder_norm2(g, alpha, theta)
    return total


@dataclass(frozen=True)
class ControlledNormReport:
    sup_y: float
    sup_yprime: float
    holder_yprime: float
    sup_ybarprime: float
    holder_ybarprime: float
    holder_R_alpha: float
    holder_R_2alpha: float

    @property
    def total(self) -> float:
        return (self.sup_y + self.sup_yprime + self.holder_yprime + self.sup_ybarprime
                + self.holder_ybarprime + self.holder_R_alpha + self.holder_R_2alpha)


def controlled_norm(p: DelayedControlledPath, alpha: float, theta: float | None = None) -> ControlledNormReport:
    """The seven-term norm ``||y, y', ybar'||_{2 alpha, theta}``; ``theta`` defaults to the path's tag."""
    th = p.theta if theta is None else theta
    g, s0 = p.grid, p.start
    R = remainder(p)
    if p.delayed:
        sb, hb = _sup(p.ybar_prime, th - alpha), _holder1(p.ybar_prime, g, s0, alpha, th - 2 * alpha)
    else:
        sb = hb = 0.0
    return ControlledNormReport(
        sup_y=_sup(p.y, th),
        sup_yprime=_sup(p.y_prime, th - alpha),
        holder_yprime=_holder1(p.y_prime, g, s0, alpha, th - 2 * alpha),
        sup_ybarprime=sb,
        holder_ybarprime=hb,
        holder_R_alpha=_holder_remainder(R, alpha, th - alpha),
        holder_R_2alpha=_holder_remainder(R, 2 * alpha, th - 2 * alpha),
    )


@dataclass(frozen=True)
class DistanceReport:
    sup_y: float
    sup_yprime: float
    holder_yprime: float
    sup_ybarprime: float
    holder_ybarprime: float
    holder_R_alpha: float
    holder_R_2alpha: float

    @property
    def total(self) -> float:
        return (self.sup_y + self.sup_yprime + self.holder_yprime + self.sup_ybarprime
                + self.holder_ybarprime + self.holder_R_alpha + self.holder_R_2alpha)


def _check_same_nodes(p: DelayedControlledPath, q: DelayedControlledPath):
    if p.grid != q.grid or p.start != q.start or p.L != q.L:
        raise GridError("paths live on different grids or node windows")
    if p.driver.d != q.driver.d or p.y.shape != q.y.shape:
        raise PathError("paths have different shapes")


def controlled_distance_report(p, q, alpha_tilde: float, alpha: float, theta: float) -> DistanceReport:
    _check_same_nodes(p, q)
    g, s0 = p.grid, p.start
    dyp = p.y_prime - q.y_prime
    dyb = p.ybar_or_zero() - q.ybar_or_zero()
    if p.driver is q.driver:
        # the remainder is linear in the path for a fixed driver
        dR = remainder(difference_path(p, q))
    else:
        dR = remainder(p) - remainder(q)
    any_bar = p.delayed or q.delayed
    return DistanceReport(
        sup_y=_sup(p.y - q.y, theta),
        sup_yprime=_sup(dyp, theta - alpha),
        holder_yprime=_holder1(dyp, g, s0, alpha_tilde, theta - 2 * alpha),
        sup_ybarprime=_sup(dyb, theta - alpha) if any_bar else 0.0,
        holder_ybarprime=_holder1(dyb, g, s0, alpha_tilde, theta - 2 * alpha) if any_bar else 0.0,
        holder_R_alpha=_holder_remainder(dR, alpha_tilde, theta - alpha),
        holder_R_2alpha=_holder_remainder(dR, 2 * alpha_tilde, theta - 2 * alpha),
    )


def controlled_distance(p, q, alpha_tilde: float, alpha: float, theta: float) -> float:
    """``rho_{2 alpha~, 2 alpha, theta}(p, q)``: the seven difference terms."""
    return controlled_distance_report(p, q, alpha_tilde, alpha, theta).total


# ---------------------------------------------------------------------------
# history constructors


def constant_history(driver: DelayedRoughDriver, value: np.ndarray, theta: float = 0.0) -> DelayedControlledPath:
    """``phi = value`` on ``[-r, 0]`` with ``phi' = 0``."""
    value = np.asarray(value, dtype=complex)
    L = driver.m + 1
    y = np.broadcast_to(value, (L,) + value.shape).copy()
    yp = np.zeros((L,) + value.shape[:-1] + (driver.d, value.shape[-1]), dtype=complex)
    return DelayedControlledPath(driver, 0, y, yp, None, theta)


def linear_history(driver: DelayedRoughDriver, phi0: np.ndarray, slope: np.ndarray,
                   theta: float = 0.0) -> DelayedControlledPath:
    """``phi_t = phi0 + slope . (X_t - X_{-r})`` on ``[-r, 0]`` with ``phi' = slope``.

    ``slope`` has shape ``(d, M)``; the remainder vanishes identically.
    """
    phi0 = np.asarray(phi0, dtype=complex)
    slope = np.asarray(slope, dtype=complex)
    L = driver.m + 1
    dX = driver.X[:L] - driver.X[0]
    y = phi0 + np.einsum("li,im->lm", dX, slope)
    yp = np.broadcast_to(slope, (L,) + slope.shape).copy()
    return DelayedControlledPath(driver, 0, y, yp, None, theta)


# ---------------------------------------------------------------------------
# composition


def _lagged(q: DelayedControlledPath, lo: int, hi: int, m: int):
    a, b = lo - m - q.start, hi - m - q.start
    if a < 0 or b > q.L:
        raise GridError("second path does not cover the lagged nodes [t-r] of the first")
    return q.y[a:b], q.y_prime[a:b]


def compose(G: NonlinearitySpec, p: DelayedControlledPath, q: DelayedControlledPath | None,
            r: float | None = None) -> DelayedControlledPath:
    """``(G(y_t, z_{t-r}), D_1G y'_t, D_2G z'_{t-r})`` as a delayed controlled path.

    ``p`` and ``q`` are non-delayed controlled paths of a scalar field. ``q``
    must cover the lagged nodes; ``q=None`` composes without a delay slot
    (``z_{t-r}`` replaced by ``y_t`` and no ``ybar'``). The delay must be
    the driver's delay.
    """
    drv = p.driver
    if r is not None and abs(r - drv.grid.r) > 1e-12 * max(1.0, r):
        raise GridError(f"delay {r} differs from the driver delay {drv.grid.r}")
    if p.cshape != ():
        raise PathError("compose expects scalar-field paths")
    if q is None:
        z, zp = p.y, None
    else:
        if q.driver is not drv and q.driver != drv:
            raise PathError("both paths must be controlled by the same driver")
        z, zp = _lagged(q, p.start, p.stop, drv.m)
    m, mp, mb = compose_arrays(G, p.y, p.y_prime, z, zp)
    return DelayedControlledPath(drv, p.start, m, mp, mb, p.theta - G.smoothing)


def compose_arrays(G: NonlinearitySpec, y, yp, z, zp):
    """Array core of :func:`compose`; ``zp=None`` drops the delay slot."""
    m = eval_G(G, y, z)
    mp = eval_DG(G, y, z, yp, 1)
    mb = None if zp is None else eval_DG(G, y, z, zp, 2)
    return m, mp, mb


def compose_self_derivative(G: NonlinearitySpec, p, q, r=None, rtol: float = 1e-10) -> DelayedControlledPath:
    """As :func:`compose`, after checking ``y'_t = G(y_t, z_{t-r})`` node by node."""
    drv = p.driver
    z = p.y if q is None else _lagged(q, p.start, p.stop, drv.m)[0]
    want = eval_G(G, p.y, z)  # (L, d, M)
    err = np.abs(p.y_prime - want).reshape(p.L, -1).max(axis=1)
    scale = 1.0 + np.abs(want).reshape(p.L, -1).max(axis=1)
    bad = np.nonzero(err > rtol * scale)[0]
    if bad.size:
        k = int(bad[0])
        raise PathError(f"y' differs from G(y, z) at node {p.start + k} (time {drv.grid.time(p.start + k):.6g})")
    return compose(G, p, q, r)


def non_delayed_rho(driver: DelayedRoughDriver, alpha: float, lo: int, hi: int) -> float:
    """``rho_alpha(X)`` of the non-delayed rough path on the node window."""
    from .driver import driver_metric_report
    rep = driver_metric_report(driver, None, alpha, (lo, hi))
    return rep.path_holder + rep.area_holder


def composition_bound_ratio(G, p, q, alpha: float, theta: float | None = None, self_derivative: bool = False) -> float:
    """Ratio of the composed norm to the bracket of the composition bound.

    The bracket is ``(1 + rho(X on I1) + rho(X on I2))^2`` times
    ``(1 + |p| + |q|)^2``, or the quadratic-in-``q`` form when the path is
    self-derived. The hidden constant is what the ratio estimates.
    """
    th = p.theta if theta is None else theta
    comp = compose_self_derivative(G, p, q) if self_derivative else compose(G, p, q)
    lhs = controlled_norm(comp, alpha, th - G.smoothing).total
    drv = p.driver
    rho = (1 + non_delayed_rho(drv, alpha, p.start, p.stop)
           + non_delayed_rho(drv, alpha, p.start - drv.m, p.stop - drv.m)) ** 2
    np_ = controlled_norm(p, alpha, th).total
    nq = controlled_norm(q.window(p.start - drv.m, p.stop - drv.m), alpha, th).total if q is not None else 0.0
    bracket = (1 + np_ + np_ * nq + nq * nq) if self_derivative else (1 + np_ + nq) ** 2
    return lhs / (rho * bracket)


def difference_path(a: DelayedControlledPath, b: DelayedControlledPath) -> DelayedControlledPath:
    """``a - b`` as a path controlled by ``a``'s driver (same driver required)."""
    _check_same_nodes(a, b)
    yb = None if not (a.delayed or b.delayed) else a.ybar_or_zero() - b.ybar_or_zero()
    return replace(a, y=a.y - b.y, y_prime=a.y_prime - b.y_prime, ybar_prime=yb)


@dataclass(frozen=True)
class CompositionDifference:
    lhs: float
    rhs: float

    @property
    def ratio(self) -> float:
        return self.lhs / self.rhs if self.rhs > 0 else 0.0


def compose_difference(G, p, q, u, v, r=None, alpha: float = 0.4, theta: float | None = None) -> CompositionDifference:
    """Norm of the difference of two compositions against the cubic-bracket bound."""
    th = p.theta if theta is None else theta
    mm = compose(G, p, q, r)
    ll = compose(G, u, v, r)
    lhs = controlled_norm(difference_path(mm, ll), alpha, th - G.smoothing).total
    drv = p.driver
    lo2, hi2 = p.start - drv.m, p.stop - drv.m
    rho = (1 + non_delayed_rho(drv, alpha, p.start, p.stop) + non_delayed_rho(drv, alpha, lo2, hi2)) ** 2
    n = lambda w, lo=p.start, hi=p.stop: controlled_norm(w.window(lo, hi), alpha, th).total
    nq = lambda w: n(w, lo2, hi2)
    dist = n(difference_path(p, u)) + nq(difference_path(q.window(lo2, hi2), v.window(lo2, hi2)))
    bracket = (1 + n(p) + nq(q) + n(u) + nq(v)) ** 2
    return CompositionDifference(lhs, rho * dist * bracket)


# ---------------------------------------------------------------------------
# remainder decomposition of a composition


def _gauss_legendre01(n: int):
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


@dataclass(frozen=True)
class KDecomposition:
    K1: np.ndarray
    K2: np.ndarray
    K3: np.ndarray
    K4: np.ndarray
    R: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return self.K1 + self.K2 + self.K3 + self.K4


def k_decomposition(G: NonlinearitySpec, p, q, s: int, t: int, quad_points: int = 16) -> KDecomposition:
    """Split the composed remainder ``R^m_{t,s}`` into second-order Taylor pieces.

    With ``x = (y_s, z_{s-r})`` and ``h = (dy, dz)``:

    * ``K1, K2, K3``: ``int int D^2G(x + tau tau~ h) tau`` applied to
      ``(dy, dy)``, ``2 (dy, dz)`` and ``(dz, dz)``
    * ``K4 = D_1G(x) R^y_{t,s} + D_2G(x) R^z_{t-r,s-r}``

    The double integral is evaluated by tensor Gauss-Legendre quadrature.
    """
    drv = p.driver
    mlag = drv.m
    comp = compose(G, p, q)
    R = remainder(comp)(np.array(s), np.array(t))
    ys, yt = p.y[s - p.start], p.y[t - p.start]
    zs, zt = q.y[s - mlag - q.start], q.y[t - mlag - q.start]
    dy, dz = yt - ys, zt - zs
    nodes, weights = _gauss_legendre01(quad_points)
    zero = np.zeros_like(dy)
    K1 = K2 = K3 = 0.0
    for tau, wt in zip(nodes, weights):
        for tt, wtt in zip(nodes, weights):
            c = tau * tt
            yy, zz = ys + c * dy, zs + c * dz
            w = wt * wtt * tau
            K1 = K1 + w * eval_D2G(G, yy, zz, dy, zero, dy, zero)
            K2 = K2 + w * 2.0 * eval_D2G(G, yy, zz, dy, zero, zero, dz)
            K3 = K3 + w * eval_D2G(G, yy, zz, zero, dz, zero, dz)
    Ry = remainder(p)(np.array(s), np.array(t))
    Rz = remainder(q)(np.array(s - mlag), np.array(t - mlag))
    K4 = eval_DG(G, ys, zs, Ry, 1) + eval_DG(G, ys, zs, Rz, 2)
    shape = R.shape
    as_arr = lambda k: np.broadcast_to(np.asarray(k, dtype=complex), shape)
    return KDecomposition(as_arr(K1), as_arr(K2), as_arr(K3), as_arr(K4), R)
