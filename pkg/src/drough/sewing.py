"""Semigroup-twisted sewing and the delayed rough convolution.

``sew`` approximates ``K_t(f) = lim sum_{[u,v] in P} S_{t-u} f_{v,u}`` over
dyadic partitions of ``[start, t]`` whose nodes are rounded onto the grid.
Once a level resolves every grid cell the sum is the grid-level sewing and
no finer partition exists.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .controlled import DelayedControlledPath, controlled_distance, controlled_norm
from .driver import DelayedRoughDriver, rough_distance
from .scale import Grid, GridError, max_mode_of, norm_array
from .semigroup import SemigroupSpec


class SewingError(RuntimeError):
    """Dyadic sums failed to settle."""


@dataclass(frozen=True)
class Germ:
    """Two-index germ ``f_{v,u}``; ``evaluator(u, v)`` is vectorised over index arrays.

    ``exponents`` records the declared decomposition orders ``(alpha, 2 alpha)``.
    """

    evaluator: Callable[[np.ndarray, np.ndarray], np.ndarray]
    exponents: tuple[float, float] = (0.0, 0.0)

    def __call__(self, u, v):
        return self.evaluator(np.asarray(u), np.asarray(v))

    def __add__(self, other: "Germ") -> "Germ":
        f, g = self.evaluator, other.evaluator
        return Germ(lambda u, v: f(u, v) + g(u, v), self.exponents)

    def scaled(self, a) -> "Germ":
        f = self.evaluator
        return Germ(lambda u, v: a * f(u, v), self.exponents)


@dataclass(frozen=True)
class SewResult:
    value: np.ndarray
    increments: tuple[float, ...]
    converged: bool
    levels: int


def _partition(start: int, stop: int, level: int) -> np.ndarray:
    k = stop - start
    pieces = min(1 << level, k)
    return np.unique(start + np.rint(np.arange(pieces + 1) * (k / pieces)).astype(int))


def _weighted_sum(germ: Germ, semigroup: SemigroupSpec, dt: float, nodes: np.ndarray, t: int) -> np.ndarray:
    u, v = nodes[:-1], nodes[1:]
    vals = germ(u, v)
    K = max_mode_of(vals)
    lam = semigroup.rates(K)
    w = np.exp(-np.outer((t - u) * dt, lam))
    w = w.reshape((len(u),) + (1,) * (vals.ndim - 2) + (w.shape[-1],))
    return (w * vals).sum(axis=0)


def sew(germ: Germ, semigroup: SemigroupSpec, grid: Grid, t: int, refine_levels: int | None = 6,
        start: int | None = None, theta: float = 0.0, tol: float = 1e-9) -> SewResult:
    """Dyadic sewing of ``germ`` on ``[start, t]`` (node indices; ``start`` defaults to time 0).

    ``refine_levels=None`` refines until every grid cell is resolved.
    Increments between successive levels are measured in ``||.||_theta``.
    A run of at least three non-decreasing increments that stays above
    tolerance raises :class:`SewingError`.
    """
    start = grid.zero_index if start is None else start
    if not 0 <= start <= t < grid.n_points:
        raise GridError("sewing interval outside the grid")
    if t == start:
        probe = germ(np.array([start]), np.array([min(start + 1, grid.n_points - 1)]))
        return SewResult(np.zeros_like(probe[0]), (), True, 0)
    if refine_levels is not None and refine_levels < 1:
        raise ValueError("refine_levels must be >= 1")
    k = t - start
    full = max(0, math.ceil(math.log2(k)))
    top = full if refine_levels is None else min(refine_levels, full)
    prev = None
    incs = []
    value = None
    for level in range(0, top + 1):
        value = _weighted_sum(germ, semigroup, grid.dt, _partition(start, t, level), t)
        if prev is not None:
            incs.append(float(np.max(norm_array(value - prev, theta))))
        prev = value
    scale = 1.0 + float(np.max(norm_array(value, theta)))
    converged = not incs or incs[-1] < tol * scale
    # short rough intervals fluctuate; only a monotone run of growth is a failure
    if len(incs) >= 3 and all(b >= a for a, b in zip(incs, incs[1:])) and incs[-1] > tol * scale:
        raise SewingError(f"Cauchy increments did not decrease: {incs}")
    return SewResult(value, tuple(incs), converged, top)


# ---------------------------------------------------------------------------
# the rough convolution germ


def germ_values(y, yp, yb, dX, A, Ad) -> np.ndarray:
    """``y.dX + sum_ij y'^{ij} XX^{ji} + ybar'^{ij} XX(-r)^{ji}`` for stacked cells.

    Shapes: ``y (P, d, M)``, ``yp, yb (P, d, d, M)``, ``dX (P, d)``,
    ``A, Ad (P, d, d)``; ``yb=None`` omits the delayed term.
    """
    out = np.einsum("pim,pi->pm", y, dX) + np.einsum("pijm,pji->pm", yp, A)
    if yb is not None:
        out = out + np.einsum("pijm,pji->pm", yb, Ad)
    return out


def convolution_germ(driver: DelayedRoughDriver, p: DelayedControlledPath) -> Germ:
    """Germ of the rough convolution of a ``d``-component path."""
    if p.cshape != (driver.d,):
        raise ValueError(f"rough convolution needs a path with {driver.d} components, got {p.cshape}")
    off = p.start

    def ev(u, v):
        u = np.atleast_1d(u)
        v = np.atleast_1d(v)
        if np.any(u < off) or np.any(v >= p.stop):
            raise GridError("germ evaluated outside the path")
        yb = None if p.ybar_prime is None else p.ybar_prime[u - off]
        Ad = None if yb is None else driver.delayed_area(u, v)
        return germ_values(p.y[u - off], p.y_prime[u - off], yb, driver.increment(u, v), driver.area(u, v), Ad)

    return Germ(ev)


def cell_germs(driver: DelayedRoughDriver, p: DelayedControlledPath) -> np.ndarray:
    """Germ on every cell ``[j, j+1]`` of the path, shape ``(L-1, M)``."""
    j = np.arange(p.start, p.stop - 1)
    m = driver.m
    yb = None if p.ybar_prime is None else p.ybar_prime[:-1]
    Ad = None if yb is None else driver.cell_delayed_area[j - m]
    return germ_values(p.y[:-1], p.y_prime[:-1], yb, driver.X[j + 1] - driver.X[j], driver.cell_area[j], Ad)


def sewn_path(semigroup: SemigroupSpec, dt: float, cells: np.ndarray, initial: np.ndarray | None = None) -> np.ndarray:
    """Grid-level sewing ``Z_{j+1} = S_dt (Z_j + f_j)`` with ``Z_0 = initial`` (default 0)."""
    K = max_mode_of(cells)
    fac = semigroup.factors(K, dt)
    Z = np.empty((cells.shape[0] + 1,) + cells.shape[1:], dtype=complex)
    Z[0] = 0.0 if initial is None else initial
    for j in range(cells.shape[0]):
        Z[j + 1] = fac * (Z[j] + cells[j])
    return Z


def rough_convolution(driver: DelayedRoughDriver, p: DelayedControlledPath, semigroup: SemigroupSpec, t: int,
                      refine_levels: int | None = None, start: int | None = None) -> np.ndarray:
    """``int_start^t S_{t,u} y_u . dX_u`` by sewing the compensated germ.

    The default refinement resolves every grid cell; ``start`` defaults to
    the first node of ``p``.
    """
    s0 = p.start if start is None else start
    return sew(convolution_germ(driver, p), semigroup, driver.grid, t, refine_levels, start=s0).value


# ---------------------------------------------------------------------------
# local expansion


@dataclass(frozen=True)
class LocalExpansionResult:
    slope: float
    exact: bool
    lengths: np.ndarray
    errors: np.ndarray


def local_expansion_error(driver, p, semigroup, beta: float, pair_sample: int = 16, alpha: float = 0.4,
                          theta: float | None = None, starts_per_length: int = 4) -> LocalExpansionResult:
    """Fit ``log err`` against ``log(t - s)`` for the one-germ expansion of the convolution.

    ``err(s, t) = ||int_s^t S_{t,u} y_u dX - S_{t,s} f_{t,s}||_{theta - 2 alpha + beta}``,
    with the integral taken at grid resolution. Pair lengths are log-spaced
    and each length keeps its worst error over ``starts_per_length`` starts.
    """
    if not 0 <= beta < 3 * alpha:
        raise ValueError("need 0 <= beta < 3 alpha")
    th = p.theta if theta is None else theta
    norm_theta = th - 2 * alpha + beta
    dt = driver.grid.dt
    L = p.L
    germ = convolution_germ(driver, p)
    cells = cell_germs(driver, p)
    K = max_mode_of(cells)
    lam = semigroup.rates(K)
    lengths = np.unique(np.rint(np.geomspace(2, max(2, (L - 1) // 2), pair_sample)).astype(int))
    errs = []
    for ell in lengths:
        worst = 0.0
        for s in np.unique(np.linspace(p.start, p.stop - 1 - ell, starts_per_length).astype(int)):
            t = s + ell
            c = np.arange(s, t)
            w = np.exp(-np.outer((t - c) * dt, lam))
            ref = (w * cells[c - p.start]).sum(axis=0)
            approx = np.exp(-lam * ell * dt) * germ(np.array([s]), np.array([t]))[0]
            worst = max(worst, float(norm_array(ref - approx, norm_theta)))
        errs.append(worst)
    errs = np.asarray(errs)
    scale = 1.0 + float(np.max(norm_array(cells, norm_theta), initial=0.0))
    if np.all(errs <= 1e-13 * scale):
        return LocalExpansionResult(float("nan"), True, lengths * dt, errs)
    good = errs > 1e-13 * scale
    if good.sum() < 8:
        raise ValueError(f"only {int(good.sum())} usable pairs, need at least 8")
    slope = np.polyfit(np.log(lengths[good] * dt), np.log(errs[good]), 1)[0]
    return LocalExpansionResult(float(slope), False, lengths * dt, errs)


# ---------------------------------------------------------------------------
# convolution as a controlled path and its stability


@dataclass(frozen=True)
class ConvolutionResult:
    path: DelayedControlledPath
    ratio_ii: float | None = None
    ratio_iii: float | None = None


def convolution_path(driver, p, semigroup, sigma: float = 0.0, initial=None) -> DelayedControlledPath:
    """``(zeta, zeta') = (int S y dX, y)`` on the nodes of ``p`` at regularity ``theta + sigma``."""
    cells = cell_germs(driver, p)
    zeta = sewn_path(semigroup, driver.grid.dt, cells, initial)
    return DelayedControlledPath(driver, p.start, zeta, p.y.copy(), None, p.theta + sigma)


def convolution_as_controlled(driver, p, semigroup, sigma: float, alpha: float = 0.4,
                              alpha_tilde: float | None = None, bounds: bool = True) -> ConvolutionResult:
    """Controlled structure of the convolution, with optional bound ratios.

    ``ratio_ii`` divides ``||zeta, zeta'||_{2 alpha~, theta+sigma}`` by
    ``(1 + rho) ||y||_{2 alpha~, theta} T^{lambda0} + ||y_0||_theta`` and
    ``ratio_iii`` the ``2 alpha`` norm by its counterpart.
    """
    at = alpha if alpha_tilde is None else alpha_tilde
    if not 0 < sigma < at:
        raise ValueError("need 0 < sigma < alpha_tilde")
    path = convolution_path(driver, p, semigroup, sigma)
    if not bounds:
        return ConvolutionResult(path)
    T = (p.L - 1) * driver.grid.dt
    lam0 = min(alpha - at, at - sigma)
    rho = rough_distance(driver, None, alpha, (p.start, p.stop))
    th = p.theta
    y0 = float(norm_array(p.y[0], th).sum())
    lhs_ii = controlled_norm(path, at).total
    rhs_ii = (1 + rho) * controlled_norm(p, at, th).total * T ** lam0 + y0
    lhs_iii = controlled_norm(path, alpha).total
    yp0 = float(norm_array(p.y_prime[0], th - alpha).sum()) + float(norm_array(p.ybar_or_zero()[0], th - alpha).sum())
    rhs_iii = (1 + rho) * (controlled_norm(p, alpha, th).total * T ** (alpha - sigma) + yp0) + y0
    return ConvolutionResult(path, lhs_ii / rhs_ii if rhs_ii else 0.0, lhs_iii / rhs_iii if rhs_iii else 0.0)


@dataclass(frozen=True)
class ConvolutionStability:
    distance: float
    rho_paths: float
    T_lambda: float
    rho_drivers: float
    initial_gap: float
    lam: float

    @property
    def rhs(self) -> float:
        return self.rho_paths * self.T_lambda + self.rho_drivers + self.initial_gap


def convolution_stability(driverX, pX, driverY, pY, semigroup, alpha_tilde: float, sigma: float,
                          alpha: float = 0.4) -> ConvolutionStability:
    """Distance of two convolutions next to the terms that bound it."""
    if not sigma < alpha_tilde < alpha or 3 * alpha_tilde - 2 * alpha - sigma <= 0:
        raise ValueError("need sigma < alpha~ < alpha and 3 alpha~ - 2 alpha - sigma > 0")
    zeta = convolution_path(driverX, pX, semigroup, sigma)
    chi = convolution_path(driverY, pY, semigroup, sigma)
    th = pX.theta
    lam = min(alpha - alpha_tilde, alpha_tilde * (alpha - sigma) / alpha, 3 * alpha_tilde - 2 * alpha - sigma)
    T = (pX.L - 1) * driverX.grid.dt
    return ConvolutionStability(
        distance=controlled_distance(zeta, chi, alpha_tilde, alpha, th + sigma),
        rho_paths=controlled_distance(pX, pY, alpha_tilde, alpha, th),
        T_lambda=T ** lam,
        rho_drivers=rough_distance(driverX, driverY, alpha, (pX.start, pX.stop)),
        initial_gap=float(norm_array(pX.y[0] - pY.y[0], th).sum()),
        lam=lam,
    )
