"""Delayed rough drivers: sampling, second-level increments and driver metrics.

Conventions. For a path ``X`` the area and delayed area are

    XX[i, j]_{t,s}    = int_s^t (X^i_v - X^i_s) dX^j_v
    XX(-r)[i, j]_{t,s} = int_s^t (X^i_{v-r} - X^i_{s-r}) dX^j_v

so that ``XX_{t,s} - XX_{u,s} - XX_{t,u} = dX_{u,s} (x) dX_{t,u}`` and the
delayed relation has ``dX_{u-r,s-r}`` in the first slot. Both integrals are
replaced by symmetric (midpoint) sums over a refinement subgrid, which are
the exact iterated integrals of the piecewise linear interpolant.

Areas are stored per coarse cell. Arbitrary pairs are read through node
primitives ``P_k = sum_{fine j < k} mid_j (x) dX_j``, with

    XX_{t,s} = P_t - P_s - X_s (x) (X_t - X_s).
"""
from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Callable

import numpy as np
from scipy.linalg import cholesky

from .scale import Grid, GridError, GridFn2, REAL, holder_norm2

FLAVORS = ("fbm_symmetric", "bm_stratonovich", "bm_paper_eq963", "deterministic")
FLAVOR_CODES = {name: code for code, name in enumerate(FLAVORS)}
MAGIC = b"DRPD1"
MAX_CHOLESKY_NODES = 4097


class DriverError(ValueError):
    """Invalid driver construction or query."""


@dataclass(frozen=True, eq=False)
class DelayedRoughDriver:
    """Path ``X`` on ``[-r, T]`` with per-cell area and delayed area.

    ``cell_area[c]`` is the area of cell ``[c, c+1]`` (node indices of the
    whole grid); ``cell_delayed_area[c]`` belongs to cell ``[m+c, m+c+1]``,
    i.e. cells of ``[0, T]`` only.

    ``node_area`` / ``node_delayed_area`` hold the node primitives. Drivers
    built from a fine path compute them directly from the fine sums, so they
    act as an independent check of the cell data; drivers read from a file
    derive them from the cells.
    """

    grid: Grid
    X: np.ndarray
    cell_area: np.ndarray
    cell_delayed_area: np.ndarray
    subgrid_factor: int
    flavor: str
    seed: int = 0
    node_area: np.ndarray | None = field(default=None, repr=False)
    node_delayed_area: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.flavor not in FLAVOR_CODES:
            raise DriverError(f"unknown flavor {self.flavor!r}")
        n, m = self.grid.n_points, self.grid.delay_steps
        if self.X.ndim != 2 or self.X.shape[0] != n:
            raise DriverError("X must have shape (n_points, d)")
        d = self.X.shape[1]
        if self.cell_area.shape != (n - 1, d, d):
            raise DriverError("cell_area must have shape (n_points-1, d, d)")
        if self.cell_delayed_area.shape != (n - 1 - m, d, d):
            raise DriverError("cell_delayed_area must cover the cells of [0, T]")
        if self.node_area is None:
            object.__setattr__(self, "node_area", _primitive_from_cells(self.X, self.cell_area))
        if self.node_delayed_area is None:
            object.__setattr__(self, "node_delayed_area",
                               _primitive_from_cells(self.X[m:], self.cell_delayed_area, self.X[: n - m]))

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def m(self) -> int:
        return self.grid.delay_steps

    def __eq__(self, other) -> bool:
        if not isinstance(other, DelayedRoughDriver):
            return NotImplemented
        return (self.grid == other.grid and self.subgrid_factor == other.subgrid_factor
                and self.flavor == other.flavor and self.seed == other.seed
                and _same_bits(self.X, other.X) and _same_bits(self.cell_area, other.cell_area)
                and _same_bits(self.cell_delayed_area, other.cell_delayed_area))

    __hash__ = None

    def increment(self, s, t) -> np.ndarray:
        """``X_t - X_s`` for index arrays; value axis trailing."""
        return self.X[np.asarray(t)] - self.X[np.asarray(s)]

    def area(self, s, t) -> np.ndarray:
        """``XX_{t,s}`` for broadcastable index arrays with ``s <= t``."""
        s, t = np.broadcast_arrays(np.asarray(s), np.asarray(t))
        if np.any(s > t):
            raise GridError("area is defined for s <= t only")
        X, P = self.X, self.node_area
        out = P[t] - P[s] - X[s][..., :, None] * (X[t] - X[s])[..., None, :]
        return _with_cells(out, s, t, self.cell_area, 0)

    def delayed_area(self, s, t) -> np.ndarray:
        """``XX(-r)_{t,s}`` for node indices in ``[0, T]`` (``s >= m``)."""
        s, t = np.broadcast_arrays(np.asarray(s), np.asarray(t))
        m = self.m
        if np.any(s > t):
            raise GridError("delayed area is defined for s <= t only")
        if np.any(s < m):
            raise GridError("delayed area needs both nodes in [0, T]")
        X, Q = self.X, self.node_delayed_area
        out = Q[t - m] - Q[s - m] - X[s - m][..., :, None] * (X[t] - X[s])[..., None, :]
        return _with_cells(out, s - m, t - m, self.cell_delayed_area, 0)

    def with_cell_perturbation(self, cell: int, amount: float, delayed: bool = False) -> "DelayedRoughDriver":
        """Copy with one stored cell shifted by ``amount`` in every entry (defect injection)."""
        if delayed:
            arr = self.cell_delayed_area.copy()
            arr[cell] += amount
            return replace(self, cell_delayed_area=arr)
        arr = self.cell_area.copy()
        arr[cell] += amount
        return replace(self, cell_area=arr)


def _same_bits(a: np.ndarray, b: np.ndarray) -> bool:
    return a.shape == b.shape and a.dtype == b.dtype and a.tobytes() == b.tobytes()


def _with_cells(out, s, t, cells, offset):
    # adjacent pairs read the stored cell directly
    adj = (t - s) == 1
    if np.any(adj):
        out = np.array(out, copy=True)
        out[adj] = cells[s[adj] + offset]
    zero = t == s
    if np.any(zero):
        out[zero] = 0.0
    return out


def _primitive_from_cells(X, cells, X_lag=None):
    """Node primitive ``P`` consistent with the cells: ``P_{k+1} = P_k + cell_k + X_k (x) dX_k``."""
    if X_lag is None:
        X_lag = X
    dX = np.diff(X, axis=0)
    steps = cells + X_lag[:-1, :, None] * dX[:, None, :]
    P = np.zeros((X.shape[0],) + cells.shape[1:])
    np.cumsum(steps, axis=0, out=P[1:])
    return P


# ---------------------------------------------------------------------------
# construction from a fine path


def _midpoint_sums(fine: np.ndarray, lag: int, start: int, factor: int, n_cells: int):
    """Cell areas and node primitive from midpoint sums.

    Cell ``c`` covers fine indices ``start + c*factor .. start + (c+1)*factor``;
    the integrand is the path shifted back by ``lag`` fine steps.
    """
    stop = start + n_cells * factor
    dX = np.diff(fine[start: stop + 1], axis=0)
    lagged = fine[start - lag: stop + 1 - lag]
    mid = 0.5 * (lagged[:-1] + lagged[1:])
    d = fine.shape[1]
    anchor = lagged[: -1: factor]  # lagged value at each cell's left node
    rel = mid.reshape(n_cells, factor, d) - anchor[:, None, :]
    cells = np.einsum("cfi,cfj->cij", rel, dX.reshape(n_cells, factor, d))
    # node primitive straight from the fine sums
    fine_terms = mid[:, :, None] * dX[:, None, :]
    per_cell = fine_terms.reshape(n_cells, factor, d, d).sum(axis=1)
    P = np.zeros((n_cells + 1, d, d))
    np.cumsum(per_cell, axis=0, out=P[1:])
    return cells, P


def driver_from_fine_path(fine: np.ndarray, grid: Grid, subgrid_factor: int, flavor: str,
                          seed: int = 0) -> DelayedRoughDriver:
    """Lift a path sampled on ``grid.refine(subgrid_factor)`` to a delayed rough driver.

    ``fine`` may start earlier than the grid (longer history); only its last
    ``(n_points-1)*subgrid_factor+1`` samples are used.
    """
    fine = np.asarray(fine, dtype=float)
    if fine.ndim == 1:
        fine = fine[:, None]
    f = int(subgrid_factor)
    if f < 1:
        raise DriverError("subgrid_factor must be >= 1")
    n, m = grid.n_points, grid.delay_steps
    need = (n - 1) * f + 1
    if fine.shape[0] < need:
        raise DriverError(f"fine path has {fine.shape[0]} samples, need {need}")
    fine = fine[fine.shape[0] - need:]
    X = np.ascontiguousarray(fine[::f])
    cells, P = _midpoint_sums(fine, 0, 0, f, n - 1)
    dcells, Q = _midpoint_sums(fine, m * f, m * f, f, n - 1 - m)
    if flavor == "bm_paper_eq963":
        cells, P = _ito_shift(cells, P, grid.dt)
    return DelayedRoughDriver(grid, X, cells, dcells, f, flavor, int(seed), P, Q)


def _ito_shift(cells, P, dt):
    d = cells.shape[1]
    eye = np.eye(d)
    cells = cells - 0.5 * dt * eye
    k = np.arange(P.shape[0])[:, None, None]
    P = P - 0.5 * dt * k * eye
    return cells, P


@lru_cache(maxsize=8)
def _fgn_cholesky(n_incr: int, hurst: float, h: float) -> np.ndarray:
    k = np.arange(n_incr, dtype=float)
    H2 = 2.0 * hurst
    gamma = 0.5 * h ** H2 * (np.abs(k + 1) ** H2 - 2 * np.abs(k) ** H2 + np.abs(k - 1) ** H2)
    idx = np.abs(np.subtract.outer(np.arange(n_incr), np.arange(n_incr)))
    cov = gamma[idx]
    try:
        L = cholesky(cov, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise DriverError(f"Cholesky factorisation failed for {n_incr} nodes") from exc
    L.setflags(write=False)
    return L


def sample_fbm_path(seed: int, hurst: float, fine_grid: Grid, d: int) -> np.ndarray:
    """Exact fBm samples on every node of ``fine_grid``, pinned to 0 at time zero.

    Independent components; the path is two-sided in the sense that nodes
    before time zero are part of the same Gaussian process.
    """
    if not 1.0 / 3.0 < hurst <= 0.5:
        raise DriverError(f"hurst must lie in (1/3, 1/2], got {hurst}")
    if d < 1:
        raise DriverError("d must be >= 1")
    N = fine_grid.n_points
    rng = np.random.default_rng(seed)
    Z = rng.standard_normal((N - 1, d))
    h = fine_grid.dt
    if hurst == 0.5:
        incr = np.sqrt(h) * Z
    else:
        if N > MAX_CHOLESKY_NODES:
            raise DriverError(f"exact Cholesky sampling is limited to {MAX_CHOLESKY_NODES} fine nodes, got {N}")
        incr = _fgn_cholesky(N - 1, float(hurst), h) @ Z
    path = np.zeros((N, d))
    np.cumsum(incr, axis=0, out=path[1:])
    return path - path[fine_grid.zero_index]


def sample_fbm(seed: int, hurst: float, grid: Grid, d: int = 1, subgrid_factor: int = 16) -> DelayedRoughDriver:
    """fBm driver with symmetric-sum areas on a ``subgrid_factor`` refinement."""
    if subgrid_factor < 1:
        raise DriverError("subgrid_factor must be >= 1")
    fine = sample_fbm_path(seed, hurst, grid.refine(subgrid_factor), d)
    return driver_from_fine_path(fine, grid, subgrid_factor, "fbm_symmetric", seed)


def sample_brownian(seed: int, grid: Grid, d: int = 1, subgrid_factor: int = 16) -> DelayedRoughDriver:
    """Brownian driver with geometric (Stratonovich) areas."""
    fine = sample_fbm_path(seed, 0.5, grid.refine(subgrid_factor), d)
    return driver_from_fine_path(fine, grid, subgrid_factor, "bm_stratonovich", seed)


def enhance_deterministic(path_values: Callable[[np.ndarray], np.ndarray], grid: Grid,
                          subgrid_factor: int = 16) -> DelayedRoughDriver:
    """Lift a deterministic path ``t -> R^d`` evaluated on the refinement subgrid."""
    fine_grid = grid.refine(subgrid_factor)
    vals = np.asarray(path_values(fine_grid.times), dtype=float)
    if vals.ndim == 1:
        vals = vals[:, None]
    return driver_from_fine_path(vals, grid, subgrid_factor, "deterministic", 0)


def enhance_brownian_paper_variant(driver: DelayedRoughDriver) -> DelayedRoughDriver:
    """Subtract ``(t-s)/2`` from the diagonal of every cell area; delayed cells untouched."""
    if driver.flavor != "bm_stratonovich":
        raise DriverError(f"expected a bm_stratonovich driver, got {driver.flavor}")
    cells, P = _ito_shift(driver.cell_area, driver.node_area, driver.grid.dt)
    return replace(driver, cell_area=cells, node_area=P, flavor="bm_paper_eq963")


# ---------------------------------------------------------------------------
# checks and metrics


def chen_residual(driver: DelayedRoughDriver, start: int | None = None) -> tuple[float, float]:
    """Maximum Chen defect of the area and the delayed area over grid triples.

    Triples range over all nodes (area) and over ``[0, T]`` (delayed area).
    ``start`` restricts both to nodes ``>= start``.
    """
    n, m = driver.grid.n_points, driver.m
    lo = 0 if start is None else start
    res = _chen_max(driver.area, lambda s, u, t: driver.increment(s, u), driver.increment, lo, n)
    dlo = max(lo, m)
    res_d = _chen_max(driver.delayed_area, lambda s, u, t: driver.increment(s - m, u - m),
                      driver.increment, dlo, n)
    return res, res_d


def _chen_max(area, first, second, lo, hi):
    best = 0.0
    for u in range(lo + 1, hi - 1):
        s = np.arange(lo, u)[:, None]
        t = np.arange(u + 1, hi)[None, :]
        s_b, t_b = np.broadcast_arrays(s, t)
        u_b = np.full_like(s_b, u)
        lhs = area(s_b, t_b) - area(u_b, t_b) - area(s_b, u_b)
        rhs = first(s_b, u_b, t_b)[..., :, None] * second(u_b, t_b)[..., None, :]
        best = max(best, float(np.abs(lhs - rhs).max(initial=0.0)))
    return best


def chen_tolerance(driver: DelayedRoughDriver, rel: float = 1e-12) -> float:
    return rel * (1.0 + float(np.max(np.abs(driver.X))) ** 2)


def reconstruct_area(driver: DelayedRoughDriver, s: int, t: int, delayed: bool = False) -> np.ndarray:
    """Area over ``[s, t]`` composed directly from the stored cells.

    ``sum_c cell_c + sum_c (X_c - X_s) (x) dX_c`` over cells ``c`` of ``[s, t]``,
    with the lagged path in the first factor when ``delayed``.
    """
    if s > t:
        raise GridError("reconstruct_area needs s <= t")
    d, m = driver.d, driver.m
    if t == s:
        return np.zeros((d, d))
    c = np.arange(s, t)
    dX = driver.X[c + 1] - driver.X[c]
    if delayed:
        if s < m:
            raise GridError("delayed area needs both nodes in [0, T]")
        cells = driver.cell_delayed_area[c - m]
        lag = driver.X[c - m] - driver.X[s - m]
    else:
        cells = driver.cell_area[c]
        lag = driver.X[c] - driver.X[s]
    return cells.sum(axis=0) + np.einsum("ci,cj->ij", lag, dX)


def _check_compatible(a: DelayedRoughDriver, b: DelayedRoughDriver):
    if a.grid != b.grid or a.d != b.d:
        raise GridError("drivers live on different grids or dimensions")


def _interval(driver: DelayedRoughDriver, interval):
    if interval is None:
        return driver.m, driver.grid.n_points
    return interval


def path_holder(driver: DelayedRoughDriver, alpha: float, interval=None) -> float:
    lo, hi = _interval(driver, interval)
    X = driver.X
    f = GridFn2(driver.grid, lambda s, t: X[t] - X[s], REAL, 1)
    return holder_norm2(f, alpha, start=lo, stop=hi)


def rough_distance(a: DelayedRoughDriver, b: DelayedRoughDriver | None, alpha: float,
                   interval: tuple[int, int] | None = None) -> float:
    """``||d(X-Y)||_a + ||XX-YY||_2a + ||XX(-r)-YY(-r)||_2a`` on node window ``interval``.

    The default window is ``[0, T]``. ``b=None`` stands for the zero driver.
    """
    return driver_metric_report(a, b, alpha, interval).rho


@dataclass(frozen=True)
class DriverMetricReport:
    alpha: float
    path_holder: float
    area_holder: float
    delayed_area_holder: float
    rho: float


def driver_metric_report(a: DelayedRoughDriver, b: DelayedRoughDriver | None, alpha: float,
                         interval: tuple[int, int] | None = None) -> DriverMetricReport:
    if b is not None:
        _check_compatible(a, b)
    lo, hi = _interval(a, interval)
    g = a.grid
    if b is None:
        dx = lambda s, t: a.increment(s, t)
        ar = a.area
        dar = a.delayed_area
    else:
        dx = lambda s, t: a.increment(s, t) - b.increment(s, t)
        ar = lambda s, t: a.area(s, t) - b.area(s, t)
        dar = lambda s, t: a.delayed_area(s, t) - b.delayed_area(s, t)
    p = holder_norm2(GridFn2(g, dx, REAL, 1), alpha, start=lo, stop=hi)
    q = holder_norm2(GridFn2(g, ar, REAL, 2), 2 * alpha, start=lo, stop=hi)
    dlo = max(lo, a.m)
    qd = holder_norm2(GridFn2(g, dar, REAL, 2), 2 * alpha, start=dlo, stop=hi) if hi - dlo >= 2 else 0.0
    return DriverMetricReport(alpha, p, q, qd, p + q + qd)


def area_gap(driver: DelayedRoughDriver, alpha_bar: float) -> float:
    """``sup_{r <= s < t <= T} |XX_{t,s} - XX(-r)_{t,s}| / (t-s)^{2 alpha_bar}``; 0 when ``r = 0``."""
    m = driver.m
    if m == 0:
        return 0.0
    f = GridFn2(driver.grid, lambda s, t: driver.area(s, t) - driver.delayed_area(s, t), REAL, 2)
    return holder_norm2(f, 2 * alpha_bar, start=2 * m, stop=driver.grid.n_points)


# ---------------------------------------------------------------------------
# cache file

_HEADER = struct.Struct("<qqqqqQd")


def driver_to_bytes(driver: DelayedRoughDriver) -> bytes:
    g = driver.grid
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(_HEADER.pack(driver.d, g.n_points, g.delay_steps, driver.subgrid_factor,
                           FLAVOR_CODES[driver.flavor], driver.seed % (1 << 64), g.dt))
    for arr in (driver.X, driver.cell_area, driver.cell_delayed_area):
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def driver_from_bytes(data: bytes) -> DelayedRoughDriver:
    if data[: len(MAGIC)] != MAGIC:
        raise DriverError("not a driver cache file (bad magic)")
    off = len(MAGIC)
    try:
        d, n, m, f, code, seed, dt = _HEADER.unpack_from(data, off)
    except struct.error as exc:
        raise DriverError("truncated driver header") from exc
    off += _HEADER.size
    sizes = [(n, d), (n - 1, d, d), (n - 1 - m, d, d)]
    arrays = []
    for shape in sizes:
        count = int(np.prod(shape))
        chunk = data[off: off + 8 * count]
        if len(chunk) != 8 * count:
            raise DriverError("truncated driver payload")
        arrays.append(np.frombuffer(chunk, dtype="<f8").reshape(shape).astype(float))
        off += 8 * count
    if off != len(data):
        raise DriverError("trailing bytes in driver file")
    if not 0 <= code < len(FLAVORS):
        raise DriverError(f"unknown flavor code {code}")
    return DelayedRoughDriver(Grid(dt, n, m), *arrays, f, FLAVORS[code], int(seed))


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = os.fspath(path)
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def save_driver(driver: DelayedRoughDriver, path) -> None:
    atomic_write_bytes(path, driver_to_bytes(driver))


def load_driver(path) -> DelayedRoughDriver:
    with open(path, "rb") as fh:
        return driver_from_bytes(fh.read())
