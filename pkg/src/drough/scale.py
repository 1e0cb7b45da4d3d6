"""Spectral interpolation scale on the 1-D torus, grids, grid functions and Hölder norms.

The scale ``B_theta`` is realised as the Bessel potential space ``H^{2 theta}``
with ``p = 2``: a vector is a finite array of Fourier coefficients for the
modes ``-K..K`` and

    ||v||_theta = ( sum_k (1 + k^2)^{2 theta} |c_k|^2 )^{1/2}.

Every Hölder-type norm here is a supremum over grid nodes only, hence a lower
bound of the corresponding continuum norm.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

# Upper bound on the number of scalar entries materialised per block when
# sweeping over ordered node pairs.
_BLOCK_ENTRIES = 1 << 21


class GridError(ValueError):
    """Raised for malformed grids or node arguments outside a grid."""


@dataclass(frozen=True)
class Grid:
    """Uniform time grid over ``[-r, T]`` with ``r = delay_steps * dt``.

    Node ``k`` sits at ``(k - delay_steps) * dt``; node ``delay_steps`` is
    time zero, shared by the history grid ``[-r, 0]`` and the solution grid
    ``[0, T]``.
    """

    dt: float
    n_points: int
    delay_steps: int = 0

    def __post_init__(self):
        if not self.dt > 0:
            raise GridError(f"dt must be positive, got {self.dt}")
        if self.delay_steps < 0:
            raise GridError("delay_steps must be non-negative")
        if self.n_points < self.delay_steps + 1:
            raise GridError("grid must contain node 0")

    @classmethod
    def uniform(cls, T: float, n_steps: int, delay_steps: int = 0) -> "Grid":
        """Grid with ``n_steps`` cells on ``[0, T]`` and ``delay_steps`` cells of history."""
        if n_steps < 1:
            raise GridError("n_steps must be >= 1")
        return cls(dt=T / n_steps, n_points=n_steps + delay_steps + 1, delay_steps=delay_steps)

    @classmethod
    def with_delay(cls, T: float, n_steps: int, r: float) -> "Grid":
        dt = T / n_steps
        m = int(round(r / dt))
        if abs(m * dt - r) > 1e-9 * max(1.0, abs(r)):
            raise GridError(f"delay {r} is not a multiple of dt={dt}")
        return cls(dt=dt, n_points=n_steps + m + 1, delay_steps=m)

    @property
    def t_start(self) -> float:
        return -self.delay_steps * self.dt

    @property
    def r(self) -> float:
        return self.delay_steps * self.dt

    @property
    def n_steps(self) -> int:
        """Number of cells on ``[0, T]``."""
        return self.n_points - 1 - self.delay_steps

    @property
    def T(self) -> float:
        return self.n_steps * self.dt

    @property
    def zero_index(self) -> int:
        return self.delay_steps

    def time(self, k):
        return (np.asarray(k) - self.delay_steps) * self.dt

    @property
    def times(self) -> np.ndarray:
        return self.time(np.arange(self.n_points))

    def index(self, t: float) -> int:
        k = int(round(t / self.dt)) + self.delay_steps
        if not 0 <= k < self.n_points or abs(self.time(k) - t) > 1e-9 * max(1.0, abs(t)):
            raise GridError(f"time {t} is not a node of the grid")
        return k

    def refine(self, factor: int) -> "Grid":
        return Grid(self.dt / factor, (self.n_points - 1) * factor + 1, self.delay_steps * factor)


# ---------------------------------------------------------------------------
# the spectral scale


def modes(K: int) -> np.ndarray:
    return np.arange(-K, K + 1)


def weights(K: int, theta: float) -> np.ndarray:
    """Amplitude weights ``(1 + k^2)^theta`` for modes ``-K..K``."""
    k = modes(K).astype(float)
    return (1.0 + k * k) ** theta


def max_mode_of(coeffs: np.ndarray) -> int:
    M = coeffs.shape[-1]
    if M % 2 != 1:
        raise ValueError("coefficient axis must have odd length 2K+1")
    return (M - 1) // 2


def norm_array(coeffs: np.ndarray, theta: float) -> np.ndarray:
    """``||.||_theta`` along the last axis of a coefficient array."""
    coeffs = np.asarray(coeffs)
    w = weights(max_mode_of(coeffs), theta)
    a = np.abs(coeffs * w)
    return np.sqrt(np.einsum("...k,...k->...", a, a))


@dataclass(frozen=True, eq=False)
class SpectralVector:
    """Element of ``B_theta``: Fourier coefficients of the modes ``-K..K``.

    ``real`` flags the reality constraint ``c_{-k} = conj(c_k)``; it is
    recorded, not enforced, except by :meth:`from_values` and :meth:`random`.
    """

    coeffs: np.ndarray
    real: bool = False

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=complex)
        max_mode_of(c)
        if c.ndim != 1:
            raise ValueError("SpectralVector holds a single coefficient vector")
        object.__setattr__(self, "coeffs", c)

    @property
    def max_mode(self) -> int:
        return max_mode_of(self.coeffs)

    def norm(self, theta: float) -> float:
        return float(norm_array(self.coeffs, theta))

    def is_real(self, tol: float = 1e-12) -> bool:
        c = self.coeffs
        return bool(np.max(np.abs(c - np.conj(c[::-1])), initial=0.0) <= tol * (1 + np.max(np.abs(c))))

    @classmethod
    def zeros(cls, K: int, real: bool = True) -> "SpectralVector":
        return cls(np.zeros(2 * K + 1, dtype=complex), real)

    @classmethod
    def single_mode(cls, K: int, k: int, amplitude: complex = 1.0) -> "SpectralVector":
        c = np.zeros(2 * K + 1, dtype=complex)
        c[k + K] = amplitude
        return cls(c, False)

    @classmethod
    def from_values(cls, values: np.ndarray, K: int) -> "SpectralVector":
        """Truncated Fourier coefficients of real samples on an equispaced torus grid."""
        return cls(to_coeffs(np.asarray(values, dtype=float), K), True)

    @classmethod
    def from_function(cls, f: Callable[[np.ndarray], np.ndarray], K: int, n_samples: int | None = None):
        n = n_samples or 4 * K + 4
        x = 2 * np.pi * np.arange(n) / n
        return cls.from_values(f(x), K)

    @classmethod
    def random(cls, rng: np.random.Generator, K: int, decay: float = 1.0, real: bool = True):
        k = modes(K)
        c = (rng.standard_normal(2 * K + 1) + 1j * rng.standard_normal(2 * K + 1)) / (1.0 + k * k) ** decay
        if real:
            c = 0.5 * (c + np.conj(c[::-1]))
        return cls(c, real)

    def values(self, n_samples: int) -> np.ndarray:
        return to_values(self.coeffs, n_samples)

    def __add__(self, other: "SpectralVector") -> "SpectralVector":
        return SpectralVector(self.coeffs + other.coeffs, self.real and other.real)

    def __sub__(self, other: "SpectralVector") -> "SpectralVector":
        return SpectralVector(self.coeffs - other.coeffs, self.real and other.real)

    def __mul__(self, a) -> "SpectralVector":
        return SpectralVector(self.coeffs * a, self.real and np.isrealobj(a))

    __rmul__ = __mul__

    def __neg__(self) -> "SpectralVector":
        return SpectralVector(-self.coeffs, self.real)


def as_coeffs(v) -> np.ndarray:
    return v.coeffs if isinstance(v, SpectralVector) else np.asarray(v)


def to_values(coeffs: np.ndarray, n_samples: int) -> np.ndarray:
    """Evaluate coefficient arrays (last axis ``-K..K``) at ``n_samples`` torus points."""
    K = max_mode_of(coeffs)
    if n_samples < 2 * K + 1:
        raise ValueError("need at least 2K+1 collocation points")
    buf = np.zeros(coeffs.shape[:-1] + (n_samples,), dtype=complex)
    buf[..., : K + 1] = coeffs[..., K:]
    if K:
        buf[..., -K:] = coeffs[..., :K]
    return np.fft.ifft(buf, axis=-1) * n_samples


def to_coeffs(values: np.ndarray, K: int) -> np.ndarray:
    n = values.shape[-1]
    if n < 2 * K + 1:
        raise ValueError("need at least 2K+1 samples")
    full = np.fft.fft(values, axis=-1) / n
    out = np.empty(values.shape[:-1] + (2 * K + 1,), dtype=complex)
    out[..., K:] = full[..., : K + 1]
    if K:
        out[..., :K] = full[..., -K:]
    return out


def sobolev_norm(v, theta: float):
    """``||v||_theta``; array input is reduced along its last axis."""
    if isinstance(v, SpectralVector):
        return v.norm(theta)
    return norm_array(v, theta)


def interpolation_inequality_check(v, theta1: float, theta2: float, theta3: float) -> float:
    """Ratio ``||v||_2^{t3-t1} / (||v||_1^{t3-t2} ||v||_3^{t2-t1})``.

    Hölder's inequality bounds it by one for this scale. The zero vector
    returns 0 by convention.
    """
    if not theta1 <= theta2 <= theta3:
        raise ValueError("need theta1 <= theta2 <= theta3")
    c = as_coeffs(v)
    n1, n2, n3 = (float(norm_array(c, th)) for th in (theta1, theta2, theta3))
    if n2 == 0.0:
        return 0.0
    if theta3 == theta1:
        return 1.0
    # log form keeps large weights from overflowing
    log_ratio = (theta3 - theta1) * np.log(n2) - (theta3 - theta2) * np.log(n1) - (theta2 - theta1) * np.log(n3)
    return float(np.exp(log_ratio))


# ---------------------------------------------------------------------------
# grid functions

SPECTRAL = "spectral"
REAL = "real"


def value_norm(values: np.ndarray, kind: str, theta: float, value_ndim: int) -> np.ndarray:
    """Norm of the trailing ``value_ndim`` axes.

    Spectral values are reduced with ``||.||_theta`` over the mode axis and
    summed over any leading component axes; real values use the Euclidean
    (Frobenius) norm.
    """
    if kind == SPECTRAL:
        out = norm_array(values, theta)
        for _ in range(value_ndim - 1):
            out = out.sum(axis=-1)
        return out
    if value_ndim == 0:
        return np.abs(values)
    axes = tuple(range(-value_ndim, 0))
    return np.sqrt(np.sum(np.abs(values) ** 2, axis=axes))


@dataclass(frozen=True, eq=False)
class GridFn1:
    """One-index grid function: ``values[k]`` is the value at node ``start + k``."""

    grid: Grid
    values: np.ndarray
    kind: str = SPECTRAL
    start: int = 0

    @property
    def value_ndim(self) -> int:
        return self.values.ndim - 1

    @property
    def stop(self) -> int:
        return self.start + self.values.shape[0]

    def delta(self) -> "GridFn2":
        vals = self.values
        off = self.start

        def fn(s, t):
            return vals[t - off] - vals[s - off]

        return GridFn2(self.grid, fn, self.kind, self.value_ndim, self.start, self.stop)

    def sup_norm(self, theta: float = 0.0) -> float:
        if self.values.shape[0] == 0:
            return 0.0
        return float(np.max(value_norm(self.values, self.kind, theta, self.value_ndim)))


@dataclass(frozen=True, eq=False)
class GridFn2:
    """Two-index function on ordered node pairs ``s <= t`` inside ``[start, stop)``.

    ``fn(s, t)`` takes broadcastable integer index arrays and returns
    ``f_{t,s}`` with the value axes trailing.
    """

    grid: Grid
    fn: Callable[[np.ndarray, np.ndarray], np.ndarray]
    kind: str = SPECTRAL
    value_ndim: int = 1
    start: int = 0
    stop: int | None = None

    def __post_init__(self):
        if self.stop is None:
            object.__setattr__(self, "stop", self.grid.n_points)

    def __call__(self, s, t):
        s = np.asarray(s)
        t = np.asarray(t)
        if np.any(s > t):
            raise GridError("two-index functions are defined on ordered pairs s <= t only")
        return self.fn(s, t)

    def delta(self) -> "GridFn3":
        g = self.fn

        def fn(s, u, t):
            return g(s, t) - g(u, t) - g(s, u)

        return GridFn3(self.grid, fn, self.kind, self.value_ndim, self.start, self.stop)

    def __sub__(self, other: "GridFn2") -> "GridFn2":
        f, g = self.fn, other.fn
        return GridFn2(self.grid, lambda s, t: f(s, t) - g(s, t), self.kind, self.value_ndim,
                       max(self.start, other.start), min(self.stop, other.stop))

    def __add__(self, other: "GridFn2") -> "GridFn2":
        f, g = self.fn, other.fn
        return GridFn2(self.grid, lambda s, t: f(s, t) + g(s, t), self.kind, self.value_ndim,
                       max(self.start, other.start), min(self.stop, other.stop))

    def scaled(self, lam) -> "GridFn2":
        f = self.fn
        return GridFn2(self.grid, lambda s, t: lam * f(s, t), self.kind, self.value_ndim, self.start, self.stop)

    def restricted(self, start: int, stop: int) -> "GridFn2":
        return GridFn2(self.grid, self.fn, self.kind, self.value_ndim,
                       max(self.start, start), min(self.stop, stop))


@dataclass(frozen=True, eq=False)
class GridFn3:
    """Three-index function on ordered triples; ``fn(s, u, t)`` returns ``f_{t,u,s}``."""

    grid: Grid
    fn: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    kind: str = SPECTRAL
    value_ndim: int = 1
    start: int = 0
    stop: int | None = None

    def __post_init__(self):
        if self.stop is None:
            object.__setattr__(self, "stop", self.grid.n_points)


def _row_block(n_cols: int, per_entry: int) -> int:
    return max(1, _BLOCK_ENTRIES // max(1, n_cols * per_entry))


def holder_norm2(f: GridFn2, alpha: float, theta: float = 0.0, start: int | None = None,
                 stop: int | None = None) -> float:
    """``max_{s<t} ||f_{t,s}||_theta / (t - s)^alpha`` over grid pairs in ``[start, stop)``."""
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    lo = f.start if start is None else max(start, f.start)
    hi = f.stop if stop is None else min(stop, f.stop)
    n = hi - lo
    if n < 2:
        raise GridError("Hölder norm needs at least two nodes")
    dt = f.grid.dt
    t_idx = np.arange(lo, hi)
    best = 0.0
    per_entry = int(np.size(f.fn(np.array([lo]), np.array([lo]))))
    block = _row_block(n, per_entry)
    for b0 in range(lo, hi - 1, block):
        s_idx = np.arange(b0, min(b0 + block, hi - 1))
        s_col = s_idx[:, None]
        cols = t_idx[t_idx > s_idx[0]]
        t_row = cols[None, :]
        vals = f.fn(s_col, np.maximum(t_row, s_col))
        nrm = value_norm(vals, f.kind, theta, f.value_ndim)
        gap = (t_row - s_col) * dt
        mask = gap > 0
        ratio = np.where(mask, nrm / np.where(mask, gap, 1.0) ** alpha, 0.0)
        best = max(best, float(ratio.max(initial=0.0)))
    return best


def holder_norm3(f: GridFn3, alpha1: float, alpha2: float, theta: float = 0.0,
                 start: int | None = None, stop: int | None = None) -> float:
    """``max_{s<u<t} ||f_{t,u,s}||_theta / ((t-u)^alpha1 (u-s)^alpha2)``."""
    if not (alpha1 > 0 and alpha2 > 0):
        raise ValueError("exponents must be positive")
    lo = f.start if start is None else max(start, f.start)
    hi = f.stop if stop is None else min(stop, f.stop)
    if hi - lo < 3:
        raise GridError("three-index Hölder norm needs at least three nodes")
    dt = f.grid.dt
    best = 0.0
    for u in range(lo + 1, hi - 1):
        s = np.arange(lo, u)[:, None]
        t = np.arange(u + 1, hi)[None, :]
        vals = f.fn(s, np.full_like(s, u) + 0 * t, t)
        nrm = value_norm(vals, f.kind, theta, f.value_ndim)
        denom = ((t - u) * dt) ** alpha1 * ((u - s) * dt) ** alpha2
        best = max(best, float((nrm / denom).max()))
    return best


def sup_norm(values: np.ndarray, theta: float = 0.0, kind: str = SPECTRAL) -> float:
    """Supremum over the leading (node) axis."""
    if values.shape[0] == 0:
        return 0.0
    return float(np.max(value_norm(values, kind, theta, values.ndim - 1)))
