"""Heat semigroup on the torus and the nonlinearity bank F, G.

Everything acts on coefficient arrays whose last axis holds the modes
``-K..K``; :class:`~drough.scale.SpectralVector` inputs are accepted too.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scale import SpectralVector, as_coeffs, max_mode_of, modes, norm_array, to_coeffs, to_values

KINDS = ("affine", "frac_laplacian_affine", "smooth_bounded")


@dataclass(frozen=True)
class SemigroupSpec:
    """``S_t = exp(t * diffusivity * Laplacian)``; ``diffusivity = 0`` gives ``A = 0``."""

    operator: str = "laplacian"
    diffusivity: float = 1.0

    def __post_init__(self):
        if self.operator != "laplacian":
            raise ValueError(f"unsupported operator {self.operator!r}")
        if self.diffusivity < 0:
            raise ValueError("diffusivity must be non-negative")

    def rates(self, K: int) -> np.ndarray:
        """Decay rates ``lambda_k = diffusivity * k^2``."""
        k = modes(K).astype(float)
        return self.diffusivity * k * k

    def factors(self, K: int, t: float) -> np.ndarray:
        if t < 0:
            raise ValueError("semigroup time must be non-negative")
        return np.exp(-self.rates(K) * t)


def apply_semigroup(spec: SemigroupSpec, v, t: float):
    """``S_t v``; returns the same container type as ``v``."""
    c = as_coeffs(v)
    out = c * spec.factors(max_mode_of(c), t)
    if isinstance(v, SpectralVector):
        return SpectralVector(out, v.real)
    return out


def smoothing_constants(spec: SemigroupSpec, theta: float, sigma: float, K: int, t_grid) -> tuple[float, float]:
    """Exact mode-wise smoothing constants over ``t_grid``.

    Returns ``(sup_t t^s |S_t|_{theta -> theta+s}, sup_t t^-s |S_t - I|_{theta+s -> theta})``.
    Both operator norms are maxima of multiplier ratios over ``|k| <= K`` and
    do not depend on ``theta``.
    """
    if not 0.0 <= sigma <= 1.0:
        raise ValueError("sigma must lie in [0, 1]")
    t = np.asarray(t_grid, dtype=float)
    if np.any(t <= 0):
        raise ValueError("t_grid must be positive")
    k2 = modes(K).astype(float) ** 2
    lam = spec.diffusivity * k2
    w = (1.0 + k2) ** sigma
    decay = np.exp(-np.outer(t, lam))
    c0 = np.max(t ** sigma * np.max(w * decay, axis=1))
    c1 = np.max(t ** -sigma * np.max(-np.expm1(-np.outer(t, lam)) / w, axis=1))
    return float(c0), float(c1)


def frac_laplacian_multiplier(K: int, sigma: float) -> np.ndarray:
    """``|k|^{2 sigma}``; the zero mode maps to 0 unless ``sigma == 0`` (identity)."""
    k = np.abs(modes(K)).astype(float)
    if sigma == 0:
        return np.ones_like(k)
    return k ** (2 * sigma)


@dataclass(frozen=True)
class NonlinearitySpec:
    """Bank of maps ``(y, z) -> (G_1, ..., G_d)`` on the spectral scale.

    * ``affine``: ``G_i = a_i y + b_i z + offset_i`` (offset is a constant function).
    * ``frac_laplacian_affine``: ``G_i = (-Laplacian)^sigma (a_i y + b_i z)``.
    * ``smooth_bounded``: ``G_i = scale * P sin(P(a_i y + b_i z))`` where ``P``
      keeps modes ``|k| <= cutoff`` and ``sin`` acts pointwise on a
      collocation grid of at least ``4 * cutoff`` points.
    """

    kind: str
    a: tuple = (1.0,)
    b: tuple = (0.0,)
    sigma: float = 0.0
    offset: tuple | None = None
    cutoff: int = 8
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown nonlinearity kind {self.kind!r}")
        a = tuple(float(x) for x in np.atleast_1d(self.a))
        b = tuple(float(x) for x in np.atleast_1d(self.b))
        if len(a) != len(b):
            raise ValueError("a and b need one entry per output component")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        if self.offset is not None:
            off = tuple(float(x) for x in np.atleast_1d(self.offset))
            if len(off) != len(a):
                raise ValueError("offset needs one entry per output component")
            object.__setattr__(self, "offset", off)
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if self.kind == "smooth_bounded" and self.cutoff < 1:
            raise ValueError("cutoff must be >= 1")

    @property
    def d_out(self) -> int:
        return len(self.a)

    @property
    def is_linear(self) -> bool:
        return self.kind != "smooth_bounded"

    @property
    def smoothing(self) -> float:
        """Order of regularity lost, the ``sigma`` in ``B_theta -> B_{theta - sigma}``."""
        return self.sigma if self.kind == "frac_laplacian_affine" else 0.0

    def _ab(self):
        return np.asarray(self.a)[:, None], np.asarray(self.b)[:, None]

    def zero(self) -> bool:
        return not any(self.a) and not any(self.b) and not (self.offset and any(self.offset))

    def with_delay_slot_only(self) -> "NonlinearitySpec":
        """Same map with the current-state slot dropped: ``G(y, z) -> G(0, z)``."""
        from dataclasses import replace
        return replace(self, a=tuple(0.0 for _ in self.a))


def _collocation_size(cutoff: int) -> int:
    return 4 * cutoff + 4


def _truncate(c: np.ndarray, cutoff: int) -> np.ndarray:
    K = max_mode_of(c)
    k0 = min(cutoff, K)
    return c[..., K - k0: K + k0 + 1]


def _embed(c_small: np.ndarray, K: int) -> np.ndarray:
    k0 = max_mode_of(c_small)
    out = np.zeros(c_small.shape[:-1] + (2 * K + 1,), dtype=complex)
    out[..., K - k0: K + k0 + 1] = c_small
    return out


def _combine(spec: NonlinearitySpec, y, z) -> np.ndarray:
    """``a_i y + b_i z`` with a new component axis before the mode axis."""
    a, b = spec._ab()
    return a * y[..., None, :] + b * z[..., None, :]


def eval_G(spec: NonlinearitySpec, y, z) -> np.ndarray:
    """``G(y, z)`` with shape ``(..., d_out, M)``."""
    y = np.asarray(as_coeffs(y))
    z = np.asarray(as_coeffs(z))
    K = max_mode_of(y)
    u = _combine(spec, y, z)
    if spec.kind == "affine":
        if spec.offset is not None:
            u = u.astype(complex, copy=True)
            u[..., K] += np.asarray(spec.offset)
        return u
    if spec.kind == "frac_laplacian_affine":
        return u * frac_laplacian_multiplier(K, spec.sigma)
    n = _collocation_size(spec.cutoff)
    vals = to_values(_truncate(u, spec.cutoff), n)
    return spec.scale * _embed(to_coeffs(np.sin(vals), min(spec.cutoff, K)), K)


def _direction_weights(spec: NonlinearitySpec, slot: int) -> np.ndarray:
    if slot == 1:
        return np.asarray(spec.a)
    if slot == 2:
        return np.asarray(spec.b)
    raise ValueError("slot must be 1 or 2")


def eval_DG(spec: NonlinearitySpec, y, z, direction, slot: int) -> np.ndarray:
    """Fréchet derivative in argument ``slot`` applied to directions.

    ``direction`` has shape ``(..., J, M)`` (``J`` directions) or ``(..., M)``;
    the result has shape ``(..., d_out, J, M)`` (or ``(..., d_out, M)``).
    """
    y = np.asarray(as_coeffs(y))
    z = np.asarray(as_coeffs(z))
    h = np.asarray(as_coeffs(direction))
    single = h.ndim == y.ndim
    if single:
        h = h[..., None, :]
    w = _direction_weights(spec, slot)[:, None, None]  # (d_out, 1, 1)
    K = max_mode_of(y)
    if spec.kind == "affine":
        out = w * h[..., None, :, :]
    elif spec.kind == "frac_laplacian_affine":
        out = w * h[..., None, :, :] * frac_laplacian_multiplier(K, spec.sigma)
    else:
        n = _collocation_size(spec.cutoff)
        k0 = min(spec.cutoff, K)
        cos_u = np.cos(to_values(_truncate(_combine(spec, y, z), spec.cutoff), n))  # (..., d_out, n)
        hv = to_values(_truncate(h, spec.cutoff), n)  # (..., J, n)
        prod = cos_u[..., :, None, :] * hv[..., None, :, :]
        out = spec.scale * w * _embed(to_coeffs(prod, k0), K)
    return out[..., 0, :] if single else out


def eval_D2G(spec: NonlinearitySpec, y, z, dy1, dz1, dy2, dz2) -> np.ndarray:
    """Second derivative ``D^2 G(y, z)[(dy1, dz1), (dy2, dz2)]``, shape ``(..., d_out, M)``."""
    y = np.asarray(as_coeffs(y))
    z = np.asarray(as_coeffs(z))
    K = max_mode_of(y)
    if spec.is_linear:
        return np.zeros(y.shape[:-1] + (spec.d_out, 2 * K + 1), dtype=complex)
    n = _collocation_size(spec.cutoff)
    k0 = min(spec.cutoff, K)

    def vals(c):
        return to_values(_truncate(c, spec.cutoff), n)

    sin_u = np.sin(vals(_combine(spec, y, z)))
    h1 = vals(_combine(spec, np.asarray(dy1), np.asarray(dz1)))
    h2 = vals(_combine(spec, np.asarray(dy2), np.asarray(dz2)))
    return -spec.scale * _embed(to_coeffs(sin_u * h1 * h2, k0), K)


def verify_H4_product_bound(spec: NonlinearitySpec, samples: int, theta: float = 0.0, alpha: float = 0.4,
                            K: int = 16, seed: int = 0, radius: float = 1.0) -> float:
    """Empirical Lipschitz constant of ``(y, z) -> D_1 G_i(y, z) G_j(y, z)``.

    Differences of the map are measured in ``||.||_{theta - 2 alpha - sigma}``
    and input differences in ``||.||_{theta - alpha}``; the maximum over
    ``samples`` random pairs and all ``(i, j)`` is returned.
    """
    rng = np.random.default_rng(seed)
    sig = spec.smoothing
    best = 0.0

    def draw():
        v = SpectralVector.random(rng, K, decay=1.0).coeffs
        return radius * v / max(norm_array(v, theta - alpha), 1e-300)

    def product(y, z):
        g = eval_G(spec, y, z)  # (d, M)
        return eval_DG(spec, y, z, g, 1)  # (d_i, d_j, M)

    for _ in range(samples):
        y1, z1, y2, z2 = draw(), draw(), draw(), draw()
        num = norm_array(product(y1, z1) - product(y2, z2), theta - 2 * alpha - sig)
        den = norm_array(y1 - y2, theta - alpha) + norm_array(z1 - z2, theta - alpha)
        if den > 0:
            best = max(best, float(num.max()) / float(den))
    return best
