import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from drough.scale import SpectralVector, norm_array
from drough.semigroup import (NonlinearitySpec, SemigroupSpec, apply_semigroup, eval_D2G, eval_DG, eval_G,
                              frac_laplacian_multiplier, smoothing_constants, verify_H4_product_bound)

HEAT = SemigroupSpec()
seeds = st.integers(0, 2**32 - 1)


def rand(seed, K=12, shape=()):
    rng = np.random.default_rng(seed)
    return (rng.standard_normal(shape + (2 * K + 1,)) + 1j * rng.standard_normal(shape + (2 * K + 1,))) / (
        1 + np.abs(np.arange(-K, K + 1)))


# semigroup


def test_time_zero_is_identity():
    v = SpectralVector.random(np.random.default_rng(0), 8, decay=0.5)
    assert np.array_equal(apply_semigroup(HEAT, v, 0.0).coeffs, v.coeffs)


def test_first_mode_decay():
    out = apply_semigroup(HEAT, SpectralVector.single_mode(4, 1), 1.0)
    assert out.coeffs[4 + 1] == pytest.approx(np.exp(-1.0), rel=1e-15)


def test_negative_time_rejected():
    with pytest.raises(ValueError):
        apply_semigroup(HEAT, SpectralVector.zeros(3), -0.1)


@given(seeds, st.floats(0, 2), st.floats(0, 2))
@settings(max_examples=50)
def test_semigroup_law(seed, s, t):
    v = rand(seed)
    lhs = apply_semigroup(HEAT, apply_semigroup(HEAT, v, s), t)
    rhs = apply_semigroup(HEAT, v, s + t)
    assert np.abs(lhs - rhs).max() <= 1e-14 * (1 + np.abs(v).max())


def test_zero_diffusivity_is_identity():
    v = rand(1)
    assert np.array_equal(apply_semigroup(SemigroupSpec(diffusivity=0.0), v, 3.0), v)


# smoothing constants


T_GRID = np.geomspace(1e-4, 1.0, 200)


def test_smoothing_sigma_zero():
    c0, c1 = smoothing_constants(HEAT, 0.0, 0.0, 256, T_GRID)
    assert c0 == 1.0
    # exact sup of |1 - exp(-k^2 t)| over the grid, attained at the top mode
    assert c1 == pytest.approx(-np.expm1(-256.0 ** 2 * T_GRID[-1]), rel=1e-15)


def test_smoothing_sigma_half_bounded():
    c0, c1 = smoothing_constants(HEAT, 0.0, 0.5, 256, T_GRID)
    assert 0 < c0 <= 2 and 0 < c1 <= 2


def test_smoothing_independent_of_theta():
    assert smoothing_constants(HEAT, 0.0, 0.7, 64, T_GRID) == smoothing_constants(HEAT, 3.0, 0.7, 64, T_GRID)


@pytest.mark.parametrize("sigma", [0.0, 0.25, 0.5, 1.0])
def test_smoothing_bound_holds_on_vectors(sigma):
    K, theta = 32, 0.4
    c0, _ = smoothing_constants(HEAT, theta, sigma, K, T_GRID)
    rng = np.random.default_rng(2)
    for _ in range(50):
        v = SpectralVector.random(rng, K, decay=rng.uniform(0, 2)).coeffs
        t = rng.choice(T_GRID)
        lhs = t ** sigma * norm_array(apply_semigroup(HEAT, v, t), theta + sigma)
        assert lhs <= c0 * norm_array(v, theta) * (1 + 1e-12)


def test_smoothing_rejects_bad_inputs():
    with pytest.raises(ValueError):
        smoothing_constants(HEAT, 0.0, 1.5, 8, T_GRID)
    with pytest.raises(ValueError):
        smoothing_constants(HEAT, 0.0, 0.5, 8, [0.0, 1.0])


# nonlinearities


def test_frac_multiplier_zero_mode():
    assert frac_laplacian_multiplier(3, 0.5)[3] == 0.0
    assert np.all(frac_laplacian_multiplier(3, 0.0) == 1.0)


def test_identity_nonlinearity():
    y, z = rand(0), rand(1)
    g = eval_G(NonlinearitySpec("frac_laplacian_affine", a=1.0, b=0.0, sigma=0.0), y, z)
    assert np.array_equal(g[0], y)


def test_frac_single_mode_amplitude():
    y = SpectralVector.single_mode(4, 1).coeffs
    g = eval_G(NonlinearitySpec("frac_laplacian_affine", a=1.0, b=1.0, sigma=0.5), y, y)
    assert g[0, 5] == pytest.approx(2.0, rel=1e-15)


def test_affine_offset_adds_constant_mode():
    y = np.zeros(9, complex)
    g = eval_G(NonlinearitySpec("affine", a=1.0, b=0.0, offset=2.5), y, y)
    assert g[0, 4] == 2.5 and np.count_nonzero(g) == 1


@given(seeds, st.floats(-2, 2), st.floats(-2, 2), st.floats(0, 1))
@settings(max_examples=50)
def test_frac_mapping_bound(seed, a, b, sigma):
    theta = 0.3
    y, z = rand(seed), rand(seed + 1)
    g = eval_G(NonlinearitySpec("frac_laplacian_affine", a=a, b=b, sigma=sigma), y, z)
    bound = (abs(a) + abs(b)) * (norm_array(y, theta) + norm_array(z, theta))
    assert norm_array(g[0], theta - sigma) <= bound * (1 + 1e-12) + 1e-300


def test_nonlinearity_validation():
    with pytest.raises(ValueError):
        NonlinearitySpec("cubic")
    with pytest.raises(ValueError):
        NonlinearitySpec("affine", a=(1.0, 2.0), b=(0.0,))
    with pytest.raises(ValueError):
        NonlinearitySpec("frac_laplacian_affine", sigma=-0.1)


def test_affine_derivative_is_weight_times_direction():
    spec = NonlinearitySpec("affine", a=(2.0, -1.0), b=(0.5, 3.0))
    y, z, h = rand(0), rand(1), rand(2)
    assert np.allclose(eval_DG(spec, y, z, h, 1), [2.0 * h, -1.0 * h])
    assert np.allclose(eval_DG(spec, y, z, h, 2), [0.5 * h, 3.0 * h])


def test_bounded_derivative_at_zero_truncates():
    spec = NonlinearitySpec("smooth_bounded", a=1.0, b=0.0, cutoff=4)
    K = 10
    h = rand(5, K)
    out = eval_DG(spec, np.zeros(2 * K + 1), np.zeros(2 * K + 1), h, 1)[0]
    want = np.zeros_like(h)
    want[K - 4: K + 5] = h[K - 4: K + 5]
    assert np.allclose(out, want, atol=1e-14)


@pytest.mark.parametrize("spec", [
    NonlinearitySpec("affine", a=(1.0, 0.3), b=(-0.5, 2.0)),
    NonlinearitySpec("frac_laplacian_affine", a=1.0, b=0.5, sigma=0.3),
    NonlinearitySpec("smooth_bounded", a=(1.0, 0.5), b=(0.7, -1.0), cutoff=6),
], ids=lambda s: s.kind)
@pytest.mark.parametrize("slot", [1, 2])
def test_derivative_matches_central_differences(spec, slot):
    y, z, h = rand(10), rand(11), rand(12)
    dg = eval_DG(spec, y, z, h, slot)
    errs = []
    eps_list = [1e-2, 5e-3, 2.5e-3]
    for eps in eps_list:
        if slot == 1:
            fd = (eval_G(spec, y + eps * h, z) - eval_G(spec, y - eps * h, z)) / (2 * eps)
        else:
            fd = (eval_G(spec, y, z + eps * h) - eval_G(spec, y, z - eps * h)) / (2 * eps)
        errs.append(np.abs(fd - dg).max())
    if spec.is_linear:
        assert max(errs) <= 1e-12
    else:
        slope = np.polyfit(np.log(eps_list), np.log(errs), 1)[0]
        assert slope >= 1.8


def test_derivative_multiple_directions():
    spec = NonlinearitySpec("smooth_bounded", a=(1.0, 0.5), b=(0.2, 0.1), cutoff=5)
    y, z, h = rand(0), rand(1), rand(2, shape=(3,))
    many = eval_DG(spec, y, z, h, 1)
    assert many.shape == (2, 3, 25)
    for j in range(3):
        assert np.allclose(many[:, j], eval_DG(spec, y, z, h[j], 1), atol=1e-14)


def test_second_derivative_against_differences():
    spec = NonlinearitySpec("smooth_bounded", a=1.0, b=0.5, cutoff=6)
    y, z, h1, h2 = rand(0), rand(1), rand(2), rand(3)
    eps = 1e-4
    fd = (eval_DG(spec, y + eps * h2, z, h1, 1) - eval_DG(spec, y - eps * h2, z, h1, 1)) / (2 * eps)
    d2 = eval_D2G(spec, y, z, h1, np.zeros_like(h1), h2, np.zeros_like(h2))
    assert np.abs(fd - d2).max() <= 1e-6
    assert np.all(eval_D2G(NonlinearitySpec("affine"), y, z, h1, h1, h2, h2) == 0)


def test_bounded_kind_stays_bounded():
    spec = NonlinearitySpec("smooth_bounded", a=1.0, b=1.0, cutoff=4)
    big = 1e6 * SpectralVector.random(np.random.default_rng(0), 12, decay=0.5, real=True).coeffs
    # pointwise sin of a real truncated field: each output coefficient is at most 1
    assert np.abs(eval_G(spec, big, big)).sum() <= 9 * 1.0 + 1e-9


@given(seeds, st.floats(0, 5))
@settings(max_examples=30)
def test_frac_commutes_with_semigroup(seed, t):
    spec = NonlinearitySpec("frac_laplacian_affine", a=(1.0, -0.4), b=(0.3, 2.0), sigma=0.35)
    y, z = rand(seed), rand(seed + 1)
    lhs = apply_semigroup(HEAT, eval_G(spec, y, z), t)
    rhs = eval_G(spec, apply_semigroup(HEAT, y, t), apply_semigroup(HEAT, z, t))
    assert np.abs(lhs - rhs).max() <= 1e-14 * (1 + np.abs(lhs).max())


# product bound


def test_product_bound_zero_map():
    assert verify_H4_product_bound(NonlinearitySpec("affine", a=0.0, b=0.0), 20) == 0.0


def test_product_bound_affine_exact():
    # D1 G_i G_j = a_i (a_j y + b_j z); Lipschitz constant max |a_i| max(|a_j|, |b_j|)
    a, b = (0.8, -0.5), (0.3, 1.2)
    got = verify_H4_product_bound(NonlinearitySpec("affine", a=a, b=b), 200, theta=0.0, alpha=0.0)
    assert got <= max(map(abs, a)) * max(max(map(abs, a)), max(map(abs, b))) * (1 + 1e-12)
    assert got > 0


def test_product_bound_smooth_finite():
    got = verify_H4_product_bound(NonlinearitySpec("smooth_bounded", a=1.0, b=0.5, cutoff=4), 50)
    assert np.isfinite(got) and got > 0
