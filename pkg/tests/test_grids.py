"""Grids, fields, conservative operators, and circular convolution."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from crossdiff.grids import (
    BoxGrid,
    Field,
    TorusGrid,
    circular_convolve,
    flux_divergence,
    integrate,
    laplacian_periodic,
    load_field_csv,
    load_field_raw,
    reflect_kernel,
    save_field_csv,
    save_field_raw,
)
from crossdiff.kernels import unit_delta_kernel

value_arrays_16 = arrays(np.float64, 16,
                         elements=st.floats(min_value=-10, max_value=10,
                                            allow_nan=False, allow_infinity=False))


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

def test_grid_validation():
    with pytest.raises(ValueError):
        TorusGrid(1, 3)
    with pytest.raises(ValueError):
        TorusGrid(3, 8)
    with pytest.raises(ValueError):
        BoxGrid(1, 8, length=-1.0)
    g = TorusGrid(2, 8, length=2.0)
    assert g.h == pytest.approx(0.25)
    assert g.shape == (8, 8)
    assert g.cell_volume == pytest.approx(0.0625)
    assert g.periodic
    assert not BoxGrid(1, 8).periodic


def test_box_grid_centres_and_faces():
    g = BoxGrid(1, 4, length=1.0)
    assert np.allclose(g.axis_points(), [0.125, 0.375, 0.625, 0.875])
    assert np.allclose(g.interior_face_points(), [0.25, 0.5, 0.75])


def test_field_rejects_bad_shapes():
    g = TorusGrid(1, 8)
    with pytest.raises(ValueError):
        Field(g, np.ones(7))
    with pytest.raises(ValueError):
        Field(g, np.ones((8, 8)))


# ---------------------------------------------------------------------------
# integrate
# ---------------------------------------------------------------------------

def test_integrate_examples():
    g = TorusGrid(1, 32)
    assert integrate(g.constant(1.0)) == pytest.approx(1.0, abs=1e-15)
    assert integrate(g.zeros()) == 0.0
    g64 = TorusGrid(1, 64)
    x = g64.axis_points()
    assert integrate(Field(g64, np.sin(2 * np.pi * x))) == pytest.approx(0.0, abs=1e-12)


@given(a=value_arrays_16, b=value_arrays_16,
       s=st.floats(min_value=-5, max_value=5, allow_nan=False))
def test_integrate_linearity(a, b, s):
    g = TorusGrid(1, 16)
    lhs = integrate(Field(g, a + s * b))
    rhs = integrate(Field(g, a)) + s * integrate(Field(g, b))
    assert lhs == pytest.approx(rhs, abs=1e-10)


# ---------------------------------------------------------------------------
# laplacian
# ---------------------------------------------------------------------------

def test_laplacian_constant_is_zero():
    g = TorusGrid(1, 16)
    out = laplacian_periodic(g.constant(4.2))
    assert np.all(out.values == 0.0)


def test_laplacian_delta_stencil():
    g = TorusGrid(1, 8)
    vals = np.zeros(8)
    vals[3] = 1.0
    out = laplacian_periodic(Field(g, vals)).values * g.h**2
    expected = np.zeros(8)
    expected[3] = -2.0
    expected[2] = expected[4] = 1.0
    assert np.allclose(out, expected, atol=1e-14)


def test_laplacian_cosine_second_order():
    errors = {}
    for n in (64, 128):
        g = TorusGrid(1, n)
        x = g.axis_points()
        f = Field(g, np.cos(2 * np.pi * x))
        out = laplacian_periodic(f)
        errors[n] = float(np.max(np.abs(out.values + (2 * np.pi) ** 2 * f.values)))
    assert errors[128] < 1e-1
    assert errors[64] / errors[128] == pytest.approx(4.0, rel=0.15)


@given(a=value_arrays_16)
def test_laplacian_conserves_mass(a):
    g = TorusGrid(1, 16)
    out = laplacian_periodic(Field(g, a))
    bound = 1e-12 * (1.0 + float(np.max(np.abs(a))) / g.h**2)
    assert abs(integrate(out)) <= bound


def test_laplacian_2d_cross_stencil():
    g = TorusGrid(2, 8)
    vals = np.zeros((8, 8))
    vals[2, 5] = 1.0
    out = laplacian_periodic(Field(g, vals)).values * g.h**2
    assert out[2, 5] == pytest.approx(-4.0)
    for i, j in [(1, 5), (3, 5), (2, 4), (2, 6)]:
        assert out[i, j] == pytest.approx(1.0)


# ---------------------------------------------------------------------------
# flux divergence
# ---------------------------------------------------------------------------

def test_flux_divergence_unit_coefficient_is_laplacian():
    g = TorusGrid(1, 32)
    x = g.axis_points()
    f = Field(g, np.exp(np.sin(2 * np.pi * x)))
    lhs = flux_divergence([g.constant(1.0)], [f])
    rhs = laplacian_periodic(f)
    assert np.array_equal(lhs.values, rhs.values) or np.allclose(
        lhs.values, rhs.values, atol=1e-13)


@given(c=value_arrays_16, gvals=value_arrays_16)
def test_flux_divergence_conservation(c, gvals):
    g = TorusGrid(1, 16)
    out = flux_divergence([Field(g, np.abs(c))], [Field(g, gvals)])
    bound = 1e-12 * (1.0 + float(np.max(np.abs(out.values))))
    assert abs(integrate(out)) <= bound


def test_flux_divergence_refinement_against_analytic():
    # c = g = 1.5 + cos(2 pi x): div(c grad g) = (c c')' = c'^2 + c c''
    def analytic(x):
        c = 1.5 + np.cos(2 * np.pi * x)
        cp = -2 * np.pi * np.sin(2 * np.pi * x)
        cpp = -4 * np.pi**2 * np.cos(2 * np.pi * x)
        return cp**2 + c * cpp

    errs = {}
    for n in (64, 128):
        g = TorusGrid(1, n)
        x = g.axis_points()
        f = Field(g, 1.5 + np.cos(2 * np.pi * x))
        out = flux_divergence([f], [f])
        errs[n] = float(np.max(np.abs(out.values - analytic(x))))
    assert errs[64] / errs[128] == pytest.approx(4.0, rel=0.25)


def test_flux_divergence_mismatched_grids():
    a, b = TorusGrid(1, 16), TorusGrid(1, 32)
    with pytest.raises(ValueError):
        flux_divergence([a.constant(1.0)], [b.constant(1.0)])


# ---------------------------------------------------------------------------
# circular convolution
# ---------------------------------------------------------------------------

def _brute_convolve(f, w):
    n = len(f)
    return np.array([sum(f[(i - k) % n] * w[k] for k in range(n)) for i in range(n)])


def test_convolve_delta_identity():
    g = TorusGrid(1, 16)
    f = Field(g, np.sin(2 * np.pi * g.axis_points()) + 2.0)
    out = circular_convolve(f, unit_delta_kernel(g))
    assert np.array_equal(out.values, f.values)


def test_convolve_uniform_kernel_gives_mean():
    g = TorusGrid(1, 16)
    f = Field(g, np.arange(16.0))
    w = Field(g, np.full(16, 1.0 / 16))
    out = circular_convolve(f, w)
    assert np.allclose(out.values, np.mean(f.values), atol=1e-12)


@given(fvals=value_arrays_16, seedling=st.integers(min_value=0, max_value=2**31))
@settings(max_examples=30)
def test_convolve_matches_brute_force_and_preserves_mass(fvals, seedling):
    g = TorusGrid(1, 16)
    rng = np.random.default_rng(seedling)
    w = rng.uniform(0.0, 1.0, 16)
    w /= w.sum()
    out = circular_convolve(Field(g, fvals), Field(g, w))
    assert np.allclose(out.values, _brute_convolve(fvals, w), atol=1e-10)
    assert integrate(out) == pytest.approx(integrate(Field(g, fvals)), abs=1e-12)


@given(fvals=value_arrays_16, gvals=value_arrays_16,
       s=st.floats(min_value=-3, max_value=3, allow_nan=False),
       shift=st.integers(min_value=0, max_value=15))
@settings(max_examples=30)
def test_convolve_bilinear_and_shift_equivariant(fvals, gvals, s, shift):
    g = TorusGrid(1, 16)
    w = np.zeros(16)
    w[1] = 0.25
    w[5] = 0.75
    k = Field(g, w)
    lhs = circular_convolve(Field(g, fvals + s * gvals), k).values
    rhs = (circular_convolve(Field(g, fvals), k).values
           + s * circular_convolve(Field(g, gvals), k).values)
    assert np.allclose(lhs, rhs, atol=1e-9)
    shifted = circular_convolve(Field(g, np.roll(fvals, shift)), k).values
    assert np.array_equal(shifted, np.roll(circular_convolve(Field(g, fvals), k).values, shift))


def test_convolve_preserves_nonnegativity():
    g = TorusGrid(1, 16)
    rng = np.random.default_rng(5)
    f = Field(g, rng.uniform(0.0, 3.0, 16))
    w = rng.uniform(0.0, 1.0, 16)
    out = circular_convolve(f, Field(g, w / w.sum()))
    assert np.all(out.values >= 0.0)


# ---------------------------------------------------------------------------
# kernel reflection
# ---------------------------------------------------------------------------

def test_reflect_delta_position():
    g = TorusGrid(1, 8)
    w = np.zeros(8)
    w[3] = 1.0
    out = reflect_kernel(Field(g, w))
    expected = np.zeros(8)
    expected[5] = 1.0
    assert np.array_equal(out.values, expected)


def test_reflect_symmetric_kernel_unchanged():
    g = TorusGrid(1, 16)
    offs = np.minimum(np.arange(16), 16 - np.arange(16))
    w = np.exp(-offs.astype(float))
    out = reflect_kernel(Field(g, w))
    assert np.array_equal(out.values, w)


@given(w=value_arrays_16)
def test_reflect_is_involution(w):
    g = TorusGrid(1, 16)
    twice = reflect_kernel(reflect_kernel(Field(g, w)))
    assert np.array_equal(twice.values, w)


@given(fvals=value_arrays_16, gvals=value_arrays_16, seedling=st.integers(0, 2**31))
@settings(max_examples=30)
def test_adjoint_identity_with_reflected_kernel(fvals, gvals, seedling):
    g = TorusGrid(1, 16)
    rng = np.random.default_rng(seedling)
    w = Field(g, rng.uniform(0.0, 1.0, 16))
    f, gg = Field(g, fvals), Field(g, gvals)
    lhs = integrate(Field(g, gg.values * circular_convolve(f, reflect_kernel(w)).values))
    rhs = integrate(Field(g, fvals * circular_convolve(gg, w).values))
    assert lhs == pytest.approx(rhs, abs=1e-9 * (1 + abs(lhs)))


def test_reflect_2d_involution_and_adjoint():
    g = TorusGrid(2, 8)
    rng = np.random.default_rng(11)
    w = Field(g, rng.uniform(0.0, 1.0, (8, 8)))
    f = Field(g, rng.normal(size=(8, 8)))
    gg = Field(g, rng.normal(size=(8, 8)))
    assert np.array_equal(reflect_kernel(reflect_kernel(w)).values, w.values)
    lhs = integrate(Field(g, gg.values * circular_convolve(f, reflect_kernel(w)).values))
    rhs = integrate(Field(g, f.values * circular_convolve(gg, w).values))
    assert lhs == pytest.approx(rhs, abs=1e-9 * (1 + abs(lhs)))


# ---------------------------------------------------------------------------
# serialisation
# ---------------------------------------------------------------------------

def test_field_csv_roundtrip(tmp_path):
    g = TorusGrid(1, 16, length=2.0)
    f = Field(g, np.sin(np.arange(16.0)))
    path = tmp_path / "field.csv"
    save_field_csv(f, path)
    back = load_field_csv(path)
    assert back.grid == g
    assert np.array_equal(back.values, f.values)


def test_field_csv_roundtrip_2d_box(tmp_path):
    g = BoxGrid(2, 8, length=1.0)
    rng = np.random.default_rng(3)
    f = Field(g, rng.uniform(0.5, 2.0, (8, 8)))
    path = tmp_path / "field2d.csv"
    save_field_csv(f, path)
    back = load_field_csv(path)
    assert back.grid == g
    assert np.array_equal(back.values, f.values)


def test_field_raw_roundtrip(tmp_path):
    g = BoxGrid(1, 32, length=3.0)
    f = Field(g, np.linspace(0.1, 5.0, 32))
    path = tmp_path / "field.bin"
    save_field_raw(f, path)
    back = load_field_raw(path)
    assert back.grid == g
    assert np.array_equal(back.values, f.values)
