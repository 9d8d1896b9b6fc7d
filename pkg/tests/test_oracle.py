import math

import numpy as np
import pytest

from abflab import (Grid2D, QuadratureSpec, compute_equilibrium, compute_free_energy,
                    conditional_expectation_of_force, make_cosine_model,
                    mean_force_consistency)
from abflab.oracle import EmptySliceError, refined_quadrature
from abflab.pde import DensityField

TWO_PI = 2.0 * math.pi


def closed_form_a(z, c, a, k):
    # complete the square in y: Z(z) = exp(-c cos) exp(a^2 sin^2 / 2k) sqrt(2 pi / k)
    s = np.sin(TWO_PI * z)
    return c * (np.cos(TWO_PI * z) - 1.0) - (a * a / (2.0 * k)) * s * s


def closed_form_aprime(z, c, a, k):
    s = np.sin(TWO_PI * z)
    co = np.cos(TWO_PI * z)
    return -TWO_PI * c * s - (TWO_PI * a * a / k) * s * co


def test_separable_potential_profile():
    # a = 0 decouples y: A(z) = c cos(2 pi z) + const, A' = -2 pi c sin
    m = make_cosine_model(c=1.0, a=0.0, k=4.0)
    z = np.arange(64) / 64
    prof = compute_free_energy(m, z)
    np.testing.assert_allclose(prof.a_values, np.cos(TWO_PI * z) - 1.0, atol=1e-10)
    np.testing.assert_allclose(prof.aprime_values, -TWO_PI * np.sin(TWO_PI * z), atol=1e-10)
    assert prof.aprime_at(0.125) == pytest.approx(-TWO_PI * math.sin(math.pi / 4), abs=1e-9)


def test_canonical_profile_against_closed_form(model, profile):
    z = profile.z_grid
    np.testing.assert_allclose(profile.a_values, closed_form_a(z, 1.0, 0.5, 4.0), atol=1e-9)
    np.testing.assert_allclose(profile.aprime_values, closed_form_aprime(z, 1.0, 0.5, 4.0),
                               atol=1e-9)
    assert profile.aprime_at(0.25) == pytest.approx(-TWO_PI, abs=1e-9)


def test_profile_against_dense_trapezoid(model):
    # independent check: fixed dense trapezoid, no refinement logic shared
    z = np.array([0.0, 0.1, 0.3, 0.55, 0.8])
    prof = compute_free_energy(model, z)
    y = np.linspace(-4.0, 4.0, 2 ** 14 + 1)
    for i, zz in enumerate(z):
        w = np.exp(-model.potential.value(np.full_like(y, zz), y))
        zq = np.trapezoid(w, y)
        fq = np.trapezoid(model.potential.dx(np.full_like(y, zz), y) * w, y)
        assert prof.z_sigma_values[i] == pytest.approx(zq, rel=1e-10)
        assert prof.aprime_values[i] == pytest.approx(fq / zq, rel=1e-9, abs=1e-12)


def test_pinning_and_normalizer_identity(profile):
    # A differences reproduce the log of slice-normalizer ratios
    a_from_z = -(np.log(profile.z_sigma_values) - np.log(profile.z_sigma_values[0]))
    np.testing.assert_allclose(profile.a_values, a_from_z, atol=1e-12)
    assert profile.a_values[0] == 0.0


def test_x_independent_potential_zero_mean_force():
    m = make_cosine_model(c=0.0, a=0.0, k=4.0)
    prof = compute_free_energy(m, np.arange(32) / 32)
    assert np.max(np.abs(prof.aprime_values)) < 1e-12


def test_mean_force_consistency(model, profile):
    assert mean_force_consistency(model, profile) <= 1e-6


def test_quadrature_refinement_stability(model):
    z = np.arange(32) / 32
    p1 = compute_free_energy(m := model, z, QuadratureSpec(start_nodes=65))
    p2 = compute_free_energy(m, z, QuadratureSpec(start_nodes=129))
    assert np.max(np.abs(p1.aprime_values - p2.aprime_values)) <= 1e-10
    assert np.max(np.abs(p1.a_values - p2.a_values)) <= 1e-10


def test_refined_quadrature_gaussian():
    val = refined_quadrature(lambda y: np.exp(-0.5 * y * y), -10.0, 10.0)
    assert float(val) == pytest.approx(math.sqrt(2.0 * math.pi), rel=1e-12)


def test_equilibrium_flat_marginal_and_mass(model, profile):
    grid = Grid2D.for_model(model, 128, 128)
    eq = compute_equilibrium(model, profile, grid)
    marg = eq.psi.sum(axis=1) * grid.y.h
    assert np.max(np.abs(marg - 1.0)) < 1e-6
    assert eq.psi.sum() * grid.cell_area == pytest.approx(1.0, abs=1e-12)
    assert abs(eq.raw_mass - 1.0) < 1e-8


def test_equilibrium_conditional_gaussian_moments():
    # a = 0: conditionals are N(0, 1/(beta k)) at every slice
    m = make_cosine_model(c=1.0, a=0.0, k=4.0)
    prof = compute_free_energy(m, np.arange(64) / 64)
    grid = Grid2D.for_model(m, 64, 256)
    eq = compute_equilibrium(m, prof, grid)
    for z in (0.1, 0.5, 0.9):
        yc, dens = eq.conditional_slice(z)
        mean = np.sum(yc * dens) * grid.y.h
        var = np.sum(yc * yc * dens) * grid.y.h - mean ** 2
        assert mean == pytest.approx(0.0, abs=1e-8)
        assert var == pytest.approx(0.25, abs=1e-6)


def test_conditional_force_identity(model, profile):
    # averaging the pointwise force over equilibrium slices reproduces the
    # mean force at every grid column
    grid = Grid2D.for_model(model, 128, 128)
    eq = compute_equilibrium(model, profile, grid)
    worst = max(abs(conditional_expectation_of_force(model, eq, z) - profile.aprime_at(z))
                for z in grid.x.centers)
    assert worst <= 1e-8


def test_conditional_force_odd_integrand():
    # with c = 0 the force 2 pi a y cos(2 pi x) is odd in y, so a flat slice
    # averages to zero at every coordinate value
    m = make_cosine_model(c=0.0, a=0.5, k=4.0)
    grid = Grid2D.for_model(m, 32, 64)
    field = DensityField.from_function(grid, lambda x, y: np.ones_like(x + y))
    for z in (0.0, 0.3, 0.7):
        assert conditional_expectation_of_force(m, field, z) == pytest.approx(0.0, abs=1e-12)


def test_conditional_force_point_mass_column(model):
    grid = Grid2D.for_model(model, 32, 64)
    vals = np.zeros(grid.shape)
    j0 = 40
    i0 = int(grid.x.index_of(0.3))
    vals[i0, j0] = 1.0 / grid.cell_area
    field = DensityField(grid=grid, values=vals)
    expected = model.potential.dx(grid.x.centers[i0], grid.y.centers[j0])
    assert conditional_expectation_of_force(model, field, 0.3) == pytest.approx(float(expected))


def test_conditional_force_empty_slice(model):
    grid = Grid2D.for_model(model, 32, 64)
    field = DensityField(grid=grid, values=np.zeros(grid.shape))
    with pytest.raises(EmptySliceError):
        conditional_expectation_of_force(model, field, 0.5)
