"""
Test script for the torus geometry service.
"""
import math

import numpy as np
import pytest

from app.services.geometry import (
    FUNCTION,
    TWO_FORM,
    GridField,
    d_bar,
    d_bar_raw,
    d_z,
    d_z_raw,
    end_weights,
    grid_integral,
    l2_inner,
    lambda_contract,
    make_geometry,
    nabla_bar_raw,
    nabla_raw,
)
from app.utils.theta import theta_section


def _scalar_field(values: np.ndarray, weight: int = 0, form: str = FUNCTION) -> GridField:
    return GridField(values[..., None, None].astype(complex), np.array([[weight]]), form)


def test_make_geometry():
    """Valid geometry has unit volume; bad lattices and grids are rejected."""

    print("=" * 60)
    print("Testing make_geometry")
    print("=" * 60)

    geo = make_geometry(1j, 32)
    assert geo.num_points == 1024
    assert abs(geo.total_volume() - 1.0) <= 1e-12
    print(f"[OK] n_grid=32: {geo.num_points} points, volume {geo.total_volume()}")

    test_cases = [
        (1j, 15, "n_grid must be even"),
        (0.5, 32, "Im tau must be positive"),
        (1j, 14, "n_grid must be at least 16"),
    ]
    for tau, n_grid, message in test_cases:
        with pytest.raises(ValueError, match=message):
            make_geometry(tau, n_grid)
        print(f"[OK] tau={tau} n_grid={n_grid} -> '{message}'")


def test_quadrature_kills_fourier_modes():
    """Every non-constant Fourier mode integrates to zero on the uniform grid."""

    geo = make_geometry(1j, 16)
    for kx, ky in [(1, 0), (0, 3), (2, -5), (7, 7)]:
        mode = np.exp(2j * math.pi * (kx * geo.x + ky * geo.y))
        assert abs(grid_integral(mode, geo)) <= 1e-14
    print("[OK] Fourier modes integrate to zero")


def test_derivatives_of_constants_vanish():
    geo = make_geometry(0.3 + 1.2j, 16)
    field = _scalar_field(np.full((16, 16), 2.5))
    assert np.max(np.abs(d_bar(field, geo).data)) <= 1e-12
    assert np.max(np.abs(d_z(field, geo).data)) <= 1e-12
    print("[OK] d_bar and d_z of a constant are zero")


def test_plane_wave_derivatives():
    """On the square torus e^{2 pi i x} has d/dz = d/dz-bar = i pi e^{2 pi i x}."""

    geo = make_geometry(1j, 32)
    wave = np.exp(2j * math.pi * geo.x)
    field = _scalar_field(wave)
    expected = 1j * math.pi * wave

    err_bar = np.max(np.abs(d_bar(field, geo).data[..., 0, 0] - expected))
    err_z = np.max(np.abs(d_z(field, geo).data[..., 0, 0] - expected))
    print(f"[CHECK] d_bar error {err_bar:.2e}, d_z error {err_z:.2e}")
    assert err_bar <= 1e-3 * math.pi
    assert err_z <= 1e-3 * math.pi


def test_fourth_order_convergence():
    """Halving h cuts the plane-wave derivative error by about 16."""

    errors = []
    for n_grid in (16, 32):
        geo = make_geometry(1j, n_grid)
        wave = np.exp(2j * math.pi * (geo.x + geo.y))
        derivative = d_bar_raw(wave[..., None, None], np.zeros((1, 1), dtype=int), geo)[..., 0, 0]
        # d/dz-bar of e^{2 pi i (x + y)} with tau = i
        expected = math.pi * (1j - 1) * wave
        errors.append(np.max(np.abs(derivative - expected)))
    ratio = errors[0] / errors[1]
    print(f"[CHECK] error ratio {ratio:.1f}")
    assert 12.0 <= ratio <= 20.0


def test_theta_section_is_holomorphic():
    """The degree-1 theta function, with its twisted wraparound, is d-bar closed."""

    geo = make_geometry(1j, 64)
    theta = theta_section(geo.z, geo.tau, 1)
    field = _scalar_field(theta, weight=1)
    residual = np.max(np.abs(d_bar(field, geo).data))
    scale = np.max(np.abs(d_z(field, geo).data))
    print(f"[CHECK] |d_bar theta| = {residual:.2e} vs |d_z theta| = {scale:.2e}")
    assert residual <= 1e-3 * scale


def test_discrete_integration_by_parts():
    """sum (d-bar f) conj(g) = -sum f conj(d g) for periodic fields."""

    geo = make_geometry(0.2 + 0.9j, 16)
    rng = np.random.default_rng(3)
    f = rng.standard_normal((16, 16, 1, 1)) + 1j * rng.standard_normal((16, 16, 1, 1))
    g = rng.standard_normal((16, 16, 1, 1)) + 1j * rng.standard_normal((16, 16, 1, 1))
    zero = np.zeros((1, 1), dtype=int)

    left = np.sum(d_bar_raw(f, zero, geo) * np.conj(g))
    right = np.sum(f * np.conj(d_z_raw(g, zero, geo)))
    assert abs(left + right) <= 1e-10 * max(1.0, abs(left))
    print(f"[OK] integration by parts residual {abs(left + right):.2e}")


def test_covariant_stencils_are_exact_adjoints():
    """sum (nabla-bar a) conj(b) = -sum a conj(nabla b) on twisted fields, to roundoff."""

    geo = make_geometry(0.2 + 1.1j, 16)
    rng = np.random.default_rng(5)
    for degrees in [(1, 0), (2, 1, 0)]:
        weights = end_weights(degrees)
        shape = (16, 16, len(degrees), len(degrees))
        a = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
        b = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)

        left = np.sum(nabla_bar_raw(a, weights, geo) * np.conj(b))
        right = np.sum(a * np.conj(nabla_raw(b, weights, geo)))
        residual = abs(left + right)
        print(f"[CHECK] degrees={degrees}: adjoint residual {residual:.2e} of {abs(left):.2e}")
        assert residual <= 1e-12 * max(1.0, abs(left))


def test_covariant_stencils_reduce_to_plain_on_trivial_weights():
    geo = make_geometry(0.3 + 0.9j, 16)
    rng = np.random.default_rng(8)
    data = rng.standard_normal((16, 16, 1, 1)) + 0j
    zero = np.zeros((1, 1), dtype=int)
    np.testing.assert_allclose(nabla_bar_raw(data, zero, geo), d_bar_raw(data, zero, geo), atol=1e-12)
    np.testing.assert_allclose(nabla_raw(data, zero, geo), d_z_raw(data, zero, geo), atol=1e-12)
    print("[OK] weight-zero covariant stencils equal the plain stencils")


def test_lambda_contract():
    geo = make_geometry(1j, 16)
    omega = geo.kahler_form(2)
    contracted = lambda_contract(omega, geo)
    np.testing.assert_allclose(contracted.data, np.broadcast_to(np.eye(2), contracted.data.shape), atol=1e-14)
    print("[OK] Lambda omega = identity")

    zero = GridField(np.zeros((16, 16, 2, 2), dtype=complex), np.zeros((2, 2), dtype=int), TWO_FORM)
    assert np.all(lambda_contract(zero, geo).data == 0)

    with pytest.raises(ValueError):
        lambda_contract(geo.constant(np.eye(2)), geo)


def test_l2_inner():
    geo = make_geometry(1j, 16)
    test_cases = [
        (np.eye(2), 2.0),
        (np.zeros((2, 2)), 0.0),
        (np.diag([1.0, -1.0]), 2.0),
    ]
    for matrix, expected in test_cases:
        field = geo.constant(matrix)
        value = l2_inner(field, field, geo)
        assert abs(value - expected) <= 1e-12
        print(f"[OK] ||{matrix.tolist()}||^2 = {value.real}")

    a = geo.constant(np.eye(2), np.array([[0, 1], [-1, 0]]))
    b = geo.constant(np.eye(2))
    with pytest.raises(ValueError, match="automorphy weights differ"):
        l2_inner(a, b, geo)
    print("[OK] weight mismatch rejected")


def test_form_weights_match_curvature_normalization():
    """||F||^2 = ||Lambda F||^2 once the two-form weight is applied."""

    geo = make_geometry(0.4 + 1.3j, 16)
    lam = geo.constant(np.diag([2.0, -1.0]))
    form = GridField(lam.data / geo.lambda_factor, lam.weights, TWO_FORM)
    assert abs(l2_inner(form, form, geo) - l2_inner(lam, lam, geo)) <= 1e-12


def main():
    tests = [
        test_make_geometry,
        test_quadrature_kills_fourier_modes,
        test_derivatives_of_constants_vanish,
        test_plane_wave_derivatives,
        test_fourth_order_convergence,
        test_theta_section_is_holomorphic,
        test_discrete_integration_by_parts,
        test_covariant_stencils_are_exact_adjoints,
        test_covariant_stencils_reduce_to_plain_on_trivial_weights,
        test_lambda_contract,
        test_l2_inner,
        test_form_weights_match_curvature_normalization,
    ]
    results = []
    for test in tests:
        try:
            test()
            results.append(True)
        except AssertionError as e:
            print(f"[FAIL] {test.__name__}: {e}")
            results.append(False)

    print("=" * 60)
    if all(results):
        print(f"[SUCCESS] ALL TESTS PASSED ({sum(results)}/{len(results)})")
    else:
        print(f"[FAILURE] {sum(results)}/{len(results)} tests passed")
    print("=" * 60)
    return all(results)


if __name__ == "__main__":
    success = main()
    exit(0 if success else 1)
