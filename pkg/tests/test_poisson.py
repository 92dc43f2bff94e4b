import numpy as np
import pytest

from vpscatter.fields import Field3, Grid3, interpolate
from vpscatter.poisson import (SupportViolationError, check_gradient_estimate, check_hardy,
                               gaussian_charge, gaussian_charge_potential, solve_free_space)


def _gaussian_case(n):
    g = Grid3.centered(n, 6 * 0.12, margin_cells=3)
    return g, gaussian_charge(g, sigma=0.12)


def test_gaussian_potential_n32():
    g, rho = _gaussian_case(32)
    phi, _ = solve_free_space(rho)
    r = np.sqrt(sum(m ** 2 for m in g.mesh()))
    ref = gaussian_charge_potential(r, 0.12)
    assert np.max(np.abs(phi.values - ref)) / np.max(np.abs(ref)) < 1e-3


def test_gradient_matches_radial_derivative():
    g, rho = _gaussian_case(48)
    _, grad = solve_free_space(rho)
    x = np.array([[0.2, 0.1, -0.15]])
    r = np.linalg.norm(x)
    h = 1e-6
    dphi = (gaussian_charge_potential(r + h, 0.12) - gaussian_charge_potential(r - h, 0.12)) / (2 * h)
    exact = dphi * x[0] / r
    got = np.array([interpolate(grad[a], x)[0] for a in range(3)])
    np.testing.assert_allclose(got, exact, rtol=2e-3)


def test_linear_in_density():
    g, rho = _gaussian_case(24)
    p1, _ = solve_free_space(rho)
    p3, _ = solve_free_space(rho * 3.0)
    np.testing.assert_allclose(p3.values, 3 * p1.values, rtol=1e-12, atol=1e-15)


def test_zero_density_gives_zero():
    g = Grid3.centered(16, 1.0, 3)
    phi, grad = solve_free_space(Field3.zeros(g))
    assert not np.any(phi.values)
    assert not np.any(grad.stacked())


def test_support_touching_boundary_raises():
    g = Grid3.centered(16, 1.0, 3)
    v = np.zeros((16,) * 3)
    v[0, 8, 8] = 1.0
    with pytest.raises(SupportViolationError):
        solve_free_space(Field3(g, v))


def test_nonfinite_density_raises():
    g = Grid3.centered(16, 1.0, 3)
    v = np.zeros((16,) * 3)
    v[8, 8, 8] = np.nan
    with pytest.raises(ValueError):
        solve_free_space(Field3(g, v))


def test_gradient_estimate_and_hardy():
    g, rho = _gaussian_case(32)
    assert check_gradient_estimate(rho).passed
    phi, _ = solve_free_space(rho)
    bump = Field3.from_function(g, lambda x, y, z: np.exp(-(x * x + y * y + z * z) / 0.02))
    assert check_hardy(bump).passed
    assert check_hardy(phi * 1.0).lhs > 0
