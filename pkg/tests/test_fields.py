import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vpscatter.fields import (Field3, Grid3, GridError, OrderExceededError, OutOfBoxError,
                              TensorSpline, differentiate, interpolate, laplacian, quadrature,
                              read_snapshot, write_snapshot)


@pytest.fixture
def grid():
    return Grid3.centered(24, 1.0, margin_cells=3)


def test_grid_rejects_odd_or_small():
    with pytest.raises(GridError):
        Grid3(9, (0, 0, 0), 0.1)
    with pytest.raises(GridError):
        Grid3(6, (0, 0, 0), 0.1)
    with pytest.raises(GridError):
        Grid3(8, (0, 0, 0), 0.0)


def test_centered_holds_ball(grid):
    assert grid.holds_ball(1.0, margin_cells=2.9)
    assert not grid.holds_ball(1.0, margin_cells=3.5)


def test_field_shape_mismatch(grid):
    with pytest.raises(GridError):
        Field3(grid, np.zeros((4, 4, 4)))


def test_differentiate_polynomial_exact(grid):
    f = Field3.from_function(grid, lambda x, y, z: x ** 3 * y + z ** 2)
    x1, x2, x3 = grid.mesh()
    d = differentiate(f, (2, 1, 0))
    np.testing.assert_allclose(d.values, 6 * x1, atol=1e-9)
    np.testing.assert_allclose(laplacian(f).values, 6 * x1 * x2 + 2, atol=1e-8)


def test_differentiate_order_budget(grid):
    f = Field3.zeros(grid)
    with pytest.raises(OrderExceededError):
        differentiate(f, (5, 5, 5), max_order=12)


def test_interpolate_cubic_exact(grid, rng):
    f = Field3.from_function(grid, lambda x, y, z: x ** 3 - 2 * x * y * z + z ** 2)
    pts = rng.uniform(-0.9, 0.9, (50, 3))
    exact = pts[:, 0] ** 3 - 2 * pts.prod(axis=1) + pts[:, 2] ** 2
    np.testing.assert_allclose(interpolate(f, pts), exact, atol=1e-12)


def test_interpolate_outside_raises(grid):
    with pytest.raises(OutOfBoxError):
        interpolate(Field3.zeros(grid), [5.0, 0.0, 0.0])


def test_quadrature_of_gaussian(grid):
    f = Field3.from_function(grid, lambda x, y, z: np.exp(-(x * x + y * y + z * z) / 0.1))
    assert quadrature(f) == pytest.approx((0.1 * np.pi) ** 1.5, rel=1e-6)


def test_snapshot_roundtrip(grid, tmp_path, rng):
    f = Field3(grid, rng.normal(size=(grid.n,) * 3))
    write_snapshot(f, tmp_path / "a.vpf3")
    g = read_snapshot(tmp_path / "a.vpf3")
    assert g.grid == f.grid
    assert np.array_equal(g.values, f.values)


def test_snapshot_bad_magic(tmp_path):
    (tmp_path / "b").write_bytes(b"x" * 80)
    with pytest.raises(ValueError):
        read_snapshot(tmp_path / "b")


def test_spline_reproduces_smooth_field(grid, rng):
    fn = lambda x, y, z: np.sin(2 * x) * np.cos(y) + z ** 2  # noqa: E731
    s = TensorSpline.fit(Field3.from_function(grid, fn), degree=7)
    pts = rng.uniform(-0.8, 0.8, (40, 3))
    np.testing.assert_allclose(s(pts), fn(*pts.T), atol=1e-6)
    gx = s.derivatives(pts, [(1, 0, 0)])[0]
    np.testing.assert_allclose(gx, 2 * np.cos(2 * pts[:, 0]) * np.cos(pts[:, 1]), atol=1e-5)


@settings(max_examples=25, deadline=None)
@given(a=st.floats(-2, 2), b=st.floats(-2, 2))
def test_derivative_is_linear(a, b):
    g = Grid3.centered(16, 1.0, margin_cells=2)
    f1 = Field3.from_function(g, lambda x, y, z: np.sin(x + y))
    f2 = Field3.from_function(g, lambda x, y, z: np.cos(z) * x)
    lhs = differentiate(f1 * a + f2 * b, (1, 0, 1))
    rhs = differentiate(f1, (1, 0, 1)) * a + differentiate(f2, (1, 0, 1)) * b
    np.testing.assert_allclose(lhs.values, rhs.values, atol=1e-9)
