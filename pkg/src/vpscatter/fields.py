"""Uniform 3D grids, sampled fields, finite differences, interpolation and
trapezoid quadrature.

Values are stored as ``(n, n, n)`` arrays indexed ``[i1, i2, i3]`` so that
``values[i1, i2, i3]`` is the sample at ``origin + spacing * (i1, i2, i3)``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field as dc_field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.interpolate import make_interp_spline

from . import _kernels

MAX_DERIVATIVE_ORDER = 12
SNAPSHOT_MAGIC = b"VPF3"
SNAPSHOT_VERSION = 1
_HEADER = struct.Struct("<4sII3dd20x")


class GridError(ValueError):
    pass


class OrderExceededError(ValueError):
    pass


class OutOfBoxError(ValueError):
    pass


@dataclass(frozen=True)
class Grid3:
    """Cubic grid with ``n`` nodes per axis starting at ``origin``."""

    n: int
    origin: tuple[float, float, float]
    spacing: float

    def __post_init__(self):
        if self.n < 8 or self.n % 2:
            raise GridError(f"n must be even and >= 8, got {self.n}")
        if not self.spacing > 0:
            raise GridError("spacing must be positive")
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @classmethod
    def centered(cls, n: int, radius: float, margin_cells: float = 5.0) -> "Grid3":
        """Grid centred at 0 whose box holds the ball of ``radius`` plus
        ``margin_cells`` spacings on every side."""
        if n - 1 <= 2 * margin_cells:
            raise GridError("too few nodes for the requested margin")
        half = radius / (1.0 - 2.0 * margin_cells / (n - 1))
        h = 2.0 * half / (n - 1)
        return cls(n, (-half, -half, -half), h)

    @property
    def upper(self) -> np.ndarray:
        return np.asarray(self.origin) + self.spacing * (self.n - 1)

    @property
    def cell_volume(self) -> float:
        return self.spacing ** 3

    def axis(self, i: int) -> np.ndarray:
        return self.origin[i] + self.spacing * np.arange(self.n)

    def mesh(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return np.meshgrid(self.axis(0), self.axis(1), self.axis(2), indexing="ij")

    def points(self) -> np.ndarray:
        """All nodes as an ``(n**3, 3)`` array in storage order."""
        return np.stack([m.ravel() for m in self.mesh()], axis=1)

    def contains(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        lo = np.asarray(self.origin)
        return np.all((x >= lo) & (x <= self.upper), axis=1)

    def holds_ball(self, radius: float, center=(0.0, 0.0, 0.0), margin_cells: float = 4.0) -> bool:
        """True when the ball plus ``margin_cells`` spacings fits strictly inside."""
        c = np.asarray(center, dtype=float)
        pad = radius + margin_cells * self.spacing
        return bool(np.all(c - pad > np.asarray(self.origin)) and np.all(c + pad < self.upper))

    def require_ball(self, radius: float, center=(0.0, 0.0, 0.0)) -> None:
        if not self.holds_ball(radius, center):
            raise GridError(
                f"grid box does not contain the support ball of radius {radius} plus a 4-cell margin"
            )

    def trapezoid_weights(self) -> np.ndarray:
        w = np.ones(self.n)
        w[0] = w[-1] = 0.5
        return self.spacing ** 3 * w[:, None, None] * w[None, :, None] * w[None, None, :]

    def describe(self) -> dict:
        return {"n": self.n, "origin": list(self.origin), "spacing": self.spacing}


@dataclass(frozen=True)
class Field3:
    grid: Grid3
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.grid.n,) * 3:
            raise GridError(f"values shape {v.shape} does not match grid n={self.grid.n}")
        object.__setattr__(self, "values", v)

    @classmethod
    def zeros(cls, grid: Grid3) -> "Field3":
        return cls(grid, np.zeros((grid.n,) * 3))

    @classmethod
    def from_function(cls, grid: Grid3, fn) -> "Field3":
        x1, x2, x3 = grid.mesh()
        return cls(grid, fn(x1, x2, x3))

    def __add__(self, other: "Field3") -> "Field3":
        _same_grid(self, other)
        return Field3(self.grid, self.values + other.values)

    def __sub__(self, other: "Field3") -> "Field3":
        _same_grid(self, other)
        return Field3(self.grid, self.values - other.values)

    def __mul__(self, a: float) -> "Field3":
        return Field3(self.grid, a * self.values)

    __rmul__ = __mul__

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))

    def outer_shells_zero(self, shells: int = 2) -> bool:
        v = self.values
        s = shells
        inner = v[s:-s, s:-s, s:-s]
        return bool(np.sum(np.abs(v)) == np.sum(np.abs(inner)))


@dataclass(frozen=True)
class Field3Vec:
    components: tuple[Field3, Field3, Field3]

    def __post_init__(self):
        if len(self.components) != 3:
            raise GridError("a vector field has exactly three components")
        g = self.components[0].grid
        if any(c.grid != g for c in self.components):
            raise GridError("vector components must share one grid")

    @property
    def grid(self) -> Grid3:
        return self.components[0].grid

    def __getitem__(self, i: int) -> Field3:
        return self.components[i]

    def stacked(self) -> np.ndarray:
        return np.stack([c.values for c in self.components])


def _same_grid(a: Field3, b: Field3) -> None:
    if a.grid != b.grid:
        raise GridError("fields live on different grids")


def fornberg_weights(offsets, order: int) -> np.ndarray:
    """Finite-difference weights for the ``order``-th derivative at 0 from
    samples at the integer ``offsets`` (Fornberg's recursion)."""
    z = np.asarray(offsets, dtype=float)
    n = len(z)
    c = np.zeros((n, order + 1))
    c1 = 1.0
    c4 = z[0]
    c[0, 0] = 1.0
    for i in range(1, n):
        mn = min(i, order)
        c2 = 1.0
        c5 = c4
        c4 = z[i]
        for j in range(i):
            c3 = z[i] - z[j]
            c2 *= c3
            if j == i - 1:
                for k in range(mn, 0, -1):
                    c[i, k] = c1 * (k * c[i - 1, k - 1] - c5 * c[i - 1, k]) / c2
                c[i, 0] = -c1 * c5 * c[i - 1, 0] / c2
            for k in range(mn, 0, -1):
                c[j, k] = (c4 * c[j, k] - k * c[j, k - 1]) / c3
            c[j, 0] = c4 * c[j, 0] / c3
        c1 = c2
    return c[:, order]


@lru_cache(maxsize=None)
def _stencil_table(n: int, deriv: int, accuracy: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-node stencil start index and weights for an axis of n nodes."""
    width = 2 * ((deriv + 1) // 2) - 1 + accuracy
    width = min(width, n)
    half = width // 2
    starts = np.empty(n, dtype=int)
    weights = np.empty((n, width))
    for i in range(n):
        s = min(max(i - half, 0), n - width)
        starts[i] = s
        weights[i] = fornberg_weights(np.arange(s, s + width) - i, deriv)
    return starts, weights


def _diff_axis(v: np.ndarray, axis: int, deriv: int, h: float, accuracy: int) -> np.ndarray:
    if deriv == 0:
        return v
    n = v.shape[axis]
    starts, weights = _stencil_table(n, deriv, accuracy)
    vm = np.moveaxis(v, axis, 0)
    out = np.zeros_like(vm)
    width = weights.shape[1]
    half = width // 2
    interior = slice(half, n - half)
    # interior nodes share one centred stencil
    w_c = weights[n // 2]
    for k in range(width):
        out[interior] += w_c[k] * vm[k: n - width + 1 + k]
    for i in list(range(half)) + list(range(n - half, n)):
        s = starts[i]
        out[i] = np.tensordot(weights[i], vm[s: s + width], axes=1)
    return np.moveaxis(out, 0, axis) / h ** deriv


def differentiate(f: Field3, multi_index, accuracy: int = 6,
                  max_order: int = MAX_DERIVATIVE_ORDER) -> Field3:
    """Mixed partial derivative by centred finite differences.

    Interior nodes use the centred stencil of the requested accuracy order;
    nodes closer than half a stencil to the boundary use one-sided stencils
    of the same width.
    """
    mi = tuple(int(a) for a in multi_index)
    if len(mi) != 3 or min(mi) < 0:
        raise ValueError("multi_index must be three non-negative integers")
    if sum(mi) > max_order:
        raise OrderExceededError(f"|multi_index| = {sum(mi)} exceeds {max_order}")
    v = f.values
    for ax, d in enumerate(mi):
        v = _diff_axis(v, ax, d, f.grid.spacing, accuracy)
    return Field3(f.grid, v)


def laplacian(f: Field3, accuracy: int = 6) -> Field3:
    out = differentiate(f, (2, 0, 0), accuracy)
    out = out + differentiate(f, (0, 2, 0), accuracy)
    return out + differentiate(f, (0, 0, 2), accuracy)


def _lagrange4(s: np.ndarray) -> np.ndarray:
    """Cubic Lagrange weights on nodes -1, 0, 1, 2 at fractional offset s."""
    return np.stack([
        -s * (s - 1) * (s - 2) / 6.0,
        (s + 1) * (s - 1) * (s - 2) / 2.0,
        -(s + 1) * s * (s - 2) / 2.0,
        (s + 1) * s * (s - 1) / 6.0,
    ])


def interpolate(f: Field3, x) -> np.ndarray | float:
    """Tricubic Lagrange interpolation; exact on polynomials of degree 3 per axis."""
    pts = np.asarray(x, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    g = f.grid
    if not np.all(g.contains(pts)):
        raise OutOfBoxError("interpolation point outside the grid box")
    u = (pts - np.asarray(g.origin)) / g.spacing
    base = np.clip(np.floor(u).astype(int), 1, g.n - 3)
    s = u - base
    w = [_lagrange4(s[:, a]) for a in range(3)]
    out = np.zeros(len(pts))
    v = f.values
    for a in range(4):
        for b in range(4):
            wab = w[0][a] * w[1][b]
            for c in range(4):
                out += wab * w[2][c] * v[base[:, 0] - 1 + a, base[:, 1] - 1 + b, base[:, 2] - 1 + c]
    return float(out[0]) if single else out


def quadrature(f: Field3) -> float:
    """Tensor-product trapezoid rule over the grid box."""
    if not f.is_finite():
        raise ValueError("non-finite values in quadrature input")
    return float(np.sum(f.grid.trapezoid_weights() * f.values))


@dataclass
class TensorSpline:
    """Interpolating tensor-product B-spline of a :class:`Field3`.

    All derivatives come from one piecewise polynomial, so Taylor expansions
    built from them are mutually consistent.
    """

    grid: Grid3
    degree: int
    knots: np.ndarray
    coef: np.ndarray
    _lo: np.ndarray = dc_field(init=False, repr=False)
    _hi: np.ndarray = dc_field(init=False, repr=False)

    def __post_init__(self):
        self._lo = np.asarray(self.grid.origin)
        self._hi = self.grid.upper

    @classmethod
    def fit(cls, f: Field3, degree: int = 7) -> "TensorSpline":
        x = f.grid.axis(0)
        c = f.values
        knots = None
        for ax in range(3):
            sp = make_interp_spline(x, c, k=degree, axis=ax)
            c = np.moveaxis(sp.c, 0, ax)
            knots = sp.t
        return cls(f.grid, degree, np.ascontiguousarray(knots), np.ascontiguousarray(c))

    @classmethod
    def from_coefficients(cls, grid: Grid3, degree: int, knots, coef) -> "TensorSpline":
        return cls(grid, degree, np.ascontiguousarray(knots), np.ascontiguousarray(coef))

    def combine(self, weights, others) -> "TensorSpline":
        """Linear combination ``sum w_i * s_i`` sharing this spline's knots."""
        c = np.zeros_like(self.coef)
        for w, s in zip(weights, others):
            c += w * s.coef
        return TensorSpline(self.grid, self.degree, self.knots, c)

    def derivatives(self, pts, orders) -> np.ndarray:
        """Values of the requested derivatives, shape ``(len(orders), npts)``."""
        pts = np.ascontiguousarray(np.atleast_2d(np.asarray(pts, dtype=float)))
        if pts.size and (np.any(pts < self._lo) or np.any(pts > self._hi)):
            raise OutOfBoxError("spline evaluation point outside the grid box")
        ords = np.ascontiguousarray(np.asarray(orders, dtype=np.int64).reshape(-1, 3))
        out = np.empty((len(ords), len(pts)))
        if len(pts):
            which = np.zeros(len(ords), dtype=np.int64)
            _kernels.spline_eval(self.coef[None], self.knots, self.degree, pts, which, ords, out)
        return out

    def __call__(self, pts) -> np.ndarray:
        return self.derivatives(pts, [(0, 0, 0)])[0]

    def gradient(self, pts) -> np.ndarray:
        return self.derivatives(pts, [(1, 0, 0), (0, 1, 0), (0, 0, 1)])


def evaluate_splines(splines, requests, pts) -> np.ndarray:
    """Evaluate ``(spline_index, order)`` requests for splines sharing knots.

    Basis functions are computed once per point for all splines.
    """
    pts = np.ascontiguousarray(np.atleast_2d(np.asarray(pts, dtype=float)))
    out = np.empty((len(requests), len(pts)))
    if not requests or not len(pts):
        return out
    s0 = splines[0]
    if np.any(pts < s0._lo) or np.any(pts > s0._hi):
        raise OutOfBoxError("spline evaluation point outside the grid box")
    for s in splines[1:]:
        if s.degree != s0.degree or not np.array_equal(s.knots, s0.knots):
            raise GridError("splines evaluated together must share knots and degree")
    coefs = np.ascontiguousarray(np.stack([s.coef for s in splines]))
    which = np.array([r[0] for r in requests], dtype=np.int64)
    ords = np.array([r[1] for r in requests], dtype=np.int64).reshape(-1, 3)
    _kernels.spline_eval(coefs, s0.knots, s0.degree, pts, which, ords, out)
    return out


def write_snapshot(f: Field3, path) -> None:
    """Binary snapshot: 64-byte header then little-endian f64, x1 fastest."""
    g = f.grid
    header = _HEADER.pack(SNAPSHOT_MAGIC, SNAPSHOT_VERSION, g.n, *g.origin, g.spacing)
    body = np.ascontiguousarray(f.values.transpose(2, 1, 0)).astype("<f8").tobytes()
    Path(path).write_bytes(header + body)


def read_snapshot(path) -> Field3:
    raw = Path(path).read_bytes()
    magic, version, n, o1, o2, o3, h = _HEADER.unpack(raw[:_HEADER.size])
    if magic != SNAPSHOT_MAGIC:
        raise ValueError(f"bad snapshot magic {magic!r}")
    if version != SNAPSHOT_VERSION:
        raise ValueError(f"unsupported snapshot version {version}")
    vals = np.frombuffer(raw[_HEADER.size:], dtype="<f8")
    if vals.size != n ** 3:
        raise ValueError("snapshot body has the wrong length")
    vals = vals.reshape(n, n, n).transpose(2, 1, 0).astype(float)
    return Field3(Grid3(n, (o1, o2, o3), h), vals)
