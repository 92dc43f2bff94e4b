"""Analytic scattering profiles with exact derivatives of every mixed order.

A profile is a finite sum of separable terms

    f∞(x, p) = a · Σ_j w_j u_j(x) v_j(p),

where each factor is a polynomial times an (optionally anisotropic)
Gaussian times the C∞ bump ``χ(|z - c|² / R²)`` with
``χ(s) = e · exp(1 / (s - 1))`` for ``s < 1`` and zero otherwise, so that
``χ(0) = 1``.  Derivatives of the bump use the rational recurrence

    χ^{(m)}(s) = e · P_m(s - 1) / (s - 1)^{2m} · exp(1 / (s - 1)),
    P_{m+1}(v) = v² P_m'(v) - 2 m v P_m(v) - P_m(v),

combined with the Hermite-type expansion of derivatives of a function of a
separable quadratic.  Moments ``∫ z^β u(z) dz`` are computed once by
trapezoid quadrature on the factor's support box, which converges faster
than any power for these smooth compactly supported factors.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field as dc_field
from functools import lru_cache
from math import comb, factorial

import numpy as np

from .fields import (
    MAX_DERIVATIVE_ORDER,
    Field3,
    Field3Vec,
    Grid3,
    OrderExceededError,
    TensorSpline,
)
from .poisson import solve_free_space

DEFAULT_MOMENT_NODES = 113


@lru_cache(maxsize=None)
def _bump_polys(mmax: int) -> tuple[tuple[int, ...], ...]:
    """Integer coefficients (ascending in v = s - 1) of P_0 .. P_mmax."""
    polys = [(1,)]
    for m in range(mmax):
        P = list(polys[-1])
        deg = len(P) - 1
        new = [0] * (deg + 3)
        for i, c in enumerate(P):
            # v^2 * d/dv (c v^i) = i c v^{i+1}
            if i:
                new[i + 1] += i * c
            new[i + 1] -= 2 * m * c
            new[i] -= c
        while len(new) > 1 and new[-1] == 0:
            new.pop()
        polys.append(tuple(new))
    return tuple(polys)


def bump_derivatives(s: np.ndarray, mmax: int) -> np.ndarray:
    """``χ^{(m)}(s)`` for m = 0..mmax, shape ``(mmax + 1,) + s.shape``."""
    s = np.asarray(s, dtype=float)
    out = np.zeros((mmax + 1,) + s.shape)
    # beyond this point every derivative is below 1e-180 in magnitude
    inside = s < 1.0 - 2e-3
    v = s[inside] - 1.0
    ex = np.e * np.exp(1.0 / v)
    polys = _bump_polys(mmax)
    inv2 = 1.0 / (v * v)
    scale = np.ones_like(v)
    for m in range(mmax + 1):
        P = np.polynomial.polynomial.polyval(v, np.array(polys[m], dtype=float))
        out[m][inside] = P * scale * ex
        scale = scale * inv2
    return out


@lru_cache(maxsize=None)
def _hermite_coeffs(n: int) -> np.ndarray:
    """Coefficients of the probabilists' Hermite polynomial He_n (ascending)."""
    c = np.polynomial.hermite_e.herme2poly([0] * n + [1])
    return np.asarray(c, dtype=float)


def _multi_indices(max_order: int):
    for tot in range(max_order + 1):
        for a in range(tot + 1):
            for b in range(tot - a + 1):
                yield (a, b, tot - a - b)


@dataclass(frozen=True)
class BumpFactor:
    """``poly(z - c) · exp(-Σ (z_i - c_i)² / 2σ_i²) · χ(|z - c|² / R²)``.

    Parameters
    ----------
    center : 3-vector
    radius : float
        Support radius ``R``.
    sigma : 3-vector or None
        Gaussian widths; ``None`` drops the Gaussian.
    poly : tuple of ((a, b, c), coef)
        Monomials in ``z - center``.  The default is the constant 1.
    """

    center: tuple[float, float, float]
    radius: float
    sigma: tuple[float, float, float] | None = None
    poly: tuple = (((0, 0, 0), 1.0),)
    _moment_cache: dict = dc_field(default_factory=dict, compare=False, repr=False, hash=False)

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        if not self.radius > 0:
            raise ValueError("factor radius must be positive")
        if self.sigma is not None:
            sig = tuple(float(s) for s in np.broadcast_to(self.sigma, 3))
            if min(sig) <= 0:
                raise ValueError("sigma must be positive")
            object.__setattr__(self, "sigma", sig)
        object.__setattr__(self, "poly", tuple((tuple(int(i) for i in a), float(c))
                                               for a, c in self.poly))

    @property
    def extent(self) -> float:
        """Radius of a centred ball containing the support."""
        return float(np.linalg.norm(self.center)) + self.radius

    def to_dict(self) -> dict:
        return {
            "center": list(self.center),
            "radius": self.radius,
            "sigma": None if self.sigma is None else list(self.sigma),
            "poly": [[list(a), c] for a, c in self.poly],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BumpFactor":
        poly = d.get("poly") or [[[0, 0, 0], 1.0]]
        return cls(tuple(d["center"]), float(d["radius"]),
                   None if d.get("sigma") is None else tuple(d["sigma"]),
                   tuple((tuple(a), float(c)) for a, c in poly))

    # -- pointwise derivatives ---------------------------------------------
    def derivatives(self, z, orders) -> np.ndarray:
        """Values of ``∂^α`` of the factor for each α in ``orders``.

        Returns an array of shape ``(len(orders), npts)``.
        """
        z = np.atleast_2d(np.asarray(z, dtype=float))
        orders = [tuple(int(i) for i in a) for a in orders]
        out = np.zeros((len(orders), len(z)))
        if not orders:
            return out
        nmax = max(max(a) for a in orders)
        tmax = max(sum(a) for a in orders)
        if tmax > MAX_DERIVATIVE_ORDER:
            raise OrderExceededError(f"derivative order {tmax} exceeds {MAX_DERIVATIVE_ORDER}")
        d = z - np.asarray(self.center)
        R2 = self.radius ** 2
        q = np.sum(d * d, axis=1) / R2
        live = q < 1.0
        if not np.any(live):
            return out
        d = d[live]
        chi = bump_derivatives(q[live], tmax)

        # C[i][n] maps m -> coefficient of χ^{(m)} from n derivatives along axis i
        C = []
        for i in range(3):
            g = 2.0 * d[:, i] / R2
            row = []
            for n in range(nmax + 1):
                coeffs = {}
                for m in range((n + 1) // 2, n + 1):
                    j = n - m
                    c = factorial(n) / (factorial(j) * factorial(2 * m - n))
                    coeffs[m] = c * g ** (2 * m - n) * (1.0 / R2) ** j
                row.append(coeffs)
            C.append(row)

        bump_cache: dict = {}

        def bump_part(g3):
            if g3 not in bump_cache:
                acc = np.zeros(len(d))
                for m1, c1 in C[0][g3[0]].items():
                    for m2, c2 in C[1][g3[1]].items():
                        c12 = c1 * c2
                        for m3, c3 in C[2][g3[2]].items():
                            acc += c12 * c3 * chi[m1 + m2 + m3]
                bump_cache[g3] = acc
            return bump_cache[g3]

        # 1D Gaussian derivative tables
        G = []
        for i in range(3):
            row = []
            if self.sigma is None:
                row.append(np.ones(len(d)))
                row.extend(np.zeros(len(d)) for _ in range(nmax))
            else:
                sg = self.sigma[i]
                xi = d[:, i] / sg
                e = np.exp(-0.5 * xi * xi)
                for n in range(nmax + 1):
                    He = np.polynomial.polynomial.polyval(xi, _hermite_coeffs(n))
                    row.append((-1.0 / sg) ** n * He * e)
            G.append(row)

        def mono_1d(i, a, n):
            # d^n/dz (d^a g_i)
            acc = np.zeros(len(d))
            for k in range(min(n, a) + 1):
                acc += comb(n, k) * (factorial(a) // factorial(a - k)) * d[:, i] ** (a - k) * G[i][n - k]
            return acc

        smooth_cache: dict = {}

        def smooth_part(b3):
            if b3 not in smooth_cache:
                acc = np.zeros(len(d))
                for a, c in self.poly:
                    acc += c * mono_1d(0, a[0], b3[0]) * mono_1d(1, a[1], b3[1]) * mono_1d(2, a[2], b3[2])
                smooth_cache[b3] = acc
            return smooth_cache[b3]

        for r, alpha in enumerate(orders):
            acc = np.zeros(len(d))
            for b3 in itertools.product(*(range(ai + 1) for ai in alpha)):
                coef = comb(alpha[0], b3[0]) * comb(alpha[1], b3[1]) * comb(alpha[2], b3[2])
                g3 = (alpha[0] - b3[0], alpha[1] - b3[1], alpha[2] - b3[2])
                acc += coef * smooth_part(b3) * bump_part(g3)
            out[r, live] = acc
        return out

    def __call__(self, z) -> np.ndarray:
        return self.derivatives(z, [(0, 0, 0)])[0]

    # -- quadrature ---------------------------------------------------------
    def quadrature_nodes(self, nodes: int = DEFAULT_MOMENT_NODES):
        """Tensor trapezoid nodes and weights on the support box."""
        t = np.linspace(-self.radius, self.radius, nodes)
        h = t[1] - t[0]
        c = np.asarray(self.center)
        a, b, e = np.meshgrid(t + c[0], t + c[1], t + c[2], indexing="ij")
        pts = np.stack([a.ravel(), b.ravel(), e.ravel()], axis=1)
        return pts, h ** 3

    def moments(self, max_order: int, nodes: int = DEFAULT_MOMENT_NODES) -> dict:
        """``{β: ∫ z^β u(z) dz}`` for all ``|β| <= max_order``."""
        cached = self._moment_cache.get(nodes)
        if cached is None or cached[0] < max_order:
            pts, w = self.quadrature_nodes(nodes)
            vals = self(pts) * w
            live = vals != 0.0
            pts, vals = pts[live], vals[live]
            pw = [[np.ones(len(pts))] for _ in range(3)]
            for i in range(3):
                for k in range(max_order):
                    pw[i].append(pw[i][-1] * pts[:, i])
            out = {}
            for beta in _multi_indices(max_order):
                out[beta] = float(np.sum(vals * pw[0][beta[0]] * pw[1][beta[1]] * pw[2][beta[2]]))
            cached = (max_order, out)
            self._moment_cache[nodes] = cached
        return cached[1]

    def derivative_moment(self, alpha, index, nodes: int = DEFAULT_MOMENT_NODES) -> float:
        """``∫ z^α ∂^I u(z) dz`` by integration by parts against plain moments."""
        alpha = tuple(alpha)
        index = tuple(index)
        if any(i > a for i, a in zip(index, alpha)):
            return 0.0
        beta = tuple(a - i for a, i in zip(alpha, index))
        M = self.moments(max(sum(alpha), 0), nodes)
        c = 1.0
        for a, i in zip(alpha, index):
            c *= factorial(a) // factorial(a - i)
        return (-1) ** sum(index) * c * M[beta]


@dataclass(frozen=True)
class ScatteringProfile:
    """Finite sum of separable bump terms ``a Σ_j w_j u_j(x) v_j(p)``.

    Attributes
    ----------
    terms : tuple of (weight, x_factor, p_factor)
    support_radius : float
        ``B``: every term lives in ``{|x| + |p| <= B}``.
    amplitude : float
        Overall non-negative scale.
    """

    terms: tuple
    support_radius: float = 1.0
    amplitude: float = 1.0
    family: str = "gaussian_bump"

    def __post_init__(self):
        if self.amplitude < 0:
            raise ValueError("amplitude must be non-negative")
        for w, u, v in self.terms:
            if u.extent + v.extent > self.support_radius * (1 + 1e-12):
                raise ValueError(
                    f"term support |x|<={u.extent:.4g}, |p|<={v.extent:.4g} exceeds B={self.support_radius}")

    @property
    def x_extent(self) -> float:
        return max((u.extent for _, u, _ in self.terms), default=0.0)

    @property
    def p_extent(self) -> float:
        return max((v.extent for _, _, v in self.terms), default=0.0)

    @property
    def is_zero(self) -> bool:
        return self.amplitude == 0.0 or not self.terms

    def weights(self) -> list[float]:
        return [self.amplitude * w for w, _, _ in self.terms]

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "support_radius": self.support_radius,
            "amplitude": self.amplitude,
            "terms": [{"weight": w, "x": u.to_dict(), "p": v.to_dict()} for w, u, v in self.terms],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScatteringProfile":
        terms = tuple((float(t["weight"]), BumpFactor.from_dict(t["x"]), BumpFactor.from_dict(t["p"]))
                      for t in d["terms"])
        return cls(terms, float(d.get("support_radius", 1.0)), float(d.get("amplitude", 1.0)),
                   d.get("family", "custom"))

    def __call__(self, x, p) -> np.ndarray:
        return eval_profile_derivative(self, (0, 0, 0), (0, 0, 0), x, p)


def gaussian_bump_profile(amplitude: float = 1.0, support_radius: float = 1.0,
                          x_center=(0.05, -0.03, 0.02), p_center=(0.04, 0.02, -0.05),
                          x_radius: float = 0.42, p_radius: float = 0.42,
                          x_sigma=(0.2, 0.25, 0.3), p_sigma=(0.25, 0.2, 0.3)) -> ScatteringProfile:
    """Single anisotropic Gaussian × bump term; the peak value is ``amplitude``
    at ``(x_center, p_center)``."""
    u = BumpFactor(tuple(x_center), x_radius, tuple(np.broadcast_to(x_sigma, 3)))
    v = BumpFactor(tuple(p_center), p_radius, tuple(np.broadcast_to(p_sigma, 3)))
    return ScatteringProfile(((1.0, u, v),), support_radius, amplitude, "gaussian_bump")


DEFAULT_AMPLITUDE = 100.0


def default_profile() -> ScatteringProfile:
    """The reference profile used by the CLI defaults and the acceptance runs.

    The amplitude makes ``log t |∇φ∞|`` comparable to the ``y``-extent of the
    support over ``t ∈ [50, 800]``, so the logarithmic terms of each layer are
    visible in rate fits; with a much weaker field the ``(log t)^0`` parts
    dominate and a fit with the log power frozen reads steeper than it is.
    """
    return gaussian_bump_profile(amplitude=DEFAULT_AMPLITUDE)


def polynomial_bump_profile(amplitude: float = 1.0, support_radius: float = 1.0,
                            x_poly=(((0, 0, 0), 1.0), ((2, 0, 0), 2.0)),
                            p_poly=(((0, 0, 0), 1.0), ((0, 2, 0), 3.0)),
                            x_center=(0.0, 0.0, 0.0), p_center=(0.0, 0.0, 0.0),
                            x_radius: float = 0.45, p_radius: float = 0.45) -> ScatteringProfile:
    """Non-negative polynomial × bump term."""
    u = BumpFactor(tuple(x_center), x_radius, None, x_poly)
    v = BumpFactor(tuple(p_center), p_radius, None, p_poly)
    prof = ScatteringProfile(((1.0, u, v),), support_radius, amplitude, "polynomial_bump")
    _require_nonnegative(prof)
    return prof


def sum_profiles(*profiles: ScatteringProfile) -> ScatteringProfile:
    B = max(p.support_radius for p in profiles)
    terms = tuple((p.amplitude * w, u, v) for p in profiles for (w, u, v) in p.terms)
    return ScatteringProfile(terms, B, 1.0, "sum")


def scaled(profile: ScatteringProfile, factor: float) -> ScatteringProfile:
    return ScatteringProfile(profile.terms, profile.support_radius,
                             profile.amplitude * factor, profile.family)


def _require_nonnegative(profile: ScatteringProfile, samples: int = 4096) -> None:
    rng = np.random.default_rng(0)
    B = profile.support_radius
    x = rng.uniform(-B / 2, B / 2, size=(samples, 3))
    p = rng.uniform(-B / 2, B / 2, size=(samples, 3))
    if np.any(profile(x, p) < 0):
        raise ValueError("profile takes negative values")


def _check_order(Ix, Ip):
    if sum(Ix) + sum(Ip) > MAX_DERIVATIVE_ORDER:
        raise OrderExceededError(
            f"mixed order {sum(Ix) + sum(Ip)} exceeds {MAX_DERIVATIVE_ORDER}")


def eval_profile_derivative(profile: ScatteringProfile, Ix, Ip, x, p):
    """Exact ``∂_x^{Ix} ∂_p^{Ip} f∞(x, p)``; scalar in, scalar out."""
    Ix = tuple(int(i) for i in Ix)
    Ip = tuple(int(i) for i in Ip)
    _check_order(Ix, Ip)
    scalar = np.ndim(x) == 1 and np.ndim(p) == 1
    x = np.atleast_2d(np.asarray(x, dtype=float))
    p = np.atleast_2d(np.asarray(p, dtype=float))
    x, p = np.broadcast_arrays(x, p)
    out = np.zeros(len(x))
    for a, (_, u, v) in zip(profile.weights(), profile.terms):
        if a == 0.0:
            continue
        out += a * u.derivatives(x, [Ix])[0] * v.derivatives(p, [Ip])[0]
    return float(out[0]) if scalar else out


# ---------------------------------------------------------------------------
# base fields


@dataclass
class BaseFields:
    """``ρ∞``, ``φ∞`` and its derivatives on a grid in the momentum variable.

    Derivatives of every order come from the interpolating spline
    ``phi_spline`` of the grid potential.
    """

    grid: Grid3
    rho_inf: Field3
    phi_inf: Field3
    grad_phi_inf: Field3Vec
    phi_spline: TensorSpline
    mass: float

    def derivative_field(self, order) -> Field3:
        """``∂^order φ∞`` sampled at the grid nodes from the spline."""
        vals = self.phi_spline.derivatives(self.grid.points(), [tuple(order)])[0]
        return Field3(self.grid, vals.reshape((self.grid.n,) * 3))

    def hessian(self) -> list[list[Field3]]:
        H = [[None] * 3 for _ in range(3)]
        for i in range(3):
            for j in range(i, 3):
                o = [0, 0, 0]
                o[i] += 1
                o[j] += 1
                H[i][j] = H[j][i] = self.derivative_field(o)
        return H

    def derivative_tensors(self, max_order: int) -> dict:
        """``{α: ∂^α φ∞}`` on the grid for ``1 <= |α| <= max_order``."""
        return {a: self.derivative_field(a) for a in _multi_indices(max_order) if sum(a) >= 1}


def rho_inf_values(profile: ScatteringProfile, p) -> np.ndarray:
    """``ρ∞(p) = -∫ f∞(x, p) dx`` from the exact x-masses of the factors."""
    p = np.atleast_2d(np.asarray(p, dtype=float))
    out = np.zeros(len(p))
    for a, (_, u, v) in zip(profile.weights(), profile.terms):
        if a:
            out -= a * u.moments(0)[(0, 0, 0)] * v(p)
    return out


def total_mass(profile: ScatteringProfile) -> float:
    """``∬ f∞ dx dp``."""
    return float(sum(a * u.moments(0)[(0, 0, 0)] * v.moments(0)[(0, 0, 0)]
                     for a, (_, u, v) in zip(profile.weights(), profile.terms)))


def default_base_grid(profile: ScatteringProfile, n: int = 64) -> Grid3:
    """Grid whose box holds the momentum support plus a thin collar.

    The collar leaves room for the points ``x / t`` near the support edge
    and for the zero shells the Poisson solver requires.
    """
    return Grid3.centered(n, max(profile.p_extent, 1e-3) * 1.12 + 0.02, margin_cells=3)


def build_base_fields(profile: ScatteringProfile, grid: Grid3, degree: int = 7) -> BaseFields:
    """Sample ``ρ∞``, solve for ``φ∞`` and fit the potential spline."""
    grid.require_ball(profile.p_extent)
    rho = Field3(grid, rho_inf_values(profile, grid.points()).reshape((grid.n,) * 3))
    phi, grad = solve_free_space(rho)
    spline = TensorSpline.fit(phi, degree)
    return BaseFields(grid, rho, phi, grad, spline, total_mass(profile))


# ---------------------------------------------------------------------------
# data norm


def _factor_inner_products(factors, index, nodes) -> np.ndarray:
    """Gram matrix ``<∂^I g_j, ∂^I g_k>`` by tensor trapezoid quadrature."""
    lo = np.min([np.asarray(f.center) - f.radius for f in factors], axis=0)
    hi = np.max([np.asarray(f.center) + f.radius for f in factors], axis=0)
    axes = [np.linspace(lo[i], hi[i], nodes) for i in range(3)]
    w = np.prod([a[1] - a[0] for a in axes])
    m = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([c.ravel() for c in m], axis=1)
    vals = np.stack([f.derivatives(pts, [index])[0] for f in factors])
    return w * vals @ vals.T


def compute_data_norm(profile: ScatteringProfile, n: int, seq=None,
                      nodes: int = 65) -> float:
    """``Σ_{|I|+|J|<=n} (‖∂_x^I ∂_p^J f∞‖ + ‖∂_x^I ∂_p^J f∞‖^{seq(n)})`` in L²(dx dp).

    ``seq`` defaults to ``n -> n + 1``.
    """
    if n < 0:
        raise ValueError("n must be non-negative")
    if n > MAX_DERIVATIVE_ORDER - 4:
        raise OrderExceededError(f"n={n} exceeds the derivative budget")
    if profile.is_zero:
        return 0.0
    seq = seq or (lambda k: k + 1)
    power = seq(n)
    a = np.asarray(profile.weights())
    us = [u for _, u, _ in profile.terms]
    vs = [v for _, _, v in profile.terms]
    gx = {I: _factor_inner_products(us, I, nodes) for I in _multi_indices(n)}
    gp = {J: _factor_inner_products(vs, J, nodes) for J in _multi_indices(n)}
    total = 0.0
    for I, Gx in gx.items():
        for J, Gp in gp.items():
            if sum(I) + sum(J) > n:
                continue
            sq = float(a @ (Gx * Gp) @ a)
            nrm = np.sqrt(max(sq, 0.0))
            total += nrm + nrm ** power
    return total
