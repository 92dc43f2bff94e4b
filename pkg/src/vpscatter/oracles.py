"""Closed-form low-order coefficients, transcribed by hand.

These evaluate the first coefficients of the expansion directly from the
profile and the potential splines, without the symbolic engine, so that
:func:`closed_form_checks` compares two independent routes.

Notation: ``H = ∇²φ∞(p)``, ``J̊1 = ΔΦ∞``, ``J̊2 = Σ_{i<j} (H_ij² - H_ii H_jj)``.
"""

from __future__ import annotations

import numpy as np

from .approx import _FIRST, _SECOND, _hessian_from
from .expansion import CoefficientTable
from .profile import eval_profile_derivative

_THIRD_LAPLACIAN = [((3, 0, 0), (1, 2, 0), (1, 0, 2)),
                    ((2, 1, 0), (0, 3, 0), (0, 1, 2)),
                    ((2, 0, 1), (0, 2, 1), (0, 0, 3))]


def _grad_f_inf(profile, y, p, slot: int):
    out = np.empty((len(y), 3))
    for i, e in enumerate(_FIRST):
        Ix, Ip = (e, (0, 0, 0)) if slot == 0 else ((0, 0, 0), e)
        out[:, i] = eval_profile_derivative(profile, Ix, Ip, y, p)
    return out


class ClosedForms:
    def __init__(self, table: CoefficientTable):
        self.table = table
        self.prof = table.profile
        self.phi = table.splines[(0, 0)]

    def hess(self, p):
        return _hessian_from(self.phi.derivatives(p, _SECOND))

    def grad_inf(self, p):
        return self.phi.gradient(p).T

    def grad_phi(self, kl, p):
        return self.table.splines[kl].gradient(p).T

    def grad_J1(self, p):
        out = np.empty((len(p), 3))
        for i, orders in enumerate(_THIRD_LAPLACIAN):
            out[:, i] = self.phi.derivatives(p, list(orders)).sum(axis=0)
        return out

    def J1(self, p):
        return np.trace(self.hess(p), axis1=1, axis2=2)

    def J2(self, p):
        H = self.hess(p)
        acc = np.zeros(len(p))
        for i in range(3):
            for j in range(i + 1, 3):
                acc += H[:, i, j] ** 2 - H[:, i, i] * H[:, j, j]
        return acc

    # coefficients --------------------------------------------------------
    def f11(self, y, p):
        H = self.hess(p)
        g = self.grad_inf(p)
        vec = 2.0 * np.einsum("nij,nj->ni", H, g) - self.grad_phi((1, 1), p)
        return np.sum(vec * _grad_f_inf(self.prof, y, p, 0), axis=1)

    def f10(self, y, p):
        H = self.hess(p)
        dx = _grad_f_inf(self.prof, y, p, 0)
        dp = _grad_f_inf(self.prof, y, p, 1)
        vec = self.grad_phi((1, 0), p) + np.einsum("nij,nj->ni", H, y)
        return self.f11(y, p) - np.sum(vec * dx, axis=1) + np.sum(self.grad_inf(p) * dp, axis=1)

    def psi(self, k, l, y, p):
        if (k, l) == (0, 0):
            return self.grad_inf(p)
        H = self.hess(p)
        if (k, l) == (1, 1):
            return self.grad_phi((1, 1), p) - np.einsum("nij,nj->ni", H, self.grad_inf(p))
        if (k, l) == (1, 0):
            return self.grad_phi((1, 0), p) + np.einsum("nij,nj->ni", H, y)
        raise KeyError((k, l))

    def _y_integrals(self, w):
        """``∫f∞ dy``, ``∫∇_p f∞ dy`` and ``∫ y·∇_p f∞ dy`` at ``w``."""
        m0 = np.zeros(len(w))
        mp = np.zeros((len(w), 3))
        my = np.zeros(len(w))
        for a, (_, u, v) in zip(self.prof.weights(), self.prof.terms):
            mom = u.moments(1)
            vals = v.derivatives(w, [(0, 0, 0)] + list(_FIRST))
            m0 += a * mom[(0, 0, 0)] * vals[0]
            for i, e in enumerate(_FIRST):
                mp[:, i] += a * mom[(0, 0, 0)] * vals[1 + i]
                my += a * mom[e] * vals[1 + i]
        return m0, mp, my

    def rho11(self, w):
        m0, mp, _ = self._y_integrals(w)
        val = -self.J1(w) * m0 - np.sum(self.grad_inf(w) * mp, axis=1)
        return self.table.sigma * val

    def rho10(self, w):
        m0, mp, my = self._y_integrals(w)
        val = -self.J1(w) * m0 - np.sum(self.grad_inf(w) * mp, axis=1) + my
        return self.table.sigma * val

    def p_coeff(self, k, l, y, w):
        zero = np.zeros_like(y)
        H = self.hess(w)
        table = {
            (1, 0): lambda: -y,
            (1, 1): lambda: self.grad_inf(w),
            (2, 0): lambda: zero,
            (2, 1): lambda: -np.einsum("nij,nj->ni", H, y),
            (2, 2): lambda: np.einsum("nij,nj->ni", H, self.grad_inf(w)),
        }
        return table[(k, l)]()

    def J_coeff(self, k, l, y, w):
        n = len(w)
        if (k, l) == (0, 0):
            return -np.ones(n)
        if (k, l) in ((1, 0), (2, 0)):
            return np.zeros(n)
        if (k, l) == (1, 1):
            return -self.J1(w)
        if (k, l) == (2, 1):
            return np.sum(y * self.grad_J1(w), axis=1)
        if (k, l) == (2, 2):
            return -self.J2(w) - self.J1(w) ** 2 - np.sum(self.grad_inf(w) * self.grad_J1(w), axis=1)
        raise KeyError((k, l))


def random_support_points(table: CoefficientTable, n: int, seed: int = 0):
    """``(y, p)`` uniformly in the first profile term's support balls."""
    rng = np.random.default_rng(seed)
    _, u, v = table.profile.terms[0]

    def ball(c, r):
        d = rng.normal(size=(n, 3))
        d /= np.linalg.norm(d, axis=1)[:, None]
        return np.asarray(c) + d * (r * rng.uniform(size=(n, 1)) ** (1 / 3))

    return ball(u.center, 0.98 * u.radius), ball(v.center, 0.98 * v.radius)


def _rel(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    scale = float(np.max(np.abs(b)))
    diff = float(np.max(np.abs(a - b)))
    return diff if scale == 0.0 else diff / scale


def closed_form_checks(table: CoefficientTable, n: int = 1000, seed: int = 0) -> dict:
    """Relative max errors between engine and closed forms at ``n`` points."""
    if table.K < 1 or table.profile.is_zero:
        return {}
    cf = ClosedForms(table)
    ctx = table.context
    y, p = random_support_points(table, n, seed)
    out = {}
    ev = lambda exprs, a, b: ctx.evaluate_exprs(exprs, a, b)  # noqa: E731
    out["f[1,1]"] = _rel(ev([table.f[(1, 1)]], y, p)[0], cf.f11(y, p))
    out["f[1,0]"] = _rel(ev([table.f[(1, 0)]], y, p)[0], cf.f10(y, p))
    out["rho[1,1]"] = _rel(table.sigma * ctx.evaluate_moments([table.rho_expr[(1, 1)]], p)[0], cf.rho11(p))
    out["rho[1,0]"] = _rel(table.sigma * ctx.evaluate_moments([table.rho_expr[(1, 0)]], p)[0], cf.rho10(p))
    for kl in ((0, 0), (1, 1), (1, 0)):
        out[f"Psi[{kl[0]},{kl[1]}]"] = _rel(ev(table.psi[kl], y, p).T, cf.psi(*kl, y, p))
    from .expansion import build_jacobian_series, build_p_series
    pser = table.pseries if table.K >= 2 else build_p_series(2)
    jser = table.jseries if table.K >= 2 else build_jacobian_series(2, pser)
    for kl in ((1, 0), (1, 1), (2, 0), (2, 1), (2, 2)):
        got = ev(pser[kl], y, p).T if kl in pser else np.zeros_like(y)
        out[f"p[{kl[0]},{kl[1]}]"] = _rel(got, cf.p_coeff(*kl, y, p))
    for kl in ((0, 0), (1, 0), (1, 1), (2, 0), (2, 1), (2, 2)):
        got = ev([jser[kl]], y, p)[0] if kl in jser else np.zeros(n)
        out[f"J[{kl[0]},{kl[1]}]"] = _rel(got, cf.J_coeff(*kl, y, p))
    return out


def rho11_grid_gap(table: CoefficientTable) -> float:
    """Max-abs of the stored ``ρ_{1,1}`` grid against the closed form at the
    grid nodes, relative to the closed form's max-abs."""
    g = table.grid
    pts = g.points()
    live = np.linalg.norm(pts, axis=1) <= table.profile.p_extent + 1e-12
    ref = np.zeros(len(pts))
    ref[live] = ClosedForms(table).rho11(pts[live])
    return _rel(table.rho[(1, 1)].values.ravel(), ref)
