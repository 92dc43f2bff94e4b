"""Time-dependent evaluation of the order-``K`` approximate solution.

    f_[K](t, x, p) = Σ (log t)^l t^{-k} f_{k,l}(y, p),   y = x - tp + log t ∇φ∞(p)
    ρ_[K](t, x)    = t^{-3} Σ (log t)^l t^{-k} ρ_{k,l}(x/t)
    φ_[K](t, x)    = t^{-1} Σ (log t)^l t^{-k} φ_{k,l}(x/t)

Every derivative of ``f_[K]`` is an exact chain rule through ``y``: the
coefficient derivatives are symbolic, so residuals of size ``t^{-K-2}`` are
not polluted by finite-difference noise.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .expansion import CoefficientTable, EvalContext
from .fields import OutOfBoxError, TensorSpline
from .phaseexpr import CompiledExprs, PhaseExpr

_FIRST = ((1, 0, 0), (0, 1, 0), (0, 0, 1))
_SECOND = ((2, 0, 0), (1, 1, 0), (1, 0, 1), (0, 2, 0), (0, 1, 1), (0, 0, 2))
_SECOND_IDX = {(0, 0): 0, (0, 1): 1, (0, 2): 2, (1, 1): 3, (1, 2): 4, (2, 2): 5}


class NoConvergenceError(RuntimeError):
    pass


def _pts(a) -> np.ndarray:
    return np.atleast_2d(np.asarray(a, dtype=float))


def _hessian_from(vals: np.ndarray) -> np.ndarray:
    """``(npts, 3, 3)`` Hessians from the six second-derivative rows."""
    H = np.empty((vals.shape[1], 3, 3))
    for i in range(3):
        for j in range(3):
            H[:, i, j] = vals[_SECOND_IDX[(min(i, j), max(i, j))]]
    return H


def layer_weights(t: float, K: int):
    """``a_{k,l} = (log t)^l t^{-k}`` and ``da/dt`` for ``l <= k <= K``."""
    s = np.log(t)
    a, da = {}, {}
    for k in range(K + 1):
        for l in range(k + 1):
            a[(k, l)] = s ** l * t ** (-k)
            dl = l * s ** (l - 1) if l else 0.0
            da[(k, l)] = (dl - k * s ** l) * t ** (-k - 1)
    return a, da


def y_map(t: float, x, p, phi_inf: TensorSpline) -> np.ndarray:
    """``y = x - tp + log t ∇φ∞(p)``."""
    x, p = _pts(x), _pts(p)
    return x - t * p + np.log(t) * phi_inf.gradient(p).T


def invert_y(t: float, x, y, phi_inf: TensorSpline, seed=None, tol: float = 1e-12,
             max_iter: int = 50) -> np.ndarray:
    """Solve ``x - tp + log t ∇φ∞(p) = y`` for ``p`` by Newton's method.

    ``seed`` defaults to ``(x - y)/t``; :meth:`ApproxSolution.invert_y` seeds
    with the truncated expansion instead.
    """
    x, y = np.broadcast_arrays(_pts(x), _pts(y))
    s = np.log(t)
    p = (x - y) / t if seed is None else np.array(_pts(seed), dtype=float)
    I = np.eye(3)
    for _ in range(max_iter):
        d = phi_inf.derivatives(p, _FIRST + _SECOND)
        G = x - t * p + s * d[:3].T - y
        DG = -t * I + s * _hessian_from(d[3:])
        step = np.linalg.solve(DG, G[..., None])[..., 0]
        p = p - step
        if np.max(np.abs(G), initial=0.0) <= tol * max(1.0, t) and np.max(np.abs(step), initial=0.0) <= tol:
            return p
    G = x - t * p + s * phi_inf.gradient(p).T - y
    if np.max(np.abs(G), initial=0.0) <= tol * max(1.0, t):
        return p
    raise NoConvergenceError("Newton inversion of y did not converge")


def dy_dp_det(t: float, p, phi_inf: TensorSpline) -> np.ndarray:
    """``det ∂y/∂p = det(-t I + log t ∇²φ∞(p))``."""
    H = _hessian_from(phi_inf.derivatives(_pts(p), _SECOND))
    return np.linalg.det(-t * np.eye(3) + np.log(t) * H)


@dataclass
class ApproxSolution:
    """Evaluators for ``f_[K]``, ``ρ_[K]``, ``φ_[K]`` built on a table."""

    table: CoefficientTable
    K: int | None = None

    def __post_init__(self):
        if self.K is None:
            self.K = self.table.K
        if not 0 <= self.K <= self.table.K:
            raise ValueError("K exceeds the table order")
        self.keys = [(k, l) for k in range(self.K + 1) for l in range(k + 1)]
        self.ctx: EvalContext = self.table.context
        self.phi_inf: TensorSpline = self.table.splines[(0, 0)]
        self._fc = CompiledExprs([self.table.f[kl] for kl in self.keys])
        self._dc = None
        self._psi_c = None
        prof = self.table.profile
        self.x_extent = prof.x_extent
        self.p_extent = prof.p_extent
        g = self.table.grid
        self._masses = {kl: float(np.sum(g.trapezoid_weights() * self.table.rho[kl].values))
                        for kl in self.keys}

    # -- support helpers ----------------------------------------------------
    def _live(self, y, p) -> np.ndarray:
        return ((np.linalg.norm(p, axis=1) <= self.p_extent)
                & (np.linalg.norm(y, axis=1) <= self.x_extent))

    def y_map(self, t, x, p):
        return y_map(t, x, p, self.phi_inf)

    def invert_y(self, t, x, y, order: int = 2):
        """Newton inversion seeded by ``x/t + Σ_{k<=order} p_{k,l}(y, x/t)``."""
        x, y = np.broadcast_arrays(_pts(x), _pts(y))
        seed = self.p_seed(t, x, y, order)
        return invert_y(t, x, y, self.phi_inf, seed=seed)

    def p_seed(self, t, x, y, order: int = 2):
        x, y = np.broadcast_arrays(_pts(x), _pts(y))
        w = x / t
        order = min(order, self.table.K) if self.table.pseries else 0
        p = w.copy()
        keys = [kl for kl in sorted(self.table.pseries) if kl[0] <= order]
        if not keys:
            return (x - y) / t
        exprs = [self.table.pseries[kl][i] for kl in keys for i in range(3)]
        vals = self.ctx.evaluate_exprs(exprs, y, w)
        s = np.log(t)
        for j, (k, l) in enumerate(keys):
            p += (s ** l * t ** (-k)) * vals[3 * j:3 * j + 3].T
        return p

    # -- evaluators ---------------------------------------------------------
    def eval_fK(self, t, x, p) -> np.ndarray:
        x, p = np.broadcast_arrays(_pts(x), _pts(p))
        out = np.zeros(len(p))
        inbox = np.linalg.norm(p, axis=1) <= self.p_extent
        if not np.any(inbox) or self.table.profile.is_zero:
            return out
        y = np.zeros_like(p)
        y[inbox] = self.y_map(t, x[inbox], p[inbox])
        live = self._live(y, p)
        if np.any(live):
            out[live] = self.eval_f_yp(t, y[live], p[live])
        return out

    def eval_f_yp(self, t, y, p) -> np.ndarray:
        """``f_[K]`` in ``(y, p)`` coordinates."""
        a, _ = layer_weights(t, self.K)
        vals = self.ctx.evaluate(self._fc, y, p)
        return sum(a[kl] * vals[i] for i, kl in enumerate(self.keys))

    def layer(self, t, x, p, k: int) -> np.ndarray:
        """The ``k``-th layer ``Σ_l (log t)^l t^{-k} f_{k,l}(y, p)``."""
        x, p = np.broadcast_arrays(_pts(x), _pts(p))
        y = self.y_map(t, x, p)
        keys = [(k, l) for l in range(k + 1)]
        vals = self.ctx.evaluate_exprs([self.table.f[kl] for kl in keys], y, p)
        a, _ = layer_weights(t, k)
        return sum(a[kl] * vals[i] for i, kl in enumerate(keys))

    def eval_rhoK(self, t, x) -> np.ndarray:
        x = _pts(x)
        w = x / t
        out = np.zeros(len(w))
        live = np.linalg.norm(w, axis=1) <= self.p_extent
        if not np.any(live) or self.table.profile.is_zero:
            return out
        a, _ = layer_weights(t, self.K)
        vals = self.ctx.evaluate_moments([self.table.rho_expr[kl] for kl in self.keys], w[live])
        out[live] = self.table.sigma * t ** -3 * sum(a[kl] * vals[i] for i, kl in enumerate(self.keys))
        return out

    def _phi_parts(self, t, x, orders, far_field: bool):
        x = _pts(x)
        w = x / t
        a, _ = layer_weights(t, self.K)
        spl = self.table.phi_splines_combined({kl: a[kl] for kl in self.keys})
        inside = self.table.grid.contains(w)
        if not np.all(inside) and not far_field:
            raise OutOfBoxError("x/t outside the coefficient grid")
        vals = np.zeros((len(orders), len(w)))
        if np.any(inside):
            vals[:, inside] = spl.derivatives(w[inside], orders)
        return w, inside, vals, a

    def eval_phiK(self, t, x, far_field: bool = False) -> np.ndarray:
        w, inside, vals, a = self._phi_parts(t, x, [(0, 0, 0)], far_field)
        out = vals[0]
        if not np.all(inside):
            m = sum(a[kl] * self._masses[kl] for kl in self.keys)
            r = np.linalg.norm(w[~inside], axis=1)
            out[~inside] = -m / (4.0 * np.pi * r)
        return out / t

    def eval_grad_phiK(self, t, x, far_field: bool = False) -> np.ndarray:
        """``∇φ_[K](t, x)``, shape ``(npts, 3)``.  Outside the grid the
        monopole of each ``ρ_{k,l}`` is used when ``far_field`` is set."""
        w, inside, vals, a = self._phi_parts(t, x, _FIRST, far_field)
        out = vals.T.copy()
        if not np.all(inside):
            m = sum(a[kl] * self._masses[kl] for kl in self.keys)
            wo = w[~inside]
            r = np.linalg.norm(wo, axis=1)
            out[~inside] = m * wo / (4.0 * np.pi * r[:, None] ** 3)
        return out / t ** 2

    def eval_hess_phiK(self, t, x) -> np.ndarray:
        w, _, vals, _ = self._phi_parts(t, x, _SECOND, False)
        return _hessian_from(vals) / t ** 3

    def psi_sum(self, t, y, p) -> np.ndarray:
        """``t^{-2} Σ (log t)^l t^{-k} Ψ_{k,l}(y, p)``."""
        if self._psi_c is None:
            self._psi_c = CompiledExprs([self.table.psi[kl][i] for kl in self.keys for i in range(3)])
        vals = self.ctx.evaluate(self._psi_c, y, p)
        a, _ = layer_weights(t, self.K)
        out = np.zeros((len(_pts(y)), 3))
        for j, kl in enumerate(self.keys):
            out += a[kl] * vals[3 * j:3 * j + 3].T
        return out / t ** 2

    # -- residuals ----------------------------------------------------------
    def _derivs(self, y, p):
        """``f_{k,l}``, ``∂_y f_{k,l}`` and ``∂_p f_{k,l}`` at ``(y, p)``."""
        if self._dc is None:
            ex = []
            for kl in self.keys:
                f = self.table.f[kl]
                ex.append(f)
                ex.extend(f.dy(i) for i in range(3))
                ex.extend(f.dp(i) for i in range(3))
            self._dc = CompiledExprs(ex)
        v = self.ctx.evaluate(self._dc, y, p)
        n = len(self.keys)
        v = v.reshape(n, 7, -1)
        return v[:, 0], v[:, 1:4], v[:, 4:7]

    def vlasov_residual(self, t, x, p, field=None) -> np.ndarray:
        """``∂_t f_[K] + p·∇_x f_[K] + ∇φ·∇_p f_[K]`` with ``∇φ = ∇φ_[K]``
        unless a field ``(npts, 3)`` is given."""
        x, p = np.broadcast_arrays(_pts(x), _pts(p))
        y = self.y_map(t, x, p)
        return self.vlasov_residual_yp(t, y, p, x=x, field=field)

    def vlasov_residual_yp(self, t, y, p, x=None, field=None) -> np.ndarray:
        y, p = np.broadcast_arrays(_pts(y), _pts(p))
        s = np.log(t)
        d = self.phi_inf.derivatives(p, _FIRST + _SECOND)
        g0 = d[:3].T
        H = _hessian_from(d[3:])
        if x is None:
            x = y + t * p - s * g0
        E = self.eval_grad_phiK(t, x) if field is None else np.asarray(field)
        a, da = layer_weights(t, self.K)
        f, fy, fp = self._derivs(y, p)
        Xy = g0 / t - t * E + s * np.einsum("nij,nj->ni", H, E)
        out = np.zeros(len(y))
        for i, kl in enumerate(self.keys):
            out += da[kl] * f[i]
            out += a[kl] * (np.einsum("in,ni->n", fy[i], Xy) + np.einsum("in,ni->n", fp[i], E))
        return out

    def vlasov_residual_k0_closed(self, t, x, p) -> np.ndarray:
        """The three-term ``K = 0`` residual written out directly."""
        x, p = np.broadcast_arrays(_pts(x), _pts(p))
        s = np.log(t)
        w = x / t
        gp = self.phi_inf.derivatives(p, _FIRST + _SECOND)
        gw = self.phi_inf.gradient(w).T
        H = _hessian_from(gp[3:])
        y = x - t * p + s * gp[:3].T
        prof = self.table.profile
        fx = np.stack([self._profile_derivative(prof, e, (0, 0, 0), y, p) for e in _FIRST], axis=1)
        fp = np.stack([self._profile_derivative(prof, (0, 0, 0), e, y, p) for e in _FIRST], axis=1)
        term1 = np.sum((gp[:3].T - gw) * fx, axis=1) / t
        term2 = s / t ** 2 * np.einsum("nj,nij,ni->n", gw, H, fx)
        term3 = np.sum(gw * fp, axis=1) / t ** 2
        return term1 + term2 + term3

    @staticmethod
    def _profile_derivative(prof, Ix, Ip, y, p):
        out = np.zeros(len(y))
        for a, (_, uf, vf) in zip(prof.weights(), prof.terms):
            out += a * uf.derivatives(y, [Ix])[0] * vf.derivatives(p, [Ip])[0]
        return out

    def y_nodes(self, nodes: int):
        """Trapezoid nodes on the box covering every spatial profile factor."""
        fac = [uf for (_, uf, _) in self.table.profile.terms]
        lo = np.min([np.asarray(u.center) - u.radius for u in fac], axis=0)
        hi = np.max([np.asarray(u.center) + u.radius for u in fac], axis=0)
        axes = [np.linspace(lo[i], hi[i], nodes) for i in range(3)]
        vol = np.prod([ax[1] - ax[0] for ax in axes])
        a, b, c = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([a.ravel(), b.ravel(), c.ravel()], axis=1)
        keep = np.zeros(len(pts), dtype=bool)
        for u in fac:
            keep |= np.linalg.norm(pts - np.asarray(u.center), axis=1) < u.radius
        return pts[keep], vol

    def density_mismatch(self, t, x, nodes: int = 48, method: str = "difference") -> np.ndarray:
        """``-σ ∫ f_[K](t, x, p) dp - ρ_[K](t, x)``.

        The ``p``-integral is taken in ``y``-coordinates with the exact Newton
        inverse ``p(t, x, y)`` and Jacobian.  ``method="difference"`` integrates
        ``t³|det ∂p/∂y| f_[K] + Σ a_{k,l} R_{k,l}`` on one node set, where
        ``∫ R_{k,l} dy = σ ρ_{k,l}``, so the quadrature errors of the two
        integrals cancel; ``method="direct"`` subtracts the moment-evaluated
        ``ρ_[K]`` from the quadrature of ``∫ f_[K] dp``.
        """
        x = _pts(x)
        out = np.zeros(len(x))
        if self.table.profile.is_zero:
            return out
        ys, vol = self.y_nodes(nodes)
        a, _ = layer_weights(t, self.K)
        sig = self.table.sigma
        rc = CompiledExprs([self.table.rho_integrand[kl] for kl in self.keys]) if method == "difference" else None
        for n, xi in enumerate(x):
            xs = np.broadcast_to(xi, ys.shape)
            w = xi / t
            p = self.invert_y(t, xs, ys)
            live = np.linalg.norm(p, axis=1) <= self.p_extent
            jac = np.zeros(len(ys))
            jac[live] = t ** 3 / np.abs(dy_dp_det(t, p[live], self.phi_inf))
            fv = np.zeros(len(ys))
            if np.any(live):
                fv[live] = self.eval_f_yp(t, ys[live], p[live])
            integ = jac * fv
            if method == "difference":
                wn = np.linalg.norm(w) <= self.p_extent
                if wn:
                    R = self.ctx.evaluate(rc, ys, np.broadcast_to(w, ys.shape))
                    integ = integ + sum(a[kl] * R[i] for i, kl in enumerate(self.keys))
                out[n] = -sig * t ** -3 * np.sum(integ) * vol
            elif method == "direct":
                out[n] = -sig * t ** -3 * np.sum(integ) * vol - self.eval_rhoK(t, xi[None])[0]
            else:
                raise ValueError(f"unknown method {method!r}")
        return out

    # -- vector fields ------------------------------------------------------
    def apply_L(self, i: int, g, t, x, p) -> np.ndarray:
        """``L_i g = t ∂_{x^i} g + ∂_{p^i} g + (log t/t) ∂_i∂_jφ∞(p) ∂_{p^j} g``."""
        x, p = np.broadcast_arrays(_pts(x), _pts(p))
        _, gx, gp = g.grad(t, x, p)
        H = _hessian_from(self.phi_inf.derivatives(p, _SECOND))
        return t * gx[:, i] + gp[:, i] + np.log(t) / t * np.einsum("nj,nj->n", H[:, i, :], gp)

    def commutator_check(self, t, x, p, g=None, seed: int = 0) -> dict:
        """Both sides of the commutators of the Vlasov operator with ``L_i`` and
        ``t^{-1}∂_{p^i}``, using ``φ = φ_[K]``; returns the relative defects."""
        x, p = np.broadcast_arrays(_pts(x), _pts(p))
        if g is None:
            g = GaussianTestFunction.random(seed, t=t, x_center=x.mean(axis=0),
                                            p_center=p.mean(axis=0))
        lhs_L, rhs_L, lhs_P, rhs_P = _commutators(self, g, t, x, p)
        scale_L = max(np.max(np.abs(rhs_L)), 1e-300)
        scale_P = max(np.max(np.abs(rhs_P)), 1e-300)
        return {
            "L_defect": float(np.max(np.abs(lhs_L - rhs_L)) / scale_L),
            "dp_defect": float(np.max(np.abs(lhs_P - rhs_P)) / scale_P),
            "lhs_L": lhs_L, "rhs_L": rhs_L, "lhs_dp": lhs_P, "rhs_dp": rhs_P,
        }


class GaussianTestFunction:
    """``g = exp(-½ zᵀ A z)`` with ``z = D((t, x, p) - c)``, ``D`` diagonal;
    exact gradient and Hessian."""

    def __init__(self, A, c, scale):
        self.A = np.asarray(A, dtype=float)
        self.c = np.asarray(c, dtype=float)
        self.sc = np.asarray(scale, dtype=float)

    @classmethod
    def random(cls, seed: int = 0, t: float = 100.0, x_center=(0.0, 0.0, 0.0),
               x_scale: float | None = None, p_center=(0.0, 0.0, 0.0)):
        """Random anisotropic Gaussian of unit width around ``(t, x_center, p_center)``
        in the scaled variables ``(t/t, x/x_scale, p)``."""
        rng = np.random.default_rng(seed)
        B = rng.normal(size=(7, 7)) * 0.5
        A = B @ B.T + 0.5 * np.eye(7)
        c = np.concatenate([[t], x_center, p_center])
        lam = t if x_scale is None else x_scale
        c = c + np.concatenate([[0.1 * t], 0.2 * lam * rng.normal(size=3), 0.2 * rng.normal(size=3)])
        sc = np.array([1.0 / t] + [1.0 / lam] * 3 + [1.0] * 3)
        return cls(A, c, sc)

    def _d(self, t, x, p):
        z = np.empty((len(x), 7))
        z[:, 0] = t
        z[:, 1:4] = x
        z[:, 4:7] = p
        return (z - self.c) * self.sc

    def value(self, t, x, p):
        d = self._d(t, x, p)
        return np.exp(-0.5 * np.einsum("ni,ij,nj->n", d, self.A, d))

    def grad(self, t, x, p):
        d = self._d(t, x, p)
        g = self.value(t, x, p)
        G = -(d @ self.A) * g[:, None] * self.sc
        return G[:, 0], G[:, 1:4], G[:, 4:7]

    def hessian(self, t, x, p):
        """``(npts, 7, 7)`` Hessian in ``(t, x, p)``."""
        d = self._d(t, x, p)
        g = self.value(t, x, p)
        Ad = d @ self.A
        Hs = (Ad[:, :, None] * Ad[:, None, :] - self.A[None]) * g[:, None, None]
        return Hs * self.sc[None, :, None] * self.sc[None, None, :]


def _commutators(sol: ApproxSolution, g, t, x, p):
    """Left sides by composing first-order operators (``V(Wg) - W(Vg)`` with
    coefficient Jacobians), right sides from the closed commutator forms."""
    n = len(x)
    s = np.log(t)
    gt, gx, gp = g.grad(t, x, p)
    G = np.concatenate([gt[:, None], gx, gp], axis=1)        # (n, 7)
    HG = g.hessian(t, x, p)                                   # (n, 7, 7)
    dphi = sol.phi_inf.derivatives(p, _FIRST + _SECOND)
    Hinf = _hessian_from(dphi[3:])
    third = {}
    for i in range(3):
        for j in range(3):
            for k in range(3):
                o = [0, 0, 0]
                o[i] += 1
                o[j] += 1
                o[k] += 1
                third[(i, j, k)] = tuple(o)
    keys3 = sorted(set(third.values()))
    d3 = dict(zip(keys3, sol.phi_inf.derivatives(p, keys3)))
    T3 = np.empty((n, 3, 3, 3))
    for (i, j, k), o in third.items():
        T3[:, i, j, k] = d3[o]
    E = sol.eval_grad_phiK(t, x)               # ∂_k φ(t, x)
    DE = sol.eval_hess_phiK(t, x)              # ∂_i ∂_k φ(t, x)

    # Vlasov operator X = ∂_t + p·∂_x + E·∂_p : coefficients and their Jacobians
    Xc = np.zeros((n, 7))
    Xc[:, 0] = 1.0
    Xc[:, 1:4] = p
    Xc[:, 4:7] = E
    DX = np.zeros((n, 7, 7))                   # DX[:, b, a] = ∂_a X^b
    for j in range(3):
        DX[:, 1 + j, 4 + j] = 1.0
    DX[:, 4:7, 1:4] = DE
    # ∂_t E is never needed: W below has no t component

    def compose(Vc, DV, Wc, DW):
        first = np.einsum("na,nba,nb->n", Vc, DW, G) - np.einsum("na,nba,nb->n", Wc, DV, G)
        second = np.einsum("na,nab,nb->n", Vc, HG, Wc) - np.einsum("na,nab,nb->n", Wc, HG, Vc)
        return first + second

    lhs_L = np.empty((n, 3))
    rhs_L = np.empty((n, 3))
    lhs_P = np.empty((n, 3))
    rhs_P = np.empty((n, 3))
    for i in range(3):
        Lc = np.zeros((n, 7))
        Lc[:, 1 + i] = t
        Lc[:, 4 + i] = 1.0
        Lc[:, 4:7] += s / t * Hinf[:, i, :]
        DL = np.zeros((n, 7, 7))
        DL[:, 1 + i, 0] = 1.0
        DL[:, 4:7, 0] = ((1.0 - s) / t ** 2) * Hinf[:, i, :]
        DL[:, 4:7, 4:7] = s / t * T3[:, i, :, :]
        lhs_L[:, i] = compose(Xc, DX, Lc, DL)

        coef = Hinf[:, i, :] / t ** 2 - t * DE[:, i, :]
        r = np.einsum("nk,nk->n", coef, gp)
        r -= s / t ** 2 * np.einsum("nj,nj->n", Hinf[:, i, :], t * gx + gp)
        r += s / t * np.einsum("nk,nkl,nl->n", E, T3[:, i, :, :], gp)
        rhs_L[:, i] = r

        Pc = np.zeros((n, 7))
        Pc[:, 4 + i] = 1.0 / t
        DP = np.zeros((n, 7, 7))
        DP[:, 4 + i, 0] = -1.0 / t ** 2
        lhs_P[:, i] = compose(Xc, DX, Pc, DP)
        rhs_P[:, i] = -(t * gx[:, i] + gp[:, i]) / t ** 2
    return lhs_L, rhs_L, lhs_P, rhs_P


@dataclass
class FunctionOfY:
    """``g(t, x, p) = h(y(t, x, p), p)`` for a symbolic ``h``."""

    h: PhaseExpr
    ctx: EvalContext
    phi_inf: TensorSpline

    def grad(self, t, x, p):
        x, p = np.broadcast_arrays(_pts(x), _pts(p))
        s = np.log(t)
        d = self.phi_inf.derivatives(p, _FIRST + _SECOND)
        H = _hessian_from(d[3:])
        y = x - t * p + s * d[:3].T
        ex = [self.h.dy(i) for i in range(3)] + [self.h.dp(i) for i in range(3)]
        v = self.ctx.evaluate_exprs(ex, y, p)
        hy, hp = v[:3].T, v[3:].T
        gx = hy
        gp = -t * hy + s * np.einsum("nkj,nk->nj", H, hy) + hp
        gt = np.einsum("ni,ni->n", hy, -p + d[:3].T / t)
        return gt, gx, gp

    def L_closed(self, i, t, x, p):
        """``L_i g = ((log t)²/t) (∇²φ∞)²_{ik} ∂_{y^k}h + (δ_ik + (log t/t) ∂_i∂_kφ∞) ∂_{p^k}h``."""
        x, p = np.broadcast_arrays(_pts(x), _pts(p))
        s = np.log(t)
        d = self.phi_inf.derivatives(p, _FIRST + _SECOND)
        H = _hessian_from(d[3:])
        y = x - t * p + s * d[:3].T
        ex = [self.h.dy(k) for k in range(3)] + [self.h.dp(k) for k in range(3)]
        v = self.ctx.evaluate_exprs(ex, y, p)
        hy, hp = v[:3].T, v[3:].T
        H2 = np.einsum("nij,njk->nik", H, H)
        return s ** 2 / t * np.einsum("nk,nk->n", H2[:, i, :], hy) + hp[:, i] + s / t * np.einsum("nk,nk->n", H[:, i, :], hp)


def emit_trajectories(samples, times, phi_inf: TensorSpline, path=None):
    """Modified ``x + tp - log t ∇φ∞(p)`` and free ``x + tp`` trajectories.

    Returns rows ``(sample, t, mod_1..3, free_1..3)``; writes CSV if ``path``.
    """
    rows = []
    for j, (x, p) in enumerate(samples):
        x = np.asarray(x, dtype=float)
        p = np.asarray(p, dtype=float)
        g = phi_inf.gradient(p[None])[:, 0]
        for t in times:
            free = x + t * p
            mod = free - np.log(t) * g
            rows.append((j, float(t), *mod.tolist(), *free.tolist()))
    if path is not None:
        with open(Path(path), "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["sample", "t", "mod_x1", "mod_x2", "mod_x3", "free_x1", "free_x2", "free_x3"])
            for r in rows:
                wr.writerow([r[0]] + [repr(v) for v in r[1:]])
    return rows
