"""Coefficient table of the polyhomogeneous expansion.

Notation: ``u = 1/t``, ``s = log t``; a series is a dict ``{(k, l): value}``
standing for ``Σ u^k s^l value``.  All symbolic objects are
:class:`~vpscatter.phaseexpr.PhaseExpr` in the variables ``(y, p)``; in the
density coefficients the second slot plays the role of ``w = x/t``.

The recursion for the phase-space coefficients reads, with ``f_{k,k+1} = 0``,

    k f_{k,l} = (l+1) f_{k,l+1}
                - Σ_{k1+k2=k, l1+l2=l, k2>=1} Ψ_{k2,l2} · ∂_y f_{k1,l1}
                + [l>=1] Σ_{k1+k2=k-1, l1+l2=l-1} (∇²φ∞ Ψ_{k2,l2}) · ∂_y f_{k1,l1}
                + Σ_{k1+k2=k-1, l1+l2=l} Ψ_{k2,l2} · ∂_p f_{k1,l1},

which is what cancels every layer ``k <= K`` of ``X f_{[K]}`` exactly.  The
density coefficients are ``ρ_{k,l} = σ Σ ∫ H_{k2,l2}[f_{k1,l1}] J_{k3,l3} dy``
with ``J_{0,0} = -1``; at the top order the ``k1 = k`` term is replaced by
``-𝒫_{k,l}``, the integral of the reduced integrand that never references
``φ_{k,·}``.  ``σ = +1`` is the attractive (gravitational) coupling
``ρ = -∫ f dp``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field as dc_field
from fractions import Fraction
from math import comb, factorial
from pathlib import Path

import numpy as np

from .fields import (
    MAX_DERIVATIVE_ORDER,
    Field3,
    Grid3,
    OrderExceededError,
    TensorSpline,
    evaluate_splines,
    read_snapshot,
    write_snapshot,
)
from .phaseexpr import (
    CompiledExprs,
    MomentExpr,
    PhaseExpr,
    directional,
    grad_phi,
    vec_add,
    vec_dot,
    vec_scale,
    vec_zero,
    y_power_rows,
    y_vec,
)
from .poisson import solve_free_space
from .profile import BaseFields, ScatteringProfile, _multi_indices

TABLE_FORMAT_VERSION = 1


class MissingDependencyError(KeyError):
    pass


# ---------------------------------------------------------------------------
# series helpers


def _series_mul(A: dict, B: dict, K: int, mul) -> dict:
    out: dict = {}
    for (k1, l1), a in A.items():
        for (k2, l2), b in B.items():
            if k1 + k2 > K:
                continue
            key = (k1 + k2, l1 + l2)
            prod = mul(a, b)
            out[key] = out[key] + prod if key in out else prod
    return out


def _series_add(A: dict, B: dict) -> dict:
    out = dict(A)
    for k, v in B.items():
        out[k] = out[k] + v if k in out else v
    return out


def _vec_mul(a, b):
    return tuple(ai * b for ai in a)


def taylor_shift(exprs, eps: dict, K: int) -> list[dict]:
    """``g(p + ε)`` for each expression ``g`` as a series to order ``K``.

    ``eps`` is a vector series with no ``(0, 0)`` term; the shift acts on the
    second slot only: ``Σ_α ε^α / α! ∂_p^α g``.
    """
    if (0, 0) in eps:
        raise ValueError("shift series must start at order u^1")
    # ε^α / α! for |α| <= K, built by increasing |α|
    comp = [{kl: v[i] for kl, v in eps.items() if not v[i].is_zero()} for i in range(3)]
    powers = {(0, 0, 0): {(0, 0): PhaseExpr.const(1)}}
    for alpha in _multi_indices(K):
        if sum(alpha) == 0:
            continue
        i = next(j for j in range(3) if alpha[j])
        prev = list(alpha)
        prev[i] -= 1
        prev = tuple(prev)
        s = _series_mul(powers[prev], comp[i], K, lambda a, b: a * b)
        powers[alpha] = {kl: v.scale(Fraction(1, alpha[i])) for kl, v in s.items()}
    out = []
    for g in exprs:
        res: dict = {}
        for alpha, pw in powers.items():
            if not pw:
                continue
            dg = g.dp_multi(alpha)
            if dg.is_zero():
                continue
            for kl, c in pw.items():
                term = c * dg
                res[kl] = res[kl] + term if kl in res else term
        out.append({kl: v for kl, v in res.items() if not v.is_zero()})
    return out


# ---------------------------------------------------------------------------
# Ψ, p, J, H


def build_psi(k: int, l: int, available=None):
    """``Ψ_{k,l}``: Taylor coefficients of ``∇φ_{[K]}(x/t) t²`` in ``(y, p)``.

    ``available`` optionally lists the ``(k, l)`` with built potentials; a
    missing one raises :class:`MissingDependencyError`.
    """
    if not 0 <= l <= k:
        return vec_zero()
    out = vec_zero()
    yv = y_vec()
    gp = grad_phi(0, 0)
    for k2 in range(0, k + 1):
        k1 = k - k2
        for l2 in range(0, k2 + 1):
            l1 = l - l2
            if not 0 <= l1 <= k1:
                continue
            if available is not None and (k1, l1) not in available:
                raise MissingDependencyError(f"phi[{k1},{l1}] required by Psi[{k},{l}]")
            c = Fraction(comb(k2, l2) * (-1) ** l2, factorial(k2))
            vecs = [yv] * (k2 - l2) + [gp] * l2
            out = vec_add(out, vec_scale(directional(vecs, k1, l1, k2 + 1), c))
    return out


def build_p_series(K: int) -> dict:
    """Vector series ``ε`` with ``p(t, x, y) = x/t + ε``.

    Solves ``ε = -u y + s u ∇φ∞(x/t + ε)`` by fixed-point iteration; each pass
    fixes one more power of ``u``.
    """
    eps: dict = {}
    gp = list(grad_phi(0, 0))
    yv = y_vec()
    for _ in range(K):
        shifted = taylor_shift(gp, eps, K - 1) if eps else [{(0, 0): g} for g in gp]
        new = {(1, 0): vec_scale(yv, -1)}
        for (k, l) in sorted(set().union(*[s.keys() for s in shifted])):
            if k + 1 > K:
                continue
            v = tuple(shifted[i].get((k, l), PhaseExpr()) for i in range(3))
            key = (k + 1, l + 1)
            new[key] = vec_add(new[key], v) if key in new else v
        eps = {kl: v for kl, v in new.items() if any(not c.is_zero() for c in v)}
    return {kl: v for kl, v in eps.items() if kl[0] <= K}


def build_p_coeff(k: int, l: int, pseries: dict | None = None):
    if k < 1:
        raise ValueError("p coefficients start at k = 1")
    pseries = pseries if pseries is not None else build_p_series(k)
    return pseries.get((k, l), vec_zero())


def _hess(i, j):
    o = [0, 0, 0]
    o[i] += 1
    o[j] += 1
    return PhaseExpr.phi(0, 0, tuple(o))


def jacobian_invariants():
    """``(J̊1, J̊2, J̊3)``: trace, minus the principal 2-minor sum, determinant
    of ``∇²φ∞``."""
    H = [[_hess(i, j) for j in range(3)] for i in range(3)]
    J1 = H[0][0] + H[1][1] + H[2][2]
    J2 = (H[0][1] * H[0][1] + H[0][2] * H[0][2] + H[1][2] * H[1][2]
          - H[0][0] * H[1][1] - H[0][0] * H[2][2] - H[1][1] * H[2][2])
    J3 = (H[0][0] * H[1][1] * H[2][2] + H[0][1] * H[0][2] * H[1][2].scale(2)
          - H[0][0] * H[1][2] * H[1][2] - H[1][1] * H[0][2] * H[0][2]
          - H[2][2] * H[0][1] * H[0][1])
    return J1, J2, J3


def build_jacobian_series(K: int, pseries: dict | None = None) -> dict:
    """``t³ det ∂p/∂y = -1 / (1 - s u J̊1 - s²u² J̊2 - s³u³ J̊3)`` at ``p = w + ε``."""
    pseries = pseries if pseries is not None else build_p_series(K)
    shifted = taylor_shift(list(jacobian_invariants()), pseries, K)
    D: dict = {}
    for m, ser in enumerate(shifted, start=1):
        for (k, l), v in ser.items():
            if k + m <= K:
                key = (k + m, l + m)
                D[key] = D[key] + v if key in D else v
    out = {(0, 0): PhaseExpr.const(-1)}
    power = {(0, 0): PhaseExpr.const(1)}
    for _ in range(K):
        power = _series_mul(power, D, K, lambda a, b: a * b)
        if not power:
            break
        for kl, v in power.items():
            out[kl] = out[kl] - v if kl in out else -v
    return {kl: v for kl, v in out.items() if not v.is_zero()}


def build_jacobian_coeff(k: int, l: int, jseries: dict | None = None) -> PhaseExpr:
    jseries = jseries if jseries is not None else build_jacobian_series(k)
    return jseries.get((k, l), PhaseExpr())


def apply_H_series(h: PhaseExpr, K: int, pseries: dict) -> dict:
    """All ``H_{k,l}[h]`` for ``k <= K``: coefficients of ``h(y, w + ε)``."""
    return taylor_shift([h], pseries, K)[0]


def apply_H(k: int, l: int, h: PhaseExpr, pseries: dict | None = None) -> PhaseExpr:
    if k == 0:
        return h.copy() if l == 0 else PhaseExpr()
    pseries = pseries if pseries is not None else build_p_series(k)
    return apply_H_series(h, k, pseries).get((k, l), PhaseExpr())


# ---------------------------------------------------------------------------
# f coefficients


def _hess_dot(v):
    """``(∇²φ∞ v)_i = Σ_j ∂_i∂_jφ∞ v^j``."""
    return tuple(sum((_hess(i, j) * v[j] for j in range(3)), PhaseExpr()) for i in range(3))


def _grad_y(e: PhaseExpr):
    return tuple(e.dy(i) for i in range(3))


def _grad_p(e: PhaseExpr):
    return tuple(e.dp(i) for i in range(3))


def _f_rhs(k: int, l: int, f: dict, psi: dict, upper: PhaseExpr, reduced: bool,
           caches: dict) -> PhaseExpr:
    """Right-hand side of the recursion for ``f_{k,l}`` (already divided by k)."""
    gy = caches.setdefault("gy", {})
    gpz = caches.setdefault("gp", {})
    hpsi = caches.setdefault("hpsi", {})

    def grad_y(kl):
        if kl not in gy:
            gy[kl] = _grad_y(f[kl])
        return gy[kl]

    def grad_p(kl):
        if kl not in gpz:
            gpz[kl] = _grad_p(f[kl])
        return gpz[kl]

    def hess_psi(kl):
        if kl not in hpsi:
            hpsi[kl] = _hess_dot(psi[kl])
        return hpsi[kl]

    acc = upper.scale(l + 1)
    for k2 in range(1, k + 1):
        k1 = k - k2
        for l2 in range(0, k2 + 1):
            l1 = l - l2
            if not 0 <= l1 <= k1:
                continue
            P = psi[(k2, l2)]
            if reduced:
                P = vec_add(P, vec_scale(grad_phi(k2, l2), -1))
            acc = acc - vec_dot(P, grad_y((k1, l1)))
    if l >= 1:
        for k2 in range(0, k):
            k1 = k - 1 - k2
            for l2 in range(0, k2 + 1):
                l1 = l - 1 - l2
                if not 0 <= l1 <= k1:
                    continue
                acc = acc + vec_dot(hess_psi((k2, l2)), grad_y((k1, l1)))
    for k2 in range(0, k):
        k1 = k - 1 - k2
        for l2 in range(0, k2 + 1):
            l1 = l - l2
            if not 0 <= l1 <= k1:
                continue
            acc = acc + vec_dot(psi[(k2, l2)], grad_p((k1, l1)))
    return acc.scale(Fraction(1, k))


def build_f_coeff(k: int, l: int, f: dict, psi: dict, caches: dict | None = None) -> PhaseExpr:
    """``f_{k,l}`` from lower orders, ``f_{k,l+1}`` and ``Ψ_{k',·}``, ``k' <= k``."""
    if k == 0:
        return PhaseExpr.f() if l == 0 else PhaseExpr()
    _require(f, [(k1, l1) for k1 in range(k) for l1 in range(k1 + 1)], "f")
    _require(psi, [(k2, l2) for k2 in range(k + 1) for l2 in range(k2 + 1)], "Psi")
    upper = f.get((k, l + 1), PhaseExpr()) if l < k else PhaseExpr()
    if l < k and (k, l + 1) not in f:
        raise MissingDependencyError(f"f[{k},{l + 1}] required by f[{k},{l}]")
    return _f_rhs(k, l, f, psi, upper, False, caches if caches is not None else {})


def build_reduced_f_coeff(k: int, l: int, f: dict, ftilde: dict, psi: dict,
                          caches: dict | None = None) -> PhaseExpr:
    """Integrand whose ``y``-integral is ``𝒫_{k,l}``; free of ``φ_{k,·}``."""
    if k == 0:
        return PhaseExpr.f() if l == 0 else PhaseExpr()
    upper = ftilde.get((k, l + 1), PhaseExpr()) if l < k else PhaseExpr()
    return _f_rhs(k, l, f, psi, upper, True, caches if caches is not None else {})


def _require(d, keys, name):
    for kl in keys:
        if kl not in d:
            raise MissingDependencyError(f"{name}[{kl[0]},{kl[1]}] missing")


# ---------------------------------------------------------------------------
# evaluation context


@dataclass
class EvalContext:
    """Numerical values of the symbols appearing in expressions."""

    profile: ScatteringProfile
    splines: dict  # (k, l) -> TensorSpline

    def atom_values(self, atoms, p) -> np.ndarray:
        p = np.atleast_2d(p)
        if not atoms:
            return np.ones((1, len(p)))
        keys = sorted({a[:2] for a in atoms})
        for kl in keys:
            if kl not in self.splines:
                raise MissingDependencyError(f"phi[{kl[0]},{kl[1]}] not built")
        index = {kl: i for i, kl in enumerate(keys)}
        spl = [self.splines[kl] for kl in keys]
        reqs = [(index[a[:2]], a[2:]) for a in atoms]
        return evaluate_splines(spl, reqs, p)

    def profile_values(self, fatoms, y, p) -> np.ndarray:
        """Rows for each f-atom, ``None`` giving a row of ones."""
        y = np.atleast_2d(y)
        p = np.atleast_2d(p)
        n = max(len(y), len(p))
        out = np.zeros((len(fatoms), n))
        real = [fa for fa in fatoms if fa is not None]
        Ixs = sorted({fa[0] for fa in real})
        Ips = sorted({fa[1] for fa in real})
        for r, fa in enumerate(fatoms):
            if fa is None:
                out[r] = 1.0
        if not real:
            return out
        for a, (_, uf, vf) in zip(self.profile.weights(), self.profile.terms):
            if a == 0.0:
                continue
            U = dict(zip(Ixs, uf.derivatives(y, Ixs)))
            V = dict(zip(Ips, vf.derivatives(p, Ips)))
            for r, fa in enumerate(fatoms):
                if fa is not None:
                    out[r] += a * U[fa[0]] * V[fa[1]]
        return out

    def evaluate(self, compiled: CompiledExprs, y, p, chunk: int = 65536) -> np.ndarray:
        y = np.atleast_2d(np.asarray(y, dtype=float))
        p = np.atleast_2d(np.asarray(p, dtype=float))
        y, p = np.broadcast_arrays(y, p)
        out = np.zeros((compiled.n, len(y)))
        for s in range(0, len(y), chunk):
            yy = y[s:s + chunk]
            pp = p[s:s + chunk]
            Y = y_power_rows(compiled.ypows, yy)
            A = self.atom_values(compiled.atoms, pp)
            F = self.profile_values(compiled.fatoms, yy, pp)
            out[:, s:s + chunk] = compiled.evaluate(Y, A, F)
        return out

    def evaluate_exprs(self, exprs, y, p) -> np.ndarray:
        return self.evaluate(CompiledExprs(list(exprs)), y, p)

    def evaluate_moments(self, mexprs, w, nodes=None) -> np.ndarray:
        """Values of moment expressions at points ``w``."""
        w = np.atleast_2d(np.asarray(w, dtype=float))
        out = np.zeros((len(mexprs), len(w)))
        allkeys = [k for m in mexprs for k in m.terms]
        if not allkeys or not len(w):
            return out
        atoms = sorted({a for (at, _, _) in allkeys for a in at})
        Ips = sorted({Ip for (_, Ip, _) in allkeys})
        order = max(sum(b) for (_, _, b) in allkeys)
        kw = {} if nodes is None else {"nodes": nodes}
        aidx = {a: i for i, a in enumerate(atoms)}
        A = self.atom_values(atoms, w) if atoms else None
        for a, (_, uf, vf) in zip(self.profile.weights(), self.profile.terms):
            if a == 0.0:
                continue
            M = uf.moments(order, **kw)
            live = np.ones(len(w), dtype=bool)
            V = dict(zip(Ips, vf.derivatives(w, Ips)))
            for e, m in enumerate(mexprs):
                for (at, Ip, beta), c in sorted(m.terms.items(), key=lambda kv: (kv[0][1], kv[0][2], kv[0][0])):
                    coef = a * float(c) * M[beta]
                    if coef == 0.0:
                        continue
                    v = coef * V[Ip]
                    for atom in at:
                        v = v * A[aidx[atom]]
                    out[e] += v
            del live
        return out


# ---------------------------------------------------------------------------
# the table


@dataclass
class CoefficientTable:
    """Every coefficient of the order-``K`` approximate solution."""

    K: int
    profile: ScatteringProfile
    grid: Grid3
    degree: int
    sigma: int
    printed_top_order: bool
    f: dict = dc_field(default_factory=dict)
    ftilde: dict = dc_field(default_factory=dict)
    psi: dict = dc_field(default_factory=dict)
    pseries: dict = dc_field(default_factory=dict)
    jseries: dict = dc_field(default_factory=dict)
    P: dict = dc_field(default_factory=dict)          # (k,l) -> MomentExpr
    rho_integrand: dict = dc_field(default_factory=dict)  # (k,l) -> PhaseExpr (σ excluded)
    rho_expr: dict = dc_field(default_factory=dict)   # (k,l) -> MomentExpr (σ excluded)
    rho: dict = dc_field(default_factory=dict)        # (k,l) -> Field3
    phi: dict = dc_field(default_factory=dict)        # (k,l) -> Field3
    splines: dict = dc_field(default_factory=dict)    # (k,l) -> TensorSpline

    @property
    def context(self) -> EvalContext:
        return EvalContext(self.profile, self.splines)

    def base_fields(self) -> BaseFields:
        phi, grad = solve_free_space(self.rho[(0, 0)])
        from .profile import total_mass
        return BaseFields(self.grid, self.rho[(0, 0)], phi, grad, self.splines[(0, 0)],
                          total_mass(self.profile))

    def keys(self):
        return [(k, l) for k in range(self.K + 1) for l in range(k, -1, -1)]

    def phi_splines_combined(self, weights: dict) -> TensorSpline:
        """``Σ w_{k,l} φ_{k,l}`` as one spline (shared knots)."""
        items = sorted(weights.items())
        return self.splines[(0, 0)].combine([w for _, w in items], [self.splines[kl] for kl, _ in items])

    def evaluate_P(self, k, l, w) -> np.ndarray:
        return self.context.evaluate_moments([self.P[(k, l)]], w)[0]


def _rho_integrand(k: int, l: int, table: CoefficientTable, Hcache: dict) -> PhaseExpr:
    """``Σ H[f] J`` with the ``k1 = k`` term replaced by ``-F̃_{k,l}``.

    Its ``y``-integral is ``σ ρ_{k,l}``; the replacement drops only total
    ``y``-derivatives, so ``φ_{k,·}`` never enters.
    """
    acc = -table.ftilde[(k, l)] if (k, l) in table.ftilde else PhaseExpr()
    for k1 in range(0, k):
        for l1 in range(0, k1 + 1):
            if table.printed_top_order and k > 0 and l1 > l - 1:
                continue
            key = (k1, l1)
            if key not in Hcache:
                Hcache[key] = apply_H_series(table.f[key], table.K - k1, table.pseries)
            Hs = Hcache[key]
            for k2 in range(0, k - k1 + 1):
                k3 = k - k1 - k2
                for l2 in range(0, k2 + 1):
                    l3 = l - l1 - l2
                    if not 0 <= l3 <= k3:
                        continue
                    h = Hs.get((k2, l2))
                    j = table.jseries.get((k3, l3))
                    if h is None or j is None:
                        continue
                    acc = acc + h * j
    return acc


def required_profile_order(K: int) -> int:
    """Conservative derivative budget: ``f_{k,l}`` carries up to ``2k``
    profile derivatives and ``H`` adds ``k`` more."""
    return 3 * K


def _stage_fields(table: CoefficientTable, k: int, Hcache: dict) -> None:
    ctx = table.context
    g = table.grid
    pts = g.points()
    # density coefficients vanish outside the momentum support of the profile
    r = np.linalg.norm(pts, axis=1)
    live = r <= table.profile.p_extent + 1e-12
    for l in range(k, -1, -1):
        if k > 0:
            caches: dict = {}
            table.ftilde[(k, l)] = build_reduced_f_coeff(k, l, table.f, table.ftilde, table.psi, caches)
            table.P[(k, l)] = table.ftilde[(k, l)].integrate_y()
        else:
            table.ftilde[(0, 0)] = PhaseExpr.f()
            table.P[(0, 0)] = table.ftilde[(0, 0)].integrate_y()
    for l in range(k, -1, -1):
        table.rho_integrand[(k, l)] = _rho_integrand(k, l, table, Hcache)
        m = table.rho_integrand[(k, l)].integrate_y()
        table.rho_expr[(k, l)] = m
        vals = np.zeros(len(pts))
        if not m.is_zero() and not table.profile.is_zero:
            vals[live] = table.sigma * ctx.evaluate_moments([m], pts[live])[0]
        rho = Field3(g, vals.reshape((g.n,) * 3))
        table.rho[(k, l)] = rho
        phi, _ = solve_free_space(rho)
        table.phi[(k, l)] = phi
        table.splines[(k, l)] = TensorSpline.fit(phi, table.degree)


def build_table(profile: ScatteringProfile, K: int, grid: Grid3, degree: int = 7,
                sigma: int = 1, printed_top_order: bool = False,
                max_profile_order: int = MAX_DERIVATIVE_ORDER) -> CoefficientTable:
    """Run the induction to order ``K``.

    For each stage ``k``: reduced integrands and ``𝒫_{k,·}``, densities
    ``ρ_{k,·}``, potentials ``φ_{k,·}`` by the free-space solver, then
    ``Ψ_{k,·}`` and ``f_{k,·}``.
    """
    if K < 0:
        raise ValueError("K must be non-negative")
    if sigma not in (1, -1):
        raise ValueError("sigma must be +1 or -1")
    if required_profile_order(K) > max_profile_order:
        raise OrderExceededError(f"K={K} needs {required_profile_order(K)} profile derivatives")
    grid.require_ball(profile.p_extent)
    table = CoefficientTable(K, profile, grid, degree, sigma, printed_top_order)
    table.pseries = build_p_series(K) if K else {}
    table.jseries = build_jacobian_series(K, table.pseries) if K else {(0, 0): PhaseExpr.const(-1)}
    Hcache: dict = {}
    for k in range(K + 1):
        # Ψ_{k,·} is symbolic; only its ∇φ_{k,·} part waits on this stage
        for l in range(k + 1):
            table.psi[(k, l)] = build_psi(k, l)
        _stage_fields(table, k, Hcache)
        caches: dict = {}
        for l in range(k, -1, -1):
            table.f[(k, l)] = build_f_coeff(k, l, table.f, table.psi, caches)
            if table.f[(k, l)].max_profile_order() > max_profile_order:
                raise OrderExceededError(f"f[{k},{l}] exceeds the profile derivative budget")
    return table


def integrate_f_coeff(k: int, l: int, table: CoefficientTable, w) -> np.ndarray:
    """``𝒫_{k,l}(w)`` from the reduced integrand."""
    if (k, l) not in table.P:
        raise MissingDependencyError(f"P[{k},{l}] not built")
    return table.evaluate_P(k, l, w)


def build_rho_coeff(k: int, l: int, table: CoefficientTable, grid: Grid3 | None = None) -> Field3:
    """``ρ_{k,l}`` sampled on ``grid`` (the table grid by default)."""
    if (k, l) not in table.rho_expr:
        raise MissingDependencyError(f"rho[{k},{l}] not built")
    if grid is None or grid == table.grid:
        return table.rho[(k, l)]
    vals = table.sigma * table.context.evaluate_moments([table.rho_expr[(k, l)]], grid.points())[0]
    return Field3(grid, vals.reshape((grid.n,) * 3))


def quadrature_f_over_y(table: CoefficientTable, keys, w, nodes: int = 96,
                        chunk: int = 32768) -> np.ndarray:
    """Direct trapezoid quadrature of ``f_{k,l}(·, w)`` over ``y``.

    Independent of the moment route: ``f_{k,l}`` is sampled at every node of
    a tensor grid covering the spatial support of each profile term and the
    samples are summed; no integration by parts is involved.  Per ``w`` the
    samples are assembled as ``Σ C(w) y^α ∂^{Ix} u_j(y)`` so the profile
    derivatives on the grid are computed once for all ``w``.
    """
    w = np.atleast_2d(np.asarray(w, dtype=float))
    exprs = [table.f[kl] for kl in keys]
    out = np.zeros((len(exprs), len(w)))
    if table.profile.is_zero:
        return out
    pairs = sorted({(ya, fa[0]) for e in exprs for (ya, _, fa) in e.terms})
    pidx = {pr: i for i, pr in enumerate(pairs)}
    atoms = sorted({a for e in exprs for a in e.atoms()})
    aidx = {a: i for i, a in enumerate(atoms)}
    Ips = sorted({fa[1] for e in exprs for (_, _, fa) in e.terms})
    Ixs = sorted({pr[1] for pr in pairs})
    ixi = {ix: i for i, ix in enumerate(Ixs)}
    ypows = sorted({pr[0] for pr in pairs})
    yi = {ya: i for i, ya in enumerate(ypows)}
    ctx = table.context
    A = ctx.atom_values(atoms, w) if atoms else np.ones((0, len(w)))
    for a, (_, uf, vf) in zip(table.profile.weights(), table.profile.terms):
        if a == 0.0:
            continue
        V = dict(zip(Ips, vf.derivatives(w, Ips)))
        # C[e, i, pair]: coefficient of y^α ∂^{Ix} u at w_i
        C = np.zeros((len(exprs), len(w), len(pairs)))
        for e, ex in enumerate(exprs):
            for (ya, at, (Ix, Ip)), c in ex.sorted_items():
                v = a * float(c) * V[Ip]
                for atom in at:
                    v = v * A[aidx[atom]]
                C[e, :, pidx[(ya, Ix)]] += v
        C = C.reshape(len(exprs) * len(w), len(pairs))
        pts, vol = uf.quadrature_nodes(nodes)
        acc = np.zeros(len(exprs) * len(w))
        for s0 in range(0, len(pts), chunk):
            z = pts[s0:s0 + chunk]
            U = uf.derivatives(z, Ixs)
            Y = y_power_rows(ypows, z)
            B = np.empty((len(pairs), len(z)))
            for r, (ya, Ix) in enumerate(pairs):
                np.multiply(Y[yi[ya]], U[ixi[Ix]], out=B[r])
            samples = C @ B  # f_{k,l}(y_node, w_i) for every node of the chunk
            acc += samples.sum(axis=1)
        out += (acc * vol).reshape(len(exprs), len(w))
    return out


# ---------------------------------------------------------------------------
# serialization


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_table(table: CoefficientTable, directory) -> dict:
    """Manifest, Field3 snapshots and canonical expression dumps."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    files = {}

    def put_text(name, text):
        p = d / name
        p.write_text(text)
        files[name] = _sha256(p)

    def put_field(name, f):
        p = d / name
        write_snapshot(f, p)
        files[name] = _sha256(p)

    for (k, l) in table.keys():
        put_field(f"rho_{k}_{l}.vpf3", table.rho[(k, l)])
        put_field(f"phi_{k}_{l}.vpf3", table.phi[(k, l)])
        put_text(f"f_{k}_{l}.txt", table.f[(k, l)].dump())
        put_text(f"P_{k}_{l}.txt", table.P[(k, l)].dump())
        put_text(f"rho_{k}_{l}.txt", table.rho_expr[(k, l)].dump())
        put_text(f"psi_{k}_{l}.txt", "".join(f"[{i}]\n" + table.psi[(k, l)][i].dump() for i in range(3)))
    for (k, l), v in sorted(table.pseries.items()):
        put_text(f"p_{k}_{l}.txt", "".join(f"[{i}]\n" + v[i].dump() for i in range(3)))
    for (k, l), v in sorted(table.jseries.items()):
        put_text(f"J_{k}_{l}.txt", v.dump())
    manifest = {
        "format": TABLE_FORMAT_VERSION,
        "K": table.K,
        "sigma": table.sigma,
        "degree": table.degree,
        "printed_top_order": table.printed_top_order,
        "grid": {"n": table.grid.n, "origin": list(table.grid.origin), "spacing": table.grid.spacing},
        "profile": table.profile.to_dict(),
        "files": dict(sorted(files.items())),
    }
    text = json.dumps(manifest, indent=1, sort_keys=True) + "\n"
    (d / "manifest.json").write_text(text)
    manifest["checksum"] = hashlib.sha256(text.encode()).hexdigest()
    return manifest


def table_checksum(directory) -> str:
    return hashlib.sha256((Path(directory) / "manifest.json").read_bytes()).hexdigest()


def read_table(directory) -> CoefficientTable:
    """Rebuild a table from disk: expressions are regenerated symbolically,
    fields are loaded from snapshots, and every file checksum is verified."""
    d = Path(directory)
    man = json.loads((d / "manifest.json").read_text())
    for name, h in man["files"].items():
        if _sha256(d / name) != h:
            raise ValueError(f"checksum mismatch for {name}")
    profile = ScatteringProfile.from_dict(man["profile"])
    g = Grid3(man["grid"]["n"], tuple(man["grid"]["origin"]), man["grid"]["spacing"])
    K = man["K"]
    table = CoefficientTable(K, profile, g, man["degree"], man["sigma"], man["printed_top_order"])
    table.pseries = build_p_series(K) if K else {}
    table.jseries = build_jacobian_series(K, table.pseries) if K else {(0, 0): PhaseExpr.const(-1)}
    Hcache: dict = {}
    for k in range(K + 1):
        for l in range(k + 1):
            table.psi[(k, l)] = build_psi(k, l)
        for l in range(k, -1, -1):
            if k > 0:
                table.ftilde[(k, l)] = build_reduced_f_coeff(k, l, table.f, table.ftilde, table.psi, {})
            else:
                table.ftilde[(0, 0)] = PhaseExpr.f()
            table.P[(k, l)] = table.ftilde[(k, l)].integrate_y()
        for l in range(k, -1, -1):
            table.rho_integrand[(k, l)] = _rho_integrand(k, l, table, Hcache)
            table.rho_expr[(k, l)] = table.rho_integrand[(k, l)].integrate_y()
            table.rho[(k, l)] = read_snapshot(d / f"rho_{k}_{l}.vpf3")
            table.phi[(k, l)] = read_snapshot(d / f"phi_{k}_{l}.vpf3")
            table.splines[(k, l)] = TensorSpline.fit(table.phi[(k, l)], table.degree)
        caches: dict = {}
        for l in range(k, -1, -1):
            table.f[(k, l)] = build_f_coeff(k, l, table.f, table.psi, caches)
    return table
