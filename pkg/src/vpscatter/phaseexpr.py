"""Exact symbolic phase-space expressions.

A :class:`PhaseExpr` is a finite sum of monomials

    c · y^α · Π_i ∂^{β_i} φ_{k_i, l_i}(p) · ∂_x^{I} ∂_p^{J} f∞(y, p)

with rational coefficients ``c``.  The profile factor appears at most once
per monomial (every coefficient of the expansion is linear in ``f∞``).
Keys are kept in a canonical order, so equal expressions have equal term
dictionaries and identical text dumps; this plays the role of hash-consing.

Integration over ``y`` is exact at the symbolic level: integrating by parts
moves ``∂_x^I`` from the profile onto ``y^α``, so every monomial reduces to a
rational multiple of a plain moment ``∫ y^β u_j(y) dy``.  Total
``y``-derivatives therefore cancel to an exact zero coefficient.
"""

from __future__ import annotations

from collections import defaultdict
from fractions import Fraction
from math import factorial

import numpy as np
from numba import njit

Y0 = (0, 0, 0)
_E = ((1, 0, 0), (0, 1, 0), (0, 0, 1))


def _add3(a, b):
    return (a[0] + b[0], a[1] + b[1], a[2] + b[2])


def _coerce(c) -> Fraction:
    if isinstance(c, Fraction):
        return c
    if isinstance(c, int):
        return Fraction(c)
    if isinstance(c, float) and c.is_integer():
        return Fraction(int(c))
    raise TypeError(f"coefficients must be rational, got {c!r}")


class PhaseExpr:
    """Sparse polynomial in ``y``, derivatives of ``φ_{k,l}(p)`` and ``f∞``.

    Term keys are ``(ypow, atoms, fatom)``:

    * ``ypow``  -- exponent triple of ``y``;
    * ``atoms`` -- sorted tuple of ``(k, l, a, b, c)`` meaning ``∂^{(a,b,c)} φ_{k,l}(p)``;
    * ``fatom`` -- ``None`` or ``(Ix, Ip)`` meaning ``∂_x^{Ix} ∂_p^{Ip} f∞(y, p)``.
    """

    __slots__ = ("terms",)

    def __init__(self, terms=None):
        self.terms: dict = {}
        if terms:
            for k, c in terms.items():
                if c:
                    self.terms[k] = c

    # -- constructors --------------------------------------------------------
    @classmethod
    def zero(cls) -> "PhaseExpr":
        return cls()

    @classmethod
    def const(cls, c) -> "PhaseExpr":
        return cls({(Y0, (), None): _coerce(c)})

    @classmethod
    def y(cls, i: int) -> "PhaseExpr":
        return cls({(_E[i], (), None): Fraction(1)})

    @classmethod
    def phi(cls, k: int, l: int, order=(0, 0, 0)) -> "PhaseExpr":
        return cls({(Y0, ((k, l) + tuple(order),), None): Fraction(1)})

    @classmethod
    def f(cls, Ix=(0, 0, 0), Ip=(0, 0, 0)) -> "PhaseExpr":
        return cls({(Y0, (), (tuple(Ix), tuple(Ip))): Fraction(1)})

    # -- arithmetic ----------------------------------------------------------
    def copy(self) -> "PhaseExpr":
        out = PhaseExpr()
        out.terms = dict(self.terms)
        return out

    def __bool__(self):
        return bool(self.terms)

    def is_zero(self) -> bool:
        return not self.terms

    def __len__(self):
        return len(self.terms)

    def __eq__(self, other):
        if isinstance(other, (int, Fraction)):
            other = PhaseExpr.const(other) if other else PhaseExpr()
        return isinstance(other, PhaseExpr) and self.terms == other.terms

    def __hash__(self):
        return hash(frozenset(self.terms.items()))

    def _accumulate(self, acc: dict, scale=Fraction(1)):
        for k, c in self.terms.items():
            v = acc.get(k, 0) + c * scale
            if v:
                acc[k] = v
            else:
                acc.pop(k, None)

    def __add__(self, other: "PhaseExpr") -> "PhaseExpr":
        if not isinstance(other, PhaseExpr):
            other = PhaseExpr.const(other)
        acc = dict(self.terms)
        other._accumulate(acc)
        out = PhaseExpr()
        out.terms = acc
        return out

    __radd__ = __add__

    def __neg__(self) -> "PhaseExpr":
        out = PhaseExpr()
        out.terms = {k: -c for k, c in self.terms.items()}
        return out

    def __sub__(self, other: "PhaseExpr") -> "PhaseExpr":
        if not isinstance(other, PhaseExpr):
            other = PhaseExpr.const(other)
        acc = dict(self.terms)
        other._accumulate(acc, Fraction(-1))
        out = PhaseExpr()
        out.terms = acc
        return out

    def scale(self, c) -> "PhaseExpr":
        c = _coerce(c)
        if not c:
            return PhaseExpr()
        out = PhaseExpr()
        out.terms = {k: v * c for k, v in self.terms.items()}
        return out

    def __mul__(self, other) -> "PhaseExpr":
        if not isinstance(other, PhaseExpr):
            return self.scale(other)
        acc: dict = {}
        for (ya, aa, fa), ca in self.terms.items():
            for (yb, ab, fb), cb in other.terms.items():
                if fa is not None and fb is not None:
                    raise ValueError("product of two profile-dependent expressions")
                key = (_add3(ya, yb), tuple(sorted(aa + ab)), fa if fa is not None else fb)
                v = acc.get(key, 0) + ca * cb
                if v:
                    acc[key] = v
                else:
                    acc.pop(key, None)
        out = PhaseExpr()
        out.terms = acc
        return out

    __rmul__ = __mul__

    # -- calculus ------------------------------------------------------------
    def dy(self, i: int) -> "PhaseExpr":
        """Derivative in the first slot ``y^i``."""
        acc: dict = defaultdict(Fraction)
        for (ya, atoms, fa), c in self.terms.items():
            if ya[i]:
                yb = list(ya)
                yb[i] -= 1
                acc[(tuple(yb), atoms, fa)] += c * ya[i]
            if fa is not None:
                Ix, Ip = fa
                acc[(ya, atoms, (_add3(Ix, _E[i]), Ip))] += c
        return PhaseExpr(acc)

    def dp(self, i: int) -> "PhaseExpr":
        """Derivative in the second slot ``p^i``."""
        acc: dict = defaultdict(Fraction)
        for (ya, atoms, fa), c in self.terms.items():
            for j, at in enumerate(atoms):
                nat = at[:2] + _add3(at[2:], _E[i])
                rest = atoms[:j] + atoms[j + 1:]
                acc[(ya, tuple(sorted(rest + (nat,))), fa)] += c
            if fa is not None:
                Ix, Ip = fa
                acc[(ya, atoms, (Ix, _add3(Ip, _E[i])))] += c
        return PhaseExpr(acc)

    def dp_multi(self, alpha) -> "PhaseExpr":
        out = self
        for i in range(3):
            for _ in range(alpha[i]):
                out = out.dp(i)
        return out

    # -- inspection ----------------------------------------------------------
    def atoms(self) -> set:
        return {a for (_, atoms, _), _c in self.terms.items() for a in atoms}

    def fatoms(self) -> set:
        return {fa for (_, _, fa) in self.terms if fa is not None}

    def ypows(self) -> set:
        return {ya for (ya, _, _) in self.terms}

    def phi_indices(self) -> set:
        return {a[:2] for a in self.atoms()}

    def depends_on_profile(self) -> bool:
        return any(fa is not None for (_, _, fa) in self.terms)

    def max_phi_order(self) -> int:
        return max((sum(a[2:]) for a in self.atoms()), default=0)

    def max_profile_order(self) -> int:
        return max((sum(Ix) + sum(Ip) for Ix, Ip in self.fatoms()), default=0)

    def sorted_items(self):
        return sorted(self.terms.items(), key=lambda kv: _sort_key(kv[0]))

    def dump(self) -> str:
        """Canonical text form, one monomial per line."""
        if not self.terms:
            return "0\n"
        lines = []
        for (ya, atoms, fa), c in self.sorted_items():
            parts = [str(c)]
            if ya != Y0:
                parts.append("y^" + ",".join(map(str, ya)))
            for a in atoms:
                parts.append(f"D{a[2]}{a[3]}{a[4]}phi[{a[0]},{a[1]}]")
            if fa is not None:
                parts.append("Dx{}{}{}Dp{}{}{}f".format(*fa[0], *fa[1]))
            lines.append(" * ".join(parts))
        return "\n".join(lines) + "\n"

    def __repr__(self):
        return f"PhaseExpr({len(self.terms)} terms)"

    # -- integration ---------------------------------------------------------
    def integrate_y(self) -> "MomentExpr":
        """Exact ``∫ · dy`` as a combination of profile moments."""
        if any(fa is None for (_, _, fa) in self.terms):
            raise ValueError("cannot integrate a profile-free expression over y")
        acc: dict = defaultdict(Fraction)
        for (ya, atoms, (Ix, Ip)), c in self.terms.items():
            if any(i > a for i, a in zip(Ix, ya)):
                continue
            beta = (ya[0] - Ix[0], ya[1] - Ix[1], ya[2] - Ix[2])
            w = 1
            for a, i in zip(ya, Ix):
                w *= factorial(a) // factorial(a - i)
            sign = -1 if sum(Ix) % 2 else 1
            acc[(atoms, Ip, beta)] += c * (sign * w)
        return MomentExpr(acc)


def _sort_key(key):
    ya, atoms, fa = key
    return (fa is not None, fa or ((), ()), sum(ya), ya, len(atoms), atoms)


def vec_dot(a, b) -> PhaseExpr:
    out = PhaseExpr()
    for ai, bi in zip(a, b):
        out = out + ai * bi
    return out


def vec_add(a, b):
    return tuple(x + y for x, y in zip(a, b))


def vec_scale(a, c):
    return tuple(x.scale(c) for x in a)


def vec_zero():
    return (PhaseExpr(), PhaseExpr(), PhaseExpr())


def grad_phi(k: int, l: int):
    return tuple(PhaseExpr.phi(k, l, e) for e in _E)


def y_vec():
    return tuple(PhaseExpr.y(i) for i in range(3))


def directional(vectors, k: int, l: int, order: int):
    """``X_1 ⊗ … ⊗ X_m · ∇^{m+1} φ_{k,l}`` as a 3-vector (``m = len(vectors)``).

    ``vectors`` is a list of 3-vectors of expressions; ``order`` = m + 1 is
    checked for consistency.
    """
    if order != len(vectors) + 1:
        raise ValueError("order must equal number of contracted slots + 1")
    # expand sum over index tuples incrementally
    partial = [((0, 0, 0), PhaseExpr.const(1))]
    for X in vectors:
        nxt = []
        for idx, e in partial:
            for i in range(3):
                if X[i]:
                    nxt.append((_add3(idx, _E[i]), e * X[i]))
        partial = nxt
    out = []
    for comp in range(3):
        acc = PhaseExpr()
        for idx, e in partial:
            acc = acc + e * PhaseExpr.phi(k, l, _add3(idx, _E[comp]))
        out.append(acc)
    return tuple(out)


class MomentExpr:
    """Result of ``∫ · dy``: sum of ``c · Π atoms(w) · M_j[β] · ∂^{Ip} v_j(w)``.

    Keys are ``(atoms, Ip, β)``; ``M_j[β] = ∫ y^β u_j(y) dy``.
    """

    __slots__ = ("terms",)

    def __init__(self, terms=None):
        self.terms = {k: c for k, c in (terms or {}).items() if c}

    def __add__(self, other: "MomentExpr") -> "MomentExpr":
        acc = dict(self.terms)
        for k, c in other.terms.items():
            v = acc.get(k, 0) + c
            if v:
                acc[k] = v
            else:
                acc.pop(k, None)
        return MomentExpr(acc)

    def scale(self, c) -> "MomentExpr":
        c = _coerce(c)
        return MomentExpr({k: v * c for k, v in self.terms.items()})

    def __neg__(self):
        return self.scale(-1)

    def __sub__(self, other):
        return self + other.scale(-1)

    def __eq__(self, other):
        return isinstance(other, MomentExpr) and self.terms == other.terms

    def __len__(self):
        return len(self.terms)

    def is_zero(self) -> bool:
        return not self.terms

    def atoms(self) -> set:
        return {a for (atoms, _, _) in self.terms for a in atoms}

    def phi_indices(self) -> set:
        return {a[:2] for a in self.atoms()}

    def max_moment_order(self) -> int:
        return max((sum(b) for (_, _, b) in self.terms), default=0)

    def dump(self) -> str:
        if not self.terms:
            return "0\n"
        lines = []
        for (atoms, Ip, beta), c in sorted(self.terms.items(), key=lambda kv: (kv[0][1], kv[0][2], kv[0][0])):
            parts = [str(c)]
            for a in atoms:
                parts.append(f"D{a[2]}{a[3]}{a[4]}phi[{a[0]},{a[1]}]")
            parts.append("M{}{}{}".format(*beta))
            parts.append("Dp{}{}{}v".format(*Ip))
            lines.append(" * ".join(parts))
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# compiled evaluation


@njit(cache=True)
def _eval_terms(coef, eidx, yidx, aidx, fidx, Y, A, F, out):
    nt = coef.shape[0]
    npts = Y.shape[1]
    na = aidx.shape[1]
    for t in range(nt):
        e = eidx[t]
        yi = yidx[t]
        fi = fidx[t]
        c = coef[t]
        for i in range(npts):
            v = c * Y[yi, i] * F[fi, i]
            for j in range(na):
                a = aidx[t, j]
                if a < 0:
                    break
                v *= A[a, i]
            out[e, i] += v


class CompiledExprs:
    """Several expressions flattened into index arrays for fast evaluation."""

    def __init__(self, exprs):
        self.n = len(exprs)
        ypows, atoms, fatoms = {}, {}, {}
        rows = []
        maxd = 1
        for e_i, e in enumerate(exprs):
            for (ya, at, fa), c in e.sorted_items():
                yi = ypows.setdefault(ya, len(ypows))
                ai = [atoms.setdefault(a, len(atoms)) for a in at]
                fi = fatoms.setdefault(fa, len(fatoms))
                maxd = max(maxd, len(ai))
                rows.append((float(c), e_i, yi, ai, fi))
        self.ypows = list(ypows)
        self.atoms = list(atoms)
        self.fatoms = list(fatoms)
        nt = len(rows)
        self.coef = np.array([r[0] for r in rows], dtype=float)
        self.eidx = np.array([r[1] for r in rows], dtype=np.int64)
        self.yidx = np.array([r[2] for r in rows], dtype=np.int64)
        self.fidx = np.array([r[4] for r in rows], dtype=np.int64)
        self.aidx = -np.ones((nt, maxd), dtype=np.int64)
        for t, r in enumerate(rows):
            self.aidx[t, :len(r[3])] = r[3]

    def evaluate(self, Y, A, F) -> np.ndarray:
        npts = Y.shape[1] if Y.size else 0
        out = np.zeros((self.n, npts))
        if len(self.coef) and npts:
            _eval_terms(self.coef, self.eidx, self.yidx, self.aidx, self.fidx,
                        np.ascontiguousarray(Y), np.ascontiguousarray(A),
                        np.ascontiguousarray(F), out)
        return out


def y_power_rows(ypows, y) -> np.ndarray:
    y = np.atleast_2d(y)
    out = np.empty((len(ypows), len(y)))
    for r, a in enumerate(ypows):
        out[r] = y[:, 0] ** a[0] * y[:, 1] ** a[1] * y[:, 2] ** a[2]
    return out
