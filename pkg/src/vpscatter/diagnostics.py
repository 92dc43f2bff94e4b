"""Rate fitting, energy norms and structured reports.

A decay series ``v_j`` at times ``t_j`` is fitted to

    v ≈ A (log t)^m / t^α

by least squares on ``log v = log A - α log t + m log log t`` with ``m``
frozen.  The joint fit of ``(A, α, m)`` is also available, but over a
decade or two of ``t`` the columns ``log t`` and ``log log t`` are nearly
collinear, so it is flagged ill-conditioned.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy import stats


class DegenerateSeriesError(ValueError):
    pass


@dataclass(frozen=True)
class DecaySeries:
    """Pairs ``(t_j, v_j)`` with ``t`` strictly increasing and ``v >= 0``."""

    t: tuple
    v: tuple
    label: str = ""

    def __post_init__(self):
        t = tuple(float(a) for a in self.t)
        v = tuple(float(a) for a in self.v)
        if len(t) != len(v):
            raise ValueError("t and v differ in length")
        if any(b <= a for a, b in zip(t, t[1:])):
            raise ValueError("t must increase strictly")
        if any(not a >= 0 for a in v):
            raise ValueError("values must be non-negative")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "v", v)

    @classmethod
    def from_pairs(cls, pairs, label: str = "") -> "DecaySeries":
        pairs = sorted(pairs)
        return cls(tuple(a for a, _ in pairs), tuple(b for _, b in pairs), label)

    def __len__(self):
        return len(self.t)


@dataclass(frozen=True)
class RateFit:
    A: float
    alpha: float
    m: float
    alpha_ci: float
    rms: float
    n: int
    dropped: int = 0
    joint: bool = False
    condition: float = 1.0

    @property
    def ill_conditioned(self) -> bool:
        return self.joint

    def predict(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        return self.A * np.log(t) ** self.m / t ** self.alpha

    def within(self, target: float, tol: float) -> bool:
        return bool(np.isfinite(self.alpha) and abs(self.alpha - target) <= tol)


def _usable(series: DecaySeries):
    t = np.asarray(series.t)
    v = np.asarray(series.v)
    keep = v > 0
    dropped = int(np.count_nonzero(~keep))
    t, v = t[keep], v[keep]
    if len(t) < 4:
        raise DegenerateSeriesError(f"{len(t)} usable points; at least 4 are needed")
    if np.any(t <= 1.0):
        raise DegenerateSeriesError("times must exceed 1 for the log-power term")
    return t, v, dropped


def fit_rate(series: DecaySeries, m: float) -> RateFit:
    """Fit ``α`` and ``A`` with the log-power ``m`` frozen."""
    t, v, dropped = _usable(series)
    y = np.log(v) - m * np.log(np.log(t))
    X = np.column_stack([np.ones_like(t), -np.log(t)])
    coef, _, _, sv = np.linalg.lstsq(X, y, rcond=None)
    res = y - X @ coef
    n = len(t)
    dof = n - 2
    rms = float(np.sqrt(np.mean(res ** 2)))
    s2 = float(res @ res) / dof if dof > 0 else 0.0
    cov = s2 * np.linalg.inv(X.T @ X)
    half = float(stats.t.ppf(0.975, dof) * math.sqrt(cov[1, 1])) if dof > 0 else 0.0
    return RateFit(float(np.exp(coef[0])), float(coef[1]), float(m), half, rms, n, dropped,
                   False, float(sv[0] / sv[-1]))


def fit_rate_joint(series: DecaySeries) -> RateFit:
    """Fit ``A``, ``α`` and ``m`` together; reported as ill-conditioned."""
    t, v, dropped = _usable(series)
    y = np.log(v)
    X = np.column_stack([np.ones_like(t), -np.log(t), np.log(np.log(t))])
    coef, _, _, sv = np.linalg.lstsq(X, y, rcond=None)
    res = y - X @ coef
    n = len(t)
    dof = n - 3
    s2 = float(res @ res) / dof if dof > 0 else 0.0
    cov = s2 * np.linalg.pinv(X.T @ X)
    half = float(stats.t.ppf(0.975, dof) * math.sqrt(max(cov[1, 1], 0.0))) if dof > 0 else float("inf")
    return RateFit(float(np.exp(coef[0])), float(coef[1]), float(coef[2]), half,
                   float(np.sqrt(np.mean(res ** 2))), n, dropped, True, float(sv[0] / sv[-1]))


# ---------------------------------------------------------------------------
# energy norms


def _fd_derivative(fn, t, x, p, slot: int, axis: int, h: float):
    e = np.zeros(3)
    e[axis] = h
    if slot == 0:
        return (fn(t, x + e, p) - fn(t, x - e, p)) / (2 * h)
    return (fn(t, x, p + e) - fn(t, x, p - e)) / (2 * h)


def energy_norm(fn, t: float, y, p, dv: float, phi_inf, order: int = 0,
                h: float = 1e-3, grad=None) -> float:
    """Discrete ``L²(dx dp)`` norm of ``Σ_{|I|+|J|<=order} L^I (t^{-1}∂_p)^J g``.

    ``fn(t, x, p)`` is the function; nodes are given in ``(y, p)`` with
    cell volume ``dv`` (the change of variables has unit Jacobian).  Order 1
    uses ``grad(t, x, p) -> (gt, gx, gp)`` when supplied, else central
    differences with step ``h``.  Order 2 is not supported.

    ``L_i = t∂_{x^i} + ∂_{p^i} + (log t/t) ∂_i∂_jφ∞(p) ∂_{p^j}``.
    """
    if order not in (0, 1):
        raise ValueError("order must be 0 or 1")
    y = np.atleast_2d(np.asarray(y, dtype=float))
    p = np.atleast_2d(np.asarray(p, dtype=float))
    x = y + t * p - np.log(t) * phi_inf.gradient(p).T
    g = fn(t, x, p)
    total = float(np.sum(g ** 2))
    if order >= 1:
        if grad is not None:
            _, gx, gp = grad(t, x, p)
        else:
            gx = np.stack([_fd_derivative(fn, t, x, p, 0, a, h) for a in range(3)], axis=1)
            gp = np.stack([_fd_derivative(fn, t, x, p, 1, a, h) for a in range(3)], axis=1)
        H = _hessians(phi_inf, p)
        corr = np.log(t) / t * np.einsum("nij,nj->ni", H, gp)
        L = t * gx + gp + corr
        total += float(np.sum(L ** 2)) + float(np.sum((gp / t) ** 2))
    return math.sqrt(total * dv)


def _hessians(phi_inf, p):
    from .approx import _SECOND, _hessian_from
    return _hessian_from(phi_inf.derivatives(p, _SECOND))


# ---------------------------------------------------------------------------
# reports


@dataclass
class Check:
    name: str
    measured: float
    target: str
    passed: bool
    detail: str = ""


@dataclass
class Report:
    """One structured-text document per experiment."""

    title: str
    config_hash: str
    table_checksum: str
    checks: list = dc_field(default_factory=list)
    series: dict = dc_field(default_factory=dict)
    notes: list = dc_field(default_factory=list)

    def add(self, name: str, measured: float, target: str, passed: bool, detail: str = "") -> Check:
        c = Check(name, float(measured), target, bool(passed), detail)
        self.checks.append(c)
        return c

    def add_rate(self, name: str, fit: RateFit, target: float, tol: float) -> Check:
        detail = (f"A={fit.A:.6g} m={fit.m:g} ci95=±{fit.alpha_ci:.3g} rms={fit.rms:.3g} "
                  f"n={fit.n} dropped={fit.dropped}")
        return self.add(name, fit.alpha, f"alpha = {target:g} ± {tol:g}", fit.within(target, tol), detail)

    def add_joint(self, name: str, fit: RateFit) -> None:
        self.notes.append(f"{name}: joint fit alpha={fit.alpha:.4f} m={fit.m:.3f} "
                          f"cond={fit.condition:.3g} [ill-conditioned]")

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def render(self) -> str:
        cite = f"[config {self.config_hash[:12]} table {self.table_checksum[:12]}]"
        lines = [f"# {self.title}", f"config_hash: {self.config_hash}",
                 f"table_checksum: {self.table_checksum}", ""]
        for c in self.checks:
            status = "PASS" if c.passed else "FAIL"
            line = f"{status}  {c.name}: measured {c.measured:.6g}; expected {c.target}"
            if c.detail:
                line += f"; {c.detail}"
            lines.append(f"{line} {cite}")
        if self.notes:
            lines.append("")
            lines.extend(f"note: {n} {cite}" for n in self.notes)
        for name, s in self.series.items():
            lines.append("")
            lines.append(f"series {name}:")
            lines.extend(f"  {t!r} {v!r}" for t, v in zip(s.t, s.v))
        lines.append("")
        lines.append(f"overall: {'PASS' if self.passed else 'FAIL'} {cite}")
        return "\n".join(lines) + "\n"
