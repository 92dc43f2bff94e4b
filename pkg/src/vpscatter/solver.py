"""Backward-in-time solve of the finite problem with a δf particle method.

The final data at ``T_f`` is the approximate solution ``f_[K](T_f)``.  Each
particle carries the constant value ``f_i`` of its seeded phase-space cell
and a Liouville volume ``dv_i``; the field is split as

    ∇φ = ∇φ_[K] + ∇ψ_mis + ∇φ̌,

where ``∇φ_[K]`` and the mismatch potential ``ψ_mis`` (the potential of
``-σ∫f_[K]dp - ρ_[K]`` expanded to two further orders) are analytic
background fields, and ``φ̌`` is the potential of the particle remainder
``-σ Σ (f_i - f_[K](t, z_i)) dv_i S(x - x_i)`` deposited with a TSC kernel.
Only the remainder passes through the particle noise, so the measured
``f̌_[K]`` is not swamped by sampling error of ``f_[K]`` itself.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.stats import qmc

from . import _kernels
from .approx import ApproxSolution, _FIRST, layer_weights
from .expansion import (CoefficientTable, apply_H_series, build_jacobian_series,
                        build_p_series)
from .fields import Field3, Grid3, TensorSpline
from .phaseexpr import PhaseExpr
from .poisson import solve_free_space

DEFAULT_T0 = 20.0
DEFAULT_TF = 640.0
DEFAULT_DT = 0.25
DEFAULT_PARTICLES = 200_000
DEFAULT_GRID_N = 64
DEFAULT_REFRESH_FRACTION = 0.04
DEFAULT_SUPPORT_PAD = 1.1


class CFLViolationError(RuntimeError):
    pass


class CharacteristicExitError(RuntimeError):
    pass


class ParticleEscapeWarning(RuntimeWarning):
    pass


# ---------------------------------------------------------------------------
# particles


@dataclass
class ParticleEnsemble:
    """Positions, momenta and constant weights ``w = f·dv`` at time ``t``."""

    x: np.ndarray
    p: np.ndarray
    w: np.ndarray
    dv: np.ndarray
    t: float

    @classmethod
    def empty(cls, t: float) -> "ParticleEnsemble":
        z = np.zeros((0, 3))
        return cls(z, z.copy(), np.zeros(0), np.zeros(0), float(t))

    @property
    def count(self) -> int:
        return len(self.w)

    @property
    def mass(self) -> float:
        return float(math.fsum(self.w))

    @property
    def f(self) -> np.ndarray:
        """Transported phase-space values ``f_i = w_i/dv_i``."""
        out = np.zeros_like(self.w)
        nz = self.dv > 0
        out[nz] = self.w[nz] / self.dv[nz]
        return out

    def copy(self) -> "ParticleEnsemble":
        return ParticleEnsemble(self.x.copy(), self.p.copy(), self.w.copy(), self.dv.copy(), self.t)


def _support_balls(table: CoefficientTable, pad: float):
    prof = table.profile
    yb = [(np.asarray(u.center), u.radius * pad) for _, u, _ in prof.terms]
    pb = [(np.asarray(v.center), v.radius * pad) for _, _, v in prof.terms]
    return yb, pb


def _inside_union(pts, balls) -> np.ndarray:
    keep = np.zeros(len(pts), dtype=bool)
    for c, r in balls:
        keep |= np.linalg.norm(pts - c, axis=1) < r
    return keep


def _box(balls):
    lo = np.min([c - r for c, r in balls], axis=0)
    hi = np.max([c + r for c, r in balls], axis=0)
    return lo, hi


def _cell_centres(lo, hi, n):
    axes = [lo[i] + (np.arange(n) + 0.5) * (hi[i] - lo[i]) / n for i in range(3)]
    m = np.meshgrid(*axes, indexing="ij")
    return np.stack([a.ravel() for a in m], axis=1), float(np.prod((hi - lo) / n))


def lattice_sizes(table: CoefficientTable, M: int, pad: float = DEFAULT_SUPPORT_PAD):
    """``(n_y, n_p)`` with the fewest kept lattice cells that still reach ``M``."""
    yb, pb = _support_balls(table, pad)
    ylo, yhi = _box(yb)
    plo, phi = _box(pb)

    def kept(balls, lo, hi, n):
        pts, _ = _cell_centres(lo, hi, n)
        return int(np.count_nonzero(_inside_union(pts, balls)))

    best = None
    cache_y, cache_p = {}, {}
    n0 = max(2, int((M / 0.5) ** (1 / 6)) - 2)
    for ny in range(n0, n0 + 6):
        cache_y[ny] = kept(yb, ylo, yhi, ny)
        for npp in range(n0, n0 + 6):
            if npp not in cache_p:
                cache_p[npp] = kept(pb, plo, phi, npp)
            total = cache_y[ny] * cache_p[npp]
            if total >= M and (best is None or total < best[0]):
                best = (total, ny, npp)
    if best is None:
        raise ValueError("lattice search failed; M too large for the search window")
    return best[1], best[2]


def init_final_data(table: CoefficientTable, T_f: float, M: int, seeding: str = "stratified",
                    K: int | None = None, seed: int = 0, pad: float = DEFAULT_SUPPORT_PAD,
                    sol: ApproxSolution | None = None) -> ParticleEnsemble:
    """Sample ``f_[K](T_f)`` on the ``(y, p)`` support.

    Particles sit at lattice cell centres (``stratified``) or scrambled Sobol
    points (``quasirandom``) inside the support balls enlarged by ``pad``;
    ``x = y + T_f p - log T_f ∇φ∞(p)``.  The map ``(y, p) -> (x, p)`` has unit
    Jacobian, so the phase-space volume of a ``(y, p)`` cell is ``dv``.
    """
    if M < 10_000:
        raise ValueError("M must be at least 1e4")
    if table.profile.is_zero:
        return ParticleEnsemble.empty(T_f)
    sol = sol or ApproxSolution(table, K)
    yb, pb = _support_balls(table, pad)
    ylo, yhi = _box(yb)
    plo, phi = _box(pb)
    if seeding == "stratified":
        ny, npp = lattice_sizes(table, M, pad)
        ys, vy = _cell_centres(ylo, yhi, ny)
        ps, vp = _cell_centres(plo, phi, npp)
        ys = ys[_inside_union(ys, yb)]
        ps = ps[_inside_union(ps, pb)]
        y = np.repeat(ys, len(ps), axis=0)
        p = np.tile(ps, (len(ys), 1))
        dv = np.full(len(y), vy * vp)
    elif seeding == "quasirandom":
        vol = float(np.prod(yhi - ylo) * np.prod(phi - plo))
        m = int(np.ceil(np.log2(M / 0.2)))
        u = qmc.Sobol(6, scramble=True, seed=seed).random_base2(m)
        y = ylo + u[:, :3] * (yhi - ylo)
        p = plo + u[:, 3:] * (phi - plo)
        keep = _inside_union(y, yb) & _inside_union(p, pb)
        y, p = y[keep], p[keep]
        dv = np.full(len(y), vol / len(u))
    else:
        raise ValueError(f"unknown seeding {seeding!r}")
    x = y + T_f * p - np.log(T_f) * sol.phi_inf.gradient(p).T
    f = np.zeros(len(y))
    live = sol._live(y, p)
    f[live] = sol.eval_f_yp(T_f, y[live], p[live])
    return ParticleEnsemble(x, p, f * dv, dv, float(T_f))


def deposit_density(ens: ParticleEnsemble, grid: Grid3, sigma: int = 1,
                    weights: np.ndarray | None = None) -> Field3:
    """TSC charge assignment of ``-σ w`` per particle, divided by the cell volume."""
    w = ens.w if weights is None else np.asarray(weights, dtype=float)
    out = np.zeros((grid.n,) * 3)
    if len(w):
        _kernels.tsc_deposit(np.ascontiguousarray(ens.x), np.ascontiguousarray(-sigma * w),
                             np.asarray(grid.origin), grid.spacing, grid.n, out)
    return Field3(grid, out / grid.cell_volume)


def _escaped(x, grid: Grid3, cells: float = 2.0) -> np.ndarray:
    lo = np.asarray(grid.origin) + cells * grid.spacing
    hi = grid.upper - cells * grid.spacing
    return np.any((x < lo) | (x > hi), axis=1)


def step_backward(ens: ParticleEnsemble, field, dt: float, grid: Grid3 | None = None,
                  t_end: float | None = None) -> ParticleEnsemble:
    """Kick-drift-kick leapfrog in place; ``field(t, x)`` returns ``(3, npts)``.

    Also used with ``dt > 0`` by the forward tracer; the scheme is symmetric,
    so a forward step undoes a backward one up to rounding.
    """
    t0 = ens.t
    t1 = t0 + dt if t_end is None else float(t_end)
    if ens.count:
        _kernels.kdk_kick(ens.p, field(t0, ens.x), 0.5 * dt)
        _kernels.kdk_drift(ens.x, ens.p, dt)
        _kernels.kdk_kick(ens.p, field(t1, ens.x), 0.5 * dt)
        if not np.all(np.isfinite(ens.x)):
            raise FloatingPointError("non-finite particle position")
        if grid is not None and np.any(_escaped(ens.x, grid)):
            warnings.warn("particles left the deposition box", ParticleEscapeWarning, stacklevel=2)
    ens.t = t1
    return ens


# ---------------------------------------------------------------------------
# background field


def mismatch_density_exprs(table: CoefficientTable, K: int, extra: int) -> dict:
    """Moment expressions of the expansion of ``-σ∫f_[K]dp - ρ_[K]``.

    The ``(k, l)`` coefficient for ``K < k <= K + extra`` is
    ``∫ Σ_{k1<=K} H_{k2,l2}[f_{k1,l1}] J_{k3,l3} dy`` (σ excluded); for
    ``k <= K`` the expansion agrees with ``ρ_[K]`` by construction.
    """
    top = K + extra
    if extra <= 0 or table.profile.is_zero:
        return {}
    pser = build_p_series(top)
    jser = build_jacobian_series(top, pser)
    H = {(k1, l1): apply_H_series(table.f[(k1, l1)], top - k1, pser)
         for k1 in range(K + 1) for l1 in range(k1 + 1)}
    out = {}
    for k in range(K + 1, top + 1):
        for l in range(k + 1):
            acc = PhaseExpr()
            for (k1, l1), Hs in H.items():
                for (k2, l2), h in Hs.items():
                    k3, l3 = k - k1 - k2, l - l1 - l2
                    j = jser.get((k3, l3))
                    if k3 < 0 or l3 < 0 or j is None:
                        continue
                    acc = acc + h * j
            out[(k, l)] = acc.integrate_y()
    return out


class BackgroundField:
    """``t^{-2} Σ (log t)^l t^{-k} ∇φ_{k,l}(x/t)`` for ``k <= K + extra``.

    Orders above ``K`` use the mismatch potentials.  Gradients are sampled
    once on a fine ``w``-grid and interpolated tricubically; outside the box
    the monopole of each coefficient is used.
    """

    def __init__(self, table: CoefficientTable, K: int, extra: int = 2, n_fine: int = 96):
        self.table = table
        self.K = K
        self.extra = extra if not table.profile.is_zero else 0
        self.keys = [(k, l) for k in range(K + 1) for l in range(k + 1)]
        g = table.grid
        self.mismatch_exprs = mismatch_density_exprs(table, K, self.extra)
        splines = {kl: table.splines[kl] for kl in self.keys}
        masses = {kl: float(np.sum(g.trapezoid_weights() * table.rho[kl].values)) for kl in self.keys}
        pts = g.points()
        live = np.linalg.norm(pts, axis=1) <= table.profile.p_extent + 1e-12
        ctx = table.context
        for kl, m in sorted(self.mismatch_exprs.items()):
            vals = np.zeros(len(pts))
            if not m.is_zero():
                vals[live] = table.sigma * ctx.evaluate_moments([m], pts[live])[0]
            rho = Field3(g, vals.reshape((g.n,) * 3))
            phi, _ = solve_free_space(rho)
            splines[kl] = TensorSpline.fit(phi, table.degree)
            masses[kl] = float(np.sum(g.trapezoid_weights() * vals.reshape((g.n,) * 3)))
            self.keys.append(kl)
        self.masses = masses
        lo = np.asarray(g.origin)
        span = g.spacing * (g.n - 1)
        self.fine = Grid3(n_fine, tuple(lo), span / (n_fine - 1))
        fpts = self.fine.points()
        # rows: one coefficient each, node-major with the 3 components last
        stack = np.empty((len(self.keys), n_fine ** 3 * 3))
        for r, kl in enumerate(self.keys):
            d = splines[kl].derivatives(fpts, _FIRST)
            stack[r] = d.T.ravel()
        self._stack = stack
        self._shape = (n_fine,) * 3 + (3,)
        self._cache: dict = {}

    def weights(self, t: float) -> dict:
        a, _ = layer_weights(t, self.K + self.extra)
        return {kl: a[kl] for kl in self.keys}

    def gradient_nodes(self, kl) -> np.ndarray:
        """``∇φ_{k,l}`` on the fine grid, shape ``(n, n, n, 3)``."""
        return self._stack[self.keys.index(kl)].reshape(self._shape)

    def combined(self, t: float) -> np.ndarray:
        key = round(t, 9)
        if key not in self._cache:
            a = self.weights(t)
            coef = np.array([a[kl] for kl in self.keys])
            if len(self._cache) >= 2:
                self._cache.pop(next(iter(self._cache)))
            self._cache[key] = (coef @ self._stack).reshape(self._shape)
        return self._cache[key]

    def __call__(self, t: float, x) -> np.ndarray:
        x = np.ascontiguousarray(np.atleast_2d(x), dtype=float)
        w = x / t
        out = np.zeros((3, len(w)))
        if not len(w) or self.table.profile.is_zero:
            return out
        inside = np.empty(len(w), dtype=np.bool_)
        g = self.fine
        _kernels.cubic_gather(w, self.combined(t), np.asarray(g.origin), g.spacing, g.n, out, inside)
        if not np.all(inside):
            a = self.weights(t)
            m = sum(a[kl] * self.masses[kl] for kl in self.keys)
            wo = w[~inside]
            r = np.linalg.norm(wo, axis=1)
            out[:, ~inside] = (m * wo / (4.0 * np.pi * r[:, None] ** 3)).T
        return out / t ** 2

    def leading(self, t: float, x) -> np.ndarray:
        """``t^{-2}∇φ∞(x/t)`` only."""
        x = np.ascontiguousarray(np.atleast_2d(x), dtype=float)
        w = x / t
        out = np.zeros((3, len(w)))
        if not len(w) or self.table.profile.is_zero:
            return out
        inside = np.empty(len(w), dtype=np.bool_)
        g = self.fine
        _kernels.cubic_gather(w, self.gradient_nodes((0, 0)), np.asarray(g.origin), g.spacing, g.n, out, inside)
        if not np.all(inside):
            wo = w[~inside]
            r = np.linalg.norm(wo, axis=1)
            out[:, ~inside] = (self.masses[(0, 0)] * wo / (4.0 * np.pi * r[:, None] ** 3)).T
        return out / t ** 2


class ZeroField:
    def __call__(self, t, x):
        return np.zeros((3, len(np.atleast_2d(x))))

    leading = __call__


# ---------------------------------------------------------------------------
# field history


@dataclass
class HistoryEntry:
    """``∇φ̌`` (float32 nodes) computed at ``t`` and held until the next refresh."""

    t: float
    grid: Grid3
    grad: np.ndarray
    rho: np.ndarray | None = None


@dataclass
class FieldHistory:
    """Background plus the remainder field at the refresh times.

    Entries are stored with strictly decreasing ``t``.  The field used on
    ``[t_{j+1}, t_j)`` is the one computed at ``t_j``; ``mode="interpolate"``
    instead blends neighbouring entries linearly in ``1/t``.
    """

    background: object
    T0: float
    T_f: float
    entries: list = dc_field(default_factory=list)
    mode: str = "held"

    def add(self, entry: HistoryEntry) -> None:
        if self.entries and not entry.t < self.entries[-1].t:
            raise ValueError("history times must decrease strictly")
        self.entries.append(entry)

    @property
    def times(self) -> np.ndarray:
        return np.array([e.t for e in self.entries])

    def _index(self, t: float) -> int:
        """Entry active on the backward step that ends at ``t``."""
        ts = self.times
        j = int(np.searchsorted(-ts, -t, side="right")) - 1
        return max(j, 0)

    def remainder_field(self, t: float, x, index: int | None = None) -> np.ndarray:
        out = np.zeros((3, len(x)))
        if not self.entries:
            return out
        j = self._index(t) if index is None else index
        if self.mode == "held" or j + 1 >= len(self.entries) or index is not None:
            return _gather(self.entries[j], x)
        a, b = self.entries[j], self.entries[j + 1]
        lam = (1.0 / t - 1.0 / a.t) / (1.0 / b.t - 1.0 / a.t)
        return (1 - lam) * _gather(a, x) + lam * _gather(b, x)

    def field(self, t: float, x, index: int | None = None) -> np.ndarray:
        return self.background(t, x) + self.remainder_field(t, x, index)

    def entry_for_step(self, t_lo: float, t_hi: float) -> int:
        """Entry used by the backward step from ``t_hi`` to ``t_lo``."""
        if t_hi > self.T_f + 1e-9 or t_lo < self.T0 - 1e-9:
            raise CharacteristicExitError(f"step [{t_lo}, {t_hi}] outside the stored range")
        ts = self.times
        # the last refresh at or above t_hi
        j = int(np.searchsorted(-ts, -t_hi * (1 - 1e-12), side="right")) - 1
        return max(j, 0)


def _gather(entry: HistoryEntry, x) -> np.ndarray:
    x = np.ascontiguousarray(np.atleast_2d(x), dtype=float)
    out = np.zeros((3, len(x)))
    g = entry.grid
    _kernels.tsc_gather(x, entry.grad, np.asarray(g.origin), g.spacing, g.n, out)
    return out


# ---------------------------------------------------------------------------
# the run


@dataclass
class FiniteRun:
    table: CoefficientTable
    K: int
    T0: float
    T_f: float
    dt: float
    history: FieldHistory
    snapshots: dict
    initial: ParticleEnsemble
    series: dict
    params: dict
    sol: ApproxSolution

    @property
    def times(self) -> list:
        return sorted(self.snapshots)


def step_times(T0: float, T_f: float, dt: float) -> np.ndarray:
    """Exact step times from ``T_f`` down to ``T0`` (inclusive)."""
    n = int(round((T_f - T0) / abs(dt)))
    if not math.isclose(T_f - n * abs(dt), T0, rel_tol=0, abs_tol=1e-9):
        raise ValueError("T_f - T0 must be a multiple of |dt|")
    return T_f - abs(dt) * np.arange(n + 1)


def refresh_schedule(times: np.ndarray, fraction: float) -> np.ndarray:
    """Boolean mask over step times: refresh when ``t`` has dropped by
    ``fraction·t`` since the last refresh (always at ``T_f``)."""
    mask = np.zeros(len(times), dtype=bool)
    mask[0] = True
    last = times[0]
    for i, t in enumerate(times):
        if last - t >= fraction * last - 1e-12:
            mask[i] = True
            last = t
    return mask


def _deposition_grid(x, n: int, pad: float = 1.1) -> Grid3:
    r = float(np.max(np.linalg.norm(x, axis=1), initial=1.0))
    return Grid3.centered(n, pad * r, margin_cells=4)


def run_finite_problem(table: CoefficientTable, T0: float = DEFAULT_T0, T_f: float = DEFAULT_TF,
                       dt: float = -DEFAULT_DT, M: int = DEFAULT_PARTICLES, K: int | None = None,
                       n_grid: int = DEFAULT_GRID_N, seeding: str = "stratified", seed: int = 0,
                       output_times=(), refresh_fraction: float = DEFAULT_REFRESH_FRACTION,
                       extra_orders: int = 2, n_fine: int = 96, min_T0: float = 1.0,
                       scale: float = 1.0, background=None, initial=None,
                       keep_rho: bool = False, self_consistent: bool = True,
                       progress=None) -> FiniteRun:
    """Solve backward from ``T_f`` to ``T0``.

    The remainder potential is refreshed on the schedule of
    :func:`refresh_schedule` and held in between; the relative change of
    ``∇φ̌`` at each refresh is recorded as the self-consistency defect.
    ``scale`` multiplies the final data (for perturbation probes).  With
    ``self_consistent=False`` the remainder field is dropped, which isolates
    the transport of the approximate solution's own residual.
    """
    if dt >= 0:
        raise ValueError("dt must be negative")
    if T0 < min_T0 or not T0 < T_f:
        raise ValueError("need min_T0 <= T0 < T_f")
    K = table.K if K is None else K
    sol = ApproxSolution(table, K)
    times = step_times(T0, T_f, dt)
    refresh = refresh_schedule(times, refresh_fraction)
    outs = sorted({float(times[np.argmin(np.abs(times - t))]) for t in output_times} | {float(T_f), float(T0)})
    if initial is None:
        ens = init_final_data(table, T_f, M, seeding, K, seed, sol=sol)
    else:
        ens = initial.copy()
    if scale != 1.0:
        ens.w = ens.w * scale
    init_copy = ens.copy()
    zero = table.profile.is_zero
    if background is None:
        background = ZeroField() if zero else BackgroundField(table, K, extra_orders, n_fine)
    history = FieldHistory(background, float(T0), float(T_f))
    series = {k: [] for k in ("t", "mass", "defect", "bootstrap", "support_y", "max_p",
                              "remainder_rms_particles")}
    snapshots = {}
    grid = None
    regrid_at = T_f
    current = None
    sig = table.sigma
    for i, t in enumerate(times):
        t = float(t)
        ens.t = t
        if refresh[i]:
            if grid is None or t <= regrid_at + 1e-9:
                grid = _deposition_grid(ens.x, n_grid) if ens.count else Grid3.centered(n_grid, t)
                regrid_at = t / math.sqrt(2.0)
            fK = sol.eval_fK(t, ens.x, ens.p) if ens.count else np.zeros(0)
            dw = ens.w - fK * ens.dv
            rho = deposit_density(ens, grid, sig, weights=dw)
            if zero or not self_consistent or not np.any(dw):
                grad = np.zeros((3,) + (grid.n,) * 3, dtype=np.float32)
            else:
                _, g = solve_free_space(rho)
                grad = g.stacked().astype(np.float32)
            entry = HistoryEntry(t, grid, np.ascontiguousarray(grad),
                                 rho.values.astype(np.float32) if keep_rho else None)
            new = _gather(entry, ens.x)
            if current is not None and ens.count:
                old = _gather(current, ens.x)
                nrm = float(np.sqrt(np.mean(np.sum(new ** 2, axis=0))))
                defect = float(np.sqrt(np.mean(np.sum((new - old) ** 2, axis=0)))) / nrm if nrm > 0 else 0.0
            else:
                defect = 0.0
            history.add(entry)
            current = entry
            _record(series, t, ens, sol, background, new, fK, defect)
            _check_cfl(ens, grid, t, dt)
            if progress is not None:
                progress(t, series)
        if any(math.isclose(t, o, abs_tol=1e-9) for o in outs):
            snapshots[t] = ens.copy()
        if i + 1 == len(times):
            break
        j = len(history.entries) - 1

        def fld(tt, xx, j=j):
            return history.field(tt, xx, index=j)

        step_backward(ens, fld, float(times[i + 1]) - t, grid, t_end=float(times[i + 1]))
    params = {"K": K, "T0": T0, "T_f": T_f, "dt": dt, "M": init_copy.count, "M_requested": M,
              "n_grid": n_grid, "seeding": seeding, "seed": seed,
              "refresh_fraction": refresh_fraction, "extra_orders": extra_orders,
              "n_fine": n_fine, "scale": scale, "refreshes": len(history.entries)}
    return FiniteRun(table, K, float(T0), float(T_f), dt, history, snapshots, init_copy,
                     {k: np.asarray(v) for k, v in series.items()}, params, sol)


def _record(series, t, ens, sol, background, rem_field, fK, defect):
    series["t"].append(t)
    series["mass"].append(ens.mass)
    series["defect"].append(defect)
    if ens.count:
        total = background(t, ens.x) + rem_field
        lead = background.leading(t, ens.x)
        series["bootstrap"].append(float(np.max(np.linalg.norm(total - lead, axis=0))))
        y = sol.y_map(t, ens.x, ens.p)
        occupied = ens.w != 0
        series["support_y"].append(float(np.max(np.linalg.norm(y[occupied], axis=1), initial=0.0)))
        series["max_p"].append(float(np.max(np.linalg.norm(ens.p[occupied], axis=1), initial=0.0)))
        fi = ens.f
        series["remainder_rms_particles"].append(float(np.sqrt(np.mean((fi - fK) ** 2))))
    else:
        for k in ("bootstrap", "support_y", "max_p", "remainder_rms_particles"):
            series[k].append(0.0)


def _check_cfl(ens, grid, t, dt):
    if not ens.count:
        return
    vmax = float(np.max(np.linalg.norm(ens.p, axis=1)))
    if vmax > 0 and abs(dt) * vmax > grid.spacing:
        raise CFLViolationError(f"|dt| v_max = {abs(dt) * vmax:.3g} exceeds the cell size "
                                f"{grid.spacing:.3g} at t = {t}")


# ---------------------------------------------------------------------------
# measurements


def trace_forward(run: FiniteRun, t: float, x, p, to: float | None = None):
    """Push ``(x, p)`` from ``t`` forward to ``to`` (default ``T_f``) with
    the stored fields, reversing the run's own steps."""
    to = run.T_f if to is None else to
    times = step_times(run.T0, run.T_f, run.dt)[::-1]
    i0 = int(np.argmin(np.abs(times - t)))
    if not math.isclose(times[i0], t, abs_tol=1e-9):
        raise CharacteristicExitError(f"t = {t} is not a step time of the run")
    i1 = int(np.argmin(np.abs(times - to)))
    ens = ParticleEnsemble(np.array(x, dtype=float, copy=True), np.array(p, dtype=float, copy=True),
                           np.zeros(len(x)), np.zeros(len(x)), float(t))
    hist = run.history
    for i in range(i0, i1):
        lo, hi = float(times[i]), float(times[i + 1])
        j = hist.entry_for_step(lo, hi)

        def fld(tt, xx, j=j):
            return hist.field(tt, xx, index=j)

        ens.t = lo
        step_backward(ens, fld, hi - lo, t_end=hi)
    return ens.x, ens.p


def support_samples(run: FiniteRun, t: float, n: int, seed: int = 0):
    """Random ``(x, p)`` at time ``t`` with ``(y, p)`` in the support of ``f_[K]``."""
    rng = np.random.default_rng(seed)
    yb, pb = _support_balls(run.table, 1.0)
    out_y, out_p = [], []
    while sum(len(a) for a in out_y) < n:
        ylo, yhi = _box(yb)
        plo, phi = _box(pb)
        y = rng.uniform(ylo, yhi, size=(4 * n, 3))
        p = rng.uniform(plo, phi, size=(4 * n, 3))
        keep = _inside_union(y, yb) & _inside_union(p, pb)
        out_y.append(y[keep])
        out_p.append(p[keep])
    y = np.concatenate(out_y)[:n]
    p = np.concatenate(out_p)[:n]
    x = y + t * p - np.log(t) * run.sol.phi_inf.gradient(p).T
    return x, p


@dataclass
class RemainderStats:
    t: float
    sup: float
    l2: float
    count: int
    particle_sup: float


def eval_remainder(run: FiniteRun, t: float, samples=None, n_samples: int = 2000,
                   seed: int = 0) -> RemainderStats:
    """``f̌_[K](t) = f(t) - f_[K](t)`` at sample points, ``f`` read off at
    ``T_f`` along the forward characteristic."""
    if samples is None:
        if run.table.profile.is_zero:
            return RemainderStats(t, 0.0, 0.0, 0, 0.0)
        samples = support_samples(run, t, n_samples, seed)
    x, p = samples
    fK_t = run.sol.eval_fK(t, x, p)
    X, P = trace_forward(run, t, x, p)
    f = run.sol.eval_fK(run.T_f, X, P) * run.params.get("scale", 1.0)
    rem = f - fK_t
    snap = run.snapshots.get(t)
    psup = 0.0
    if snap is not None and snap.count:
        psup = float(np.max(np.abs(snap.f - run.sol.eval_fK(t, snap.x, snap.p))))
    return RemainderStats(t, float(np.max(np.abs(rem), initial=0.0)),
                          float(np.sqrt(np.mean(rem ** 2))) if len(rem) else 0.0, len(rem), psup)


def traced_values(run: FiniteRun, t: float, x, p) -> np.ndarray:
    """``f(t, x, p)`` by constancy along characteristics."""
    X, P = trace_forward(run, t, x, p)
    return run.sol.eval_fK(run.T_f, X, P) * run.params.get("scale", 1.0)


def check_scattering_convergence(run: FiniteRun, times, n_samples: int = 2000, seed: int = 0):
    """``sup |f(t, x + tp - log t ∇φ∞(p), p) - f∞(x, p)|`` over support samples."""
    prof = run.table.profile
    out = []
    if prof.is_zero:
        return [(float(t), 0.0) for t in times]
    rng = np.random.default_rng(seed)
    yb, pb = _support_balls(run.table, 1.0)
    ylo, yhi = _box(yb)
    plo, phi = _box(pb)
    y = rng.uniform(ylo, yhi, size=(8 * n_samples, 3))
    p = rng.uniform(plo, phi, size=(8 * n_samples, 3))
    keep = _inside_union(y, yb) & _inside_union(p, pb)
    y, p = y[keep][:n_samples], p[keep][:n_samples]
    finf = prof(y, p)
    grad_inf = run.sol.phi_inf.gradient(p).T
    for t in times:
        x = y + t * p - np.log(t) * grad_inf
        f = traced_values(run, float(t), x, p)
        out.append((float(t), float(np.max(np.abs(f - finf)))))
    return out


@dataclass
class UniquenessReport:
    epsilons: list
    differences: list
    ratios: list
    spread: float
    gronwall_c: float

    @property
    def stable(self) -> bool:
        return self.spread <= 0.2


def uniqueness_probe(table: CoefficientTable, T0: float, T_f: float, epsilons=(1e-4, 1e-3),
                     base: FiniteRun | None = None, n_samples: int = 1000, sample_seed: int = 0,
                     **run_kw) -> UniquenessReport:
    """Compare the run with final data ``(1+ε) f_[K](T_f)`` against the base run.

    The difference ``‖f_ε(T0) - f_0(T0)‖_∞`` is measured at common sample
    points by tracing each run's characteristics.
    """
    for e in epsilons:
        if e != 0 and not 1e-6 <= e <= 1e-2:
            raise ValueError("epsilon must lie in [1e-6, 1e-2]")
    if base is None:
        base = run_finite_problem(table, T0, T_f, **run_kw)
    if table.profile.is_zero:
        return UniquenessReport(list(epsilons), [0.0] * len(epsilons), [0.0] * len(epsilons), 0.0, 0.0)
    samples = support_samples(base, T0, n_samples, sample_seed)
    f0 = traced_values(base, T0, *samples)
    diffs, ratios = [], []
    for e in epsilons:
        if e == 0:
            diffs.append(0.0)
            ratios.append(0.0)
            continue
        run = run_finite_problem(table, T0, T_f, initial=base.initial, scale=1.0 + e,
                                 background=base.history.background, **run_kw)
        fe = traced_values(run, T0, *samples)
        d = float(np.max(np.abs(fe - f0)))
        diffs.append(d)
        ratios.append(d / e)
    nz = [r for r in ratios if r > 0]
    spread = (max(nz) - min(nz)) / min(nz) if len(nz) > 1 else 0.0
    ref = float(np.max(np.abs(f0))) or 1.0
    c = float(np.log(max(max(nz, default=ref) / ref, 1e-300)) / np.log(T_f / T0)) if nz else 0.0
    return UniquenessReport(list(epsilons), diffs, ratios, spread, c)
