"""Command-line driver: configuration, experiments and output persistence.

Subcommands
-----------
build-expansion      build the coefficient table and check the closed forms
verify-residuals     decay rates of the Vlasov residual, density mismatch and
                     the ∇φ expansion gap
run-finite-problem   backward particle solve, remainder and scattering series
emit-plots           long-format CSVs for plotting (no rendering)

Every subcommand takes ``--config PATH --out DIR --threads N
--deterministic``.  Exit codes: 0 all checks pass, 2 a check failed,
1 execution error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .approx import ApproxSolution, emit_trajectories
from .diagnostics import DecaySeries, Report, fit_rate, fit_rate_joint
from .expansion import build_table, read_table, table_checksum, write_table
from .fields import Field3, write_snapshot
from .oracles import closed_form_checks, rho11_grid_gap
from .poisson import solve_free_space
from .profile import ScatteringProfile, default_base_grid, gaussian_bump_profile

log = logging.getLogger("vpscatter")

EXIT_PASS, EXIT_ERROR, EXIT_FAIL = 0, 1, 2

DEFAULT_CONFIG = {
    "profile": {
        "family": "gaussian_bump",
        "amplitude": 100.0,
        "support_radius": 1.0,
        "x_center": [0.05, -0.03, 0.02],
        "p_center": [0.04, 0.02, -0.05],
        "x_radius": 0.42,
        "p_radius": 0.42,
        "x_sigma": [0.2, 0.25, 0.3],
        "p_sigma": [0.25, 0.2, 0.3],
    },
    "table": {"K": 2, "n": 64, "degree": 7, "sigma": 1, "printed_top_order": False},
    "checks": {"closed_form_points": 1000, "closed_form_tol": 1e-6, "seed": 0},
    "residuals": {
        "K": [0, 1, 2],
        "gap_K": [0, 1],
        "times": [50.0, 100.0, 200.0, 400.0, 800.0],
        "samples": 200,
        "sample_halfwidth": 0.3,
        "density_points": 6,
        "density_halfwidth": 0.25,
        "density_nodes": 48,
        "seed": 1,
        "tol_vlasov": 0.25,
        "tol_density": 0.3,
        "tol_gap": 0.3,
    },
    "run": {
        "K": 1,
        "T0": 20.0,
        "T_f": 640.0,
        "dt": -0.25,
        "M": 200000,
        "n_grid": 64,
        "n_fine": 96,
        "seeding": "stratified",
        "seed": 0,
        "refresh_fraction": 0.04,
        "extra_orders": 2,
        "measure_times": [20.0, 40.0, 80.0, 160.0, 320.0],
        "scattering_times": [20.0, 40.0, 80.0, 160.0, 320.0, 640.0],
        "samples": 2000,
        "snapshot_times": [20.0, 80.0, 320.0],
        "remainder_alpha": 2.0,
        "remainder_m": 2,
        "remainder_tol": 0.4,
        "scattering_alpha": 1.0,
        "scattering_m": 2,
        "scattering_tol": 0.3,
        "bootstrap_power": 2.5,
        "mass_tol": 1e-12,
        "uniqueness": {"enabled": False, "epsilons": [1e-4, 1e-3], "samples": 1000, "tol": 0.2},
    },
    "plots": {"trajectory_samples": 16, "trajectory_times": [1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0, 200.0],
              "seed": 3},
    "threads": 1,
}


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, exc: BaseException):
        super().__init__(f"[{stage}] {type(exc).__name__}: {exc}")
        self.stage = stage


# ---------------------------------------------------------------------------
# configuration


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        where = f"{path}.{k}" if path else k
        if k not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"{where!r} must be a table")
            out[k] = _merge(base[k], v, where)
        else:
            out[k] = v
    return out


def load_config(path=None) -> dict:
    """Defaults overlaid with the JSON file at ``path`` (if any)."""
    if path is None:
        return copy.deepcopy(DEFAULT_CONFIG)
    try:
        user = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(user, dict):
        raise ConfigError("config root must be an object")
    return _merge(DEFAULT_CONFIG, user)


def config_hash(cfg: dict) -> str:
    text = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


def make_profile(cfg: dict) -> ScatteringProfile:
    p = cfg["profile"]
    if p["family"] != "gaussian_bump":
        raise ConfigError(f"unknown profile family {p['family']!r}")
    return gaussian_bump_profile(
        amplitude=float(p["amplitude"]), support_radius=float(p["support_radius"]),
        x_center=tuple(p["x_center"]), p_center=tuple(p["p_center"]),
        x_radius=float(p["x_radius"]), p_radius=float(p["p_radius"]),
        x_sigma=tuple(p["x_sigma"]), p_sigma=tuple(p["p_sigma"]))


def set_threads(n: int, deterministic: bool) -> int:
    import numba
    numba.config.THREADING_LAYER = "workqueue"
    n = 1 if deterministic else max(1, min(int(n), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(n)
    return n


# ---------------------------------------------------------------------------
# output helpers


class OutputDir:
    """Collects files and writes a manifest with their SHA-256 sums."""

    def __init__(self, root, cfg: dict):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.files: dict = {}
        self.cfg = cfg
        self.write_text("config.json", json.dumps(cfg, indent=1, sort_keys=True) + "\n")

    def _track(self, path: Path) -> None:
        rel = path.relative_to(self.root).as_posix()
        self.files[rel] = hashlib.sha256(path.read_bytes()).hexdigest()

    def write_text(self, name: str, text: str) -> Path:
        p = self.root / name
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(text)
        self._track(p)
        return p

    def write_csv(self, name: str, header, rows) -> Path:
        p = self.root / name
        p.parent.mkdir(parents=True, exist_ok=True)
        with open(p, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(header)
            for r in rows:
                wr.writerow([repr(v) if isinstance(v, float) else v for v in r])
        self._track(p)
        return p

    def write_field(self, name: str, f: Field3) -> Path:
        p = self.root / name
        p.parent.mkdir(parents=True, exist_ok=True)
        write_snapshot(f, p)
        self._track(p)
        return p

    def track_tree(self, sub: str) -> None:
        for p in sorted((self.root / sub).rglob("*")):
            if p.is_file():
                self._track(p)

    def finish(self, extra: dict) -> str:
        manifest = {"config_hash": config_hash(self.cfg), **extra, "files": dict(sorted(self.files.items()))}
        text = json.dumps(manifest, indent=1, sort_keys=True) + "\n"
        (self.root / "manifest.json").write_text(text)
        return hashlib.sha256(text.encode()).hexdigest()


def _series_rows(report: Report):
    for name, s in report.series.items():
        for t, v in zip(s.t, s.v):
            yield (name, float(t), float(v))


def _obtain_table(cfg: dict, table_dir, K: int):
    """Read ``table_dir`` if given, else build a table of order ``K``."""
    if table_dir is not None:
        table = read_table(table_dir)
        if table.K < K:
            raise ConfigError(f"table order {table.K} < required {K}")
        return table, table_checksum(table_dir)
    prof = make_profile(cfg)
    t = cfg["table"]
    table = build_table(prof, K, default_base_grid(prof, int(t["n"])), int(t["degree"]),
                        int(t["sigma"]), bool(t["printed_top_order"]))
    return table, _table_digest(table)


def _table_digest(table) -> str:
    """Checksum of a freshly built table (same as its written manifest)."""
    import tempfile
    with tempfile.TemporaryDirectory() as d:
        return write_table(table, d)["checksum"]


# ---------------------------------------------------------------------------
# subcommands


def cmd_build_expansion(cfg: dict, out) -> tuple[int, Report]:
    od = OutputDir(out, cfg)
    t = cfg["table"]
    prof = make_profile(cfg)
    try:
        table = build_table(prof, int(t["K"]), default_base_grid(prof, int(t["n"])), int(t["degree"]),
                            int(t["sigma"]), bool(t["printed_top_order"]))
    except Exception as exc:
        raise StageError("build", exc) from exc
    manifest = write_table(table, od.root / "table")
    od.track_tree("table")
    rep = Report("build-expansion", config_hash(cfg), manifest["checksum"])
    c = cfg["checks"]
    tol = float(c["closed_form_tol"])
    if table.K >= 1 and not prof.is_zero:
        errs = closed_form_checks(table, int(c["closed_form_points"]), int(c["seed"]))
        for name, e in errs.items():
            rep.add(f"closed form {name}", e, f"rel. error <= {tol:g}", e <= tol)
        g = rho11_grid_gap(table)
        rep.add("rho[1,1] grid max-abs vs closed form", g, f"rel. error <= {tol:g}", g <= tol)
    else:
        rep.notes.append("no closed-form oracle applies (K = 0 or zero profile)")
    rep.add("table coefficient count", len(table.f), f"= {(table.K + 1) * (table.K + 2) // 2}",
            len(table.f) == (table.K + 1) * (table.K + 2) // 2)
    od.write_text("report.txt", rep.render())
    od.finish({"command": "build-expansion", "table_checksum": manifest["checksum"]})
    return (EXIT_PASS if rep.passed else EXIT_FAIL), rep


def residual_samples(table, cfg: dict):
    r = cfg["residuals"]
    rng = np.random.default_rng(int(r["seed"]))
    _, u, v = table.profile.terms[0]
    h = float(r["sample_halfwidth"])
    n = int(r["samples"])
    Y = np.asarray(u.center) + rng.uniform(-h, h, (n, 3))
    P = np.asarray(v.center) + rng.uniform(-h, h, (n, 3))
    hd = float(r["density_halfwidth"])
    W = np.asarray(v.center) + rng.uniform(-hd, hd, (int(r["density_points"]), 3))
    return Y, P, W


def cmd_verify_residuals(cfg: dict, out, table_dir=None) -> tuple[int, Report]:
    od = OutputDir(out, cfg)
    r = cfg["residuals"]
    Ks = [int(k) for k in r["K"]]
    gapK = [int(k) for k in r["gap_K"]]
    try:
        table, checksum = _obtain_table(cfg, table_dir, max(Ks + gapK))
    except ConfigError:
        raise
    except Exception as exc:
        raise StageError("table", exc) from exc
    rep = Report("verify-residuals", config_hash(cfg), checksum)
    ts = [float(t) for t in r["times"]]
    if table.profile.is_zero:
        rep.notes.append("zero profile: residuals vanish identically")
        for K in Ks:
            sol = ApproxSolution(table, K)
            x = np.zeros((4, 3))
            v = float(np.max(np.abs(sol.vlasov_residual(ts[0], x, x))))
            rep.add(f"K={K} Vlasov residual (zero profile)", v, "= 0", v == 0.0)
        od.write_text("report.txt", rep.render())
        od.write_csv("series.csv", ["quantity", "t", "value"], [])
        od.finish({"command": "verify-residuals", "table_checksum": checksum})
        return (EXIT_PASS if rep.passed else EXIT_FAIL), rep
    Y, P, W = residual_samples(table, cfg)
    phi_inf = table.splines[(0, 0)]
    G = phi_inf.gradient(P).T
    try:
        for K in sorted(set(Ks) | set(gapK)):
            sol = ApproxSolution(table, K)
            res, gap, dens = [], [], []
            for t in ts:
                x = Y + t * P - np.log(t) * G
                if K in Ks:
                    res.append(float(np.max(np.abs(sol.vlasov_residual(t, x, P)))))
                    d = sol.density_mismatch(t, W * t, nodes=int(r["density_nodes"]))
                    dens.append(float(np.max(np.abs(d))))
                if K in gapK:
                    g = sol.eval_grad_phiK(t, x) - sol.psi_sum(t, Y, P)
                    gap.append(float(np.max(np.abs(g))))
            if K in Ks:
                s = DecaySeries(tuple(ts), tuple(res), f"vlasov_K{K}")
                rep.series[s.label] = s
                rep.add_rate(f"K={K} Vlasov residual sup", fit_rate(s, K + 1), K + 2, float(r["tol_vlasov"]))
                rep.add_joint(f"K={K} Vlasov residual", fit_rate_joint(s))
                s = DecaySeries(tuple(ts), tuple(dens), f"density_K{K}")
                rep.series[s.label] = s
                rep.add_rate(f"K={K} density mismatch sup", fit_rate(s, K + 1), K + 4, float(r["tol_density"]))
                rep.add_joint(f"K={K} density mismatch", fit_rate_joint(s))
            if K in gapK:
                s = DecaySeries(tuple(ts), tuple(gap), f"gradphi_gap_K{K}")
                rep.series[s.label] = s
                rep.add_rate(f"K={K} grad-phi expansion gap", fit_rate(s, K + 1), K + 3, float(r["tol_gap"]))
    except Exception as exc:
        raise StageError("residuals", exc) from exc
    od.write_text("report.txt", rep.render())
    od.write_csv("series.csv", ["quantity", "t", "value"], _series_rows(rep))
    od.finish({"command": "verify-residuals", "table_checksum": checksum})
    return (EXIT_PASS if rep.passed else EXIT_FAIL), rep


def cmd_run_finite_problem(cfg: dict, out, table_dir=None, progress=None,
                           sink: dict | None = None) -> tuple[int, Report]:
    """Backward solve plus measurements.  ``sink``, when given, receives the
    run object and wall-clock stage timings (kept out of the written files so
    that outputs stay byte-reproducible)."""
    from . import solver

    sink = {} if sink is None else sink

    od = OutputDir(out, cfg)
    rc = cfg["run"]
    K = int(rc["K"])
    try:
        table, checksum = _obtain_table(cfg, table_dir, K)
    except ConfigError:
        raise
    except Exception as exc:
        raise StageError("table", exc) from exc
    rep = Report("run-finite-problem", config_hash(cfg), checksum)
    T0, Tf = float(rc["T0"]), float(rc["T_f"])
    mtimes = [float(t) for t in rc["measure_times"]]
    snaps = [float(t) for t in rc["snapshot_times"]]
    kw = dict(dt=float(rc["dt"]), M=int(rc["M"]), K=K, n_grid=int(rc["n_grid"]),
              seeding=rc["seeding"], seed=int(rc["seed"]),
              refresh_fraction=float(rc["refresh_fraction"]),
              extra_orders=int(rc["extra_orders"]), n_fine=int(rc["n_fine"]))
    t_start = time.perf_counter()
    try:
        run = solver.run_finite_problem(table, T0, Tf, output_times=mtimes + snaps, keep_rho=True,
                                        progress=progress, **kw)
    except Exception as exc:
        raise StageError("run", exc) from exc
    sink["run"] = run
    sink["t_run"] = time.perf_counter() - t_start
    log.info("backward run finished in %.1f s", sink["t_run"])
    zero = table.profile.is_zero
    try:
        rem = [solver.eval_remainder(run, t, n_samples=int(rc["samples"]), seed=int(rc["seed"]))
               for t in mtimes]
        scat = solver.check_scattering_convergence(run, [float(t) for t in rc["scattering_times"]],
                                                   int(rc["samples"]), int(rc["seed"]))
    except Exception as exc:
        raise StageError("measure", exc) from exc
    sink["t_measure"] = time.perf_counter() - t_start - sink["t_run"]
    s_rem = DecaySeries(tuple(mtimes), tuple(r.sup for r in rem), "remainder_sup")
    s_l2 = DecaySeries(tuple(mtimes), tuple(r.l2 for r in rem), "remainder_rms")
    s_sc = DecaySeries.from_pairs(scat, "scattering_sup")
    for s in (s_rem, s_l2, s_sc):
        rep.series[s.label] = s
    ser = run.series
    mass0 = run.initial.mass
    drift = float(np.max(np.abs(ser["mass"] - mass0))) / mass0 if mass0 else 0.0
    rep.add("mass drift (relative)", drift, f"<= {rc['mass_tol']:g}", drift <= float(rc["mass_tol"]))
    if zero:
        v = max(s_rem.v + s_sc.v, default=0.0)
        rep.add("zero profile: remainder and scattering gap", v, "= 0", v == 0.0)
        moved = float(np.max(ser["bootstrap"], initial=0.0))
        rep.add("zero profile: field", moved, "= 0", moved == 0.0)
    else:
        rep.add_rate("remainder sup", fit_rate(s_rem, rc["remainder_m"]),
                     float(rc["remainder_alpha"]), float(rc["remainder_tol"]))
        rep.add_joint("remainder sup", fit_rate_joint(s_rem))
        rep.add_rate("scattering convergence sup", fit_rate(s_sc, rc["scattering_m"]),
                     float(rc["scattering_alpha"]), float(rc["scattering_tol"]))
        rep.add_joint("scattering convergence sup", fit_rate_joint(s_sc))
        _support_checks(rep, run, table)
        _bootstrap_check(rep, run, float(rc["bootstrap_power"]))
        d = ser["defect"][1:]
        rep.notes.append(f"self-consistency defect (relative change of the remainder field per refresh): "
                         f"median {np.median(d):.3g}, max {np.max(d):.3g} over {len(d)} refreshes")
        rep.notes.append("particle-level remainder sup at measure times: "
                         + ", ".join(f"t={r.t:g}: {r.particle_sup:.6g}" for r in rem))
    u = rc["uniqueness"]
    if u["enabled"] and not zero:
        t_u = time.perf_counter()
        try:
            ur = solver.uniqueness_probe(table, T0, Tf, epsilons=tuple(u["epsilons"]), base=run,
                                         n_samples=int(u["samples"]), sample_seed=int(rc["seed"]), **kw)
        except Exception as exc:
            raise StageError("uniqueness", exc) from exc
        sink["uniqueness"] = ur
        sink["t_uniqueness"] = time.perf_counter() - t_u
        rep.add("uniqueness: ratio spread across epsilons", ur.spread, f"<= {u['tol']:g}",
                ur.spread <= float(u["tol"]),
                "ratios " + ", ".join(f"eps={e:g}: {r:.6g}" for e, r in zip(ur.epsilons, ur.ratios)))
        rep.notes.append(f"uniqueness: Gronwall exponent c = {ur.gronwall_c:.4g} "
                         f"(ratio/||f(T0)|| = (T_f/T0)^c)")
        od.write_csv("uniqueness.csv", ["epsilon", "difference", "ratio"],
                     [(float(e), float(d), float(r)) for e, d, r in zip(ur.epsilons, ur.differences, ur.ratios)])
    # persistence
    od.write_csv("series.csv", ["quantity", "t", "value"], _series_rows(rep))
    keys = ["t", "mass", "defect", "bootstrap", "support_y", "max_p", "remainder_rms_particles"]
    od.write_csv("run_series.csv", keys, zip(*[[float(v) for v in ser[k]] for k in keys]))
    _write_history(od, run, snaps)
    od.write_text("run_params.json", json.dumps(run.params, indent=1, sort_keys=True) + "\n")
    od.write_text("report.txt", rep.render())
    od.finish({"command": "run-finite-problem", "table_checksum": checksum})
    return (EXIT_PASS if rep.passed else EXIT_FAIL), rep


def _support_checks(rep: Report, run, table) -> None:
    from .profile import compute_data_norm
    ser = run.series
    B = table.profile.support_radius
    F = compute_data_norm(table.profile, 3)
    ymax = float(np.max(ser["support_y"]))
    rep.add("support: sup |y| over particles", ymax, f"<= 2F + B = {2 * F + B:.6g}", ymax <= 2 * F + B)
    pmax = float(np.max(ser["max_p"]))
    rep.add("support: sup |p| over particles", pmax, f"<= 2B = {2 * B:g}", pmax <= 2 * B)
    y0 = float(ser["support_y"][0])
    rep.notes.append(f"support: sup |y| grows from {y0:.6g} at T_f to {ymax:.6g}")


def _bootstrap_check(rep: Report, run, power: float) -> None:
    ser = run.series
    t = ser["t"][::-1]
    v = ser["bootstrap"][::-1]
    s = DecaySeries(tuple(float(a) for a in t), tuple(float(b) for b in v), "bootstrap_gap")
    fit = fit_rate(s, 0)
    c = float(np.max(v * t ** power))
    rep.add("bootstrap: decay power of sup|grad phi - t^-2 grad phi_inf(x/t)|", fit.alpha,
            f">= {power:g} (c = {c:.4g})", fit.alpha >= power,
            f"A={fit.A:.4g} ci95=±{fit.alpha_ci:.3g}")


def _write_history(od: OutputDir, run, snaps) -> None:
    hist = run.history
    if not hist.entries:
        return
    ts = hist.times
    for t in snaps:
        j = int(np.argmin(np.abs(ts - t)))
        e = hist.entries[j]
        if e.rho is None:
            continue
        rho = Field3(e.grid, e.rho.astype(float))
        od.write_field(f"history/rho_t{e.t:g}.vpf3", rho)
        if np.any(rho.values):
            phi, _ = solve_free_space(rho)
        else:
            phi = Field3(e.grid, np.zeros_like(rho.values))
        od.write_field(f"history/phi_t{e.t:g}.vpf3", phi)


def cmd_emit_plots(cfg: dict, out, source=None, table_dir=None) -> tuple[int, Report]:
    """Trajectory CSV plus the rate series of a previous experiment."""
    od = OutputDir(out, cfg)
    pc = cfg["plots"]
    rows = []
    if source is not None:
        src = Path(source) / "series.csv"
        if src.exists():
            with open(src, newline="") as fh:
                rows = [(r["quantity"], float(r["t"]), float(r["value"])) for r in csv.DictReader(fh)]
    od.write_csv("rates.csv", ["quantity", "t", "value"], rows)
    table, checksum = _obtain_table(cfg, table_dir, 0)
    rep = Report("emit-plots", config_hash(cfg), checksum)
    header = ["sample", "t", "mod_x1", "mod_x2", "mod_x3", "free_x1", "free_x2", "free_x3"]
    if table.profile.is_zero:
        od.write_csv("trajectories.csv", header, [])
    else:
        rng = np.random.default_rng(int(pc["seed"]))
        _, u, v = table.profile.terms[0]
        n = int(pc["trajectory_samples"])
        xs = np.asarray(u.center) + rng.uniform(-0.5, 0.5, (n, 3)) * u.radius
        ps = np.asarray(v.center) + rng.uniform(-0.5, 0.5, (n, 3)) * v.radius
        traj = emit_trajectories(list(zip(xs, ps)), pc["trajectory_times"], table.splines[(0, 0)])
        od.write_csv("trajectories.csv", header, traj)
        worst = 0.0
        G = table.splines[(0, 0)].gradient(ps).T
        for r in traj:
            j, t = r[0], r[1]
            d = np.asarray(r[2:5]) - np.asarray(r[5:8]) + np.log(t) * G[j]
            worst = max(worst, float(np.max(np.abs(d))))
        rep.add("trajectory rows: modified - free = -log t grad phi_inf(p)", worst, "<= 1e-12", worst <= 1e-12)
    od.write_text("report.txt", rep.render())
    od.finish({"command": "emit-plots", "table_checksum": checksum})
    return (EXIT_PASS if rep.passed else EXIT_FAIL), rep


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vpscatter", description=__doc__.split("\n\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, default=None, help="JSON config overriding the defaults")
        p.add_argument("--out", type=Path, required=True, help="output directory")
        p.add_argument("--threads", type=int, default=None, help="numba thread count")
        p.add_argument("--deterministic", action="store_true", help="force single-threaded execution")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    common(sub.add_parser("build-expansion", help="build the coefficient table"))
    p = common(sub.add_parser("verify-residuals", help="residual decay rates"))
    p.add_argument("--table", type=Path, default=None, help="table directory from build-expansion")
    p = common(sub.add_parser("run-finite-problem", help="backward particle solve"))
    p.add_argument("--table", type=Path, default=None)
    p = common(sub.add_parser("emit-plots", help="CSV bundle for plotting"))
    p.add_argument("--source", type=Path, default=None, help="output directory of a previous experiment")
    p.add_argument("--table", type=Path, default=None)
    sub.add_parser("show-config", help="print the default configuration")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    if args.command == "show-config":
        print(json.dumps(DEFAULT_CONFIG, indent=1, sort_keys=True))
        return EXIT_PASS
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.threads is not None:
            cfg["threads"] = int(args.threads)
        set_threads(cfg["threads"], args.deterministic)
        table_dir = getattr(args, "table", None)
        if args.command == "build-expansion":
            code, rep = cmd_build_expansion(cfg, args.out)
        elif args.command == "verify-residuals":
            code, rep = cmd_verify_residuals(cfg, args.out, table_dir)
        elif args.command == "run-finite-problem":
            prog = None
            if args.verbose:
                def prog(t, s):
                    log.info("t=%.2f defect=%.3g", t, s["defect"][-1])
            code, rep = cmd_run_finite_problem(cfg, args.out, table_dir, progress=prog)
        else:
            code, rep = cmd_emit_plots(cfg, args.out, args.source, table_dir)
    except (ConfigError, StageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    sys.stdout.write(rep.render())
    return code


if __name__ == "__main__":
    sys.exit(main())
