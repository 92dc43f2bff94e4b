"""Acceptance criteria 1 to 9, each at its stated tolerance and time budget.

Every test records one ``criterion N: PASS|FAIL ...`` line, printed at the
end of the session (and immediately, uncaptured).  Criteria 6 and 8 share
one full-size backward run; expect the module to take well over an hour on
a single core.
"""

import time

import numpy as np
import pytest

from vpscatter import harness, solver
from vpscatter.approx import ApproxSolution
from vpscatter.expansion import build_table, quadrature_f_over_y
from vpscatter.fields import Grid3
from vpscatter.oracles import closed_form_checks, random_support_points, rho11_grid_gap
from vpscatter.poisson import (check_gradient_estimate, check_hardy, gaussian_charge,
                               gaussian_charge_potential, solve_free_space)
from vpscatter.profile import default_base_grid, default_profile


@pytest.fixture
def record(criterion_log, capsys):
    def _rec(n, ok, text):
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {text}"
        criterion_log[n] = line
        with capsys.disabled():
            print("\n" + line)
    return _rec


def _check(rep, name):
    hits = [c for c in rep.checks if c.name == name]
    assert len(hits) == 1, name
    return hits[0]


# 1 -------------------------------------------------------------------------

def test_criterion_1_closed_forms(record):
    t0 = time.perf_counter()
    prof = default_profile()
    table = build_table(prof, 1, default_base_grid(prof, 64))
    errs = closed_form_checks(table, n=1000, seed=0)
    errs["rho[1,1] grid"] = rho11_grid_gap(table)
    worst = max(errs, key=errs.get)
    dt = time.perf_counter() - t0
    ok = errs[worst] <= 1e-6 and dt <= 300
    record(1, ok, f"{len(errs)} coefficient families, worst {worst} rel. error {errs[worst]:.2e} "
                  f"(<= 1e-6), {dt:.0f} s (<= 300 s)")
    assert errs[worst] <= 1e-6, errs
    assert dt <= 300


# 2 -------------------------------------------------------------------------

def test_criterion_2_integration_in_y(record):
    t0 = time.perf_counter()
    prof = default_profile()
    table = build_table(prof, 3, default_base_grid(prof, 24))
    keys = sorted(table.P)
    assert {k for k, _ in keys} == {0, 1, 2, 3}
    _, w = random_support_points(table, 6, seed=5)
    # the bump edge is steep at this amplitude; 192 nodes resolve it to ~1e-7
    q = quadrature_f_over_y(table, keys, w, nodes=192)
    m = table.context.evaluate_moments([table.P[k] for k in keys], w)
    layer = {k: max(float(np.max(np.abs(q[i]))) for i, kl in enumerate(keys) if kl[0] == k)
             for k in range(4)}
    rel = {}
    for i, kl in enumerate(keys):
        # coefficients whose y-integral vanishes are measured against their layer
        scale = layer[kl[0]] if table.P[kl].is_zero() else float(np.max(np.abs(q[i])))
        rel[kl] = float(np.max(np.abs(q[i] - m[i]))) / scale
    # f_{1,1} integrates to zero in y; compare absolutely
    i11 = keys.index((1, 1))
    vanish = float(np.max(np.abs(q[i11])))
    rel.pop((1, 1))
    worst = max(rel, key=rel.get)
    dt = time.perf_counter() - t0
    ok = rel[worst] <= 1e-6 and vanish <= 1e-10 and dt <= 1800
    record(2, ok, f"worst (k,l)={worst} rel. error {rel[worst]:.2e} (<= 1e-6); "
                  f"|int f_11 dy| = {vanish:.2e} (<= 1e-10); {dt:.0f} s (<= 1800 s)")
    assert rel[worst] <= 1e-6, rel
    assert vanish <= 1e-10
    assert dt <= 1800


# 3 -------------------------------------------------------------------------

def test_criterion_3_poisson(record):
    t0 = time.perf_counter()
    g = Grid3.centered(64, 6.0, margin_cells=3)
    rho = gaussian_charge(g, sigma=1.0)
    phi, _ = solve_free_space(rho)
    r = np.sqrt(sum(a ** 2 for a in g.mesh()))
    ref = gaussian_charge_potential(r, 1.0)
    err = float(np.max(np.abs(phi.values - ref)) / np.max(np.abs(ref)))
    grad_ok = check_gradient_estimate(rho).passed
    hardy_ok = check_hardy(phi).passed
    dt = time.perf_counter() - t0
    ok = err <= 1e-4 and grad_ok and hardy_ok and dt <= 60
    record(3, ok, f"Gaussian charge rel. max error {err:.2e} (<= 1e-4) at n=64; "
                  f"gradient estimate {grad_ok}, Hardy {hardy_ok}; {dt:.1f} s (<= 60 s)")
    assert ok


# 4, 5 ----------------------------------------------------------------------

@pytest.fixture(scope="module")
def residual_report(tmp_path_factory):
    out = tmp_path_factory.mktemp("residuals")
    cfg = harness.load_config(None)
    t0 = time.perf_counter()
    code, rep = harness.cmd_verify_residuals(cfg, out)
    return code, rep, time.perf_counter() - t0


def test_criterion_4_residual_scaling(record, residual_report):
    _, rep, dt = residual_report
    parts, ok = [], dt <= 1200
    for K in (0, 1, 2):
        v = _check(rep, f"K={K} Vlasov residual sup")
        d = _check(rep, f"K={K} density mismatch sup")
        ok &= v.passed and d.passed
        parts.append(f"K={K}: vlasov {v.measured:.3f} (target {K + 2}±0.25), "
                     f"density {d.measured:.3f} (target {K + 4}±0.3)")
    record(4, ok, "; ".join(parts) + f"; {dt:.0f} s for criteria 4+5 (<= 1200 s)")
    assert ok


def test_criterion_5_grad_phi_expansion(record, residual_report):
    _, rep, dt = residual_report
    parts, ok = [], True
    for K in (0, 1):
        c = _check(rep, f"K={K} grad-phi expansion gap")
        ok &= c.passed
        parts.append(f"K={K}: {c.measured:.3f} (target {K + 3}±0.3)")
    record(5, ok, "; ".join(parts))
    assert ok


# 6, 8 ----------------------------------------------------------------------

@pytest.fixture(scope="module")
def finite_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("finite")
    cfg = harness.load_config(None)
    cfg["run"]["uniqueness"]["enabled"] = True
    sink: dict = {}
    code, rep = harness.cmd_run_finite_problem(cfg, out, sink=sink)
    return code, rep, sink


def test_criterion_6_finite_problem(record, finite_run):
    _, rep, sink = finite_run
    names = ["remainder sup", "scattering convergence sup", "support: sup |y| over particles",
             "support: sup |p| over particles", "mass drift (relative)"]
    checks = [_check(rep, n) for n in names]
    dt = sink["t_run"] + sink["t_measure"]
    ok = all(c.passed for c in checks) and dt <= 3600
    rem, sc, sy, sp, mass = checks
    record(6, ok, f"remainder alpha {rem.measured:.3f} (2±0.4), scattering alpha {sc.measured:.3f} "
                  f"(1±0.3), sup|y| {sy.measured:.3g} ({sy.target}), sup|p| {sp.measured:.3g} "
                  f"({sp.target}), mass drift {mass.measured:.1e} (<= 1e-12); "
                  f"{dt:.0f} s (<= 3600 s)")
    assert ok, rep.render()


def test_criterion_8_uniqueness(record, finite_run):
    _, rep, sink = finite_run
    ur = sink["uniqueness"]
    budget = 2 * (sink["t_run"] + sink["t_measure"])
    ok = ur.stable and ur.epsilons[-1] / ur.epsilons[0] >= 10 and sink["t_uniqueness"] <= budget
    ratios = ", ".join(f"eps={e:g}: {r:.4g}" for e, r in zip(ur.epsilons, ur.ratios))
    record(8, ok, f"difference/eps {ratios}; spread {ur.spread:.3f} (<= 0.2); "
                  f"{sink['t_uniqueness']:.0f} s (<= {budget:.0f} s)")
    assert ok


# 7 -------------------------------------------------------------------------

def test_criterion_7_commutators(record):
    t0 = time.perf_counter()
    prof = default_profile()
    table = build_table(prof, 1, default_base_grid(prof, 48))
    sol = ApproxSolution(table, 1)
    y, p = random_support_points(table, 1000, seed=11)
    t = 150.0
    x = y + t * p - np.log(t) * sol.phi_inf.gradient(p).T
    res = sol.commutator_check(t, x, p, seed=2)
    build = time.perf_counter() - t0
    ok = res["L_defect"] <= 1e-6 and res["dp_defect"] <= 1e-6
    record(7, ok, f"L_i commutator defect {res['L_defect']:.2e}, t^-1 d_p commutator defect "
                  f"{res['dp_defect']:.2e} (<= 1e-6) at 1000 points; {build:.1f} s incl. table "
                  f"build (<= 60 s)")
    assert ok
    assert build <= 60


# 9 -------------------------------------------------------------------------

DETERMINISM_CONFIG = {
    "run": {"T0": 40.0, "T_f": 80.0, "dt": -0.5, "M": 10000, "n_grid": 32, "n_fine": 48,
            "measure_times": [40.0, 50.0, 60.0, 70.0], "scattering_times": [40.0, 60.0, 70.0, 80.0],
            "snapshot_times": [40.0, 60.0],
            "samples": 200},
    "table": {"K": 1},
    "residuals": {"K": [0, 1], "gap_K": [0, 1], "samples": 50, "density_points": 2,
                  "density_nodes": 24},
}


def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_9_determinism(record, tmp_path):
    import json
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(DETERMINISM_CONFIG))
    trees = []
    for rep in ("a", "b"):
        root = tmp_path / rep
        codes = [
            harness.main(["build-expansion", "--config", str(cfg_path), "--out", str(root / "build"),
                          "--deterministic"]),
            harness.main(["verify-residuals", "--config", str(cfg_path), "--out", str(root / "res"),
                          "--table", str(root / "build" / "table"), "--deterministic"]),
            harness.main(["run-finite-problem", "--config", str(cfg_path), "--out", str(root / "run"),
                          "--table", str(root / "build" / "table"), "--deterministic"]),
            harness.main(["emit-plots", "--config", str(cfg_path), "--out", str(root / "plots"),
                          "--source", str(root / "run"), "--table", str(root / "build" / "table"),
                          "--deterministic"]),
        ]
        assert all(c in (0, 2) for c in codes), codes
        trees.append(_tree(root))
    same = trees[0] == trees[1]
    differing = sorted(k for k in trees[0] if trees[0].get(k) != trees[1].get(k))
    record(9, same, f"{len(trees[0])} files across the four subcommands, "
                    f"{'byte-identical' if same else 'differing: ' + ', '.join(differing[:5])}")
    assert same
