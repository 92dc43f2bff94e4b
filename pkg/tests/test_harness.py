import csv
import json

import numpy as np
import pytest

from vpscatter import harness

SMALL_PROFILE = {"amplitude": 20.0}
SMALL_TABLE = {"K": 1, "n": 32}


def _write(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return p


def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def built(tmp_path_factory):
    root = tmp_path_factory.mktemp("build")
    cfg = _write(root, {"profile": SMALL_PROFILE, "table": SMALL_TABLE,
                        "checks": {"closed_form_points": 200}})
    code = harness.main(["build-expansion", "--config", str(cfg), "--out", str(root / "out"),
                         "--deterministic"])
    return code, root / "out", cfg


def test_defaults_roundtrip():
    cfg = harness.load_config(None)
    assert cfg == harness.DEFAULT_CONFIG and cfg is not harness.DEFAULT_CONFIG
    assert len(harness.config_hash(cfg)) == 64


def test_unknown_key_is_error(tmp_path, capsys):
    cfg = _write(tmp_path, {"run": {"bogus": 1}})
    assert harness.main(["build-expansion", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    assert "bogus" in capsys.readouterr().err


def test_unreadable_config(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert harness.main(["build-expansion", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1


def test_stage_error_attributed(tmp_path, capsys):
    cfg = _write(tmp_path, {"table": {"K": 1, "n": 16}})
    assert harness.main(["build-expansion", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    assert "[build]" in capsys.readouterr().err


def test_build_expansion_passes(built):
    code, out, _ = built
    assert code == 0
    text = (out / "report.txt").read_text()
    assert "closed form f[1,1]" in text and "overall: PASS" in text
    man = json.loads((out / "manifest.json").read_text())
    for name, digest in man["files"].items():
        import hashlib
        assert hashlib.sha256((out / name).read_bytes()).hexdigest() == digest


def test_every_report_line_cites_hashes(built):
    _, out, _ = built
    man = json.loads((out / "manifest.json").read_text())
    tag = f"[config {man['config_hash'][:12]} table {man['table_checksum'][:12]}]"
    for line in (out / "report.txt").read_text().splitlines():
        if line.startswith(("PASS", "FAIL", "note", "overall")):
            assert line.endswith(tag)


def test_config_echoed(built):
    _, out, cfg = built
    echoed = json.loads((out / "config.json").read_text())
    assert echoed["profile"]["amplitude"] == 20.0
    assert echoed == harness.load_config(cfg)


def test_zero_amplitude_build(tmp_path):
    cfg = _write(tmp_path, {"profile": {"amplitude": 0.0}, "table": SMALL_TABLE})
    assert harness.main(["build-expansion", "--config", str(cfg), "--out", str(tmp_path / "z")]) == 0


def test_build_deterministic(tmp_path, built):
    _, out, cfg = built
    assert harness.main(["build-expansion", "--config", str(cfg), "--out", str(tmp_path / "again"),
                         "--deterministic"]) == 0
    assert _tree(out) == _tree(tmp_path / "again")


def test_emit_plots_from_table(tmp_path, built):
    _, out, cfg = built
    code = harness.main(["emit-plots", "--config", str(cfg), "--out", str(tmp_path / "p"),
                         "--table", str(out / "table")])
    assert code == 0
    with open(tmp_path / "p" / "trajectories.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 16 * 8
    with open(tmp_path / "p" / "rates.csv") as fh:
        assert list(csv.reader(fh)) == [["quantity", "t", "value"]]


def test_emit_plots_empty_profile(tmp_path):
    cfg = _write(tmp_path, {"profile": {"amplitude": 0.0}, "table": SMALL_TABLE})
    assert harness.main(["emit-plots", "--config", str(cfg), "--out", str(tmp_path / "p")]) == 0
    for name in ("trajectories.csv", "rates.csv"):
        assert len((tmp_path / "p" / name).read_text().splitlines()) == 1


@pytest.fixture(scope="module")
def residual_out(tmp_path_factory, built):
    _, out, _ = built
    root = tmp_path_factory.mktemp("res")
    cfg = _write(root, {"profile": SMALL_PROFILE, "table": SMALL_TABLE,
                        "residuals": {"K": [0, 1], "gap_K": [0, 1], "samples": 50,
                                      "density_points": 2, "density_nodes": 24}})
    code = harness.main(["verify-residuals", "--config", str(cfg), "--out", str(root / "out"),
                         "--table", str(out / "table"), "--deterministic"])
    return code, root / "out", cfg


def test_verify_residuals_outputs(residual_out):
    code, out, _ = residual_out
    assert code in (0, 2)
    text = (out / "report.txt").read_text()
    assert text.count("Vlasov residual sup") == 2
    assert "joint fit" in text and "ill-conditioned" in text
    assert ("overall: PASS" in text) == (code == 0)


def test_rate_csv_equals_report_series(tmp_path, residual_out, built):
    _, out, cfg = residual_out
    assert harness.main(["emit-plots", "--config", str(cfg), "--out", str(tmp_path / "p"),
                         "--source", str(out), "--table", str(built[1] / "table")]) == 0
    with open(tmp_path / "p" / "rates.csv") as fh:
        rows = list(csv.DictReader(fh))
    report = (out / "report.txt").read_text().splitlines()
    series, current = {}, None
    for line in report:
        if line.startswith("series "):
            current = line[len("series "):-1]
            series[current] = []
        elif current and line.startswith("  "):
            t, v = line.split()
            series[current].append((float(t), float(v)))
        else:
            current = None
    flat = [(q, t, v) for q, pts in series.items() for t, v in pts]
    assert flat == [(r["quantity"], float(r["t"]), float(r["value"])) for r in rows]
    assert len(flat) > 0


def test_run_finite_problem_small(tmp_path, built):
    _, out, _ = built
    cfg = _write(tmp_path, {"profile": SMALL_PROFILE, "table": SMALL_TABLE,
                            "run": {"T0": 40.0, "T_f": 80.0, "dt": -0.5, "M": 10000, "n_grid": 32,
                                    "n_fine": 48, "measure_times": [40.0, 50.0, 60.0, 70.0],
                                    "scattering_times": [40.0, 50.0, 60.0, 70.0, 80.0],
                                    "snapshot_times": [40.0], "samples": 200,
                                    "uniqueness": {"enabled": True, "samples": 200}}})
    code = harness.main(["run-finite-problem", "--config", str(cfg), "--out", str(tmp_path / "r"),
                         "--table", str(out / "table"), "--deterministic"])
    assert code in (0, 2)
    r = tmp_path / "r"
    text = (r / "report.txt").read_text()
    assert "mass drift" in text and "remainder sup" in text and "support:" in text
    assert len(list((r / "history").glob("rho_t*.vpf3"))) == 1
    assert "uniqueness: ratio spread" in text
    with open(r / "uniqueness.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 2
    with open(r / "run_series.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert float(rows[0]["t"]) == 80.0 and float(rows[-1]["t"]) < 42.0
    mass = np.array([float(x["mass"]) for x in rows])
    assert np.ptp(mass) <= 1e-12 * mass[0]


def test_show_config(capsys):
    assert harness.main(["show-config"]) == 0
    assert json.loads(capsys.readouterr().out) == harness.DEFAULT_CONFIG
