import numpy as np
import pytest

from vpscatter.expansion import (build_jacobian_series, build_p_series, build_table,
                                 quadrature_f_over_y, read_table, table_checksum, write_table)
from vpscatter.oracles import closed_form_checks, random_support_points
from vpscatter.profile import default_base_grid, gaussian_bump_profile


def test_coefficient_keys(table1):
    assert set(table1.f) == {(0, 0), (1, 0), (1, 1)}
    assert set(table1.splines) >= {(0, 0), (1, 0), (1, 1)}


def test_f00_is_profile(table1, rng):
    y, p = random_support_points(table1, 50, seed=4)
    got = table1.context.evaluate_exprs([table1.f[(0, 0)]], y, p)[0]
    np.testing.assert_allclose(got, table1.profile(y, p), rtol=1e-13)


def test_closed_forms_agree(table1):
    errs = closed_form_checks(table1, n=200, seed=1)
    assert max(errs.values()) < 1e-8, errs


def test_y_integral_of_f11_vanishes(table1):
    w = np.asarray(table1.profile.terms[0][2].center) + np.array([[0.0, 0.0, 0.0], [0.1, -0.05, 0.1]])
    q = quadrature_f_over_y(table1, [(1, 1)], w, nodes=64)[0]
    scale = np.max(np.abs(quadrature_f_over_y(table1, [(0, 0)], w, nodes=64)))
    assert np.max(np.abs(q)) <= 1e-10 * max(scale, 1.0)


def test_moment_route_matches_quadrature(table1):
    w = np.asarray(table1.profile.terms[0][2].center) + np.array([[0.05, 0.0, -0.1]])
    keys = sorted(table1.P)
    q = quadrature_f_over_y(table1, keys, w, nodes=64)
    m = table1.context.evaluate_moments([table1.P[k] for k in keys], w)
    for i, k in enumerate(keys):
        assert abs(q[i, 0] - m[i, 0]) <= 1e-6 * max(np.max(np.abs(q)), 1e-300), k


def test_table_roundtrip(table1, tmp_path, rng):
    man = write_table(table1, tmp_path / "t")
    assert man["checksum"] == table_checksum(tmp_path / "t")
    again = read_table(tmp_path / "t")
    assert again.K == table1.K
    y, p = random_support_points(table1, 20, seed=2)
    for kl in table1.f:
        a = table1.context.evaluate_exprs([table1.f[kl]], y, p)[0]
        b = again.context.evaluate_exprs([again.f[kl]], y, p)[0]
        np.testing.assert_array_equal(a, b)


def test_tampered_table_rejected(table1, tmp_path):
    write_table(table1, tmp_path / "t")
    victim = next(f for f in sorted((tmp_path / "t").iterdir()) if f.suffix == ".vpf3")
    raw = bytearray(victim.read_bytes())
    raw[-1] ^= 1
    victim.write_bytes(bytes(raw))
    with pytest.raises(Exception):
        read_table(tmp_path / "t")


def test_build_is_deterministic(tmp_path):
    prof = gaussian_bump_profile(amplitude=5.0)
    g = default_base_grid(prof, 24)
    a = write_table(build_table(prof, 1, g), tmp_path / "a")["checksum"]
    b = write_table(build_table(prof, 1, g), tmp_path / "b")["checksum"]
    assert a == b


def test_zero_profile_table_is_empty_but_valid(tmp_path):
    prof = gaussian_bump_profile(amplitude=0.0)
    tab = build_table(prof, 1, default_base_grid(prof, 24))
    for f in tab.rho.values():
        assert not np.any(f.values)
    assert closed_form_checks(tab) == {}
    write_table(tab, tmp_path / "z")
    read_table(tmp_path / "z")


def test_printed_top_order_changes_top_density():
    prof = gaussian_bump_profile(amplitude=5.0)
    g = default_base_grid(prof, 24)
    a = build_table(prof, 1, g)
    b = build_table(prof, 1, g, printed_top_order=True)
    assert not np.allclose(a.rho[(1, 0)].values, b.rho[(1, 0)].values)
    np.testing.assert_array_equal(a.rho[(0, 0)].values, b.rho[(0, 0)].values)


def test_series_low_orders():
    ps = build_p_series(2)
    js = build_jacobian_series(2, ps)
    assert (1, 0) in ps and (2, 2) in ps
    assert (0, 0) in js
