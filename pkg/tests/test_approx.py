import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vpscatter.approx import ApproxSolution, emit_trajectories, invert_y, layer_weights, y_map
from vpscatter.oracles import random_support_points


@pytest.fixture(scope="module")
def sol1(table1):
    return ApproxSolution(table1, 1)


def _xp(table, t, n=100, seed=0):
    y, p = random_support_points(table, n, seed)
    x = y + t * p - np.log(t) * table.splines[(0, 0)].gradient(p).T
    return x, p, y


def test_layer_weights_derivative():
    a, da = layer_weights(50.0, 2)
    h = 1e-4
    ap, _ = layer_weights(50.0 + h, 2)
    am, _ = layer_weights(50.0 - h, 2)
    for kl in a:
        assert da[kl] == pytest.approx((ap[kl] - am[kl]) / (2 * h), rel=1e-6, abs=1e-14)


def test_K_above_table_rejected(table1):
    with pytest.raises(ValueError):
        ApproxSolution(table1, 2)


def test_fK_at_large_t_tends_to_profile(sol1, table1):
    x, p, y = _xp(table1, 1e8, 50)
    np.testing.assert_allclose(sol1.eval_fK(1e8, x, p), table1.profile(y, p), rtol=1e-5, atol=1e-6)


def test_fK_zero_outside_support(sol1):
    x = np.array([[100.0, 0, 0]])
    p = np.array([[0.9, 0, 0]])
    assert sol1.eval_fK(100.0, x, p)[0] == 0.0


def test_invert_y_roundtrip(table1):
    phi = table1.splines[(0, 0)]
    _, p, y = _xp(table1, 80.0, 30)
    x = y + 80.0 * p - np.log(80.0) * phi.gradient(p).T
    np.testing.assert_allclose(invert_y(80.0, x, y, phi), p, atol=1e-12)
    np.testing.assert_allclose(y_map(80.0, x, p, phi), y, atol=1e-12)


@settings(max_examples=15, deadline=None)
@given(t=st.floats(30.0, 3000.0))
def test_seeded_inversion_agrees(table1, t):
    sol = ApproxSolution(table1, 1)
    x, p, y = _xp(table1, t, 10, seed=7)
    np.testing.assert_allclose(sol.invert_y(t, x, y), p, atol=1e-11)


def test_k0_residual_matches_closed_form(table1):
    sol0 = ApproxSolution(table1, 0)
    x, p, _ = _xp(table1, 100.0)
    r1 = sol0.vlasov_residual(100.0, x, p)
    r2 = sol0.vlasov_residual_k0_closed(100.0, x, p)
    assert np.max(np.abs(r1 - r2)) <= 1e-8 * np.max(np.abs(r2))


def test_residual_gain_grows_with_t(table1):
    gain = []
    for t in (200.0, 800.0):
        x, p, _ = _xp(table1, t)
        r0 = np.max(np.abs(ApproxSolution(table1, 0).vlasov_residual(t, x, p)))
        r1 = np.max(np.abs(ApproxSolution(table1, 1).vlasov_residual(t, x, p)))
        gain.append(r0 / r1)
    assert 1.0 < gain[0] < gain[1]


def test_grad_phi_gap_shrinks(sol1, table1):
    gaps = []
    for t in (100.0, 400.0):
        x, p, y = _xp(table1, t)
        gaps.append(np.max(np.abs(sol1.eval_grad_phiK(t, x) - sol1.psi_sum(t, y, p))))
    assert gaps[1] < gaps[0] / 30


def test_density_methods_agree(sol1, table1):
    w = np.asarray(table1.profile.terms[0][2].center)[None] + np.array([[0.0, 0.05, 0.0]])
    t = 60.0
    a = sol1.density_mismatch(t, w * t, nodes=32)
    b = sol1.density_mismatch(t, w * t, nodes=32, method="direct")
    scale = np.max(np.abs(sol1.eval_rhoK(t, w * t)))
    assert np.max(np.abs(a - b)) <= 1e-3 * scale


def test_commutators(sol1, table1):
    x, p, _ = _xp(table1, 120.0, 200, seed=3)
    res = sol1.commutator_check(120.0, x, p)
    assert res["L_defect"] < 1e-6
    assert res["dp_defect"] < 1e-6


def test_emit_trajectories(table1, tmp_path):
    phi = table1.splines[(0, 0)]
    samples = [(np.zeros(3), np.array([0.1, 0.0, 0.0])), (np.ones(3) * 0.1, np.array([0.0, -0.1, 0.05]))]
    rows = emit_trajectories(samples, [1.0, 10.0, 100.0], phi, tmp_path / "t.csv")
    assert len(rows) == 6
    for r in rows:
        g = phi.gradient(np.asarray(samples[r[0]][1])[None])[:, 0]
        np.testing.assert_allclose(np.subtract(r[2:5], r[5:8]), -np.log(r[1]) * g, atol=1e-14)
    with open(tmp_path / "t.csv") as fh:
        assert len(list(csv.reader(fh))) == 7
