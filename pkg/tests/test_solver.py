import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vpscatter import solver
from vpscatter.expansion import build_table
from vpscatter.fields import Grid3
from vpscatter.profile import default_base_grid, gaussian_bump_profile

SMALL = dict(dt=-0.5, M=10_000, n_grid=32, n_fine=48)


@pytest.fixture(scope="module")
def small_run(table1):
    return solver.run_finite_problem(table1, 40.0, 80.0, output_times=(40.0, 60.0), keep_rho=True, **SMALL)


@pytest.fixture(scope="module")
def zero_table():
    prof = gaussian_bump_profile(amplitude=0.0)
    return build_table(prof, 1, default_base_grid(prof, 24))


def test_mass_conserved(small_run):
    m = small_run.series["mass"]
    assert np.max(np.abs(m - m[0])) <= 1e-12 * m[0]


def test_final_data_matches_fK(small_run):
    ens = small_run.initial
    fK = small_run.sol.eval_fK(80.0, ens.x, ens.p)
    np.testing.assert_allclose(ens.f, fK, rtol=1e-12, atol=1e-12)


def test_final_mass_close_to_profile_mass(table1):
    from vpscatter.profile import total_mass
    ens = solver.init_final_data(table1, 1e6, 40_000, K=0)
    assert ens.mass == pytest.approx(total_mass(table1.profile), rel=2e-2)


def test_deposit_total_charge(small_run):
    ens = small_run.snapshots[60.0]
    grid = solver._deposition_grid(ens.x, 32)
    rho = solver.deposit_density(ens, grid)
    total = float(np.sum(rho.values)) * grid.cell_volume
    assert total == pytest.approx(-float(np.sum(ens.w)), rel=1e-12)


def test_trace_forward_reverses_run(small_run):
    snap = small_run.snapshots[60.0]
    X, P = solver.trace_forward(small_run, 60.0, snap.x, snap.p)
    np.testing.assert_allclose(X, small_run.initial.x, rtol=0, atol=1e-9)
    np.testing.assert_allclose(P, small_run.initial.p, rtol=0, atol=1e-11)


def test_entry_for_step_matches_backward_choice(small_run):
    hist = small_run.history
    # a step that starts exactly at a refresh uses that refresh's field
    t_ref = hist.entries[1].t
    assert hist.entry_for_step(t_ref - 0.5, t_ref) == 1
    assert hist.entry_for_step(t_ref, t_ref + 0.5) == 0


def test_remainder_smaller_than_solution(small_run):
    r = solver.eval_remainder(small_run, 40.0, n_samples=300)
    assert 0 < r.sup < 0.5 * small_run.table.profile.amplitude
    assert r.count == 300


def test_support_and_momentum_bound(small_run):
    B = small_run.table.profile.support_radius
    assert np.max(small_run.series["max_p"]) <= 2 * B


def test_snapshots_at_requested_times(small_run):
    assert set(small_run.snapshots) == {40.0, 60.0, 80.0}
    assert small_run.params["refreshes"] == len(small_run.history.entries)


def test_history_rejects_nondecreasing(small_run):
    h = solver.FieldHistory(solver.ZeroField(), 1.0, 10.0)
    e = small_run.history.entries[0]
    h.add(solver.HistoryEntry(5.0, e.grid, e.grad))
    with pytest.raises(ValueError):
        h.add(solver.HistoryEntry(5.0, e.grid, e.grad))


def test_entry_for_step_outside_range(small_run):
    with pytest.raises(solver.CharacteristicExitError):
        small_run.history.entry_for_step(30.0, 30.5)
    with pytest.raises(solver.CharacteristicExitError):
        solver.trace_forward(small_run, 40.1, np.zeros((1, 3)), np.zeros((1, 3)))


def test_too_few_particles(table1):
    with pytest.raises(ValueError):
        solver.init_final_data(table1, 80.0, 100)


def test_quasirandom_seeding(table1):
    a = solver.init_final_data(table1, 80.0, 10_000, seeding="quasirandom", seed=1)
    b = solver.init_final_data(table1, 80.0, 10_000, seeding="quasirandom", seed=1)
    assert a.count > 0
    np.testing.assert_array_equal(a.x, b.x)
    with pytest.raises(ValueError):
        solver.init_final_data(table1, 80.0, 10_000, seeding="lattice-ish")


def test_bad_time_arguments(table1):
    with pytest.raises(ValueError):
        solver.run_finite_problem(table1, 40.0, 80.0, dt=0.5, M=10_000)
    with pytest.raises(ValueError):
        solver.run_finite_problem(table1, 0.5, 80.0, M=10_000)
    with pytest.raises(ValueError):
        solver.step_times(40.0, 80.3, -0.25)


def test_cfl_violation(table1):
    with pytest.raises(solver.CFLViolationError):
        solver.run_finite_problem(table1, 40.0, 80.0, dt=-40.0, M=10_000, n_grid=16, n_fine=32)


def test_zero_profile_run(zero_table):
    run = solver.run_finite_problem(zero_table, 10.0, 20.0, dt=-1.0, M=10_000, n_grid=16)
    assert run.initial.count == 0
    assert solver.eval_remainder(run, 10.0).sup == 0.0
    assert all(v == 0.0 for _, v in solver.check_scattering_convergence(run, [10.0, 15.0]))


def test_uniqueness_epsilon_range(table1):
    with pytest.raises(ValueError):
        solver.uniqueness_probe(table1, 40.0, 80.0, epsilons=(0.5,))


def test_run_is_deterministic(table1, small_run):
    again = solver.run_finite_problem(table1, 40.0, 80.0, output_times=(40.0, 60.0),
                                      background=small_run.history.background, **SMALL)
    for k, v in small_run.series.items():
        np.testing.assert_array_equal(v, again.series[k])
    np.testing.assert_array_equal(small_run.snapshots[40.0].x, again.snapshots[40.0].x)


def test_refresh_schedule_relative_spacing():
    times = solver.step_times(20.0, 640.0, -0.25)
    r = solver.refresh_schedule(times, 0.04)
    ts = times[r]
    assert ts[0] == 640.0
    gaps = -np.diff(ts) / ts[:-1]
    assert np.all(gaps >= 0.04 - 0.25 / 20) and np.all(gaps <= 0.04 + 0.25 / 20)


class _Uniform:
    def __init__(self, E):
        self.E = np.asarray(E, dtype=float)

    def __call__(self, t, x):
        return np.repeat(self.E[:, None], len(x), axis=1)


@settings(max_examples=25, deadline=None)
@given(dt=st.floats(0.01, 1.0), e=st.floats(-1.0, 1.0))
def test_leapfrog_step_is_reversible(dt, e):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(20, 3))
    p = rng.normal(size=(20, 3))
    ens = solver.ParticleEnsemble(x.copy(), p.copy(), np.ones(20), np.ones(20), 10.0)
    fld = _Uniform([e, 0.5 * e, 0.0])
    solver.step_backward(ens, fld, -dt)
    solver.step_backward(ens, fld, dt)
    np.testing.assert_allclose(ens.x, x, atol=1e-12)
    np.testing.assert_allclose(ens.p, p, atol=1e-12)


def test_uniform_field_exact():
    # dx/dt = p, dp/dt = E: the leapfrog is exact for a constant field
    x = np.zeros((1, 3))
    p = np.array([[1.0, 0.0, 0.0]])
    ens = solver.ParticleEnsemble(x.copy(), p.copy(), np.ones(1), np.ones(1), 5.0)
    solver.step_backward(ens, _Uniform([2.0, 0, 0]), -0.5)
    np.testing.assert_allclose(ens.p, [[0.0, 0, 0]], atol=1e-15)
    np.testing.assert_allclose(ens.x, [[-0.25, 0, 0]], atol=1e-15)


def test_centered_grid_used_for_deposit():
    g = solver._deposition_grid(np.array([[1.0, -2.0, 0.5]]), 16)
    assert isinstance(g, Grid3) and g.holds_ball(np.sqrt(1 + 4 + 0.25), margin_cells=2)
