import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vpscatter.fields import OrderExceededError
from vpscatter.profile import (BumpFactor, ScatteringProfile, build_base_fields, compute_data_norm,
                               default_base_grid, eval_profile_derivative, gaussian_bump_profile,
                               rho_inf_values, scaled, total_mass)


def _fd(profile, Ix, Ip, x, p, axis, slot, h=1e-5):
    e = np.zeros(3)
    e[axis] = h
    if slot == 0:
        return (eval_profile_derivative(profile, Ix, Ip, x + e, p)
                - eval_profile_derivative(profile, Ix, Ip, x - e, p)) / (2 * h)
    return (eval_profile_derivative(profile, Ix, Ip, x, p + e)
            - eval_profile_derivative(profile, Ix, Ip, x, p - e)) / (2 * h)


def test_derivatives_match_finite_differences(profile, rng):
    x = np.asarray(profile.terms[0][1].center) + rng.uniform(-0.2, 0.2, 3)
    p = np.asarray(profile.terms[0][2].center) + rng.uniform(-0.2, 0.2, 3)
    for Ix, Ip, axis, slot in [((0, 0, 0), (0, 0, 0), 0, 0), ((1, 0, 0), (0, 0, 0), 2, 1),
                               ((0, 1, 0), (0, 0, 2), 1, 0), ((0, 0, 0), (1, 1, 0), 2, 1)]:
        bumped = list(Ix if slot == 0 else Ip)
        bumped[axis] += 1
        exact = eval_profile_derivative(profile, tuple(bumped) if slot == 0 else Ix,
                                        Ip if slot == 0 else tuple(bumped), x, p)
        approx = _fd(profile, Ix, Ip, x, p, axis, slot)
        assert exact == pytest.approx(approx, rel=1e-5, abs=1e-6 * max(1.0, abs(exact)))


def test_vanishes_outside_support(profile):
    far = np.array([0.9, 0.0, 0.0])
    assert eval_profile_derivative(profile, (0, 0, 0), (0, 0, 0), far, np.zeros(3)) == 0.0
    assert eval_profile_derivative(profile, (2, 1, 0), (0, 3, 0), np.zeros(3), far) == 0.0


def test_order_budget(profile):
    with pytest.raises(OrderExceededError):
        eval_profile_derivative(profile, (8, 0, 0), (8, 0, 0), np.zeros(3), np.zeros(3))


def test_support_radius_enforced():
    u = BumpFactor((0.5, 0, 0), 0.4)
    v = BumpFactor((0.0, 0, 0), 0.3)
    with pytest.raises(ValueError):
        ScatteringProfile(((1.0, u, v),), support_radius=1.0)


def test_negative_amplitude_rejected():
    with pytest.raises(ValueError):
        gaussian_bump_profile(amplitude=-1.0)


def test_zero_profile_data_norm_is_zero():
    assert compute_data_norm(gaussian_bump_profile(amplitude=0.0), 2) == 0.0


def test_data_norm_monotone_in_order(profile):
    assert compute_data_norm(profile, 1, nodes=33) < compute_data_norm(profile, 2, nodes=33)


def test_total_mass_matches_density(profile):
    base = build_base_fields(profile, default_base_grid(profile, 48))
    w = base.grid.trapezoid_weights()
    assert -np.sum(w * base.rho_inf.values) == pytest.approx(total_mass(profile), rel=1e-6)


def test_rho_inf_nonpositive(profile, rng):
    p = rng.uniform(-0.5, 0.5, (200, 3))
    assert np.all(rho_inf_values(profile, p) <= 0)


@settings(max_examples=20, deadline=None)
@given(c=st.floats(0.0, 5.0))
def test_scaling_is_linear(c):
    base = gaussian_bump_profile(amplitude=2.0)
    x = np.array([0.05, 0.0, 0.0])
    p = np.array([0.0, 0.1, -0.05])
    a = eval_profile_derivative(scaled(base, c), (1, 0, 0), (0, 1, 0), x, p)
    b = c * eval_profile_derivative(base, (1, 0, 0), (0, 1, 0), x, p)
    assert a == pytest.approx(b, rel=1e-12, abs=1e-300)


def test_profile_dict_roundtrip(profile):
    again = ScatteringProfile.from_dict(profile.to_dict())
    x = np.array([[0.1, 0.0, 0.05]])
    p = np.array([[0.0, 0.1, -0.1]])
    assert again(x, p)[0] == profile(x, p)[0]
