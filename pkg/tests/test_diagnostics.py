import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vpscatter.diagnostics import (DecaySeries, DegenerateSeriesError, Report, energy_norm,
                                   fit_rate, fit_rate_joint)

T = (50.0, 100.0, 200.0, 400.0, 800.0)


def _series(A, alpha, m, t=T):
    t = np.asarray(t)
    return DecaySeries(tuple(t), tuple(A * np.log(t) ** m / t ** alpha))


@settings(max_examples=40, deadline=None)
@given(A=st.floats(1e-3, 1e3), alpha=st.floats(0.5, 6.0), m=st.integers(0, 4))
def test_exact_power_law_recovered(A, alpha, m):
    fit = fit_rate(_series(A, alpha, m), m)
    assert fit.alpha == pytest.approx(alpha, abs=1e-9)
    assert fit.A == pytest.approx(A, rel=1e-8)
    assert fit.rms < 1e-9


def test_wrong_m_biases_alpha():
    fit = fit_rate(_series(1.0, 3.0, 2), 0)
    assert fit.alpha < 3.0 - 0.3


def test_joint_fit_flagged():
    fit = fit_rate_joint(_series(2.0, 3.0, 2))
    assert fit.ill_conditioned
    assert fit.alpha == pytest.approx(3.0, abs=1e-6)
    assert fit.condition > 100


def test_zeros_dropped_and_counted():
    v = list(_series(1.0, 2.0, 1).v) + [0.0]
    s = DecaySeries(T + (1600.0,), tuple(v))
    fit = fit_rate(s, 1)
    assert fit.dropped == 1 and fit.n == 5


def test_too_few_points():
    with pytest.raises(DegenerateSeriesError):
        fit_rate(DecaySeries((10.0, 20.0, 40.0), (1.0, 0.5, 0.25)), 0)


def test_times_at_or_below_one_rejected():
    with pytest.raises(DegenerateSeriesError):
        fit_rate(DecaySeries((1.0, 2.0, 3.0, 4.0), (1.0, 0.5, 0.3, 0.2)), 0)


def test_series_validation():
    with pytest.raises(ValueError):
        DecaySeries((2.0, 1.0), (1.0, 1.0))
    with pytest.raises(ValueError):
        DecaySeries((1.0, 2.0), (1.0, -1.0))
    s = DecaySeries.from_pairs([(3.0, 1.0), (2.0, 2.0)])
    assert s.t == (2.0, 3.0)


def test_ci_covers_noisy_truth(rng):
    hits = 0
    for _ in range(200):
        s = _series(1.0, 2.0, 2)
        v = np.asarray(s.v) * np.exp(rng.normal(0, 0.05, len(s.v)))
        fit = fit_rate(DecaySeries(s.t, tuple(v)), 2)
        hits += abs(fit.alpha - 2.0) <= fit.alpha_ci
    assert hits >= 180


class _Flat:
    """Zero potential stand-in with the spline interface."""

    def gradient(self, p):
        return np.zeros((3, len(p)))

    def derivatives(self, p, orders):
        return np.zeros((len(orders), len(p)))


def test_energy_norm_of_transported_gaussian():
    # g = G(x - tp, p) with G = exp(-|y|^2 - |p|^2): L g = ∂_2 G and ∂_p g / t ≈ -∂_1 G,
    # so ‖L g‖² = ‖∂_p g/t‖² ≈ 3‖g‖² and the order-1 norm is √(7 + 3/t²)‖g‖
    fn = lambda t, x, p: np.exp(-np.sum((x - t * p) ** 2, 1) - np.sum(p ** 2, 1))  # noqa: E731
    ax = np.linspace(-3, 3, 9)
    m = np.stack(np.meshgrid(*[ax] * 3, indexing="ij"), -1).reshape(-1, 3)
    y = np.repeat(m, len(m), axis=0)
    p = np.tile(m, (len(m), 1))
    dv = (ax[1] - ax[0]) ** 6
    n0 = energy_norm(fn, 10.0, y, p, dv, _Flat(), order=0)
    assert n0 == pytest.approx((np.pi / 2) ** 1.5, rel=2e-2)
    n1 = energy_norm(fn, 10.0, y, p, dv, _Flat(), order=1)
    assert n1 == pytest.approx(np.sqrt(7.03) * n0, rel=2e-2)


def test_energy_norm_order_check():
    with pytest.raises(ValueError):
        energy_norm(lambda t, x, p: 0 * x[:, 0], 2.0, np.zeros((1, 3)), np.zeros((1, 3)), 1.0, _Flat(), 2)


def test_report_cites_hashes():
    rep = Report("demo", "a" * 64, "b" * 64)
    rep.add("x", 1.0, "<= 2", True)
    rep.add_rate("rate", fit_rate(_series(1.0, 2.0, 0), 0), 2.0, 0.1)
    rep.series["s"] = _series(1.0, 2.0, 0)
    text = rep.render()
    lines = [ln for ln in text.splitlines() if ln.startswith(("PASS", "FAIL", "note", "overall"))]
    assert lines and all("[config aaaaaaaaaaaa table bbbbbbbbbbbb]" in ln for ln in lines)
    assert rep.passed
    rep.add("y", 3.0, "<= 2", False)
    assert not rep.passed and "overall: FAIL" in rep.render()
