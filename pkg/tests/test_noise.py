import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from thirdgrade.noise import (extend_path, load_path, make_noise_spec, ou_path, ou_statistics, ou_transition,
                              radius_kappas, save_path, shift_path, tempered_decay)


def _resid_series(x):
    # residual variance over dt, expanded in x = a dt (coefficients from the exponential series)
    return x**2 / 12 - x**3 / 12 + 17 * x**4 / 360 - 7 * x**5 / 360


@pytest.fixture(scope="module")
def small_spec(small_basis):
    return make_noise_spec(small_basis, 4, 1.0, 0.0, amplitude=5.0)


@settings(max_examples=50, deadline=None)
@given(a=st.floats(1e-3, 1e3), dt=st.floats(1e-5, 1.0))
def test_transition_preserves_stationary_variance(a, dt):
    decay, gain, resid = ou_transition(np.array([a]), np.array([1.0]), dt)
    stat = 1.0 / (2.0 * a)
    total = decay**2 * stat + gain**2 * dt + resid**2
    assert total[0] == pytest.approx(stat, rel=1e-9)


def test_residual_matches_series_on_both_branches():
    x = np.array([1e-6, 1e-5, 1e-4, 5e-4, 1e-3, 2e-3, 5e-3, 1e-2])
    dt = 0.01
    _, _, resid = ou_transition(x / dt, np.ones_like(x), dt)
    np.testing.assert_allclose(resid**2 / dt, _resid_series(x), rtol=2e-6)


def test_gain_limits():
    _, gain, _ = ou_transition(np.array([1e-14, 1.0]), np.ones(2), 1.0)
    assert gain[0] == pytest.approx(1.0, abs=1e-12)
    assert gain[1] == pytest.approx(1.0 - np.exp(-1.0), rel=1e-14)


def test_same_seed_shares_increments_across_chi(small_spec):
    a = ou_path(small_spec, 0.0, 0.1, 0.0, 1.0, 0.01, seed=3)
    b = ou_path(small_spec, 2.0, 0.1, 0.0, 1.0, 0.01, seed=3)
    assert np.array_equal(a.dW, b.dW) and np.array_equal(a.eta, b.eta)
    assert not np.array_equal(a.coeffs, b.coeffs)
    c = ou_path(small_spec, 0.0, 0.1, 0.0, 1.0, 0.01, seed=4)
    assert not np.array_equal(a.dW, c.dW)


def test_shift_is_exact_relabelling(small_spec):
    p = ou_path(small_spec, 0.0, 0.1, -2.0, 2.0, 0.01, seed=1)
    s1 = shift_path(shift_path(p, 0.37), 0.25)
    s2 = shift_path(p, 0.62)
    assert np.array_equal(s1.coeffs, s2.coeffs) and s1.t_min == s2.t_min
    assert np.array_equal(s2.at(0.5), p.at(1.12))
    with pytest.raises(ValueError, match="multiple"):
        shift_path(p, 0.005)


def test_subsample_and_extend_are_exact(small_spec):
    p = ou_path(small_spec, 0.5, 0.1, 0.0, 2.0, 0.01, seed=2)
    sub = p.subsample(4)
    assert np.array_equal(sub.coeffs, p.coeffs[::4])
    assert sub.dt == pytest.approx(0.04) and sub.t_max == pytest.approx(2.0)
    short = ou_path(small_spec, 0.5, 0.1, 0.0, 1.0, 0.01, seed=2)
    longer = extend_path(short, 2.0)
    assert np.array_equal(longer.coeffs, p.coeffs)


def test_window_checks(small_spec):
    p = ou_path(small_spec, 0.0, 0.1, 0.0, 1.0, 0.01, seed=0)
    with pytest.raises(ValueError, match="backward"):
        shift_path(p, 0.0, window=(-0.5, 0.5))
    with pytest.raises(ValueError, match="extension disabled"):
        shift_path(p, 0.0, window=(0.0, 1.5))
    ext = shift_path(p, 0.0, extend=True, window=(0.0, 1.5))
    assert ext.t_max == pytest.approx(1.5)
    with pytest.raises(ValueError):
        p.at(1.2)
    with pytest.raises(ValueError):
        ou_path(small_spec, 0.0, 0.1, 0.0, 1.0, 0.003, seed=0)


def test_small_s_exponent_rejected(small_basis):
    with pytest.raises(ValueError, match="s_exp"):
        make_noise_spec(small_basis, 4, 0.5, 0.0)


def test_interval_mean_matches_fine_quadrature(small_spec):
    p = ou_path(small_spec, 0.0, 0.1, 0.0, 1.0, 0.01, seed=5)
    ta, tb = 0.1234, 0.3871
    ts = np.linspace(ta, tb, 20001)
    vals = np.array([p.at(t) for t in ts])
    brute = np.trapezoid(vals, ts, axis=0) / (tb - ta) if hasattr(np, "trapezoid") else \
        np.trapz(vals, ts, axis=0) / (tb - ta)
    np.testing.assert_allclose(p.interval_mean(ta, tb), brute, rtol=1e-6, atol=1e-9)
    np.testing.assert_allclose(p.window_mean(10, 20), p.interval_mean(0.1, 0.2), rtol=1e-12)


def test_statistics_short_run(small_spec):
    nu = 0.1
    a = nu * small_spec.mu
    dt = 0.05 / a.max()
    n = int(2000 / a.min() / dt)
    p = ou_path(small_spec, 0.0, nu, 0.0, n * dt, dt, seed=9)
    st_ = ou_statistics(p, max(1, int(round(1.0 / a.max() / dt))))
    ev, ea = st_.max_rel_errors()
    assert ev < 0.1 and ea < 0.1


def test_path_io_round_trip(tmp_path, small_spec, small_basis):
    p = ou_path(small_spec, 0.2, 0.1, -1.0, 1.0, 0.01, seed=7)
    save_path(tmp_path / "z", p)
    q = load_path(tmp_path / "z", small_basis)
    assert np.array_equal(p.coeffs, q.coeffs)
    assert q.t_min == p.t_min and q.chi == p.chi and q.seed == 7
    assert np.array_equal(q.field(0.5).data, p.field(0.5).data)


def test_radius_kappas_zero_noise(small_spec):
    p = ou_path(small_spec.scaled(0.0), 0.0, 0.1, -5.0, 0.0, 0.01, seed=0)
    k = radius_kappas(p, 1.0)
    assert np.all(k.squares() == 0.0)


def test_tempered_decay_vanishes(small_spec):
    p = ou_path(small_spec, 0.0, 0.1, -10.0, 0.0, 0.01, seed=0)
    d = tempered_decay(p, 2.0, [0.0, 2.0, 4.0], 6.0)
    assert d.shape == (3, 4)
    assert np.all(d[-1] < 1e-2 * d[0])
