import math

import numpy as np
import pytest

from thirdgrade.attractor import (InitBall, MCEstimate, absorbing_radius_estimate, cloud_radius, cloud_tail_masses,
                                  hausdorff_semidistance, invariant_measure_estimate, member_seed, noise_scaling_study,
                                  pullback_ensemble, semidistance_nonincreasing, tail_decay_study, tail_mass,
                                  transition_average)
from thirdgrade.mesh import VelocityField, bump_field, build_grid, l2_norm
from thirdgrade.noise import make_noise_spec, ou_path
from thirdgrade.operators import calibrate_constants, random_test_field
from thirdgrade.solver import PhysParams


@pytest.fixture(scope="module")
def sp(small_basis):
    return make_noise_spec(small_basis, 4, 1.0, 0.0, amplitude=5.0)


@pytest.fixture(scope="module")
def prm(small):
    return PhysParams(0.1, 0.01, 0.005, 0.0, f=bump_field(small, 0.3))


@pytest.fixture(scope="module")
def small_consts(small, prm, small_basis):
    return calibrate_constants(small, prm.eps0, n_samples=100, seed=0, lam_hat=small_basis.lam_hat,
                               n_trilinear=20)


def test_hausdorff_cases(small):
    rng = np.random.default_rng(0)
    a = [random_test_field(small, rng) for _ in range(3)]
    b = a + [random_test_field(small, rng)]
    assert hausdorff_semidistance(a, a) == 0.0
    assert hausdorff_semidistance(a, b) == 0.0
    assert hausdorff_semidistance(b, a) > 0.0
    assert hausdorff_semidistance([a[0]], [a[1]]) == pytest.approx(l2_norm(a[0] - a[1]), rel=1e-12)
    raw = np.array([v.data for v in a])
    assert hausdorff_semidistance(raw, raw, small) == 0.0
    with pytest.raises(ValueError):
        hausdorff_semidistance([], a)
    with pytest.raises(ValueError):
        hausdorff_semidistance(a, [VelocityField.zeros(build_grid(2.0, 1.0, 16, 10))])


def test_tail_mass_cases(channel):
    v = bump_field(channel, 0.3)
    assert tail_mass(VelocityField.zeros(channel), 0.5) == 0.0
    assert tail_mass(v, 10.0) == 0.0
    ks = channel.hx * np.arange(1, 40)
    masses = np.array([tail_mass(v, k) for k in ks])
    assert np.all(np.diff(masses) <= 0.0)
    assert masses[0] <= l2_norm(v) ** 2


def test_pullback_horizon_validation(small, prm, sp):
    with pytest.raises(ValueError):
        pullback_ensemble(0, prm, sp, [1.0, 0.5], InitBall(1.0), 2, 0.01)
    with pytest.raises(ValueError):
        pullback_ensemble(0, prm, sp, [0.0, 0.5], InitBall(1.0), 2, 0.01)


def test_duplicate_horizons_give_zero_semidistance(small, prm, sp):
    res = pullback_ensemble(0, prm, sp, [0.2, 0.2], InitBall(1.0), 2, 0.01)
    assert res.semidistances[0] == 0.0
    assert not res.errors


def test_zero_noise_clouds_contract(small, small_basis, sp):
    prm0 = PhysParams(0.1, 0.01, 0.005)
    res = pullback_ensemble(0, prm0, sp.scaled(0.0), [0.5, 1.0, 2.0], InitBall(1.0), 3, 0.01)
    assert np.all(np.diff(res.radii) < 0.0)
    rate = 0.1 * small_basis.lam_hat
    assert res.radii[-1] <= math.exp(-rate * 2.0) * 1.0 * 1.01


def test_kappa11_sq_is_two_without_noise_and_forcing(small, small_consts, sp):
    prm0 = PhysParams(0.1, 0.01, 0.005)
    path = ou_path(sp.scaled(0.0), 0.0, 0.1, -20.0, 0.0, 0.01, seed=0)
    ar = absorbing_radius_estimate(path, prm0, small_consts)
    assert ar.kappa11 == pytest.approx(math.sqrt(2.0), rel=1e-14)
    assert ar.kappa12 == 0.0
    assert ar.absorption_time(1.0) == 0.0
    assert ar.absorption_time(math.e) == pytest.approx(2.0 / ar.rate)


def test_radius_grows_with_forcing(small, small_consts, sp):
    path = ou_path(sp, 0.0, 0.1, -20.0, 0.0, 0.01, seed=0)
    radii = [absorbing_radius_estimate(path, PhysParams(0.1, 0.01, 0.005, f=a * bump_field(small, 0.3)),
                                       small_consts).kappa13 for a in (0.0, 1.0, 2.0)]
    assert radii[0] < radii[1] < radii[2]


def test_window_too_short(small, small_consts, sp):
    # strong noise so the path integrals dominate kappa11; a window of a few relaxation times is too short
    prm0 = PhysParams(0.1, 0.01, 0.005)
    path = ou_path(sp.scaled(1000.0), 0.0, 0.1, -0.1, 0.0, 0.01, seed=0)
    with pytest.raises(ValueError, match="window too short"):
        absorbing_radius_estimate(path, prm0, small_consts)
    long = ou_path(sp.scaled(1000.0), 0.0, 0.1, -20.0, 0.0, 0.01, seed=0)
    assert absorbing_radius_estimate(long, prm0, small_consts).tail_change <= 0.01


def test_transition_average_trivial_cases(small, prm, sp):
    x = random_test_field(small, np.random.default_rng(1))
    est = transition_average(lambda v: l2_norm(v) ** 2, 0.0, 5, x, prm, sp, 0, 0.01)
    assert est.mean == l2_norm(x) ** 2 and est.se == 0.0
    const = transition_average(lambda v: 3.0, 0.1, 4, x, prm, sp, 0, 0.01)
    assert const.mean == 3.0 and const.se == 0.0
    assert np.isnan(MCEstimate.of([1.0]).se)


def test_invariant_measure_of_zero_dynamics(small, sp):
    prm0 = PhysParams(0.1, 0.01, 0.005)
    rep = invariant_measure_estimate(prm0, sp.scaled(0.0), 0.2, 0.5, 3, {"energy": lambda v: l2_norm(v) ** 2},
                                     0.01, 0)
    assert np.all(rep.mean == 0.0) and np.all(rep.z_scores == 0.0) and np.all(rep.passes)


def test_tail_radius_grows_as_threshold_shrinks(channel, basis):
    prm0 = PhysParams(0.05, 0.01, 0.01, f=2.0 * bump_field(channel, 0.3))
    spec = make_noise_spec(basis, 4, 1.0, 0.0, amplitude=50.0)
    res = pullback_ensemble(0, prm0, spec, [0.5, 1.0], InitBall(1.0), 2, 2.5e-3, c_stab=1.0)
    ks = channel.hx * np.arange(1, 33)
    study = tail_decay_study(res, ks, [1e-1, 1e-2, 1e-3])
    k0 = study.k0[:, -1]
    assert np.all(np.isfinite(k0))
    assert np.all(np.diff(k0) >= 0.0)
    assert study.to_dict()["eps"] == [1e-1, 1e-2, 1e-3]


def test_noise_scaling_semidistance_shrinks(small, prm, sp):
    out = noise_scaling_study(0, prm, sp, 0.5, InitBall(1.0), 2, 0.01, gammas=(1.0, 0.5, 0.25))
    d = [out[g] for g in (1.0, 0.5, 0.25)]
    assert d[0] > d[1] > d[2] > 0.0


def test_thread_count_does_not_change_results(small, prm, sp):
    one = pullback_ensemble(3, prm, sp, [0.2, 0.4], InitBall(1.0), 3, 0.01, threads=1)
    many = pullback_ensemble(3, prm, sp, [0.2, 0.4], InitBall(1.0), 3, 0.01, threads=3)
    for a, b in zip(one.clouds, many.clouds):
        assert np.array_equal(a, b)


def test_member_seeds_distinct_and_reproducible():
    a = member_seed(7, 1, 2).generate_state(2)
    b = member_seed(7, 1, 2).generate_state(2)
    c = member_seed(7, 2, 1).generate_state(2)
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_semidistance_monotonicity_helper():
    assert semidistance_nonincreasing([5.0, 3.0, 1.0, 1.0])
    assert not semidistance_nonincreasing([5.0, 1.0, 2.0])
    assert semidistance_nonincreasing([1e-13, 1.5e-13, 1e-13])


def test_cloud_radius_is_largest_member(small):
    rng = np.random.default_rng(4)
    fields = [random_test_field(small, rng) for _ in range(4)]
    cloud = np.array([v.data for v in fields])
    assert cloud_radius(cloud, small) == pytest.approx(max(l2_norm(v) for v in fields), rel=1e-12)


def test_centred_forcing_tails_vanish_inside_channel(channel, basis):
    # zero noise, narrow centred swirl forcing: the steady response decays along the channel
    prm0 = PhysParams(0.05, 0.01, 0.01, f=2.0 * bump_field(channel, 0.15))
    spec0 = make_noise_spec(basis, 8, 1.0, 0.0, amplitude=200.0).scaled(0.0)
    res = pullback_ensemble(0, prm0, spec0, [6.0, 8.0], InitBall(0.0), 1, 2.5e-3, c_stab=1.0)
    ks = channel.hx * np.arange(1, 33)
    masses = cloud_tail_masses(res, ks)[-1]
    assert np.all(np.diff(masses) < 0.0)
    below = ks[masses < 1e-8]
    assert len(below) and below[0] <= 0.5 * channel.Lx - 4 * channel.hx
