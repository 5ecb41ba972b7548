import numpy as np
import pytest

from thirdgrade.leray import galerkin_project
from thirdgrade.mesh import VelocityField, bump_field, divergence, l2_norm, random_streamfunction_field
from thirdgrade.noise import make_noise_spec, ou_path
from thirdgrade.operators import random_test_field
from thirdgrade.solver import (PhysParams, SolverError, chi_independence_check, continuity_check, energy_residual,
                               galerkin_oracle, gradient_defects, integrate, load_checkpoint, recompose,
                               save_checkpoint, step, trajectory_pressure)


@pytest.fixture(scope="module")
def sp(small_basis):
    return make_noise_spec(small_basis, 4, 1.0, 0.0, amplitude=5.0)


@pytest.fixture(scope="module")
def prm(small):
    return PhysParams(0.1, 0.01, 0.005, 0.0, f=bump_field(small, 0.3))


@pytest.fixture(scope="module")
def smooth(small):
    # mild data: the stability guard never splits a step, so dt is the only step size
    return 0.5 * random_streamfunction_field(small, np.random.default_rng(1), kmax=3)


def test_params_validation():
    with pytest.raises(ValueError, match=r"\|alpha\| < sqrt\(2 nu beta\)"):
        PhysParams(0.5, 1.0, 1.0)
    with pytest.raises(ValueError) as err:
        PhysParams(-1.0, 0.0, 0.0, chi=-1.0)
    msg = str(err.value)
    assert "nu" in msg and "beta" in msg and "chi" in msg
    p = PhysParams(0.5, 0.5, 1.0)
    assert p.eps0 == pytest.approx(0.5)
    assert p.with_chi(2.0).chi == 2.0 and p.chi == 0.0


def test_zero_stays_zero(small):
    tr = integrate(VelocityField.zeros(small), None, 0.0, 0.1, PhysParams(0.1, 0.0, 0.05), 0.01)
    assert np.all(tr.states == 0.0)
    er = energy_residual(tr)
    assert er.max == 0.0
    assert np.all(tr.ledger["alpha_term"] == 0.0)


def test_crank_nicolson_amplification_of_eigenmode(small, small_basis):
    nu, dt, k = 0.1, 0.02, 3
    amp = 1e-9
    e = small_basis.field(k)
    y1 = step(amp * e, VelocityField.zeros(small), VelocityField.zeros(small), PhysParams(nu, 0.0, 1e-300), dt)
    kappa = 0.5 * nu * dt * small_basis.eigenvalues[k]
    expected = (1.0 - kappa) / (1.0 + kappa)
    c = galerkin_project(y1, small_basis) / amp
    assert c[k] == pytest.approx(expected, rel=1e-9)
    assert np.max(np.abs(np.delete(c, k))) < 1e-9


def test_step_output_divergence_free(small, prm, rng):
    y = random_test_field(small, rng)
    z = random_test_field(small, rng)
    out = step(y, z, z, prm, 1e-3)
    assert np.max(np.abs(divergence(out))) < 1e-10 * l2_norm(out) / small.hx


def test_strong_beta_dissipates_monotonically(small, rng):
    y0 = 3.0 * random_test_field(small, rng)
    tr = integrate(y0, None, 0.0, 0.5, PhysParams(0.01, 0.0, 10.0), 1e-3, c_stab=1.0)
    kin = np.append(tr.ledger["kinetic"], tr.ledger["kinetic_end"])
    assert np.all(np.diff(kin) <= 0.0)
    assert kin[-1] < 0.5 * kin[0]


def test_time_convergence_first_order(prm, smooth):
    runs = [integrate(smooth, None, 0.0, 0.4, prm, dt, c_stab=1.0) for dt in (4e-3, 2e-3, 1e-3)]
    assert all(r.stats["substeps"] == 0 for r in runs)
    ratio = l2_norm(runs[0].final - runs[1].final) / l2_norm(runs[1].final - runs[2].final)
    assert 1.6 <= ratio <= 2.4


def test_checkpoint_restart_is_bit_exact(tmp_path, small, prm, sp, rng):
    path = ou_path(sp, 0.0, prm.nu, 0.0, 0.2, 1e-3, seed=4)
    y0 = random_test_field(small, rng) - path.field(0.0)
    full = integrate(y0, path, 0.0, 0.2, prm, 2e-3)
    half = integrate(y0, path, 0.0, 0.1, prm, 2e-3)
    stem = save_checkpoint(tmp_path, half, prm, 4, 50)
    y_mid, meta = load_checkpoint(stem)
    assert meta["step_index"] == 50 and meta["time"] == pytest.approx(0.1)
    rest = integrate(y_mid, path, 0.1, 0.2, prm, 2e-3)
    assert np.array_equal(rest.final.data, full.final.data)
    assert (tmp_path / "checkpoint_00000050_ledger.csv").exists()


def test_energy_residual_halves_and_alpha_column(sp, smooth):
    prm0 = PhysParams(0.1, 0.0, 0.005, 0.3)
    path = ou_path(sp, 0.3, prm0.nu, 0.0, 0.2, 5e-4, seed=1)
    res = []
    for dt in (2e-3, 1e-3):
        tr = integrate(smooth - path.field(0.0), path, 0.0, 0.2, prm0, dt)
        assert tr.stats["substeps"] == 0
        res.append(energy_residual(tr))
    assert res[1].max < 0.02 * res[1].scale
    assert 1.6 <= res[0].max / res[1].max <= 2.4
    assert np.all(tr.ledger["alpha_term"] == 0.0)
    assert np.any(tr.ledger["chi_term"] != 0.0)


def test_recompose_round_trip(small, prm, sp, rng):
    path = ou_path(sp, 0.0, prm.nu, 0.0, 0.1, 1e-3, seed=2)
    tr = integrate(random_test_field(small, rng), path, 0.0, 0.1, prm, 1e-3, store_every=10)
    v = recompose(tr, path)
    z = v.states - tr.states
    back = v.states - z
    ulp = np.spacing(np.abs(v.states)) + np.spacing(np.abs(tr.states))
    assert np.all(np.abs(back - tr.states) <= 2 * ulp)
    same = recompose(tr, None)
    assert np.array_equal(same.states, tr.states)


def test_single_mode_oracle_matches_exponential(small, small_basis):
    nu, c0, T = 0.1, 0.3, 0.5
    prm0 = PhysParams(nu, 0.0, 1e-300)
    orc = galerkin_oracle(c0 * small_basis.field(0), None, 0.0, T, prm0, small_basis, 1, interval=0.1)
    exact = c0 * np.exp(-nu * small_basis.eigenvalues[0] * orc.times)
    np.testing.assert_allclose(orc.coeffs[:, 0], exact, rtol=1e-8)


def test_oracle_energy_balance(small, small_basis, sp):
    prm0 = PhysParams(0.1, 0.02, 0.05, 0.2, f=small_basis.field(1))
    path = ou_path(sp, 0.2, prm0.nu, 0.0, 0.2, 1e-2, seed=3)
    y0 = 0.5 * small_basis.field(0) + 0.2 * small_basis.field(2)
    orc = galerkin_oracle(y0, path, 0.0, 0.2, prm0, small_basis, 6)
    assert orc.energy_residual <= 1e-8
    with pytest.raises(ValueError):
        galerkin_oracle(y0, path, 0.0, 0.2, prm0, small_basis, 17)


def test_continuity_bound_holds(small, sp, rng):
    from thirdgrade.operators import calibrate_constants
    prm0 = PhysParams(0.1, 0.02, 0.05)
    consts = calibrate_constants(small, prm0.eps0, n_samples=100, seed=0, n_trilinear=20)
    path = ou_path(sp, 0.0, prm0.nu, 0.0, 0.3, 2e-3, seed=6)
    y0 = random_test_field(small, rng)
    d = 1e-2 * random_test_field(small, rng)
    a = integrate(y0 + d, path, 0.0, 0.3, prm0, 2e-3)
    b = integrate(y0, path, 0.0, 0.3, prm0, 2e-3)
    res = continuity_check(a, b, prm0, consts)
    assert res.holds and res.observed > 0.0
    same = continuity_check(b, b, prm0, consts)
    assert same.observed == 0.0 and same.bound == 0.0


def test_chi_independence_trivial_and_small(small, prm, sp, rng):
    x0 = random_test_field(small, rng)
    same = chi_independence_check(x0, 5, (0.4, 0.4), 0.1, prm, sp, 2e-3)
    assert same.discrepancy == 0.0
    diff = chi_independence_check(x0, 5, (0.0, 1.0), 0.1, prm, sp, 2e-3, path_dt=5e-4)
    assert 0.0 < diff.relative < 1e-2
    assert diff.y_discrepancy > diff.discrepancy


def test_pressure_gradient_is_a_gradient(small, prm, sp, rng):
    path = ou_path(sp, 0.0, prm.nu, 0.0, 0.05, 1e-3, seed=8)
    tr = integrate(random_test_field(small, rng), path, 0.0, 0.05, prm, 1e-3, store_every=5)
    grads = trajectory_pressure(tr, path, prm)
    assert len(grads) == len(tr.times)
    for g in grads:
        proj, rot = gradient_defects(g)
        assert proj <= 1e-9 and rot <= 1e-8


def test_stability_guard_substeps(small, rng):
    y0 = 2.0 * random_streamfunction_field(small, rng, kmax=3)
    prm0 = PhysParams(0.05, 0.0, 0.05)
    tr = integrate(y0, None, 0.0, 0.04, prm0, 0.02, c_stab=0.5)
    assert tr.stats["substeps"] >= 2
    assert len(tr.step_times) == len(tr.ledger["kinetic"]) + 1
    assert tr.step_times[-1] == pytest.approx(0.04)


def test_blowup_and_window_errors(small, prm, sp, rng):
    y0 = random_test_field(small, rng)
    with pytest.raises(SolverError, match="blow-up") as err:
        # forcing of size 1e3 pushes |y| past 1e-3 * 1e3 within the first step
        strong = PhysParams(0.1, 0.0, 0.005, f=1e3 * bump_field(small, 0.3))
        integrate(VelocityField.zeros(small), None, 0.0, 0.1, strong, 0.01, blowup=1e-3)
    assert "norm" in err.value.diagnostics
    path = ou_path(sp, 0.0, prm.nu, 0.0, 0.1, 1e-3, seed=0)
    with pytest.raises(ValueError, match="window"):
        integrate(y0, path, 0.0, 0.2, prm, 1e-3)
    with pytest.raises(ValueError, match="multiple"):
        integrate(y0, path, 0.0, 0.1, prm, 1.5e-3)
