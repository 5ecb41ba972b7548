import numpy as np
import pytest

from thirdgrade.leray import stokes_eigs
from thirdgrade.mesh import build_grid, bump_field
from thirdgrade.noise import make_noise_spec
from thirdgrade.operators import calibrate_constants
from thirdgrade.solver import PhysParams

ACCEPTANCE_LINES = {}


def record_acceptance(number: int, name: str, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES[number] = f"[{'PASS' if ok else 'FAIL'}] {number:2d}. {name}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])


@pytest.fixture(scope="session")
def channel():
    return build_grid(4.0, 1.0, 64, 16)


@pytest.fixture(scope="session")
def small():
    return build_grid(2.0, 1.0, 16, 8)


@pytest.fixture(scope="session")
def basis(channel):
    return stokes_eigs(channel, 16)


@pytest.fixture(scope="session")
def small_basis(small):
    return stokes_eigs(small, 12)


@pytest.fixture(scope="session")
def forcing(channel):
    return 2.0 * bump_field(channel, 0.3)


@pytest.fixture(scope="session")
def params(forcing):
    return PhysParams(0.05, 0.01, 0.01, 0.0, f=forcing)


@pytest.fixture(scope="session")
def spec(basis):
    return make_noise_spec(basis, 8, 1.0, 0.0, amplitude=200.0)


@pytest.fixture(scope="session")
def consts(channel, params, basis):
    return calibrate_constants(channel, params.eps0, n_samples=300, seed=0, safety=10.0,
                               lam_hat=basis.lam_hat, n_trilinear=100)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
