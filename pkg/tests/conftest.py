import sys
from pathlib import Path

import pytest
from dotenv import load_dotenv

# Ensure project root is on sys.path so `stochcov`, `commands` and `shared` can be imported
project_root = Path(__file__).resolve().parents[1]
if str(project_root) not in sys.path:
    sys.path.insert(0, str(project_root))

# Load environment variables for tests (e.g., STOCHCOV_WORKERS)
load_dotenv()

from stochcov.cycle_cov import analyse_cycle  # noqa: E402
from stochcov.fourier import FourierOps  # noqa: E402
from stochcov.model import VDP_RHO, load_builtin  # noqa: E402
from stochcov.sde_lab import CycleGeometry, TorusGeometry  # noqa: E402
from stochcov.torus import run_schedule, solve_torus  # noqa: E402
from stochcov.torus_cov import analyse_torus  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long Monte-Carlo and vdp_coupled runs")


@pytest.fixture(scope="session")
def hopf():
    return load_builtin("hopf")


@pytest.fixture(scope="session")
def linosc():
    return load_builtin("linosc")


@pytest.fixture(scope="session")
def hopf_analysis(hopf):
    """(po, adj, proj, cov) of the Hopf normal form."""
    return analyse_cycle(hopf)


@pytest.fixture(scope="session")
def linosc_analysis(linosc):
    return analyse_cycle(linosc)


@pytest.fixture(scope="session")
def qp_torus():
    problem = load_builtin("qp_radial")
    return solve_torus(problem, FourierOps(4), mesh_intervals=40)


@pytest.fixture(scope="session")
def qp_analysis(qp_torus):
    """(adj, proj, cov) of the forced radial torus with the fixed-point covariance."""
    return analyse_torus(qp_torus, method="fixed_point")


@pytest.fixture(scope="session")
def hopf_geometry(hopf_analysis):
    po, adj, _, cov = hopf_analysis
    return CycleGeometry.from_analysis(po, adj, cov)


@pytest.fixture(scope="session")
def linosc_geometry(linosc_analysis):
    po, adj, _, cov = linosc_analysis
    return CycleGeometry.from_analysis(po, adj, cov)


@pytest.fixture(scope="session")
def qp_geometry(qp_torus, qp_analysis):
    adj, _, cov = qp_analysis
    return TorusGeometry.from_analysis(qp_torus, adj, cov)


@pytest.fixture(scope="session")
def vdp_torus():
    """Coupled oscillators at epsilon = beta = 0.5, reached from the uncoupled torus."""
    problem = load_builtin("vdp_coupled", epsilon=0.1, beta=0.0, delta=VDP_RHO**2 - 1.0)
    steps = [0.1, 0.2, 0.3, 0.4, 0.5]
    return run_schedule(problem, FourierOps(14), [("epsilon", steps), ("beta", steps)])


@pytest.fixture(scope="session")
def vdp_analysis(vdp_torus):
    return analyse_torus(vdp_torus, method="fixed_point")


@pytest.fixture(scope="session")
def vdp_geometry(vdp_torus, vdp_analysis):
    adj, _, cov = vdp_analysis
    return TorusGeometry.from_analysis(vdp_torus, adj, cov)
