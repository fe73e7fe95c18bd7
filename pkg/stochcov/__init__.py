"""Leading-order noise-induced covariance around limit cycles and quasiperiodic 2-tori."""

from .cycle_cov import analyse_cycle, solve_periodic_orbit
from .errors import (
    ConfigError,
    ConvergenceError,
    Error,
    IntegrationError,
    ProblemError,
    SingularSystemError,
    VerificationError,
)
from .fourier import FourierOps
from .model import Problem, ProblemSpec, build_problem, builtin, load_builtin
from .sde_lab import CycleGeometry, SdeRun, TorusGeometry, euler_maruyama, simulate_sections
from .torus import solve_torus
from .torus_cov import analyse_torus

__all__ = [
    "ConfigError",
    "ConvergenceError",
    "CycleGeometry",
    "Error",
    "FourierOps",
    "IntegrationError",
    "Problem",
    "ProblemError",
    "ProblemSpec",
    "SdeRun",
    "SingularSystemError",
    "TorusGeometry",
    "VerificationError",
    "analyse_cycle",
    "analyse_torus",
    "build_problem",
    "builtin",
    "euler_maruyama",
    "load_builtin",
    "simulate_sections",
    "solve_periodic_orbit",
    "solve_torus",
]
