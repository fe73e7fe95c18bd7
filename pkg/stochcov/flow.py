"""Deterministic trajectories, fundamental solutions and monodromy spectra.

Integration uses fixed-step classical RK4 in the rescaled phase, with cubic
Hermite dense output built from the stage-one slopes at every step.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Tuple

import numpy as np
import scipy.linalg

from .errors import ConvergenceError, IntegrationError, VerificationError
from .model import Problem
from .polynomials import PiecewisePolynomial

logger = logging.getLogger(__name__)

DEFAULT_FUNDAMENTAL_STEPS = 2000
TRIVIAL_TOL = 1e-6
PERIODICITY_TOL = 1e-8
CLUSTER_RTOL = 1e-6


class Trajectory(PiecewisePolynomial):
    """Vector-valued piecewise polynomial in the rescaled phase."""

    @property
    def dim(self) -> int:
        return self.value_shape[0]


class FundamentalSolution(PiecewisePolynomial):
    """Matrix-valued solution of the variational equation with X(t_start) = I.

    ``orbit`` is the state trajectory integrated together with X on the same
    mesh; downstream quantities evaluate gamma from it.
    """

    orbit: Optional[Trajectory] = None

    def inverse_apply(self, t, rhs) -> np.ndarray:
        """X(t)^{-1} rhs via an LU factorization of X(t)."""
        X = self(t)
        if X.ndim == 2:
            return scipy.linalg.lu_solve(scipy.linalg.lu_factor(X), rhs)
        return np.linalg.solve(X, rhs)

    def inverse_transpose_apply(self, t, rhs) -> np.ndarray:
        """X(t)^{-T} rhs."""
        X = self(t)
        if X.ndim == 2:
            return scipy.linalg.lu_solve(scipy.linalg.lu_factor(X), rhs, trans=1)
        return np.linalg.solve(np.swapaxes(X, -1, -2), rhs)

    def at_end(self) -> np.ndarray:
        return self(self.t_end)


@dataclass(frozen=True)
class MonodromyInfo:
    matrix: np.ndarray
    eigenvalues: np.ndarray
    trivial_index: Optional[int]
    contraction_rate: float
    spectral_radius_transversal: float
    transversally_stable: bool
    moduli: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        return {
            "eigenvalues_real": self.eigenvalues.real.tolist(),
            "eigenvalues_imag": self.eigenvalues.imag.tolist(),
            "moduli": self.moduli.tolist(),
            "trivial_index": self.trivial_index,
            "contraction_rate": self.contraction_rate,
            "spectral_radius_transversal": self.spectral_radius_transversal,
            "transversally_stable": self.transversally_stable,
        }


def rk4(
    rhs: Callable[[float, np.ndarray], np.ndarray],
    t0: float,
    z0: np.ndarray,
    h: float,
    steps: int,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    mesh = t0 + h * np.arange(steps + 1)
    values = np.empty((steps + 1,) + z0.shape)
    slopes = np.empty_like(values)
    z = np.array(z0, dtype=float)
    values[0] = z
    for k in range(steps):
        t = mesh[k]
        k1 = rhs(t, z)
        k2 = rhs(t + h / 2, z + h / 2 * k1)
        k3 = rhs(t + h / 2, z + h / 2 * k2)
        k4 = rhs(t + h, z + h * k3)
        slopes[k] = k1
        z = z + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(z)):
            raise IntegrationError("Non-finite state encountered during RK4 integration", step=k + 1)
        values[k + 1] = z
    slopes[steps] = rhs(mesh[steps], z)
    return mesh, values, slopes


def integrate_orbit(
    problem: Problem,
    x0: np.ndarray,
    T: float,
    t_end: float,
    steps: int,
    t0: float = 0.0,
) -> Trajectory:
    """Integrate x' = T f(t, x) from t0 to t_end with fixed-step RK4."""
    if steps < 1:
        raise ValueError("steps must be at least 1")
    x0 = np.asarray(x0, dtype=float)
    h = (t_end - t0) / steps
    mesh, values, slopes = rk4(lambda t, x: T * problem.f(t, x), t0, x0, h, steps)
    return Trajectory.from_hermite(mesh, values, slopes)


def fundamental_solution(
    problem: Problem,
    orbit: Trajectory,
    T: float,
    steps: Optional[int] = None,
) -> FundamentalSolution:
    """Integrate X' = T Df(gamma) X, X(0) = I, together with gamma from orbit(t_start).

    The step count is rounded up to a multiple of the orbit's interval count so
    that the orbit mesh points are mesh points of the result.
    """
    n = problem.n
    min_steps = DEFAULT_FUNDAMENTAL_STEPS if steps is None else steps
    per_interval = max(1, math.ceil(min_steps / orbit.n_intervals))
    total = per_interval * orbit.n_intervals
    t0, t1 = orbit.t_start, orbit.t_end
    h = (t1 - t0) / total

    def rhs(t, z):
        x = z[:, 0]
        X = z[:, 1:]
        dx = T * problem.f(t, x)
        dX = T * problem.jac(t, x) @ X
        return np.concatenate([dx[:, None], dX], axis=1)

    z0 = np.concatenate([np.asarray(orbit(t0), dtype=float)[:, None], np.eye(n)], axis=1)
    mesh, values, slopes = rk4(rhs, t0, z0, h, total)
    fund = FundamentalSolution.from_hermite(mesh, values[:, :, 1:], slopes[:, :, 1:])
    fund.orbit = Trajectory.from_hermite(mesh, values[:, :, 0], slopes[:, :, 0])
    logger.debug(f"Fundamental solution for {problem.name}: {total} RK4 steps, det X(end) = {np.linalg.det(fund.at_end()):.3e}")
    return fund


def _cluster_moduli(eigenvalues: np.ndarray) -> np.ndarray:
    """Moduli with clustered eigenvalues replaced by the cluster's geometric-mean modulus.

    Eigenvalues of a perturbed Jordan block split like sqrt(eps); the product
    over the cluster does not.
    """
    moduli = np.abs(eigenvalues)
    out = moduli.copy()
    used = np.zeros(len(eigenvalues), dtype=bool)
    for i in range(len(eigenvalues)):
        if used[i]:
            continue
        scale = max(moduli[i], 1e-300)
        members = [j for j in range(len(eigenvalues)) if not used[j] and abs(eigenvalues[j] - eigenvalues[i]) <= math.sqrt(CLUSTER_RTOL) * scale]
        used[members] = True
        mean = float(np.prod(moduli[members]) ** (1.0 / len(members)))
        out[members] = mean
    return out


def monodromy(
    X: FundamentalSolution,
    problem: Problem,
    orbit: Optional[Trajectory] = None,
    strict: bool = False,
) -> MonodromyInfo:
    """Eigen-decomposition of X(1) with the trivial multiplier identified for autonomous problems."""
    orbit = orbit if orbit is not None else X.orbit
    gap = float(np.max(np.abs(orbit(orbit.t_end) - orbit(orbit.t_start))))
    if gap > PERIODICITY_TOL:
        raise VerificationError(f"Orbit is not periodic: |gamma(1) - gamma(0)| = {gap:.3e}")

    M = X.at_end()
    eigenvalues = scipy.linalg.eigvals(M)
    order = np.lexsort((-eigenvalues.real, -np.abs(eigenvalues)))
    eigenvalues = eigenvalues[order]
    moduli = _cluster_moduli(eigenvalues)

    trivial_index = None
    mask = np.ones(len(eigenvalues), dtype=bool)
    if problem.autonomous:
        distance = np.abs(eigenvalues - 1.0)
        candidates = np.lexsort((-eigenvalues.real, distance))
        trivial_index = int(candidates[0])
        if distance[trivial_index] >= TRIVIAL_TOL:
            raise ConvergenceError(
                f"No Floquet multiplier within {TRIVIAL_TOL:g} of 1 (nearest {eigenvalues[trivial_index]:.6g}); orbit not converged"
            )
        f0 = problem.f(orbit.t_start, orbit(orbit.t_start))
        residual = np.linalg.norm((M - np.eye(problem.n)) @ f0)
        if residual > TRIVIAL_TOL * max(1.0, np.linalg.norm(f0)):
            raise VerificationError(f"(X(1) - I) f(gamma(0)) = {residual:.3e}; f(gamma(0)) is not a right nullvector")
        mask[trivial_index] = False

    radius = float(np.max(moduli[mask])) if mask.any() else 0.0
    stable = radius < 1.0
    if radius <= 0.0:
        rate = 0.0
    elif radius >= 1.0:
        rate = math.inf
    else:
        rate = -1.0 / math.log(radius)

    if not stable:
        message = f"{problem.name}: transversal spectral radius {radius:.6g} >= 1, not transversally stable"
        if strict:
            raise ConvergenceError(message)
        logger.warning(message)

    return MonodromyInfo(
        matrix=M,
        eigenvalues=eigenvalues,
        trivial_index=trivial_index,
        contraction_rate=rate,
        spectral_radius_transversal=radius,
        transversally_stable=stable,
        moduli=moduli,
    )
