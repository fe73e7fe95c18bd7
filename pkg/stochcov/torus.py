"""Quasiperiodic 2-tori at fixed rotation number.

The torus is discretized as 2N + 1 collocation segments gamma(phi_j, t), t in [0, 1],
coupled by the boundary condition gamma(phi, 1) = gamma(phi + rho, 0), which on node
values reads Xi(1) = P(rho) Xi(0) with P = F_inv R(rho) F.

With rho fixed a torus exists only on a codimension-one parameter set, so one
problem parameter is solved for together with T (autonomous problems).
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .collocation import CollocationMesh, NewtonReport, SparseBlocks, add_linear_ode_blocks, newton_solve, ode_residual
from .cycle_cov import PhaseCondition
from .errors import ConvergenceError, ProblemError, SingularSystemError
from .flow import FundamentalSolution, Trajectory, fundamental_solution
from .fourier import FourierOps, derivative_along_phi, evaluate_nodes
from .model import Problem

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class TorusSolution:
    problem: Problem
    ops: FourierOps
    cmesh: CollocationMesh
    rho: float
    T: float
    values: np.ndarray
    free_param: Optional[str]
    phases: Tuple[PhaseCondition, ...]
    fundamental: Tuple[FundamentalSolution, ...]
    newton: Optional[NewtonReport] = None

    @property
    def autonomous(self) -> bool:
        return self.problem.autonomous

    @property
    def n(self) -> int:
        return self.problem.n

    @property
    def K(self) -> int:
        return self.ops.size

    @property
    def m(self) -> int:
        """Number of tangent directions beyond the phi direction."""
        return 1 if self.autonomous else 0

    @property
    def segments(self) -> List[Trajectory]:
        return [Trajectory.from_node_values(self.cmesh.mesh, v) for v in self.values]

    def nodes_at(self, t: float) -> np.ndarray:
        """gamma(phi_j, t) for all nodes, shape (2N + 1, n)."""
        return np.stack([seg(t) for seg in self.segments])

    def gamma(self, phi, t: float) -> np.ndarray:
        return evaluate_nodes(self.ops, self.nodes_at(t), phi)

    def dt_gamma(self) -> np.ndarray:
        """T f(gamma) at every base point, shape (2N + 1, P, n)."""
        return self.T * self.problem.f(self.cmesh.base_times[None, :], self.values)

    def dphi_gamma(self) -> np.ndarray:
        return derivative_along_phi(self.ops, self.values)

    def boundary_residual(self) -> float:
        P = self.ops.rotation(self.rho)
        return float(np.max(np.abs(self.values[:, -1] - P @ self.values[:, 0])))

    def collocation_residual(self) -> float:
        worst = 0.0
        for seg_values in self.values:
            r, _, _ = ode_residual(self.problem, self.cmesh, seg_values, self.T)
            worst = max(worst, float(np.max(np.abs(r))))
        return worst


def sample_torus_guess(problem: Problem, ops: FourierOps, cmesh: CollocationMesh, rho: float, guess=None) -> np.ndarray:
    """Base-point values (2N + 1, P, n) from an array, a callable guess(phi, t) or the problem's ansatz."""
    if guess is not None and not callable(guess):
        values = np.asarray(guess, dtype=float)
        if values.shape != (ops.size, cmesh.n_points, problem.n):
            raise ProblemError(f"Torus guess has shape {values.shape}, expected {(ops.size, cmesh.n_points, problem.n)}")
        return values
    phi = ops.nodes[:, None]
    t = cmesh.base_times[None, :]
    if guess is None:
        return problem.guess(phi, t, rho)
    return np.asarray(guess(phi, t), dtype=float)


def default_phases(problem: Problem, ops: FourierOps, cmesh: CollocationMesh, values: np.ndarray) -> Tuple[PhaseCondition, ...]:
    """Hyperplanes through gamma_guess(phi_0, 0) orthogonal to the guess tangents."""
    anchor = values[0, 0]
    dphi = derivative_along_phi(ops, values[:, 0])[0]
    phases = []
    if problem.autonomous:
        dt = Trajectory.from_node_values(cmesh.mesh, values[0]).derivative(0.0)
        phases.append(PhaseCondition(point=anchor.copy(), normal=dt))
    phases.append(PhaseCondition(point=anchor.copy(), normal=dphi))
    return tuple(phases)


def _segment_fundamentals(problem: Problem, cmesh: CollocationMesh, values: np.ndarray, T: float, steps, workers: int):
    def work(seg_values):
        return fundamental_solution(problem, Trajectory.from_node_values(cmesh.mesh, seg_values), T, steps=steps)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        return tuple(pool.map(work, list(values)))


def solve_torus(
    problem: Problem,
    ops: FourierOps,
    rho: Optional[float] = None,
    T_guess: Optional[float] = None,
    guess=None,
    phase_fns: Optional[Sequence[PhaseCondition]] = None,
    free_param: Optional[str] = None,
    mesh_intervals: int = 20,
    degree: int = 4,
    tol: float = 1e-10,
    max_iter: int = 20,
    fundamental_steps: Optional[int] = None,
    workers: int = 1,
) -> TorusSolution:
    """Newton on the coupled collocation system of all segments at fixed rho."""
    rho = problem.rotation_hint if rho is None else rho
    if rho is None:
        raise ProblemError(f"{problem.name}: no rotation number given")
    free = free_param or problem.continuation_param
    if free is None:
        raise ProblemError(f"{problem.name}: a torus at fixed rotation number needs a free parameter")
    if free not in problem.params:
        raise ProblemError(f"{problem.name}: unknown free parameter '{free}'")
    T0 = T_guess if T_guess is not None else problem.period_hint
    if T0 is None:
        raise ProblemError(f"{problem.name}: no period guess available")

    cmesh = CollocationMesh(mesh_intervals, degree)
    K, P, n = ops.size, cmesh.n_points, problem.n
    values0 = sample_torus_guess(problem, ops, cmesh, rho, guess)
    phases = tuple(phase_fns) if phase_fns is not None else default_phases(problem, ops, cmesh, values0)
    autonomous = problem.autonomous
    if len(phases) != (2 if autonomous else 1):
        raise ProblemError(f"{problem.name}: expected {2 if autonomous else 1} phase conditions, got {len(phases)}")

    tangents = [Trajectory.from_node_values(cmesh.mesh, values0[0]).derivative(0.0), derivative_along_phi(ops, values0[:, 0])[0]]
    tangents = tangents if autonomous else tangents[1:]
    transversality = np.array([[ph.gradient @ v for v in tangents] for ph in phases])
    if abs(np.linalg.det(transversality)) <= 1e-12 * max(1.0, np.max(np.abs(transversality)) ** len(phases)):
        raise SingularSystemError(f"{problem.name}: phase conditions are not transversal to the guess torus")

    Pmat = ops.rotation(rho)
    n_col = cmesh.n_gauss * n
    bc_off = K * n_col
    ph_off = bc_off + K * n
    iT = K * P * n
    ip = iT + (1 if autonomous else 0)
    size = ip + 1

    node_rows = bc_off + np.arange(K)[:, None] * n + np.arange(n)[None, :]
    bc_plus_cols = np.arange(K)[:, None] * P * n + (P - 1) * n + np.arange(n)[None, :]
    bc_rows = bc_off + np.arange(K)[:, None, None] * n + np.arange(n)[None, None, :]
    bc_cols = np.arange(K)[None, :, None] * P * n + np.arange(n)[None, None, :]
    bc_data = -np.broadcast_to(Pmat[:, :, None], (K, K, n))

    def unpack(z):
        values = z[:iT].reshape(K, P, n)
        T = z[iT] if autonomous else T0
        return values, T, z[ip]

    def assemble(z):
        values, T, p = unpack(z)
        current = problem.with_params(validate=False, **{free: p})
        blocks = SparseBlocks.empty()
        residual = []
        for j in range(K):
            r_col, xg, Jg = ode_residual(current, cmesh, values[j], T)
            residual.append(r_col)
            rows = j * n_col + np.arange(n_col)
            add_linear_ode_blocks(blocks, cmesh, T * Jg, j * n_col, j * P * n)
            if autonomous:
                blocks.add(rows, iT, -current.f(cmesh.gauss_times, xg).reshape(-1))
            blocks.add(rows, ip, -T * current.param_derivative(free, cmesh.gauss_times, xg).reshape(-1))
        residual.append((values[:, -1] - Pmat @ values[:, 0]).reshape(-1))
        blocks.add(node_rows, bc_plus_cols, 1.0)
        blocks.add(bc_rows, bc_cols, bc_data)
        for i, ph in enumerate(phases):
            blocks.add(ph_off + i, np.arange(n), ph.gradient)
            residual.append([ph(values[0, 0])])
        return np.concatenate(residual), blocks.matrix((size, size))

    z0 = values0.reshape(-1)
    if autonomous:
        z0 = np.append(z0, T0)
    z0 = np.append(z0, problem.params[free])
    logger.info(f"Solving torus of {problem.name}: N = {ops.N}, rho = {rho:.12g}, free parameter {free}")
    z, report = newton_solve(assemble, z0, tol=tol, max_iter=max_iter, label=f"{problem.name} torus")
    values, T, p = unpack(z)
    if T <= 0:
        raise ConvergenceError(f"{problem.name}: torus Newton converged to a non-positive period {T:.6g}")
    solved = problem.with_params(**{free: float(p)})
    logger.info(f"{problem.name} torus: T = {T:.12g}, {free} = {p:.12g}")
    fundamentals = _segment_fundamentals(solved, cmesh, values, float(T), fundamental_steps, workers)
    return TorusSolution(
        problem=solved,
        ops=ops,
        cmesh=cmesh,
        rho=float(rho),
        T=float(T),
        values=values.copy(),
        free_param=free,
        phases=phases,
        fundamental=fundamentals,
        newton=report,
    )


def sweep_torus(
    problem: Problem,
    ops: FourierOps,
    param: str,
    values: Sequence[float],
    guess=None,
    T_guess: Optional[float] = None,
    callback: Optional[Callable[[TorusSolution], None]] = None,
    **solver_kwargs,
) -> List[TorusSolution]:
    """Step ``param`` through ``values`` at fixed rho, warm-starting each solve from the previous torus.

    The free parameter and T found at one step seed the next.
    """
    tori = []
    current = problem
    for value in values:
        current = current.with_params(**{param: value})
        torus = solve_torus(current, ops, guess=guess, T_guess=T_guess, **solver_kwargs)
        logger.info(f"torus sweep {param} = {value:.6g}: T = {torus.T:.10g}")
        if callback is not None:
            callback(torus)
        tori.append(torus)
        current, guess, T_guess = torus.problem, torus.values, torus.T
    return tori


def run_schedule(
    problem: Problem,
    ops: FourierOps,
    schedule: Sequence[Tuple[str, Sequence[float]]],
    **solver_kwargs,
) -> TorusSolution:
    """Chain several one-parameter sweeps, each starting where the previous one ended."""
    guess, T_guess, current, torus = None, None, problem, None
    for param, values in schedule:
        tori = sweep_torus(current, ops, param, values, guess=guess, T_guess=T_guess, **solver_kwargs)
        torus = tori[-1]
        current, guess, T_guess = torus.problem, torus.values, torus.T
    if torus is None:
        return solve_torus(problem, ops, **solver_kwargs)
    return torus
