"""Limit cycles: periodic-orbit BVP, adjoint, projections and the rescaled covariance C(t).

C(0) is available by three routes that must agree (truncated series, bordered
Kronecker solve, pseudo-inverse solve); propagate_covariance fills in C(t) and
checks it against a direct integration of the periodic Lyapunov equation.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence

import numpy as np
import scipy.linalg

from .collocation import CollocationMesh, NewtonReport, SparseBlocks, add_linear_ode_blocks, newton_solve, ode_residual
from .errors import ConvergenceError, SingularSystemError, VerificationError
from .flow import FundamentalSolution, MonodromyInfo, Trajectory, fundamental_solution, monodromy, rk4
from .model import Problem
from .polynomials import PiecewisePolynomial, gauss_legendre

logger = logging.getLogger(__name__)

ADJOINT_TOL = 1e-8
PERIODICITY_DEFECT_TOL = 1e-6
SIMPLE_EIGENVALUE_GAP = 1e-4
RECIPROCAL_TOL = 1e-8


@dataclass(frozen=True)
class PhaseCondition:
    """Hyperplane phase condition h(x) = normal . (x - point)."""

    point: np.ndarray
    normal: np.ndarray

    def __call__(self, x) -> float:
        return float(np.dot(self.normal, np.asarray(x) - self.point))

    @property
    def gradient(self) -> np.ndarray:
        return self.normal

    @classmethod
    def through(cls, problem: Problem, x0: np.ndarray) -> "PhaseCondition":
        """Poincare-section anchor through x0, orthogonal to f(x0)."""
        x0 = np.asarray(x0, dtype=float)
        return cls(point=x0.copy(), normal=problem.f(0.0, x0))

    @classmethod
    def along(cls, guess: Callable, h: float = 1e-6) -> "PhaseCondition":
        """Anchor through guess(0), orthogonal to the guess tangent (central difference)."""
        point = np.asarray(guess(0.0), dtype=float)
        tangent = (np.asarray(guess(h), dtype=float) - np.asarray(guess(-h), dtype=float)) / (2 * h)
        return cls(point=point.copy(), normal=tangent)


@dataclass(frozen=True)
class PeriodicOrbit:
    """Converged cycle.

    ``orbit`` is the collocation solution (exactly periodic at the mesh points);
    ``X.orbit`` is the state re-integrated together with X, and ``gamma``
    evaluates it so that gamma, X and everything derived from them share one mesh.
    """

    problem: Problem
    orbit: Trajectory
    T: float
    phase_anchor: Optional[PhaseCondition]
    X: FundamentalSolution
    mono: MonodromyInfo
    cmesh: CollocationMesh
    newton: Optional[NewtonReport] = None

    @property
    def autonomous(self) -> bool:
        return self.problem.autonomous

    @property
    def mesh(self) -> np.ndarray:
        return self.X.mesh

    def gamma(self, t) -> np.ndarray:
        return self.X.orbit(t)

    def f_on_orbit(self, t) -> np.ndarray:
        return self.problem.f(t, self.gamma(t))

    @property
    def f0(self) -> np.ndarray:
        return self.f_on_orbit(0.0)


@dataclass(frozen=True)
class AdjointCycle:
    w: Optional[np.ndarray]
    lambda_: Optional[PiecewisePolynomial]
    ode_residual: float = 0.0
    periodicity_residual: float = 0.0
    integral: float = 1.0

    @property
    def present(self) -> bool:
        return self.w is not None


@dataclass(frozen=True)
class ProjectionFamily:
    """Q(t) = I - f(gamma(t)) lambda(t)^T, or the identity for forced systems."""

    po: PeriodicOrbit
    adj: AdjointCycle
    identity_flag: bool

    def __call__(self, t) -> np.ndarray:
        n = self.po.problem.n
        t = np.asarray(t, dtype=float)
        eye = np.broadcast_to(np.eye(n), t.shape + (n, n))
        if self.identity_flag:
            return eye.copy()
        f = self.po.f_on_orbit(t)
        lam = self.adj.lambda_(t)
        return eye - f[..., :, None] * lam[..., None, :]

    @property
    def Q0(self) -> np.ndarray:
        return self(0.0)

    def mesh_values(self) -> np.ndarray:
        return self(self.po.mesh)


@dataclass(frozen=True)
class CovarianceCycle:
    C0: np.ndarray
    I_cal: np.ndarray
    method: str
    series_terms_used: int = 0
    b: float = 0.0
    a: Optional[float] = None
    C: Optional[PiecewisePolynomial] = None
    ode_discrepancy: Optional[float] = None
    periodicity_defect: Optional[float] = None
    level_curve: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def times(self) -> Optional[np.ndarray]:
        return None if self.C is None else self.C.mesh

    @property
    def values(self) -> Optional[np.ndarray]:
        return None if self.C is None else self.C.node_values()


@dataclass(frozen=True)
class Eigencurves:
    times: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    def at(self, t: float):
        """Eigen-data at the mesh point nearest to t."""
        k = int(np.argmin(np.abs(self.times - t)))
        return self.eigenvalues[k], self.eigenvectors[k]


# --- periodic orbit --------------------------------------------------------


def guess_trajectory(problem: Problem) -> Callable:
    return lambda t: problem.guess(0.0, t)


def solve_periodic_orbit(
    problem: Problem,
    guess=None,
    T_guess: Optional[float] = None,
    mesh_intervals: int = 20,
    degree: int = 4,
    phase: Optional[PhaseCondition] = None,
    tol: float = 1e-10,
    max_iter: int = 20,
    fundamental_steps: Optional[int] = None,
) -> PeriodicOrbit:
    """Collocation BVP for x' = T f(t, x), x(0) = x(1), plus h(x(0)) = 0 and unknown T when autonomous.

    ``guess`` is a piecewise polynomial or a callable of t; the problem's
    built-in guess is used when omitted. Forced problems keep T fixed. The
    default phase condition is the hyperplane through guess(0) orthogonal to
    the guess tangent there.
    """
    cmesh = CollocationMesh(mesh_intervals, degree)
    if guess is None:
        guess = guess_trajectory(problem)
    T_guess = T_guess if T_guess is not None else problem.period_hint
    if T_guess is None:
        raise ConvergenceError(f"{problem.name}: no period guess available")
    n, P = problem.n, cmesh.n_points
    values0 = np.asarray(guess(cmesh.base_times), dtype=float)
    autonomous = problem.autonomous
    if autonomous and phase is None:
        phase = PhaseCondition.along(guess)

    n_col = cmesh.n_gauss * n
    size = P * n + (1 if autonomous else 0)

    def unpack(z):
        values = z[: P * n].reshape(P, n)
        T = z[P * n] if autonomous else T_guess
        return values, T

    def assemble(z):
        values, T = unpack(z)
        r_col, _, Jg = ode_residual(problem, cmesh, values, T)
        blocks = SparseBlocks.empty()
        add_linear_ode_blocks(blocks, cmesh, T * Jg, 0, 0)
        r_per = values[-1] - values[0]
        rows = n_col + np.arange(n)
        blocks.add(rows, (P - 1) * n + np.arange(n), 1.0)
        blocks.add(rows, np.arange(n), -1.0)
        residual = [r_col, r_per]
        if autonomous:
            fg = problem.f(cmesh.gauss_times, cmesh.at_gauss(values))
            blocks.add(np.arange(n_col), P * n, -fg.reshape(-1))
            blocks.add(n_col + n, np.arange(n), phase.gradient)
            residual.append([phase(values[0])])
        return np.concatenate(residual), blocks.matrix((size, size))

    z0 = values0.reshape(-1)
    if autonomous:
        z0 = np.append(z0, T_guess)
    logger.info(f"Solving periodic orbit of {problem.name}: {mesh_intervals} intervals, degree {degree}")
    z, report = newton_solve(assemble, z0, tol=tol, max_iter=max_iter, label=f"{problem.name} periodic orbit")
    values, T = unpack(z)
    if T <= 0:
        raise ConvergenceError(f"{problem.name}: Newton converged to a non-positive period {T:.6g}")

    f0 = problem.f(0.0, values[0])
    if autonomous:
        if np.max(np.abs(f0)) < 1e-8:
            raise ConvergenceError(f"{problem.name}: Newton converged to an equilibrium, not a limit cycle")
        transversality = float(np.dot(phase.gradient, f0))
        if abs(transversality) <= 1e-12 * np.linalg.norm(phase.gradient) * np.linalg.norm(f0):
            raise SingularSystemError(f"{problem.name}: phase condition is tangent to the orbit")

    orbit = Trajectory.from_node_values(cmesh.mesh, values)
    X = fundamental_solution(problem, orbit, float(T), steps=fundamental_steps)
    mono = monodromy(X, problem)
    logger.info(f"{problem.name}: T = {T:.12g}, transversal spectral radius {mono.spectral_radius_transversal:.6g}")
    return PeriodicOrbit(
        problem=problem,
        orbit=orbit,
        T=float(T),
        phase_anchor=phase,
        X=X,
        mono=mono,
        cmesh=cmesh,
        newton=report,
    )


def sweep_cycle(
    problem: Problem,
    param: str,
    values: Sequence[float],
    guess=None,
    T_guess: Optional[float] = None,
    **solver_kwargs,
) -> List[PeriodicOrbit]:
    """Step one parameter through ``values``, warm-starting each solve from the previous orbit."""
    orbits = []
    for value in values:
        current = problem.with_params(**{param: value})
        po = solve_periodic_orbit(current, guess=guess, T_guess=T_guess, **solver_kwargs)
        logger.info(f"sweep {param} = {value:.6g}: T = {po.T:.10g}")
        orbits.append(po)
        guess, T_guess = po.orbit, po.T
    return orbits


# --- adjoint and projections ------------------------------------------------


def left_null_vector(X1: np.ndarray, f0: np.ndarray) -> np.ndarray:
    """Left eigenvector of X1 for the eigenvalue nearest 1, normalized so that w . f0 = 1."""
    eigenvalues, vl = scipy.linalg.eig(X1, left=True, right=False)
    distance = np.abs(eigenvalues - 1.0)
    order = np.argsort(distance)
    idx = order[0]
    if len(order) > 1 and distance[order[1]] < SIMPLE_EIGENVALUE_GAP:
        raise VerificationError(
            f"Trivial multiplier is not simple: eigenvalues {eigenvalues[idx]:.6g} and {eigenvalues[order[1]]:.6g} both near 1"
        )
    w = vl[:, idx].conj()
    w = np.real(w / np.exp(1j * np.angle(w[np.argmax(np.abs(w))])))
    denominator = float(np.dot(w, f0))
    if abs(denominator) < 1e-12:
        raise VerificationError(f"Left nullvector is orthogonal to f(gamma(0)) (w.f = {denominator:.3e})")
    return w / denominator


def adjoint_left_vector(po: PeriodicOrbit) -> np.ndarray:
    if not po.autonomous:
        raise VerificationError(f"{po.problem.name} is forced; it has no trivial multiplier")
    return left_null_vector(po.mono.matrix, po.f0)


def adjoint_function(po: PeriodicOrbit, w: Optional[np.ndarray]) -> AdjointCycle:
    """lambda(t) = X(t)^{-T} w on the orbit mesh, verified against the adjoint BVP."""
    if w is None or not po.autonomous:
        return AdjointCycle(w=None, lambda_=None)
    problem, X = po.problem, po.X
    mesh = X.mesh
    Xv = X.node_values()
    lam = np.linalg.solve(np.swapaxes(Xv, -1, -2), np.broadcast_to(w, (len(mesh), problem.n))[..., None])[..., 0]
    Df = problem.jac(mesh, po.gamma(mesh))
    slopes = -po.T * np.einsum("kji,kj->ki", Df, lam)
    lambda_ = PiecewisePolynomial.from_hermite(mesh, lam, slopes)

    # lambda^T X is constant along solutions of the adjoint equation.
    mid = 0.5 * (mesh[:-1] + mesh[1:])
    drift = np.einsum("kij,ki->kj", X(mid), lambda_(mid)) - w
    ode_res = float(np.max(np.abs(drift))) / max(1.0, float(np.max(np.abs(w))))
    per_res = float(np.max(np.abs(lam[-1] - lam[0])))

    nodes, weights = gauss_legendre(po.cmesh.degree)
    h = np.diff(mesh)
    tq = mesh[:-1, None] + h[:, None] * nodes[None, :]
    integrand = np.einsum("...i,...i->...", lambda_(tq), po.f_on_orbit(tq))
    integral = float(np.sum(h[:, None] * weights[None, :] * integrand))

    logger.debug(f"adjoint residuals: ode {ode_res:.2e}, periodicity {per_res:.2e}, integral - 1 = {integral - 1:.2e}")
    if ode_res > ADJOINT_TOL or per_res > ADJOINT_TOL or abs(integral - 1.0) > ADJOINT_TOL:
        raise VerificationError(
            f"{problem.name}: adjoint checks failed (ode {ode_res:.3e}, periodicity {per_res:.3e}, integral {integral:.12g})"
        )
    return AdjointCycle(w=w, lambda_=lambda_, ode_residual=ode_res, periodicity_residual=per_res, integral=integral)


def projection_family(po: PeriodicOrbit, adj: AdjointCycle) -> ProjectionFamily:
    identity = (not po.autonomous) or not adj.present
    return ProjectionFamily(po=po, adj=adj, identity_flag=identity)


# --- noise quadrature -------------------------------------------------------


def cumulative_noise_along(X: FundamentalSolution, problem: Problem, degree: int = 4) -> np.ndarray:
    """Running integrals of G G^T, G = X^{-1} F(gamma), at every mesh point of X (gamma = X.orbit)."""
    mesh = X.mesh
    nodes, weights = gauss_legendre(degree)
    h = np.diff(mesh)
    tq = mesh[:-1, None] + h[:, None] * nodes[None, :]
    G = np.linalg.solve(X(tq), problem.F(tq, X.orbit(tq)))
    GG = G @ np.swapaxes(G, -1, -2)
    per_interval = np.einsum("kc,kcij->kij", h[:, None] * weights[None, :], GG)
    out = np.zeros((len(mesh), problem.n, problem.n))
    out[1:] = np.cumsum(per_interval, axis=0)
    return out


def cumulative_noise(po: PeriodicOrbit, problem: Optional[Problem] = None) -> np.ndarray:
    return cumulative_noise_along(po.X, problem or po.problem, po.cmesh.degree)


def noise_quadrature(po: PeriodicOrbit, problem: Optional[Problem] = None) -> np.ndarray:
    return cumulative_noise(po, problem)[-1]


# --- covariance at t = 0 ----------------------------------------------------


def _source(po: PeriodicOrbit, proj: ProjectionFamily, I_cal: np.ndarray) -> np.ndarray:
    X1, Q0 = po.mono.matrix, proj.Q0
    return po.T * Q0 @ X1 @ I_cal @ X1.T @ Q0.T


def _level(po: PeriodicOrbit, proj: ProjectionFamily, C0: np.ndarray) -> float:
    if proj.identity_flag:
        return 0.0
    w = proj.adj.w
    return float(w @ C0 @ w)


def default_series_cap(radius: float) -> int:
    if radius <= 0.0:
        return 1
    return max(1, math.ceil(-28.0 * math.log(10.0) / math.log(radius)))


def covariance_series(
    po: PeriodicOrbit,
    proj: ProjectionFamily,
    I_cal: np.ndarray,
    tol: float = 1e-12,
    K_max: Optional[int] = None,
    level: float = 0.0,
) -> CovarianceCycle:
    """C(0) = b f f^T + T sum_k Q(0) X(1)^k I X(1)^kT Q(0)^T."""
    radius = po.mono.spectral_radius_transversal
    if radius >= 1.0:
        raise ConvergenceError(f"{po.problem.name}: series diverges, transversal spectral radius {radius:.6g} >= 1")
    K_max = K_max or default_series_cap(radius)
    X1, Q0 = po.mono.matrix, proj.Q0
    total = np.zeros_like(I_cal)
    power = np.eye(po.problem.n)
    ratio = math.inf
    k = 0
    for k in range(1, K_max + 1):
        power = X1 @ power
        term = po.T * Q0 @ power @ I_cal @ power.T @ Q0.T
        total = total + term
        term_norm = np.linalg.norm(term)
        total_norm = np.linalg.norm(total)
        ratio = 0.0 if term_norm == 0.0 else term_norm / total_norm
        if ratio < tol:
            break
    if ratio > 1e-6:
        raise ConvergenceError(f"{po.problem.name}: series not converged after {K_max} terms (last relative term {ratio:.3e})")
    logger.info(f"covariance series: {k} terms, last relative term {ratio:.2e}")
    if level:
        f0 = po.f0
        total = total + level * np.outer(f0, f0)
    C0 = 0.5 * (total + total.T)
    return CovarianceCycle(C0=C0, I_cal=I_cal, method="series", series_terms_used=k, b=_level(po, proj, C0))


def _check_reciprocal_pairs(mono: MonodromyInfo) -> None:
    mu = mono.eigenvalues
    products = np.abs(mu[:, None] * mu[None, :] - 1.0)
    if mono.trivial_index is not None:
        products[mono.trivial_index, mono.trivial_index] = np.inf
    worst = float(products.min())
    if worst <= RECIPROCAL_TOL:
        raise SingularSystemError(f"Monodromy has a reciprocal eigenvalue pair (min |mu_i mu_j - 1| = {worst:.3e})")


def covariance_kronecker(
    po: PeriodicOrbit,
    proj: ProjectionFamily,
    I_cal: np.ndarray,
    w: Optional[np.ndarray] = None,
) -> CovarianceCycle:
    """Bordered solve of (I - X(1) kron X(1)) vec C + kappa f kron f = vec S, (w kron w) . vec C = 0."""
    n = po.problem.n
    _check_reciprocal_pairs(po.mono)
    X1 = po.mono.matrix
    system = np.eye(n * n) - np.kron(X1, X1)
    rhs = _source(po, proj, I_cal).reshape(-1, order="F")
    bordered = not proj.identity_flag
    if bordered:
        w = proj.adj.w if w is None else w
        f0 = po.f0
        system = np.block([[system, np.kron(f0, f0)[:, None]], [np.kron(w, w)[None, :], np.zeros((1, 1))]])
        rhs = np.append(rhs, 0.0)
    try:
        solution = scipy.linalg.solve(system, rhs)
    except (scipy.linalg.LinAlgError, ValueError) as e:
        raise SingularSystemError(f"{po.problem.name}: Kronecker system is singular ({e})")
    if not np.all(np.isfinite(solution)):
        raise SingularSystemError(f"{po.problem.name}: Kronecker system is singular")
    if bordered:
        logger.debug(f"bordering multiplier kappa = {solution[-1]:.3e}")
    C0 = solution[: n * n].reshape(n, n, order="F")
    C0 = 0.5 * (C0 + C0.T)
    return CovarianceCycle(C0=C0, I_cal=I_cal, method="kronecker", b=_level(po, proj, C0))


def covariance_pinv(po: PeriodicOrbit, proj: ProjectionFamily, I_cal: np.ndarray) -> CovarianceCycle:
    """Minimum-norm solve of the singular Kronecker system, then projection with Q(0)."""
    n = po.problem.n
    X1, Q0 = po.mono.matrix, proj.Q0
    system = np.eye(n * n) - np.kron(X1, X1)
    rhs = _source(po, proj, I_cal).reshape(-1, order="F")
    C0 = (scipy.linalg.pinv(system, rtol=1e-8) @ rhs).reshape(n, n, order="F")
    C0 = Q0 @ C0 @ Q0.T
    C0 = 0.5 * (C0 + C0.T)
    return CovarianceCycle(C0=C0, I_cal=I_cal, method="pinv", b=_level(po, proj, C0))


def one_period_map(po: PeriodicOrbit, proj: ProjectionFamily, I_cal: np.ndarray, C: np.ndarray) -> np.ndarray:
    X1 = po.mono.matrix
    return X1 @ C @ X1.T + _source(po, proj, I_cal)


# --- covariance along the orbit ----------------------------------------------


def _lyapunov_rhs(po: PeriodicOrbit, proj: ProjectionFamily, problem: Problem) -> Callable:
    T = po.T

    def rhs(t, C):
        x = po.gamma(t)
        Df = problem.jac(t, x)
        QF = proj(t) @ problem.F(t, x)
        return T * (Df @ C + C @ Df.T + QF @ QF.T)

    return rhs


def propagate_covariance(
    po: PeriodicOrbit,
    proj: ProjectionFamily,
    C0,
    problem: Optional[Problem] = None,
    cumulative: Optional[np.ndarray] = None,
) -> CovarianceCycle:
    """C(t) = X C(0) X^T + T Q X (int_0^t G G^T) X^T Q^T on the orbit mesh, cross-checked by the Lyapunov ODE."""
    problem = problem or po.problem
    base = C0 if isinstance(C0, CovarianceCycle) else CovarianceCycle(
        C0=np.asarray(C0, dtype=float), I_cal=noise_quadrature(po, problem), method="given"
    )
    C_start = base.C0
    if not proj.identity_flag:
        level0 = _level(po, proj, C_start)
        if abs(level0) > 1e-8:
            logger.warning(f"w^T C(0) w = {level0:.3e}; C(0) does not lie on the zero level set")

    J = cumulative if cumulative is not None else cumulative_noise(po, problem)
    mesh = po.mesh
    Xv = po.X.node_values()
    Qv = proj.mesh_values()
    QX = Qv @ Xv
    values = Xv @ C_start @ np.swapaxes(Xv, -1, -2) + po.T * QX @ J @ np.swapaxes(QX, -1, -2)
    values = 0.5 * (values + np.swapaxes(values, -1, -2))

    rhs = _lyapunov_rhs(po, proj, problem)
    slopes = np.stack([rhs(t, C) for t, C in zip(mesh, values)])
    h = mesh[1] - mesh[0]
    _, ode_values, _ = rk4(rhs, 0.0, C_start, h, len(mesh) - 1)

    discrepancy = float(np.max(np.abs(ode_values - values)))
    defect = float(np.linalg.norm(values[-1] - values[0]))
    a = float(np.linalg.norm(ode_values[-1] - ode_values[0])) / po.T
    if proj.identity_flag:
        level_curve = np.zeros(len(mesh))
    else:
        lam = proj.adj.lambda_(mesh)
        level_curve = np.einsum("ki,kij,kj->k", lam, values, lam)
    logger.info(f"covariance propagation: ODE discrepancy {discrepancy:.2e}, periodicity defect {defect:.2e}, a = {a:.2e}")
    if defect > PERIODICITY_DEFECT_TOL:
        raise VerificationError(f"{problem.name}: covariance periodicity defect {defect:.3e} exceeds {PERIODICITY_DEFECT_TOL:g}")
    return replace(
        base,
        C=PiecewisePolynomial.from_hermite(mesh, values, slopes),
        a=a,
        ode_discrepancy=discrepancy,
        periodicity_defect=defect,
        level_curve=level_curve,
    )


def symmetric_eigens(values: np.ndarray):
    """Descending eigen-decomposition of a stack of symmetric matrices with continuous eigenvector signs."""
    eigenvalues, eigenvectors = np.linalg.eigh(values)
    eigenvalues = eigenvalues[..., ::-1]
    eigenvectors = eigenvectors[..., ::-1].copy()
    first = eigenvectors[0]
    pivot = np.argmax(np.abs(first), axis=0)
    first *= np.sign(first[pivot, np.arange(first.shape[1])])
    for k in range(1, len(eigenvectors)):
        dots = np.sum(eigenvectors[k] * eigenvectors[k - 1], axis=0)
        eigenvectors[k] *= np.where(dots < 0, -1.0, 1.0)
    return eigenvalues, eigenvectors


def covariance_eigens(cov: CovarianceCycle) -> Eigencurves:
    if cov.C is None:
        raise VerificationError("covariance has not been propagated along the orbit")
    eigenvalues, eigenvectors = symmetric_eigens(cov.values)
    return Eigencurves(times=cov.times, eigenvalues=eigenvalues, eigenvectors=eigenvectors)


def predicted_std(curves: Eigencurves, sigma: float) -> np.ndarray:
    """sigma * sqrt(eigenvalue), clipped at zero, per mesh point and direction."""
    return sigma * np.sqrt(np.clip(curves.eigenvalues, 0.0, None))


def analyse_cycle(
    problem: Problem,
    method: str = "series",
    series_tol: float = 1e-12,
    K_max: Optional[int] = None,
    **solver_kwargs,
):
    """Full cycle pipeline: orbit, adjoint, projections and propagated covariance."""
    po = solve_periodic_orbit(problem, **solver_kwargs)
    w = adjoint_left_vector(po) if po.autonomous else None
    adj = adjoint_function(po, w)
    proj = projection_family(po, adj)
    J = cumulative_noise(po, problem)
    I_cal = J[-1]
    if method == "series":
        cov0 = covariance_series(po, proj, I_cal, tol=series_tol, K_max=K_max)
    elif method == "kronecker":
        cov0 = covariance_kronecker(po, proj, I_cal)
    elif method == "pinv":
        cov0 = covariance_pinv(po, proj, I_cal)
    else:
        raise ValueError(f"Unknown covariance method '{method}'")
    cov = propagate_covariance(po, proj, cov0, problem, cumulative=J)
    return po, adj, proj, cov
