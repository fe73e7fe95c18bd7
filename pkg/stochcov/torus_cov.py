"""Adjoints, projections and the rescaled covariance on a quasiperiodic 2-torus.

Node-indexed fields have the node axis first: (2N + 1, P, ...) for values at the
collocation base points of every segment.

The adjoint BVP fixes the left null vectors Omega = Lambda(phi_j, 0) up to a
per-node scaling, which is then chosen so that Omega^T (d_t gamma, d_phi gamma) = I
at every node. Along each fiber both the tangents and the adjoints are carried by
the fundamental solution, X(t) v and X(t)^{-T} Omega, so the pairing and the
projections hold pointwise.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .collocation import SparseBlocks, add_linear_ode_blocks, sparse_factor, sparse_solve
from .cycle_cov import cumulative_noise_along, symmetric_eigens
from .errors import ConvergenceError, SingularSystemError, VerificationError
from .fourier import FourierOps, evaluate_nodes
from .polynomials import PiecewisePolynomial
from .torus import TorusSolution

logger = logging.getLogger(__name__)

NORMALIZATION_TOL = 1e-6
FIXED_POINT_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class TorusAdjoints:
    """Adjoint fields at the base points of every segment.

    ``M`` stacks the columns (lambda_t, lambda_phi) on its last axis, or only
    lambda_phi for forced problems. ``node_defect`` is how far the node-averaged
    normalizations of the BVP were from holding at each node.
    """

    torus: TorusSolution
    M: np.ndarray
    kappa: np.ndarray
    normalization_residual: float
    boundary_residual: float
    node_defect: float = 0.0

    @property
    def lambda_t(self) -> Optional[np.ndarray]:
        return self.M[..., 0] if self.torus.autonomous else None

    @property
    def lambda_phi(self) -> np.ndarray:
        return self.M[..., -1]

    @property
    def w_t(self) -> Optional[np.ndarray]:
        return None if self.lambda_t is None else self.lambda_t[:, 0]

    @property
    def w_phi(self) -> np.ndarray:
        return self.lambda_phi[:, 0]

    @property
    def Omega(self) -> np.ndarray:
        """Lambda(phi_j, 0), shape (2N + 1, n, m + 1)."""
        return self.M[:, 0]


@dataclass(frozen=True, eq=False)
class TorusProjection:
    Q: np.ndarray
    tangents: np.ndarray

    def at_node(self, j: int, k: int = 0) -> np.ndarray:
        return self.Q[j, k]


@dataclass(frozen=True, eq=False)
class CovarianceTorus:
    """C(phi_j, t) per segment.

    ``A`` is the level drift per unit time: the unknown regularizing matrix of
    the direct BVP, or for fixed_point the drift of Omega^T C Omega over one
    discrete period map before projecting. ``level_defect`` is the largest
    |Omega^T C Omega| removed by the projection onto the transversal hyperplanes.
    """

    segments: Tuple[PiecewisePolynomial, ...]
    A: np.ndarray
    B_level: np.ndarray
    method: str
    iterations: int = 0
    boundary_residual: float = 0.0
    level_defect: float = 0.0

    @property
    def residual_norm(self) -> float:
        return float(np.linalg.norm(self.A, 2))

    def nodes_at(self, t: float) -> np.ndarray:
        return np.stack([seg(t) for seg in self.segments])

    @property
    def C0(self) -> np.ndarray:
        return self.nodes_at(0.0)


def _dense_solve(a: np.ndarray, b: np.ndarray, label: str) -> np.ndarray:
    try:
        return np.linalg.solve(a, b)
    except np.linalg.LinAlgError as e:
        raise SingularSystemError(f"{label}: {e}") from e


def tangents_at_zero(torus: TorusSolution) -> np.ndarray:
    """(d_t gamma, d_phi gamma)(phi_j, 0) per node, or only d_phi gamma for forced problems."""
    dphi = torus.dphi_gamma()[:, 0]
    if torus.autonomous:
        return np.stack([torus.dt_gamma()[:, 0], dphi], axis=-1)
    return dphi[..., None]


def transport(torus: TorusSolution, vectors: np.ndarray, times, adjoint: bool = False) -> np.ndarray:
    """X(phi_j, t) v_j, or X(phi_j, t)^{-T} v_j, on every fiber; shape (2N + 1, *times.shape, n, r)."""
    out = []
    for X, v in zip(torus.fundamental, vectors):
        Xt = X(np.asarray(times, dtype=float))
        if adjoint:
            rhs = np.broadcast_to(v, Xt.shape[:-2] + v.shape)
            out.append(_dense_solve(np.swapaxes(Xt, -1, -2), rhs, f"{torus.problem.name} fundamental solution"))
        else:
            out.append(Xt @ v)
    return np.stack(out)


def tangent_fields(torus: TorusSolution, times=None) -> np.ndarray:
    """Tangents at t = 0 carried along every fiber, at the base points unless ``times`` is given."""
    times = torus.cmesh.base_times if times is None else times
    return transport(torus, tangents_at_zero(torus), times)


# --- adjoints ----------------------------------------------------------------


def torus_adjoints(torus: TorusSolution, ops: Optional[FourierOps] = None) -> TorusAdjoints:
    """Collocation of M' = -T Df^T M on every segment with M(1) = P(rho) M(0).

    The normalizations pair node averages of M(0) with the tangents; the
    multipliers kappa enter the boundary condition at node 0 and vanish for an
    exact torus. Each node is then rescaled to the exact pairing and carried
    along its fiber.
    """
    ops = ops or torus.ops
    problem, cmesh = torus.problem, torus.cmesh
    K, P, n = ops.size, cmesh.n_points, problem.n
    V0 = tangents_at_zero(torus)
    r = V0.shape[-1]
    n_col = cmesh.n_gauss * n
    bc_off = K * n_col
    norm_off = bc_off + K * n
    size = K * P * n + r
    Pmat = ops.rotation(torus.rho)

    blocks = SparseBlocks.empty()
    for j in range(K):
        xg = cmesh.at_gauss(torus.values[j])
        Jg = problem.jac(cmesh.gauss_times, xg)
        add_linear_ode_blocks(blocks, cmesh, -torus.T * np.swapaxes(Jg, -1, -2), j * n_col, j * P * n)

    blocks.add(bc_off + np.arange(K)[:, None] * n + np.arange(n), np.arange(K)[:, None] * P * n + (P - 1) * n + np.arange(n), 1.0)
    blocks.add(
        bc_off + np.arange(K)[:, None, None] * n + np.arange(n)[None, None, :],
        np.arange(K)[None, :, None] * P * n + np.arange(n)[None, None, :],
        -np.broadcast_to(Pmat[:, :, None], (K, K, n)),
    )
    for i, ph in enumerate(torus.phases):
        blocks.add(bc_off + np.arange(K)[:, None] * n + np.arange(n), K * P * n + i, Pmat[:, 0, None] * ph.gradient[None, :])
    for i in range(r):
        blocks.add(norm_off + i, np.arange(K)[:, None] * P * n + np.arange(n), V0[:, :, i] / K)

    solve = sparse_factor(blocks.matrix((size, size)), label=f"{problem.name} torus adjoint")
    rhs = np.zeros((size, r))
    rhs[norm_off + np.arange(r), np.arange(r)] = 1.0
    solution = solve(rhs)
    Omega_bvp = solution[: K * P * n].reshape(K, P, n, r)[:, 0]
    kappa = solution[K * P * n :]

    gram = np.einsum("kna,knb->kab", Omega_bvp, V0)
    node_defect = float(np.max(np.abs(gram - np.eye(r))))
    # Omega^T V0 = I per node
    Omega = np.swapaxes(_dense_solve(gram, np.swapaxes(Omega_bvp, -1, -2), f"{problem.name} adjoint scaling"), -1, -2)
    M = transport(torus, Omega, cmesh.base_times, adjoint=True)

    pairings = np.einsum("kpna,kpnb->kpab", M, tangent_fields(torus))
    normalization = float(np.max(np.abs(pairings - np.eye(r))))
    boundary = float(np.max(np.abs(M[:, -1] - np.tensordot(Pmat, M[:, 0], axes=(1, 0)))))
    logger.info(
        f"torus adjoints: normalization residual {normalization:.2e}, node defect {node_defect:.2e}, "
        f"boundary residual {boundary:.2e}, kappa {np.max(np.abs(kappa)):.2e}"
    )
    if normalization > NORMALIZATION_TOL:
        raise VerificationError(f"{problem.name}: torus adjoint normalizations hold only to {normalization:.3e}")
    return TorusAdjoints(
        torus=torus,
        M=M,
        kappa=kappa,
        normalization_residual=normalization,
        boundary_residual=boundary,
        node_defect=node_defect,
    )


def torus_projection(torus: TorusSolution, adj: TorusAdjoints) -> TorusProjection:
    """Q = I - sum_i tangent_i Lambda_i^T at every base point of every segment."""
    tangents = tangent_fields(torus)
    Q = np.eye(torus.n) - np.einsum("kpia,kpja->kpij", tangents, adj.M)
    return TorusProjection(Q=Q, tangents=tangents)


# --- covariance ---------------------------------------------------------------


def _level(Omega: np.ndarray, C: np.ndarray) -> np.ndarray:
    return np.einsum("kia,kij,kjb->kab", Omega, C, Omega)


def _project(Q: np.ndarray, C: np.ndarray) -> np.ndarray:
    C = Q @ C @ np.swapaxes(Q, -1, -2)
    return 0.5 * (C + np.swapaxes(C, -1, -2))


def _propagated_segments(torus, adj, C0, cumulative) -> Tuple[PiecewisePolynomial, ...]:
    problem, T = torus.problem, torus.T
    out = []
    Q0s = np.eye(torus.n) - adj_tangents_at_zero(torus, adj)
    for j, X in enumerate(torus.fundamental):
        Q0 = Q0s[j]
        Xv = X.node_values()
        XQ = Xv @ Q0
        values = Xv @ C0[j] @ np.swapaxes(Xv, -1, -2) + T * XQ @ cumulative[j] @ np.swapaxes(XQ, -1, -2)
        values = 0.5 * (values + np.swapaxes(values, -1, -2))
        Df = problem.jac(X.mesh, X.orbit(X.mesh))
        # X Q0 X^{-1}
        QX = np.swapaxes(_dense_solve(np.swapaxes(Xv, -1, -2), np.swapaxes(XQ, -1, -2), f"{problem.name} fundamental solution"), -1, -2)
        QF = QX @ problem.F(X.mesh, X.orbit(X.mesh))
        slopes = T * (Df @ values + values @ np.swapaxes(Df, -1, -2) + QF @ np.swapaxes(QF, -1, -2))
        out.append(PiecewisePolynomial.from_hermite(X.mesh, values, slopes))
    return tuple(out)


def adj_tangents_at_zero(torus: TorusSolution, adj: TorusAdjoints) -> np.ndarray:
    """sum_i tangent_i(phi_j, 0) Lambda_i(phi_j, 0)^T per node."""
    return np.einsum("kia,kja->kij", tangents_at_zero(torus), adj.Omega)


def transversal_radius(torus: TorusSolution, adj: TorusAdjoints) -> float:
    """Largest one-period gain of the linearized flow on the transversal hyperplanes."""
    Q0 = np.eye(torus.n) - adj_tangents_at_zero(torus, adj)
    return max(float(np.linalg.norm(X.at_end() @ Q0[j], 2)) for j, X in enumerate(torus.fundamental))


def _fixed_point(torus, adj, cumulative, K_max: Optional[int], tol: float):
    """Iterate C <- Q0 R(-rho)[X1 C X1^T + T X1 Q0 I Q0^T X1^T] Q0^T on the nodes.

    Returns C(phi_j, 0), the iteration count, the level drift A of one
    unprojected map at the fixed point and the largest level removed there.
    """
    ops, T = torus.ops, torus.T
    Q0 = np.eye(torus.n) - adj_tangents_at_zero(torus, adj)
    X1 = np.stack([X.at_end() for X in torus.fundamental])
    XQ = X1 @ Q0
    I_cal = np.stack([c[-1] for c in cumulative])
    source = T * XQ @ I_cal @ np.swapaxes(XQ, -1, -2)
    back = ops.rotation(-torus.rho)

    def period_map(C):
        return np.tensordot(back, X1 @ C @ np.swapaxes(X1, -1, -2) + source, axes=(1, 0))

    if K_max is None:
        radius = transversal_radius(torus, adj)
        if radius >= 1.0:
            logger.warning(f"transversal gain {radius:.4g} >= 1; capping the fixed-point iteration at 10000 steps")
            K_max = 10000
        else:
            K_max = math.ceil(-16.0 * math.log(10.0) / math.log(radius)) + 5 if radius > 0 else 2
    C = np.zeros_like(source)
    change = math.inf
    k = 0
    for k in range(1, K_max + 1):
        C_new = _project(Q0, period_map(C))
        change = float(np.max(np.linalg.norm(C_new - C, axis=(-2, -1))))
        C = C_new
        if change < tol * max(1.0, float(np.max(np.abs(C)))):
            break
    else:
        raise ConvergenceError(f"torus covariance fixed point not converged after {K_max} iterations (change {change:.3e})")
    drift = _level(adj.Omega, period_map(C)) - _level(adj.Omega, C)
    logger.info(f"torus covariance fixed point: {k} iterations, last change {change:.2e}, level drift {np.max(np.abs(drift)):.2e}")
    return C, k, np.mean(drift, axis=0) / T, float(np.max(np.abs(drift)))


def _direct(torus: TorusSolution, adj: TorusAdjoints, proj: TorusProjection):
    problem, cmesh, ops, T = torus.problem, torus.cmesh, torus.ops, torus.T
    K, P, n = ops.size, cmesh.n_points, problem.n
    n2 = n * n
    r = adj.M.shape[-1]
    n_col = cmesh.n_gauss * n2
    bc_off = K * n_col
    con_off = bc_off + K * n2
    iA = K * P * n2
    size = iA + r * r
    eye = np.eye(n)

    nabla_g = tangent_fields(torus, cmesh.gauss_times)
    M_g = transport(torus, adj.Omega, cmesh.gauss_times, adjoint=True)
    blocks = SparseBlocks.empty()
    rhs = np.zeros(size)
    for j in range(K):
        xg = cmesh.at_gauss(torus.values[j])
        Df = problem.jac(cmesh.gauss_times, xg)
        # vec(Df C + C Df^T) with column-major vec: index p + q n
        L = np.einsum("qs,...pr->...qpsr", eye, Df) + np.einsum("...qs,pr->...qpsr", Df, eye)
        add_linear_ode_blocks(blocks, cmesh, T * L.reshape(L.shape[:2] + (n2, n2)), j * n_col, j * P * n2)
        nabla = nabla_g[j]
        Qg = eye - np.einsum("...ia,...ja->...ij", nabla, M_g[j])
        QF = Qg @ problem.F(cmesh.gauss_times, xg)
        S = QF @ np.swapaxes(QF, -1, -2)
        rows = j * n_col + np.arange(n_col)
        rhs[rows] = T * np.swapaxes(S, -1, -2).reshape(-1)
        for b in range(r):
            for a in range(r):
                outer = nabla[..., :, a][..., :, None] * nabla[..., :, b][..., None, :]
                blocks.add(rows, iA + a + b * r, -T * np.swapaxes(outer, -1, -2).reshape(-1))

    Pmat = ops.rotation(torus.rho)
    blocks.add(
        bc_off + np.arange(K)[:, None] * n2 + np.arange(n2),
        np.arange(K)[:, None] * P * n2 + (P - 1) * n2 + np.arange(n2),
        1.0,
    )
    blocks.add(
        bc_off + np.arange(K)[:, None, None] * n2 + np.arange(n2)[None, None, :],
        np.arange(K)[None, :, None] * P * n2 + np.arange(n2)[None, None, :],
        -np.broadcast_to(Pmat[:, :, None], (K, K, n2)),
    )
    Omega = adj.Omega[0]
    for b in range(r):
        for a in range(r):
            coeff = np.outer(Omega[:, a], Omega[:, b])
            blocks.add(con_off + a + b * r, np.arange(n2), coeff.T.reshape(-1))

    solution = sparse_solve(blocks.matrix((size, size)), rhs, label=f"{problem.name} torus covariance")
    C = solution[:iA].reshape(K, P, n, n)
    C = np.swapaxes(C, -1, -2)
    C = 0.5 * (C + np.swapaxes(C, -1, -2))
    A = solution[iA:].reshape(r, r, order="F")
    defect = float(np.max(np.abs(_level(adj.Omega, C[:, 0]))))
    return _project(proj.Q, C), A, defect


def torus_covariance(
    torus: TorusSolution,
    adj: TorusAdjoints,
    proj: TorusProjection,
    method: str = "fixed_point",
    K_max: Optional[int] = None,
    tol: float = FIXED_POINT_TOL,
) -> CovarianceTorus:
    """C(phi_j, t) by iterating the one-period map (fixed_point) or by the collocated Lyapunov BVP (direct).

    Both results are restricted to the transversal hyperplanes, so C has rank
    n - m - 1 at every node. Uses the torus problem, whose free parameter holds
    the solved value.
    """
    Omega = adj.Omega
    if method == "fixed_point":
        cumulative = [cumulative_noise_along(X, torus.problem, torus.cmesh.degree) for X in torus.fundamental]
        C0, iterations, A, defect = _fixed_point(torus, adj, cumulative, K_max, tol)
        segments = _propagated_segments(torus, adj, C0, cumulative)
    elif method == "direct":
        values, A, defect = _direct(torus, adj, proj)
        segments = tuple(PiecewisePolynomial.from_node_values(torus.cmesh.mesh, v) for v in values)
        iterations = 0
    else:
        raise ValueError(f"Unknown torus covariance method '{method}'")

    C_start = np.stack([seg(0.0) for seg in segments])
    C_end = np.stack([seg(1.0) for seg in segments])
    boundary = float(np.max(np.abs(C_end - torus.ops.rotate(C_start, torus.rho))))
    B = np.mean(_level(Omega, C_start), axis=0)
    cov = CovarianceTorus(
        segments=segments,
        A=A,
        B_level=B,
        method=method,
        iterations=iterations,
        boundary_residual=boundary,
        level_defect=defect,
    )
    logger.info(
        f"torus covariance ({method}): ||A||_2 = {cov.residual_norm:.3e}, boundary residual {boundary:.2e}, "
        f"level defect {defect:.2e}"
    )
    return cov


def cross_check(torus: TorusSolution, adj: TorusAdjoints, proj: TorusProjection, cov: CovarianceTorus) -> dict:
    """Solve with the other method; report ||A||_2 of the direct BVP and the largest gap between the two C."""
    other = torus_covariance(torus, adj, proj, method="direct" if cov.method == "fixed_point" else "fixed_point")
    direct = other if other.method == "direct" else cov
    gap = max(float(np.max(np.abs(cov.nodes_at(t) - other.nodes_at(t)))) for t in (0.0, 0.5))
    logger.info(f"torus covariance cross-check: direct ||A||_2 = {direct.residual_norm:.3e}, method gap {gap:.2e}")
    return {"A_norm2_direct": direct.residual_norm, "method_gap": gap}


def covariance_node_eigens(cov: CovarianceTorus, t: float = 0.0):
    """Descending eigenvalues and eigenvectors of C(phi_j, t) across the nodes."""
    return symmetric_eigens(cov.nodes_at(t))


def zero_level(adj: TorusAdjoints, cov: CovarianceTorus) -> np.ndarray:
    """Omega^T C(phi_j, 0) Omega per node."""
    return _level(adj.Omega, cov.C0)


def evaluate_on_torus(ops: FourierOps, field, phi, t: Optional[float] = None, mesh: Optional[np.ndarray] = None):
    """Trigonometric interpolation across nodes of a per-segment field evaluated at t.

    ``field`` is a TorusSolution, a CovarianceTorus, a sequence of piecewise
    polynomials, an array of base-point values (needs ``mesh``) or, with t
    omitted, an array of node values.
    """
    if isinstance(field, TorusSolution):
        nodes = field.nodes_at(t)
    elif isinstance(field, CovarianceTorus):
        nodes = field.nodes_at(t)
    elif isinstance(field, (list, tuple)) and field and isinstance(field[0], PiecewisePolynomial):
        nodes = np.stack([seg(t) for seg in field])
    elif t is None:
        nodes = np.asarray(field, dtype=float)
    else:
        if mesh is None:
            raise ValueError("evaluating base-point values needs the collocation mesh")
        nodes = np.stack([PiecewisePolynomial.from_node_values(mesh, v)(t) for v in np.asarray(field)])
    return evaluate_nodes(ops, nodes, phi)


def analyse_torus(
    torus: TorusSolution,
    method: str = "fixed_point",
    K_max: Optional[int] = None,
):
    adj = torus_adjoints(torus)
    proj = torus_projection(torus, adj)
    cov = torus_covariance(torus, adj, proj, method=method, K_max=K_max)
    return adj, proj, cov


def segment_eigens(cov: CovarianceTorus, times: Sequence[float]):
    """Eigenvalues of C(phi_j, t) on a grid of t, shape (len(times), 2N + 1, n)."""
    return np.stack([symmetric_eigens(cov.nodes_at(t))[0] for t in times])
