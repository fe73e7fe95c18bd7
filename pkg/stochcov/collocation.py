"""Gauss-Legendre collocation of x' = T f(t, x) on a uniform mesh and a sparse Newton driver.

A segment is represented by its values at the M*d + 1 equispaced base points
(continuous piecewise polynomials of degree d); the ODE is collocated at the
d Gauss-Legendre nodes of each interval.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Tuple

import numpy as np
import scipy.sparse
import scipy.sparse.linalg

from .errors import ConvergenceError, SingularSystemError
from .model import Problem
from .polynomials import PiecewisePolynomial, gauss_legendre, lagrange_matrices

logger = logging.getLogger(__name__)


class CollocationMesh:
    """Uniform mesh on [0, 1] with degree-d continuous piecewise polynomials."""

    def __init__(self, intervals: int = 20, degree: int = 4):
        if intervals < 1 or degree < 1:
            raise ValueError("intervals and degree must be positive")
        self.intervals = intervals
        self.degree = degree
        self.mesh = np.linspace(0.0, 1.0, intervals + 1)
        self.h = 1.0 / intervals
        base, self.L, self.dL, _ = lagrange_matrices(degree)
        gauss, weights = gauss_legendre(degree)
        self.base_times = (self.mesh[:-1, None] + self.h * base[None, :-1]).ravel()
        self.base_times = np.append(self.base_times, 1.0)
        self.gauss_times = self.mesh[:-1, None] + self.h * gauss[None, :]
        self.gauss_weights = self.h * np.broadcast_to(weights, self.gauss_times.shape)
        self.index = np.arange(intervals)[:, None] * degree + np.arange(degree + 1)[None, :]

    @property
    def n_points(self) -> int:
        return self.intervals * self.degree + 1

    @property
    def n_gauss(self) -> int:
        return self.intervals * self.degree

    def at_gauss(self, values: np.ndarray) -> np.ndarray:
        """Interpolated values at the Gauss nodes, shape (M, d, *value_shape)."""
        return np.einsum("ck,mk...->mc...", self.L, values[self.index])

    def derivative_at_gauss(self, values: np.ndarray) -> np.ndarray:
        return np.einsum("ck,mk...->mc...", self.dL, values[self.index]) / self.h

    def polynomial(self, values: np.ndarray) -> PiecewisePolynomial:
        return PiecewisePolynomial.from_node_values(self.mesh, values)

    def sample(self, func: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
        return np.asarray(func(self.base_times), dtype=float)

    def integrate(self, integrand_at_gauss: np.ndarray) -> np.ndarray:
        """Quadrature over [0, 1] of values given at the Gauss nodes."""
        w = self.gauss_weights.reshape(self.gauss_weights.shape + (1,) * (integrand_at_gauss.ndim - 2))
        return np.sum(w * integrand_at_gauss, axis=(0, 1))


@dataclass
class SparseBlocks:
    """COO triplets accumulated while assembling a Newton or linear system."""

    rows: list
    cols: list
    data: list

    @classmethod
    def empty(cls) -> "SparseBlocks":
        return cls([], [], [])

    def add(self, rows, cols, data) -> None:
        rows, cols, data = np.broadcast_arrays(np.asarray(rows), np.asarray(cols), np.asarray(data, dtype=float))
        self.rows.append(rows.ravel())
        self.cols.append(cols.ravel())
        self.data.append(data.ravel())

    def matrix(self, shape) -> scipy.sparse.csc_matrix:
        rows = np.concatenate(self.rows) if self.rows else np.zeros(0, dtype=int)
        cols = np.concatenate(self.cols) if self.cols else np.zeros(0, dtype=int)
        data = np.concatenate(self.data) if self.data else np.zeros(0)
        return scipy.sparse.coo_matrix((data, (rows, cols)), shape=shape).tocsc()


def add_linear_ode_blocks(
    blocks: SparseBlocks,
    cmesh: CollocationMesh,
    A_gauss: np.ndarray,
    row_offset: int,
    col_offset: int,
) -> None:
    """Blocks of the collocation operator u' - A(t) u for a linear system.

    ``A_gauss`` has shape (M, d, k, k) and holds the coefficient matrix at the
    Gauss nodes; unknowns are the k-vectors at the base points.
    """
    M, d = cmesh.intervals, cmesh.degree
    k = A_gauss.shape[-1]
    eye = np.eye(k)
    # block[m, c, a, j, b] = dL[c, j]/h * delta_ab - L[c, j] * A[m, c, a, b]
    block = (cmesh.dL[None, :, None, :, None] / cmesh.h) * eye[None, None, :, None, :] - cmesh.L[
        None, :, None, :, None
    ] * A_gauss[:, :, :, None, :]
    m_idx = np.arange(M)[:, None, None, None, None]
    c_idx = np.arange(d)[None, :, None, None, None]
    a_idx = np.arange(k)[None, None, :, None, None]
    j_idx = np.arange(d + 1)[None, None, None, :, None]
    b_idx = np.arange(k)[None, None, None, None, :]
    rows = row_offset + (m_idx * d + c_idx) * k + a_idx
    cols = col_offset + (m_idx * d + j_idx) * k + b_idx
    blocks.add(rows, cols, block)


def ode_residual(
    problem: Problem,
    cmesh: CollocationMesh,
    values: np.ndarray,
    T: float,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Collocation residual x'(t_c) - T f(t_c, x(t_c)) plus the states and Jacobians at the Gauss nodes."""
    xg = cmesh.at_gauss(values)
    dxg = cmesh.derivative_at_gauss(values)
    fg = problem.f(cmesh.gauss_times, xg)
    Jg = problem.jac(cmesh.gauss_times, xg)
    return (dxg - T * fg).reshape(-1), xg, Jg


@dataclass
class NewtonReport:
    iterations: int
    residual_norm: float
    history: list


def newton_solve(
    assemble: Callable[[np.ndarray], Tuple[np.ndarray, scipy.sparse.spmatrix]],
    z0: np.ndarray,
    tol: float = 1e-10,
    max_iter: int = 20,
    label: str = "newton",
) -> Tuple[np.ndarray, NewtonReport]:
    """Full-step Newton iteration with sparse LU solves.

    ``assemble(z)`` returns the residual vector and its sparse Jacobian.
    Converged when the residual max norm drops below ``tol``.
    """
    z = np.array(z0, dtype=float)
    history = []
    for it in range(max_iter + 1):
        r, J = assemble(z)
        norm = float(np.max(np.abs(r))) if r.size else 0.0
        history.append(norm)
        logger.debug(f"{label}: iteration {it}, residual {norm:.3e}")
        if not np.isfinite(norm):
            raise ConvergenceError(f"{label}: residual became non-finite at iteration {it}")
        if norm < tol:
            logger.info(f"{label}: converged in {it} iterations (residual {norm:.3e})")
            return z, NewtonReport(it, norm, history)
        if it == max_iter:
            break
        if it > 2 and norm > 1e8 * max(history[0], 1e-300):
            raise ConvergenceError(f"{label}: Newton diverged (residual {norm:.3e} at iteration {it})")
        dz = sparse_solve(J, -r, label)
        if np.max(np.abs(dz)) > 1e12 * (1.0 + np.max(np.abs(z))):
            raise SingularSystemError(f"{label}: Newton step exploded; Jacobian numerically singular")
        z = z + dz
    raise ConvergenceError(f"{label}: Newton did not converge in {max_iter} iterations (residual {history[-1]:.3e})")


def sparse_factor(J: scipy.sparse.spmatrix, label: str = "linear solve") -> Callable[[np.ndarray], np.ndarray]:
    """SuperLU factorization of J; singular factorizations raise SingularSystemError.

    Returns a solve function accepting one right-hand side or a matrix of them.
    """
    if J.shape[0] != J.shape[1]:
        raise SingularSystemError(f"{label}: system is not square ({J.shape[0]} x {J.shape[1]})")
    try:
        lu = scipy.sparse.linalg.splu(scipy.sparse.csc_matrix(J))
    except RuntimeError as e:
        raise SingularSystemError(f"{label}: singular matrix ({e})")
    diag = np.abs(lu.U.diagonal())
    if diag.size and diag.min() <= 1e-14 * diag.max():
        raise SingularSystemError(f"{label}: matrix numerically singular (pivot ratio {diag.min() / diag.max():.2e})")

    def solve(rhs: np.ndarray) -> np.ndarray:
        x = lu.solve(np.asarray(rhs, dtype=float))
        if not np.all(np.isfinite(x)):
            raise SingularSystemError(f"{label}: solution is not finite; matrix numerically singular")
        return x

    return solve


def sparse_solve(J: scipy.sparse.spmatrix, rhs: np.ndarray, label: str = "linear solve") -> np.ndarray:
    return sparse_factor(J, label)(rhs)
