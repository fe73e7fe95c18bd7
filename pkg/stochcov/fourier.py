"""Trigonometric discretization in the torus angle phi.

Node values G_j = g(phi_j) at phi_j = j / (2N + 1) and Fourier coefficients c are
related by G = F_inv c, with row j of F_inv equal to
B(phi_j) = (1, cos 2 pi phi_j, sin 2 pi phi_j, ..., cos 2 pi N phi_j, sin 2 pi N phi_j).
"""

import logging
from functools import cached_property

import numpy as np

logger = logging.getLogger(__name__)


def trig_basis(phi, N: int) -> np.ndarray:
    """B(phi) as a row per phi, shape (..., 2N + 1)."""
    phi = np.asarray(phi, dtype=float)
    k = np.arange(1, N + 1)
    angle = 2 * np.pi * phi[..., None] * k
    out = np.empty(phi.shape + (2 * N + 1,))
    out[..., 0] = 1.0
    out[..., 1::2] = np.cos(angle)
    out[..., 2::2] = np.sin(angle)
    return out


class FourierOps:
    """Matrices of the phi discretization for truncation order N."""

    def __init__(self, N: int):
        if N < 1:
            raise ValueError(f"Fourier truncation order must be at least 1, got {N}")
        self.N = N
        self.size = 2 * N + 1
        self.nodes = np.arange(self.size) / self.size
        self.F_inv = trig_basis(self.nodes, N)
        self.F_mat = np.linalg.inv(self.F_inv)
        self.D = self._blocks(lambda k: 2 * np.pi * k * np.array([[0.0, 1.0], [-1.0, 0.0]]), 0.0)

    def _blocks(self, block, first: float) -> np.ndarray:
        out = np.zeros((self.size, self.size))
        out[0, 0] = first
        for k in range(1, self.N + 1):
            i = 2 * k - 1
            out[i : i + 2, i : i + 2] = block(k)
        return out

    def R(self, rho: float) -> np.ndarray:
        """Coefficient rotation with B(phi + rho) = B(phi) R(rho)."""

        def block(k):
            c, s = np.cos(2 * np.pi * k * rho), np.sin(2 * np.pi * k * rho)
            return np.array([[c, s], [-s, c]])

        return self._blocks(block, 1.0)

    @cached_property
    def weights_diag(self) -> np.ndarray:
        """diag(1, 1/2, ..., 1/2) of the discrete orthogonality relation."""
        d = np.full(self.size, 0.5)
        d[0] = 1.0
        return np.diag(d)

    @cached_property
    def phi_derivative(self) -> np.ndarray:
        """Spectral differentiation on node values, F_inv D F."""
        return self.F_inv @ self.D @ self.F_mat

    def rotation(self, rho: float) -> np.ndarray:
        """Node-value map g(phi_j) -> g(phi_j + rho); orthogonal, rotation(-rho) is its transpose."""
        return self.F_inv @ self.R(rho) @ self.F_mat

    def interpolation_weights(self, phi) -> np.ndarray:
        """Row(s) B(phi) F so that g(phi) = weights @ node values."""
        return trig_basis(phi, self.N) @ self.F_mat

    def apply(self, matrix: np.ndarray, field: np.ndarray) -> np.ndarray:
        """Apply a node-space matrix along the leading (node) axis of a field."""
        return np.tensordot(matrix, np.asarray(field, dtype=float), axes=(1, 0))

    def rotate(self, field: np.ndarray, rho: float) -> np.ndarray:
        return self.apply(self.rotation(rho), field)

    def identity_residual(self) -> float:
        """Max deviation of F^T diag(1, 1/2, ...) F from I / (2N + 1)."""
        lhs = self.F_mat.T @ self.weights_diag @ self.F_mat
        return float(np.max(np.abs(lhs - np.eye(self.size) / self.size)))


def fourier_ops(N: int) -> FourierOps:
    return FourierOps(N)


def derivative_along_phi(ops: FourierOps, field: np.ndarray) -> np.ndarray:
    """Spectral phi-derivative of a field sampled at the 2N + 1 nodes (node axis first)."""
    return ops.apply(ops.phi_derivative, field)


def evaluate_nodes(ops: FourierOps, field: np.ndarray, phi) -> np.ndarray:
    """Trigonometric interpolation of node values at arbitrary phi."""
    return np.tensordot(ops.interpolation_weights(phi), np.asarray(field, dtype=float), axes=(-1, 0))
