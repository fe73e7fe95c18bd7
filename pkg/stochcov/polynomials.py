"""Piecewise polynomials on a mesh and Gauss-Legendre helpers."""

from functools import lru_cache
from typing import Any, Dict, Tuple

import numpy as np
from scipy.special import roots_legendre


@lru_cache(maxsize=None)
def gauss_legendre(degree: int) -> Tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes on [0, 1] and weights summing to 1."""
    nodes, weights = roots_legendre(degree)
    return (nodes + 1.0) / 2.0, weights / 2.0


@lru_cache(maxsize=None)
def lagrange_matrices(degree: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Basis data for degree-d Lagrange polynomials on equispaced local nodes.

    Returns (base_nodes, L, dL, to_monomial) where L[c, k] and dL[c, k] are the
    k-th basis polynomial and its derivative at the c-th Gauss node, and
    to_monomial maps node values to monomial coefficients.
    """
    base = np.linspace(0.0, 1.0, degree + 1)
    gauss, _ = gauss_legendre(degree)
    powers = np.arange(degree + 1)
    to_monomial = np.linalg.inv(base[:, None] ** powers[None, :])
    P = gauss[:, None] ** powers[None, :]
    dP = np.zeros_like(P)
    dP[:, 1:] = powers[1:] * gauss[:, None] ** (powers[1:] - 1)
    return base, P @ to_monomial, dP @ to_monomial, to_monomial


class PiecewisePolynomial:
    """Polynomial of degree d on each mesh interval, in the local variable s in [0, 1].

    ``coeffs`` has shape (M, d + 1, *value_shape) with monomial coefficients, so
    that on interval i, ``x(t) = sum_k coeffs[i, k] * s**k`` with
    ``s = (t - mesh[i]) / (mesh[i+1] - mesh[i])``.
    """

    def __init__(self, mesh: np.ndarray, coeffs: np.ndarray):
        self.mesh = np.asarray(mesh, dtype=float)
        self.coeffs = np.asarray(coeffs, dtype=float)
        if self.coeffs.shape[0] != self.mesh.size - 1:
            raise ValueError("coeffs must have one block per mesh interval")

    # construction -----------------------------------------------------------

    @classmethod
    def from_hermite(cls, mesh, values, slopes):
        """Cubic Hermite interpolant from values and slopes at the mesh points."""
        mesh = np.asarray(mesh, dtype=float)
        y = np.asarray(values, dtype=float)
        m = np.asarray(slopes, dtype=float)
        h = np.diff(mesh).reshape((-1,) + (1,) * (y.ndim - 1))
        y0, y1, m0, m1 = y[:-1], y[1:], h * m[:-1], h * m[1:]
        coeffs = np.stack([y0, m0, 3 * (y1 - y0) - 2 * m0 - m1, 2 * (y0 - y1) + m0 + m1], axis=1)
        return cls(mesh, coeffs)

    @classmethod
    def from_node_values(cls, mesh, values):
        """Interpolant from values at the equispaced local nodes of each interval.

        ``values`` has shape (M * d + 1, *value_shape); neighbouring intervals
        share their end node.
        """
        values = np.asarray(values, dtype=float)
        M = len(mesh) - 1
        d = (values.shape[0] - 1) // M
        _, _, _, to_monomial = lagrange_matrices(d)
        idx = np.arange(M)[:, None] * d + np.arange(d + 1)[None, :]
        coeffs = np.einsum("jk,mk...->mj...", to_monomial, values[idx])
        return cls(mesh, coeffs)

    @classmethod
    def constant(cls, value, t_end: float = 1.0):
        value = np.asarray(value, dtype=float)
        return cls(np.array([0.0, t_end]), value[None, None, ...])

    # properties -------------------------------------------------------------

    @property
    def degree(self) -> int:
        return self.coeffs.shape[1] - 1

    @property
    def n_intervals(self) -> int:
        return self.coeffs.shape[0]

    @property
    def value_shape(self) -> Tuple[int, ...]:
        return self.coeffs.shape[2:]

    @property
    def t_start(self) -> float:
        return float(self.mesh[0])

    @property
    def t_end(self) -> float:
        return float(self.mesh[-1])

    # evaluation -------------------------------------------------------------

    def _locate(self, t):
        t = np.asarray(t, dtype=float)
        i = np.clip(np.searchsorted(self.mesh, t, side="right") - 1, 0, self.n_intervals - 1)
        h = self.mesh[i + 1] - self.mesh[i]
        s = (t - self.mesh[i]) / h
        return i, s, h

    def __call__(self, t) -> np.ndarray:
        i, s, _ = self._locate(t)
        c = self.coeffs[i]
        s = np.reshape(s, np.shape(s) + (1,) * len(self.value_shape))
        out = c.take(self.degree, axis=np.ndim(i))
        for k in range(self.degree - 1, -1, -1):
            out = out * s + c.take(k, axis=np.ndim(i))
        return out

    def derivative(self, t) -> np.ndarray:
        i, s, h = self._locate(t)
        c = self.coeffs[i]
        axis = np.ndim(i)
        shape = np.shape(s) + (1,) * len(self.value_shape)
        s = np.reshape(s, shape)
        h = np.reshape(h, shape)
        if self.degree == 0:
            return np.zeros(np.shape(i) + self.value_shape)
        out = self.degree * c.take(self.degree, axis=axis)
        for k in range(self.degree - 1, 0, -1):
            out = out * s + k * c.take(k, axis=axis)
        return out / h

    def node_values(self) -> np.ndarray:
        """Values at the mesh points, right limits except at the last point."""
        left = self.coeffs[:, 0]
        last = self.coeffs[-1].sum(axis=0)
        return np.concatenate([left, last[None]], axis=0)

    def junction_mismatch(self) -> float:
        """Max-norm jump between the end of each interval and the start of the next."""
        if self.n_intervals < 2:
            return 0.0
        ends = self.coeffs[:-1].sum(axis=1)
        starts = self.coeffs[1:, 0]
        return float(np.max(np.abs(ends - starts)))

    def sample(self, n_points: int) -> Tuple[np.ndarray, np.ndarray]:
        t = np.linspace(self.t_start, self.t_end, n_points)
        return t, self(t)

    def map_values(self, fn) -> "PiecewisePolynomial":
        """Apply a linear map to the coefficients (valid for linear fn only)."""
        return PiecewisePolynomial(self.mesh, fn(self.coeffs))

    # serialization ----------------------------------------------------------

    def to_dict(self) -> Dict[str, Any]:
        return {"mesh": self.mesh.tolist(), "coeffs": self.coeffs.tolist()}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]):
        return cls(np.asarray(data["mesh"]), np.asarray(data["coeffs"]))
