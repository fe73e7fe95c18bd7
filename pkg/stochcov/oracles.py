"""Closed-form reference solutions for the built-in systems.

Every function accepts scalar or array phases and returns a dict of arrays whose
leading axes follow the broadcast shape of the inputs.
"""

import math

import numpy as np

HOPF_T = 2 * math.pi
LINOSC_T = 2 * math.pi


def _mat(a, b, c, d) -> np.ndarray:
    return np.stack([np.stack([a, b], axis=-1), np.stack([c, d], axis=-1)], axis=-2)


def _outer_radial(angle) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return _mat(c * c, c * s, c * s, s * s)


def hopf_eigenvalue(t) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    return (5 - 4 * np.cos(4 * np.pi * t) - 2 * np.sin(4 * np.pi * t)) / 40


def hopf_noise_integral(t) -> np.ndarray:
    """Projected (1,1) entry of T Q(0) (int_0^t G G^T) Q(0)^T."""
    t = np.asarray(t, dtype=float)
    return (np.exp(8 * np.pi * t) * (5 - 4 * np.cos(4 * np.pi * t) - 2 * np.sin(4 * np.pi * t)) - 1) / 40


def hopf_reference(t) -> dict:
    t = np.asarray(t, dtype=float)
    angle = 2 * np.pi * t
    c, s = np.cos(angle), np.sin(angle)
    decay = np.exp(-4 * np.pi * t)
    Q = _outer_radial(angle)
    eig = hopf_eigenvalue(t)
    return {
        "T": HOPF_T,
        "gamma": np.stack([c, s], axis=-1),
        "f": np.stack([-s, c], axis=-1),
        "X": _mat(c * decay, -s, s * decay, c),
        "w": np.array([0.0, 1.0]),
        "lambda": np.stack([-s, c], axis=-1),
        "Q": Q,
        "C": eig[..., None, None] * Q,
        "eig": eig,
        "eigenvector": np.stack([c, s], axis=-1),
        "I": hopf_noise_integral(t),
    }


def linosc_reference(t) -> dict:
    t = np.asarray(t, dtype=float)
    angle = 2 * np.pi * t
    s_phys = LINOSC_T * t
    e = np.exp(-s_phys)
    c4, s4 = np.cos(4 * np.pi * t), np.sin(4 * np.pi * t)
    c8, s8 = np.cos(8 * np.pi * t), np.sin(8 * np.pi * t)
    C = _mat(4 + c4 - s4, -c4 - s4, -c4 - s4, 4 - 3 * c4 - s4) / 32
    root = np.sqrt(3 + 2 * c8 + s8)
    return {
        "T": LINOSC_T,
        "gamma": np.stack([np.sin(angle), np.cos(angle)], axis=-1),
        "X": e[..., None, None] * _mat(1 + s_phys, s_phys, -s_phys, 1 - s_phys),
        "Q": np.broadcast_to(np.eye(2), t.shape + (2, 2)).copy(),
        "C": C,
        "eigs": np.stack([(4 - c4 - s4 + root) / 32, (4 - c4 - s4 - root) / 32], axis=-1),
        "multiplier": math.exp(-LINOSC_T),
    }


def qp1_radius(t, omega: float = 1.0) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    b = 1 + omega**2 - np.cos(2 * np.pi * t) - omega * np.sin(2 * np.pi * t)
    return (1 + omega**2) / b


def qp1_reference(phi, t, Omega: float = math.pi, omega: float = 1.0) -> dict:
    """Torus of the forced radial system: circle of radius r(t) rotating with rho = Omega / omega."""
    phi, t = np.broadcast_arrays(np.asarray(phi, dtype=float), np.asarray(t, dtype=float))
    T = 2 * np.pi / omega
    rho = Omega / omega
    r = qp1_radius(t, omega)
    r0 = (1 + omega**2) / omega**2
    theta = 2 * np.pi * (phi + rho * t)
    theta0 = 2 * np.pi * phi
    c, s = np.cos(theta), np.sin(theta)
    c0, s0 = np.cos(theta0), np.sin(theta0)
    radial = (r / r0) ** 2 * np.exp(-T * t)
    tangential = r / r0
    # X = E(theta) diag(radial, tangential) E(theta0)^T with E = [radial | tangent] columns
    X = _mat(
        c * radial * c0 + s * tangential * s0,
        c * radial * s0 - s * tangential * c0,
        s * radial * c0 - c * tangential * s0,
        s * radial * s0 + c * tangential * c0,
    )
    scale0 = (1 + omega**2) ** 4 / (4 * omega**8 * (1 + Omega**2))
    level0 = 1 + Omega**2 - np.cos(4 * np.pi * phi) - Omega * np.sin(4 * np.pi * phi)
    Q0 = _outer_radial(theta0)
    return {
        "T": T,
        "rho": rho,
        "gamma": r[..., None] * np.stack([c, s], axis=-1),
        "dgamma_dphi": 2 * np.pi * r[..., None] * np.stack([-s, c], axis=-1),
        "X": X,
        "w_phi": omega**2 / (2 * np.pi * (1 + omega**2)) * np.stack([-s0, c0], axis=-1),
        "lambda_phi": np.stack([-s, c], axis=-1) / (2 * np.pi * r[..., None]),
        "Q": _outer_radial(theta),
        "C0": (scale0 * level0)[..., None, None] * Q0,
        "C0_eig": scale0 * level0,
    }
