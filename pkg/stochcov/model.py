"""Dynamical-system problems: drift, diffusion, Jacobians and the built-in examples.

Time is always the rescaled phase ``t`` with period 1. Solvers multiply the drift
by ``T`` and the diffusion by ``sqrt(T)``; the functions defined here never do.

Drift, diffusion and Jacobian callables take ``(t, x, params)``. When a spec is
marked ``vectorized`` they must accept a batch of states of shape ``(..., n)``
together with a scalar or matching ``t`` and return arrays of shape ``(..., n)``,
``(..., n, m_w)`` and ``(..., n, n)``.
"""

import logging
import math
from types import MappingProxyType
from typing import Any, Callable, Dict, Mapping, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .errors import ProblemError

logger = logging.getLogger(__name__)

JACOBIAN_RTOL = 1e-5
AUTONOMY_PROBE_TIMES = (0.0, 0.37)


class ProblemSpec(BaseModel):
    """Declarative description of a stochastically perturbed vector field."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    name: str = Field(..., description="Identifier used by the CLI and in output files")
    dim_state: int = Field(..., ge=1, description="State dimension n")
    dim_noise: int = Field(..., ge=1, description="Number of independent Brownian components")
    autonomous: bool = Field(..., description="Whether drift and diffusion ignore t")
    drift: Callable[..., Any] = Field(..., description="f(t, x, params) -> n-vector")
    diffusion: Callable[..., Any] = Field(..., description="F(t, x, params) -> n x m_w matrix")
    drift_jacobian: Optional[Callable[..., Any]] = Field(
        None, description="Df(t, x, params) -> n x n matrix; finite differences when omitted"
    )
    params: Dict[str, float] = Field(default_factory=dict, description="Named real parameters")
    period_scale_hint: Optional[float] = Field(
        None, gt=0, description="Initial guess (autonomous) or fixed value (forced) of T"
    )
    vectorized: bool = Field(False, description="Callables accept batches of states")
    initial_guess: Optional[Callable[..., Any]] = Field(
        None, description="guess(phi, t, params, rho) -> state, used to seed BVP solves"
    )
    rotation_hint: Optional[float] = Field(None, description="Rotation number of the built-in torus")
    continuation_param: Optional[str] = Field(
        None, description="Parameter freed when a torus is solved at fixed rotation number"
    )


def fd_jacobian(func: Callable[[np.ndarray], np.ndarray], x: np.ndarray) -> np.ndarray:
    """Central finite-difference Jacobian with step 1e-6*(1+|x_i|), batched over leading axes."""
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    columns = []
    for i in range(n):
        h = 1e-6 * (1.0 + np.abs(x[..., i]))
        step = np.zeros_like(x)
        step[..., i] = h
        diff = func(x + step) - func(x - step)
        columns.append(diff / (2.0 * h)[..., None])
    return np.stack(columns, axis=-1)


class Problem:
    """Validated, immutable handle around a ProblemSpec."""

    __slots__ = ("_spec", "_params")

    def __init__(self, spec: ProblemSpec):
        object.__setattr__(self, "_spec", spec)
        object.__setattr__(self, "_params", MappingProxyType(dict(spec.params)))

    def __setattr__(self, key, value):
        raise AttributeError("Problem handles are immutable")

    def __repr__(self) -> str:
        return f"Problem(name={self.name!r}, n={self.n}, m_w={self.m_w}, autonomous={self.autonomous})"

    @property
    def spec(self) -> ProblemSpec:
        return self._spec

    @property
    def name(self) -> str:
        return self._spec.name

    @property
    def n(self) -> int:
        return self._spec.dim_state

    @property
    def m_w(self) -> int:
        return self._spec.dim_noise

    @property
    def autonomous(self) -> bool:
        return self._spec.autonomous

    @property
    def params(self) -> Mapping[str, float]:
        return self._params

    @property
    def period_hint(self) -> Optional[float]:
        return self._spec.period_scale_hint

    @property
    def rotation_hint(self) -> Optional[float]:
        return self._spec.rotation_hint

    @property
    def continuation_param(self) -> Optional[str]:
        return self._spec.continuation_param

    @property
    def has_analytic_jacobian(self) -> bool:
        return self._spec.drift_jacobian is not None

    def _call(self, fn, t, x, out_tail):
        x = np.asarray(x, dtype=float)
        params = dict(self._params)
        if self._spec.vectorized or x.ndim == 1:
            return np.asarray(fn(t, x, params), dtype=float)
        flat = x.reshape(-1, x.shape[-1])
        t_flat = np.broadcast_to(np.asarray(t, dtype=float), x.shape[:-1]).reshape(-1)
        out = [np.asarray(fn(float(tk), xk, params), dtype=float) for tk, xk in zip(t_flat, flat)]
        return np.stack(out).reshape(x.shape[:-1] + out_tail)

    def f(self, t, x) -> np.ndarray:
        """Drift f(t, x)."""
        return self._call(self._spec.drift, t, x, (self.n,))

    def F(self, t, x) -> np.ndarray:
        """Diffusion matrix F(t, x) of shape (..., n, m_w)."""
        return self._call(self._spec.diffusion, t, x, (self.n, self.m_w))

    def jac(self, t, x) -> np.ndarray:
        """Drift Jacobian Df(t, x), analytic when supplied."""
        if self._spec.drift_jacobian is not None:
            return self._call(self._spec.drift_jacobian, t, x, (self.n, self.n))
        return fd_jacobian(lambda y: self.f(t, y), x)

    def fd_jac(self, t, x) -> np.ndarray:
        return fd_jacobian(lambda y: self.f(t, y), x)

    def param_derivative(self, name: str, t, x) -> np.ndarray:
        """Central-difference derivative of the drift with respect to a parameter."""
        if name not in self._params:
            raise ProblemError(f"Unknown parameter '{name}' for problem {self.name}")
        value = self._params[name]
        h = 1e-6 * (1.0 + abs(value))
        up = self.with_params(**{name: value + h}, validate=False)
        down = self.with_params(**{name: value - h}, validate=False)
        return (up.f(t, x) - down.f(t, x)) / (2.0 * h)

    def with_params(self, validate: bool = True, **overrides: float) -> "Problem":
        unknown = set(overrides) - set(self._params)
        if unknown:
            raise ProblemError(f"Unknown parameter(s) {sorted(unknown)} for problem {self.name}")
        params = {**self._params, **{k: float(v) for k, v in overrides.items()}}
        spec = self._spec.model_copy(update={"params": params})
        return build_problem(spec) if validate else Problem(spec)

    def guess(self, phi, t, rho: Optional[float] = None) -> np.ndarray:
        if self._spec.initial_guess is None:
            raise ProblemError(f"Problem {self.name} has no initial guess; supply one explicitly")
        rho = self.rotation_hint if rho is None else rho
        return np.asarray(self._spec.initial_guess(phi, t, dict(self._params), rho), dtype=float)


def check_jacobian(problem: Problem, points: np.ndarray, t: float = 0.0) -> float:
    """Largest relative deviation between the analytic and finite-difference Jacobians."""
    worst = 0.0
    for x in np.atleast_2d(points):
        exact = problem.jac(t, x)
        approx = problem.fd_jac(t, x)
        scale = max(1.0, float(np.max(np.abs(approx))))
        worst = max(worst, float(np.max(np.abs(exact - approx))) / scale)
    return worst


def build_problem(spec: ProblemSpec, n_checks: int = 5, seed: int = 0) -> Problem:
    """Validate a spec and return an immutable Problem handle."""
    problem = Problem(spec)
    n, m_w = spec.dim_state, spec.dim_noise
    rng = np.random.default_rng(seed)
    probes = rng.uniform(-3.0, 3.0, size=(n_checks, n))

    for x in probes[:1]:
        fx = problem.f(0.0, x)
        if fx.shape != (n,):
            raise ProblemError(f"{spec.name}: drift returned shape {fx.shape}, expected ({n},)")
        Fx = problem.F(0.0, x)
        if Fx.shape != (n, m_w):
            raise ProblemError(f"{spec.name}: diffusion returned shape {Fx.shape}, expected ({n}, {m_w})")
        if spec.drift_jacobian is not None:
            Jx = problem.jac(0.0, x)
            if Jx.shape != (n, n):
                raise ProblemError(f"{spec.name}: Jacobian returned shape {Jx.shape}, expected ({n}, {n})")

    if spec.autonomous:
        t0, t1 = AUTONOMY_PROBE_TIMES
        x = probes[0]
        if not (
            np.allclose(problem.f(t0, x), problem.f(t1, x), rtol=1e-13, atol=1e-13)
            and np.allclose(problem.F(t0, x), problem.F(t1, x), rtol=1e-13, atol=1e-13)
        ):
            raise ProblemError(f"{spec.name}: declared autonomous but drift or diffusion depends on t")

    if spec.vectorized:
        batch = problem.f(0.3, probes)
        looped = np.stack([problem.f(0.3, x) for x in probes])
        if batch.shape != looped.shape or not np.allclose(batch, looped, rtol=1e-13, atol=1e-13):
            raise ProblemError(f"{spec.name}: declared vectorized but batch evaluation disagrees")

    if spec.drift_jacobian is not None:
        for t in (0.0, 0.37):
            err = check_jacobian(problem, probes, t)
            if err > JACOBIAN_RTOL:
                raise ProblemError(
                    f"{spec.name}: analytic Jacobian differs from finite differences by {err:.3e}"
                )

    logger.debug(f"Validated problem {spec.name} (n={n}, m_w={m_w}, autonomous={spec.autonomous})")
    return problem


# --- built-in systems ------------------------------------------------------


def _matrix(rows, shape) -> np.ndarray:
    return np.stack(
        [np.stack([np.broadcast_to(np.asarray(e, dtype=float), shape) for e in row], axis=-1) for row in rows],
        axis=-2,
    )


def _hopf_drift(t, x, p):
    x1, x2 = x[..., 0], x[..., 1]
    r2 = x1**2 + x2**2
    return np.stack([x1 - x2 - x1 * r2, x1 + x2 - x2 * r2], axis=-1)


def _hopf_jacobian(t, x, p):
    x1, x2 = x[..., 0], x[..., 1]
    r2 = x1**2 + x2**2
    return _matrix(
        [[1 - r2 - 2 * x1**2, -1 - 2 * x1 * x2], [1 - 2 * x1 * x2, 1 - r2 - 2 * x2**2]],
        x1.shape,
    )


def _quadratic_diffusion(t, x, p):
    x1, x2 = x[..., 0], x[..., 1]
    return _matrix([[x1 * x2], [x2**2]], x1.shape)


def _hopf_guess(phi, t, p, rho):
    t = np.asarray(t, dtype=float)
    return 1.1 * np.stack([np.cos(2 * np.pi * t), np.sin(2 * np.pi * t)], axis=-1)


def _linosc_drift(t, x, p):
    x1, x2 = x[..., 0], x[..., 1]
    return np.stack([x2, -2 * x2 - x1 + 2 * np.cos(2 * np.pi * np.asarray(t))], axis=-1)


def _linosc_jacobian(t, x, p):
    return _matrix([[0.0, 1.0], [-1.0, -2.0]], x[..., 0].shape)


def _linosc_diffusion(t, x, p):
    x1 = x[..., 0]
    return _matrix([[0.0], [x1]], x1.shape)


def _linosc_guess(phi, t, p, rho):
    t = np.asarray(t, dtype=float)
    return np.stack([np.sin(2 * np.pi * t), np.cos(2 * np.pi * t)], axis=-1)


def _qp_drift(t, x, p):
    Om = p["Omega"]
    x1, x2 = x[..., 0], x[..., 1]
    r = np.sqrt(x1**2 + x2**2)
    g = 1 + r * (np.cos(2 * np.pi * np.asarray(t)) - 1)
    return np.stack([-Om * x2 + x1 * g, Om * x1 + x2 * g], axis=-1)


def _qp_jacobian(t, x, p):
    Om = p["Omega"]
    x1, x2 = x[..., 0], x[..., 1]
    r = np.sqrt(x1**2 + x2**2)
    c = np.cos(2 * np.pi * np.asarray(t)) - 1
    g = 1 + r * c
    safe_r = np.where(r > 0, r, 1.0)
    # d(r)/dx_i = x_i / r
    return _matrix(
        [
            [g + c * x1**2 / safe_r, -Om + c * x1 * x2 / safe_r],
            [Om + c * x1 * x2 / safe_r, g + c * x2**2 / safe_r],
        ],
        x1.shape,
    )


def _qp_guess(phi, t, p, rho):
    omega = p["omega"]
    radius = (1 + omega**2) / omega**2
    phi, t = np.broadcast_arrays(np.asarray(phi, dtype=float), np.asarray(t, dtype=float))
    angle = 2 * np.pi * (phi + rho * t)
    return radius * np.stack([np.cos(angle), np.sin(angle)], axis=-1)


def _vdp_drift(t, y, p):
    eps, beta, delta = p["epsilon"], p["beta"], p["delta"]
    y1, y2, y3, y4 = (y[..., i] for i in range(4))
    return np.stack(
        [
            y2,
            -eps * (y1**2 - 1) * y2 - y1 + beta * (y3 - y1),
            y4,
            -eps * (y3**2 - 1) * y4 - (1 + delta) * y3 + beta * (y1 - y3),
        ],
        axis=-1,
    )


def _vdp_jacobian(t, y, p):
    eps, beta, delta = p["epsilon"], p["beta"], p["delta"]
    y1, y2, y3, y4 = (y[..., i] for i in range(4))
    return _matrix(
        [
            [0.0, 1.0, 0.0, 0.0],
            [-2 * eps * y1 * y2 - 1 - beta, -eps * (y1**2 - 1), beta, 0.0],
            [0.0, 0.0, 0.0, 1.0],
            [beta, 0.0, -2 * eps * y3 * y4 - (1 + delta) - beta, -eps * (y3**2 - 1)],
        ],
        y1.shape,
    )


def _vdp_diffusion(t, y, p):
    return _matrix([[0.0, 0.0], [1.0, 0.0], [0.0, 0.0], [0.0, 1.0]], y[..., 0].shape)


def _vdp_guess(phi, t, p, rho):
    phi, t = np.broadcast_arrays(np.asarray(phi, dtype=float), np.asarray(t, dtype=float))
    angle = 2 * np.pi * (phi + rho * t)
    return np.stack(
        [
            2 * np.sin(2 * np.pi * t),
            2 * np.cos(2 * np.pi * t),
            2 * np.sin(angle),
            2 * rho * np.cos(angle),
        ],
        axis=-1,
    )


VDP_RHO = 140.0 / (62.0 * math.sqrt(2.0))


def _hopf_spec() -> ProblemSpec:
    return ProblemSpec(
        name="hopf",
        dim_state=2,
        dim_noise=1,
        autonomous=True,
        drift=_hopf_drift,
        diffusion=_quadratic_diffusion,
        drift_jacobian=_hopf_jacobian,
        period_scale_hint=2 * math.pi,
        vectorized=True,
        initial_guess=_hopf_guess,
    )


def _linosc_spec() -> ProblemSpec:
    return ProblemSpec(
        name="linosc",
        dim_state=2,
        dim_noise=1,
        autonomous=False,
        drift=_linosc_drift,
        diffusion=_linosc_diffusion,
        drift_jacobian=_linosc_jacobian,
        period_scale_hint=2 * math.pi,
        vectorized=True,
        initial_guess=_linosc_guess,
    )


def _qp_radial_spec() -> ProblemSpec:
    Omega, omega = math.pi, 1.0
    return ProblemSpec(
        name="qp_radial",
        dim_state=2,
        dim_noise=1,
        autonomous=False,
        drift=_qp_drift,
        diffusion=_quadratic_diffusion,
        drift_jacobian=_qp_jacobian,
        params={"Omega": Omega, "omega": omega},
        period_scale_hint=2 * math.pi / omega,
        vectorized=True,
        initial_guess=_qp_guess,
        rotation_hint=Omega / omega,
        continuation_param="Omega",
    )


def _vdp_coupled_spec() -> ProblemSpec:
    return ProblemSpec(
        name="vdp_coupled",
        dim_state=4,
        dim_noise=2,
        autonomous=True,
        drift=_vdp_drift,
        diffusion=_vdp_diffusion,
        drift_jacobian=_vdp_jacobian,
        params={"epsilon": 0.5, "beta": 0.5, "delta": 1.9422},
        period_scale_hint=2 * math.pi,
        vectorized=True,
        initial_guess=_vdp_guess,
        rotation_hint=VDP_RHO,
        continuation_param="delta",
    )


BUILTINS: Dict[str, Callable[[], ProblemSpec]] = {
    "hopf": _hopf_spec,
    "linosc": _linosc_spec,
    "qp_radial": _qp_radial_spec,
    "vdp_coupled": _vdp_coupled_spec,
}

# Problems whose deterministic limit set is a 2-torus rather than a cycle.
TORUS_PROBLEMS = frozenset({"qp_radial", "vdp_coupled"})


def builtin(name: str) -> ProblemSpec:
    """Return the spec of a built-in example system."""
    try:
        factory = BUILTINS[name]
    except KeyError:
        raise ProblemError(f"Unknown built-in problem '{name}'. Available: {', '.join(sorted(BUILTINS))}")
    return factory()


def load_builtin(name: str, **params: float) -> Problem:
    """Convenience: build a validated built-in problem with parameter overrides."""
    problem = build_problem(builtin(name))
    return problem.with_params(**params) if params else problem
