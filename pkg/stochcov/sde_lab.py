"""Euler-Maruyama simulation and section statistics for validating predicted covariances.

Trajectories integrate dx = T f(t, x) dt + sigma sqrt(T) F(t, x) dW in the rescaled
phase t in [0, 1). Every trajectory draws its increments from its own Philox stream
keyed by (seed, trajectory index), and ensembles are integrated in fixed batches, so
results do not depend on the number of worker threads.

Points near the limit set are assigned section coordinates (psi, tau): the foot point
gamma(psi, tau) whose adjoint hyperplane contains the point. psi is always 0 on cycles.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .cycle_cov import AdjointCycle, CovarianceCycle, Eigencurves, PeriodicOrbit, symmetric_eigens
from .errors import ConvergenceError, IntegrationError, VerificationError
from .flow import Trajectory
from .fourier import FourierOps, trig_basis
from .model import Problem
from .polynomials import PiecewisePolynomial
from .torus import TorusSolution
from .torus_cov import CovarianceTorus, TorusAdjoints

logger = logging.getLogger(__name__)

NEWTON_TOL = 1e-10
NEWTON_MAX_ITER = 20
HYPERPLANE_TOL = 1e-8
CHUNK_STEPS = 4096
DEFAULT_BATCH = 16
WARM_START_SPAN = 0.05
MAX_LOCATE_CHUNK = 1024
MODES = ("points", "crossings")


class SdeRun(BaseModel):
    """One Euler-Maruyama experiment in the rescaled phase."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    problem: Problem
    T: float = Field(..., gt=0, description="Period scale of the limit set; the drift is multiplied by T.")
    sigma: float = Field(..., ge=0, description="Noise intensity.")
    dt: float = Field(..., gt=0, description="Step size in the rescaled phase.")
    n_steps: int = Field(..., ge=1, description="Steps integrated after the burn-in.")
    seed: int = Field(0, ge=0, lt=2**64)
    thinning: int = Field(1, ge=1, description="Keep every k-th state.")
    burn_in_steps: int = Field(0, ge=0, description="Steps integrated and discarded before storage starts.")
    t0: float = Field(0.0, ge=0, lt=1, description="Phase of the first state.")

    @classmethod
    def for_periods(cls, problem: Problem, T: float, sigma: float, dt: float, periods: float, burn_in_periods: float = 0.0, **kw) -> "SdeRun":
        return cls(
            problem=problem,
            T=T,
            sigma=sigma,
            dt=dt,
            n_steps=max(1, int(round(periods / dt))),
            burn_in_steps=int(round(burn_in_periods / dt)),
            **kw,
        )

    @property
    def total_steps(self) -> int:
        return self.burn_in_steps + self.n_steps


@dataclass(frozen=True, eq=False)
class SamplePath:
    """Stored states of one trajectory with the phase of each stored step."""

    trajectory: int
    steps: np.ndarray
    tau: np.ndarray
    states: np.ndarray
    dt: float
    thinning: int

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def stride(self) -> float:
        """Phase advance between consecutive stored states."""
        return self.dt * self.thinning


def _stream(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, index])))


def _integrate_batch(run: SdeRun, x0: np.ndarray, indices: Sequence[int]) -> List[SamplePath]:
    problem = run.problem
    B, n, m = len(indices), problem.n, problem.m_w
    x = np.array(np.broadcast_to(x0, (B, n)), dtype=float)
    gens = [_stream(run.seed, int(i)) for i in indices]
    n_store = run.n_steps // run.thinning + 1
    steps = run.burn_in_steps + np.arange(n_store) * run.thinning
    states = np.empty((B, n_store, n))
    stored = 0
    if run.burn_in_steps == 0:
        states[:, 0] = x
        stored = 1
    scale = run.sigma * math.sqrt(run.T)
    sqrt_dt = math.sqrt(run.dt)
    k = 0
    while k < run.total_steps:
        chunk = min(CHUNK_STEPS, run.total_steps - k)
        noise = None
        if run.sigma > 0:
            noise = np.stack([g.standard_normal((chunk, m)) for g in gens], axis=1) * sqrt_dt
        for i in range(chunk):
            tau = (run.t0 + k * run.dt) % 1.0
            x_new = x + run.T * problem.f(tau, x) * run.dt
            if noise is not None:
                x_new = x_new + scale * np.sum(problem.F(tau, x) * noise[i][:, None, :], axis=-1)
            k += 1
            finite = np.isfinite(x_new).all(axis=-1)
            if not finite.all():
                bad = int(indices[int(np.argmin(finite))])
                raise IntegrationError(f"{problem.name}: trajectory {bad} became non-finite", step=k)
            x = x_new
            if k >= run.burn_in_steps and (k - run.burn_in_steps) % run.thinning == 0:
                states[:, stored] = x
                stored += 1
    tau = (run.t0 + steps * run.dt) % 1.0
    return [
        SamplePath(trajectory=int(i), steps=steps, tau=tau, states=states[b], dt=run.dt, thinning=run.thinning)
        for b, i in enumerate(indices)
    ]


def euler_maruyama(run: SdeRun, x0, index: int = 0) -> SamplePath:
    """Integrate trajectory ``index`` of ``run`` from x0."""
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (run.problem.n,):
        raise ValueError(f"initial state has shape {x0.shape}, expected ({run.problem.n},)")
    return _integrate_batch(run, x0[None, :], [index])[0]


def _batches(trajectories: int, batch_size: int) -> List[np.ndarray]:
    indices = np.arange(trajectories)
    return [indices[s : s + batch_size] for s in range(0, trajectories, batch_size)]


def _initial_states(x0, trajectories: int, n: int) -> np.ndarray:
    x0 = np.asarray(x0, dtype=float)
    if x0.shape == (n,):
        return np.broadcast_to(x0, (trajectories, n))
    if x0.shape != (trajectories, n):
        raise ValueError(f"initial states have shape {x0.shape}, expected ({n},) or ({trajectories}, {n})")
    return x0


def run_ensemble(run: SdeRun, x0, trajectories: int, workers: int = 1, batch_size: int = DEFAULT_BATCH) -> List[SamplePath]:
    """Integrate ``trajectories`` independent paths; the result is ordered by trajectory index."""
    starts = _initial_states(x0, trajectories, run.problem.n)

    def work(indices):
        return _integrate_batch(run, starts[indices], indices)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        parts = list(pool.map(work, _batches(trajectories, batch_size)))
    return [path for part in parts for path in part]


# --- section geometry -----------------------------------------------------------


@dataclass(frozen=True)
class _Fields:
    gamma: np.ndarray
    Lam: np.ndarray
    jac_gamma: np.ndarray
    jac_Lam: np.ndarray


class SectionGeometry:
    """Foot points, hyperplane normals and predicted covariance on a limit set.

    ``free`` names the section coordinates solved for: tau only on autonomous
    cycles, psi (and tau when autonomous) on tori, none on forced cycles.
    """

    free: Tuple[str, ...] = ()
    rho: float = 0.0
    is_torus: bool = False

    @property
    def n(self) -> int:
        raise NotImplementedError

    @property
    def autonomous(self) -> bool:
        raise NotImplementedError

    @property
    def n_directions(self) -> int:
        """Number of transversal covariance directions."""
        return self.n - len(self.free)

    def wrap(self, psi, tau) -> Tuple[np.ndarray, np.ndarray]:
        psi = np.asarray(psi, dtype=float)
        tau = np.asarray(tau, dtype=float)
        turns = np.floor(tau)
        return np.mod(psi + self.rho * turns, 1.0), tau - turns

    def fields(self, psi, tau) -> _Fields:
        raise NotImplementedError

    def gamma(self, psi, tau) -> np.ndarray:
        raise NotImplementedError

    def covariance(self, psi, tau) -> np.ndarray:
        raise NotImplementedError

    def eigen(self, psi, tau, C: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def nearest(self, x: np.ndarray, time_phase: float) -> Tuple[float, float]:
        raise NotImplementedError

    def hyperplane(self, x, psi, tau) -> Tuple[np.ndarray, np.ndarray]:
        """H = Lambda^T (x - gamma) and its Jacobian with respect to the free coordinates."""
        fl = self.fields(psi, tau)
        d = x - fl.gamma
        H = np.einsum("lnr,ln->lr", fl.Lam, d)
        J = np.einsum("lnrc,ln->lrc", fl.jac_Lam, d) - np.einsum("lnr,lnc->lrc", fl.Lam, fl.jac_gamma)
        return H, J

    def locate(self, x, psi, tau, tol: float = NEWTON_TOL, max_iter: int = NEWTON_MAX_ITER):
        """Vectorized Newton on H(x, psi, tau) = 0 for a batch of points."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        psi, tau = self.wrap(np.broadcast_to(psi, x.shape[:1]), np.broadcast_to(tau, x.shape[:1]))
        psi, tau = psi.copy(), tau.copy()
        if not self.free:
            return psi, tau, np.zeros((len(x), 0)), 0
        for it in range(max_iter + 1):
            H, J = self.hyperplane(x, psi, tau)
            err = np.max(np.abs(H), axis=-1)
            if not np.all(np.isfinite(err)):
                raise ConvergenceError("section coordinates: non-finite hyperplane residual")
            pending = err >= tol
            if not pending.any():
                return psi, tau, H, it
            if it == max_iter:
                break
            step = np.zeros_like(H)
            try:
                step[pending] = np.linalg.solve(J[pending], H[pending][..., None])[..., 0]
            except np.linalg.LinAlgError as e:
                raise ConvergenceError(f"section coordinates: singular hyperplane Jacobian ({e})") from e
            for c, name in enumerate(self.free):
                if name == "psi":
                    psi = psi - step[:, c]
                else:
                    tau = tau - step[:, c]
            psi, tau = self.wrap(psi, tau)
        raise ConvergenceError(
            f"section coordinates: {int(pending.sum())} of {len(x)} points not located after {max_iter} iterations "
            f"(max residual {float(np.max(err)):.3e}); points may be outside the tubular neighbourhood"
        )

    def pairings(self, x_tr, psi, tau) -> np.ndarray:
        return np.einsum("lnr,ln->lr", self.fields(psi, tau).Lam, x_tr)

    @staticmethod
    def _descending(C: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        values, vectors = np.linalg.eigh(C)
        return values[..., ::-1], vectors[..., ::-1]


class CycleGeometry(SectionGeometry):
    """Section geometry of a limit cycle: gamma(tau), lambda(tau) and C(tau)."""

    def __init__(self, T: float, gamma: Trajectory, lambda_: Optional[PiecewisePolynomial], covariance: PiecewisePolynomial):
        self.T = float(T)
        self.gamma_poly = gamma
        self.lambda_poly = lambda_
        self.covariance_poly = covariance
        self.free = ("tau",) if lambda_ is not None else ()
        values, vectors = symmetric_eigens(covariance.node_values())
        self.curves = Eigencurves(times=covariance.mesh, eigenvalues=values, eigenvectors=vectors)
        self._mesh_gamma = gamma(covariance.mesh)

    @classmethod
    def from_analysis(cls, po: PeriodicOrbit, adj: AdjointCycle, cov: CovarianceCycle) -> "CycleGeometry":
        return cls(po.T, po.X.orbit, adj.lambda_ if po.autonomous else None, cov.C)

    @property
    def n(self) -> int:
        return self.gamma_poly.dim

    @property
    def autonomous(self) -> bool:
        return self.lambda_poly is not None

    def gamma(self, psi, tau) -> np.ndarray:
        return self.gamma_poly(tau)

    def fields(self, psi, tau) -> _Fields:
        tau = np.asarray(tau, dtype=float)
        gamma = self.gamma_poly(tau)
        if self.lambda_poly is None:
            empty = np.zeros(gamma.shape + (0,))
            return _Fields(gamma, empty, empty, np.zeros(gamma.shape + (0, 0)))
        return _Fields(
            gamma=gamma,
            Lam=self.lambda_poly(tau)[..., None],
            jac_gamma=self.gamma_poly.derivative(tau)[..., None],
            jac_Lam=self.lambda_poly.derivative(tau)[..., None, None],
        )

    def covariance(self, psi, tau) -> np.ndarray:
        return self.covariance_poly(tau)

    def eigen(self, psi, tau, C):
        values, vectors = self._descending(C)
        p = self.n_directions
        values, vectors = values[..., :p], vectors[..., :p].copy()
        times = self.curves.times
        i = np.clip(np.searchsorted(times, tau), 1, len(times) - 1)
        i = np.where(np.abs(times[i - 1] - tau) <= np.abs(times[i] - tau), i - 1, i)
        reference = self.curves.eigenvectors[i][..., :p]
        vectors *= np.where(np.sum(vectors * reference, axis=-2) < 0, -1.0, 1.0)[..., None, :]
        return values, vectors

    def nearest(self, x, time_phase):
        if not self.autonomous:
            return 0.0, float(time_phase)
        k = int(np.argmin(np.sum((self._mesh_gamma - x) ** 2, axis=-1)))
        return 0.0, float(self.covariance_poly.mesh[k]) % 1.0


class TorusGeometry(SectionGeometry):
    """Section geometry of a 2-torus from per-node segments of gamma, Lambda and C."""

    is_torus = True

    def __init__(
        self,
        ops: FourierOps,
        rho: float,
        T: float,
        gamma_segments: Sequence[PiecewisePolynomial],
        lambda_segments: Sequence[PiecewisePolynomial],
        covariance_segments: Sequence[PiecewisePolynomial],
        autonomous: bool,
    ):
        self.ops = ops
        self.rho = float(rho)
        self.T = float(T)
        self.gamma_segments = tuple(gamma_segments)
        self.lambda_segments = tuple(lambda_segments)
        self.covariance_segments = tuple(covariance_segments)
        self._autonomous = autonomous
        self.free = ("psi", "tau") if autonomous else ("psi",)
        self._dweights = ops.D @ ops.F_mat

    @classmethod
    def from_analysis(cls, torus: TorusSolution, adj: TorusAdjoints, cov: CovarianceTorus) -> "TorusGeometry":
        mesh = torus.cmesh.mesh
        return cls(
            ops=torus.ops,
            rho=torus.rho,
            T=torus.T,
            gamma_segments=[Trajectory.from_node_values(mesh, v) for v in torus.values],
            lambda_segments=[PiecewisePolynomial.from_node_values(mesh, M) for M in adj.M],
            covariance_segments=cov.segments,
            autonomous=torus.autonomous,
        )

    @property
    def n(self) -> int:
        return self.gamma_segments[0].value_shape[0]

    @property
    def autonomous(self) -> bool:
        return self._autonomous

    def _weights(self, psi):
        basis = trig_basis(psi, self.ops.N)
        return basis @ self.ops.F_mat, basis @ self._dweights

    @staticmethod
    def _nodes(segments, tau, derivative: bool = False) -> np.ndarray:
        return np.stack([seg.derivative(tau) if derivative else seg(tau) for seg in segments])

    def gamma(self, psi, tau) -> np.ndarray:
        w, _ = self._weights(psi)
        return np.einsum("lk,kl...->l...", w, self._nodes(self.gamma_segments, tau))

    def fields(self, psi, tau) -> _Fields:
        w, dw = self._weights(psi)
        G = self._nodes(self.gamma_segments, tau)
        L = self._nodes(self.lambda_segments, tau)
        jac_gamma = [np.einsum("lk,kln->ln", dw, G)]
        jac_Lam = [np.einsum("lk,klnr->lnr", dw, L)]
        if self._autonomous:
            jac_gamma.append(np.einsum("lk,kln->ln", w, self._nodes(self.gamma_segments, tau, True)))
            jac_Lam.append(np.einsum("lk,klnr->lnr", w, self._nodes(self.lambda_segments, tau, True)))
        return _Fields(
            gamma=np.einsum("lk,kln->ln", w, G),
            Lam=np.einsum("lk,klnr->lnr", w, L),
            jac_gamma=np.stack(jac_gamma, axis=-1),
            jac_Lam=np.stack(jac_Lam, axis=-1),
        )

    def covariance(self, psi, tau) -> np.ndarray:
        w, _ = self._weights(psi)
        return np.einsum("lk,klij->lij", w, self._nodes(self.covariance_segments, tau))

    def eigen(self, psi, tau, C):
        values, vectors = self._descending(C)
        p = self.n_directions
        values, vectors = values[..., :p], vectors[..., :p].copy()
        pivot = np.argmax(np.abs(vectors), axis=-2)
        signs = np.sign(np.take_along_axis(vectors, pivot[..., None, :], axis=-2))
        vectors *= np.where(signs == 0, 1.0, signs)
        return values, vectors

    def nearest(self, x, time_phase):
        grid = np.arange(8 * self.ops.size) / (8 * self.ops.size)
        w, _ = self._weights(grid)
        if not self._autonomous:
            pts = np.einsum("gk,kn->gn", w, self._nodes(self.gamma_segments, float(time_phase)))
            return float(grid[int(np.argmin(np.sum((pts - x) ** 2, axis=-1)))]), float(time_phase)
        times = np.linspace(0.0, 1.0, 4 * self.gamma_segments[0].n_intervals + 1)[:-1]
        nodes = np.stack([seg(times) for seg in self.gamma_segments])
        pts = np.einsum("gk,ktn->gtn", w, nodes)
        g, t = np.unravel_index(int(np.argmin(np.sum((pts - x) ** 2, axis=-1))), pts.shape[:2])
        return float(grid[g]), float(times[t])


def locate_section_coords(x, geometry: SectionGeometry, guess: Tuple[float, float], tol: float = NEWTON_TOL, max_iter: int = NEWTON_MAX_ITER):
    """(psi, tau) of a single point by Newton from ``guess``.

    On forced systems tau is the time phase of the point and is taken from the guess.
    """
    psi, tau, _, _ = geometry.locate(np.asarray(x, dtype=float)[None, :], [guess[0]], [guess[1]], tol, max_iter)
    return float(psi[0]), float(tau[0])


def path_coordinates(path: SamplePath, geometry: SectionGeometry, tol: float = NEWTON_TOL, max_iter: int = NEWTON_MAX_ITER):
    """Section coordinates of every stored state, warm-started along the path."""
    S = len(path)
    psi = np.empty(S)
    tau = np.empty(S)
    guess = geometry.nearest(path.states[0], path.tau[0])
    p, t, _, _ = geometry.locate(path.states[:1], [guess[0]], [guess[1]], tol, max_iter)
    psi[0], tau[0] = p[0], t[0]
    chunk = max(1, min(MAX_LOCATE_CHUNK, int(WARM_START_SPAN / path.stride)))
    start = 1
    while start < S:
        stop = min(S, start + chunk)
        if geometry.autonomous:
            ahead = tau[start - 1] + np.arange(1, stop - start + 1) * path.stride
            g_psi, g_tau = geometry.wrap(np.full(stop - start, psi[start - 1]), ahead)
        else:
            turns = np.cumsum(np.diff(path.tau[start - 1 : stop]) < 0)
            g_psi = np.mod(psi[start - 1] + geometry.rho * turns, 1.0)
            g_tau = path.tau[start:stop]
        psi[start:stop], tau[start:stop], _, _ = geometry.locate(path.states[start:stop], g_psi, g_tau, tol, max_iter)
        start = stop
    return psi, tau


# --- section samples --------------------------------------------------------------


@dataclass(frozen=True)
class SectionSample:
    x: np.ndarray
    psi: float
    tau: float
    x_tr: np.ndarray
    projections: np.ndarray


@dataclass(frozen=True, eq=False)
class SectionSamples:
    """Section samples stored column-wise.

    ``eigenvalues`` holds the predicted rescaled variances along the directions the
    ``projections`` refer to; ``hyperplane`` holds Lambda^T x_tr.
    """

    mode: str
    x: np.ndarray
    psi: np.ndarray
    tau: np.ndarray
    x_tr: np.ndarray
    projections: np.ndarray
    eigenvalues: np.ndarray
    hyperplane: np.ndarray
    trajectory: np.ndarray

    def __len__(self) -> int:
        return len(self.tau)

    def __getitem__(self, i: int) -> SectionSample:
        return SectionSample(
            x=self.x[i], psi=float(self.psi[i]), tau=float(self.tau[i]), x_tr=self.x_tr[i], projections=self.projections[i]
        )

    @property
    def max_hyperplane_residual(self) -> float:
        return float(np.max(np.abs(self.hyperplane))) if self.hyperplane.size else 0.0

    @classmethod
    def concat(cls, parts: Iterable["SectionSamples"], mode: str) -> "SectionSamples":
        parts = list(parts)
        if not parts:
            raise ValueError("nothing to concatenate")
        names = ("x", "psi", "tau", "x_tr", "projections", "eigenvalues", "hyperplane", "trajectory")
        return cls(mode=mode, **{k: np.concatenate([getattr(p, k) for p in parts]) for k in names})


def samples_at(geometry: SectionGeometry, x, psi, tau, trajectory=0, mode: str = "points") -> SectionSamples:
    """Build samples for points whose section coordinates are already known."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    psi = np.broadcast_to(np.asarray(psi, dtype=float), x.shape[:1])
    tau = np.broadcast_to(np.asarray(tau, dtype=float), x.shape[:1])
    x_tr = x - geometry.gamma(psi, tau)
    values, vectors = geometry.eigen(psi, tau, geometry.covariance(psi, tau))
    return SectionSamples(
        mode=mode,
        x=x,
        psi=np.array(psi),
        tau=np.array(tau),
        x_tr=x_tr,
        projections=np.einsum("lnp,ln->lp", vectors, x_tr),
        eigenvalues=values,
        hyperplane=geometry.pairings(x_tr, psi, tau),
        trajectory=np.broadcast_to(np.asarray(trajectory, dtype=int), x.shape[:1]).copy(),
    )


def sample_points(path: SamplePath, geometry: SectionGeometry, coords=None) -> SectionSamples:
    """Every stored state assigned to its own section, without interpolation."""
    psi, tau = coords if coords is not None else path_coordinates(path, geometry)
    return samples_at(geometry, path.states, psi, tau, path.trajectory, mode="points")


def section_crossings(path: SamplePath, geometry: SectionGeometry, tau_star: float, coords=None) -> SectionSamples:
    """Interpolated crossings of the section tau = tau_star.

    Consecutive states cross when their tau values straddle tau_star, counting only
    forward steps (wrap-around included). The state is interpolated linearly and
    its coordinates are recomputed.
    """
    psi, tau = coords if coords is not None else path_coordinates(path, geometry)
    d = np.mod(np.diff(tau) + 0.5, 1.0) - 0.5
    s = np.mod(tau_star - tau[:-1], 1.0)
    hits = np.flatnonzero((d > 0) & (s < d))
    n = geometry.n
    if hits.size == 0:
        empty = np.zeros((0, n))
        p = geometry.n_directions
        return SectionSamples(
            mode="crossings",
            x=empty,
            psi=np.zeros(0),
            tau=np.zeros(0),
            x_tr=empty,
            projections=np.zeros((0, p)),
            eigenvalues=np.zeros((0, p)),
            hyperplane=np.zeros((0, len(geometry.free))),
            trajectory=np.zeros(0, dtype=int),
        )
    alpha = (s[hits] / d[hits])[:, None]
    x = path.states[hits] + alpha * (path.states[hits + 1] - path.states[hits])
    g_psi, g_tau = geometry.wrap(psi[hits], tau[hits] + s[hits])
    c_psi, c_tau, _, _ = geometry.locate(x, g_psi, g_tau)
    return samples_at(geometry, x, c_psi, c_tau, path.trajectory, mode="crossings")


def path_samples(path: SamplePath, geometry: SectionGeometry, mode: str = "points", tau_star: float = 0.0) -> SectionSamples:
    if mode == "points":
        return sample_points(path, geometry)
    if mode == "crossings":
        return section_crossings(path, geometry, tau_star)
    raise ValueError(f"Unknown sampling mode '{mode}', expected one of {MODES}")


def simulate_sections(
    run: SdeRun,
    x0,
    geometry: SectionGeometry,
    trajectories: int = 1,
    mode: str = "points",
    tau_star: float = 0.0,
    workers: int = 1,
    batch_size: int = DEFAULT_BATCH,
) -> SectionSamples:
    """Integrate an ensemble and collect section samples, merged in trajectory order."""
    if mode not in MODES:
        raise ValueError(f"Unknown sampling mode '{mode}', expected one of {MODES}")
    starts = _initial_states(x0, trajectories, run.problem.n)

    def work(indices):
        paths = _integrate_batch(run, starts[indices], indices)
        return [path_samples(path, geometry, mode, tau_star) for path in paths]

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        parts = [s for batch in pool.map(work, _batches(trajectories, batch_size)) for s in batch]
    samples = SectionSamples.concat(parts, mode)
    logger.info(f"{run.problem.name}: {len(samples)} {mode} samples from {trajectories} trajectories")
    if samples.max_hyperplane_residual > HYPERPLANE_TOL:
        raise VerificationError(f"hyperplane residual {samples.max_hyperplane_residual:.3e} exceeds {HYPERPLANE_TOL:g}")
    return samples


# --- statistics ---------------------------------------------------------------------


def _bin_ids(samples: SectionSamples, n_bins: int, by: str) -> np.ndarray:
    if n_bins < 1:
        raise ValueError(f"need at least one bin, got {n_bins}")
    if by not in ("psi", "tau"):
        raise ValueError(f"bins are taken over 'psi' or 'tau', got '{by}'")
    coord = samples.psi if by == "psi" else samples.tau
    return np.minimum((np.mod(coord, 1.0) * n_bins).astype(int), n_bins - 1)


def _bin_means(ids: np.ndarray, values: np.ndarray, counts: np.ndarray) -> np.ndarray:
    n_bins = len(counts)
    flat = values.reshape(len(values), -1)
    sums = np.stack([np.bincount(ids, weights=col, minlength=n_bins) for col in flat.T], axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        means = sums / counts[:, None]
    means[counts == 0] = np.nan
    return means.reshape((n_bins,) + values.shape[1:])


@dataclass(frozen=True, eq=False)
class CovarianceBins:
    by: str
    edges: np.ndarray
    counts: np.ndarray
    matrices: np.ndarray


@dataclass(frozen=True, eq=False)
class BinnedStats:
    """Per-bin statistics of the projection coefficients.

    Bins without samples have NaN mean; bins with fewer than two samples have NaN
    standard deviation and covariance.
    """

    by: str
    edges: np.ndarray
    counts: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    covariance: np.ndarray
    predicted_variance: np.ndarray

    @property
    def n_bins(self) -> int:
        return len(self.counts)

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[:-1] + self.edges[1:])

    def predicted_std(self, sigma: float) -> np.ndarray:
        return sigma * np.sqrt(np.clip(self.predicted_variance, 0.0, None))


def empirical_covariance(samples: SectionSamples, n_bins: int = 40, by: str = "tau") -> CovarianceBins:
    """Unbiased covariance of x_tr per bin."""
    ids = _bin_ids(samples, n_bins, by)
    counts = np.bincount(ids, minlength=n_bins)
    means = _bin_means(ids, samples.x_tr, counts)
    dev = samples.x_tr - np.nan_to_num(means)[ids]
    outer = dev[:, :, None] * dev[:, None, :]
    sums = _bin_means(ids, outer, counts) * counts[:, None, None]
    with np.errstate(invalid="ignore", divide="ignore"):
        matrices = sums / (counts - 1)[:, None, None]
    matrices[counts < 2] = np.nan
    return CovarianceBins(by=by, edges=np.linspace(0.0, 1.0, n_bins + 1), counts=counts, matrices=matrices)


def binned_stats(samples: SectionSamples, n_bins: int = 40, by: str = "tau") -> BinnedStats:
    """Mean and unbiased standard deviation of each projection coefficient on uniform bins of [0, 1)."""
    if len(samples) == 0:
        raise ValueError("binned statistics need at least one sample")
    ids = _bin_ids(samples, n_bins, by)
    counts = np.bincount(ids, minlength=n_bins)
    mean = _bin_means(ids, samples.projections, counts)
    dev = samples.projections - np.nan_to_num(mean)[ids]
    ss = _bin_means(ids, dev**2, counts) * counts[:, None]
    with np.errstate(invalid="ignore", divide="ignore"):
        std = np.sqrt(ss / (counts - 1)[:, None])
    std[counts < 2] = np.nan
    return BinnedStats(
        by=by,
        edges=np.linspace(0.0, 1.0, n_bins + 1),
        counts=counts,
        mean=mean,
        std=std,
        covariance=empirical_covariance(samples, n_bins, by).matrices,
        predicted_variance=_bin_means(ids, samples.eigenvalues, counts),
    )


def predicted_bin_covariance(samples: SectionSamples, geometry: SectionGeometry, n_bins: int = 40, by: str = "tau") -> np.ndarray:
    """Mean over the samples of each bin of the rescaled covariance C(psi, tau)."""
    ids = _bin_ids(samples, n_bins, by)
    counts = np.bincount(ids, minlength=n_bins)
    if len(samples) == 0:
        return np.full((n_bins, geometry.n, geometry.n), np.nan)
    return _bin_means(ids, geometry.covariance(samples.psi, samples.tau), counts)


def covariance_distance(empirical: np.ndarray, predicted: np.ndarray, sigma: float) -> np.ndarray:
    """Relative Frobenius distance ||E - sigma^2 C||_F / ||sigma^2 C||_F per bin."""
    target = sigma**2 * predicted
    scale = np.linalg.norm(target, axis=(-2, -1))
    diff = np.linalg.norm(empirical - target, axis=(-2, -1))
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(scale > 0, diff / scale, np.nan)


@dataclass(frozen=True, eq=False)
class Comparison:
    mode: str
    by: str
    sigma: float
    edges: np.ndarray
    counts: np.ndarray
    empirical_std: np.ndarray
    predicted_std: np.ndarray
    frobenius: np.ndarray

    @property
    def ratio(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.predicted_std > 0, self.empirical_std / self.predicted_std, np.nan)

    def fraction_within(self, low: float = 0.85, high: float = 1.15, min_count: int = 200) -> float:
        """Share of (bin, direction) pairs with at least min_count samples whose std ratio lies in [low, high]."""
        ratio = self.ratio[self.counts >= min_count]
        if ratio.size == 0:
            return float("nan")
        return float(np.mean((ratio >= low) & (ratio <= high)))

    def to_dict(self) -> dict:
        def clean(a):
            return [None if not np.isfinite(v) else float(v) for v in np.ravel(a)]

        ratio = self.ratio
        return {
            "mode": self.mode,
            "by": self.by,
            "sigma": self.sigma,
            "bins": [
                {
                    "bin_id": b,
                    "lo": float(self.edges[b]),
                    "hi": float(self.edges[b + 1]),
                    "count": int(self.counts[b]),
                    "empirical_std": clean(self.empirical_std[b]),
                    "predicted_std": clean(self.predicted_std[b]),
                    "std_ratio": clean(ratio[b]),
                    "frobenius_distance": clean(self.frobenius[b])[0],
                }
                for b in range(len(self.counts))
            ],
            "fraction_within_15pct": self.fraction_within(),
        }


def compare_samples(samples: SectionSamples, geometry: SectionGeometry, sigma: float, n_bins: int = 40, by: str = "tau") -> Comparison:
    stats = binned_stats(samples, n_bins, by)
    predicted = predicted_bin_covariance(samples, geometry, n_bins, by)
    return Comparison(
        mode=samples.mode,
        by=by,
        sigma=float(sigma),
        edges=stats.edges,
        counts=stats.counts,
        empirical_std=stats.std,
        predicted_std=stats.predicted_std(sigma),
        frobenius=covariance_distance(stats.covariance, predicted, sigma),
    )
