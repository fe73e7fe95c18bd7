import math

import numpy as np
import pytest

from stochcov.collocation import CollocationMesh
from stochcov.cycle_cov import PhaseCondition
from stochcov.errors import ProblemError, SingularSystemError
from stochcov.fourier import FourierOps
from stochcov.model import ProblemSpec, build_problem, load_builtin
from stochcov.oracles import qp1_reference
from stochcov.torus import run_schedule, sample_torus_guess, solve_torus, sweep_torus


def _circle(rho):
    def guess(phi, t):
        angle = 2 * np.pi * (phi + rho * t)
        return np.stack([np.cos(angle), np.sin(angle)], axis=-1)

    return guess


def test_radial_torus_matches_closed_form(qp_torus):
    ops = qp_torus.ops
    start = qp_torus.nodes_at(0.0)
    np.testing.assert_allclose(start, 2 * np.stack([np.cos(2 * np.pi * ops.nodes), np.sin(2 * np.pi * ops.nodes)], axis=-1), atol=1e-6)
    np.testing.assert_allclose(qp_torus.gamma(0.15, 0.0), qp1_reference(0.15, 0.0)["gamma"], atol=1e-6)
    np.testing.assert_allclose(qp_torus.gamma(0.4, 0.5), qp1_reference(0.4, 0.5)["gamma"], atol=1e-6)
    assert qp_torus.free_param == "Omega"
    assert qp_torus.problem.params["Omega"] == pytest.approx(math.pi, abs=1e-6)
    assert qp_torus.T == pytest.approx(2 * math.pi)


def test_radial_torus_residuals(qp_torus):
    assert qp_torus.boundary_residual() < 1e-8
    assert qp_torus.collocation_residual() < 1e-10
    assert qp_torus.newton.residual_norm < 1e-10
    assert qp_torus.K == 9
    assert qp_torus.values.shape == (9, qp_torus.cmesh.n_points, 2)


def test_low_order_torus():
    torus = solve_torus(load_builtin("qp_radial"), FourierOps(2), mesh_intervals=40)
    ops = torus.ops
    expected = 2 * np.stack([np.cos(2 * np.pi * ops.nodes), np.sin(2 * np.pi * ops.nodes)], axis=-1)
    np.testing.assert_allclose(torus.nodes_at(0.0), expected, atol=1e-6)


def test_phi_tangent_is_transported_by_fibers(qp_torus):
    dphi0 = qp_torus.dphi_gamma()[:, 0]
    transported = np.stack([X.at_end() @ v for X, v in zip(qp_torus.fundamental, dphi0)])
    np.testing.assert_allclose(transported, qp_torus.ops.rotate(dphi0, qp_torus.rho), atol=1e-6)
    np.testing.assert_allclose(dphi0, qp1_reference(qp_torus.ops.nodes, 0.0)["dgamma_dphi"], atol=1e-6)


def test_sweep_warm_starts_the_free_parameter():
    seen = []
    tori = sweep_torus(load_builtin("qp_radial"), FourierOps(2), "Omega", [3.1, 3.2], callback=seen.append)
    assert len(tori) == 2
    assert all(a is b for a, b in zip(seen, tori))
    for torus in tori:
        assert torus.free_param == "Omega"
        assert torus.problem.params["Omega"] == pytest.approx(math.pi, abs=1e-4)
        assert torus.boundary_residual() < 1e-8


def test_empty_schedule_solves_at_builtin_parameters():
    torus = run_schedule(load_builtin("qp_radial"), FourierOps(2), [])
    assert torus.boundary_residual() < 1e-8


def test_cycle_problem_has_no_rotation_number():
    with pytest.raises(ProblemError, match="rotation number"):
        solve_torus(load_builtin("hopf"), FourierOps(2))


def test_unknown_free_parameter():
    with pytest.raises(ProblemError, match="free parameter"):
        solve_torus(load_builtin("qp_radial"), FourierOps(2), free_param="kappa")


def test_guess_array_shape_is_checked():
    problem = load_builtin("qp_radial")
    ops, cmesh = FourierOps(2), CollocationMesh(5, 3)
    with pytest.raises(ProblemError, match="guess has shape"):
        sample_torus_guess(problem, ops, cmesh, math.pi, guess=np.zeros((3, 3, 2)))
    assert sample_torus_guess(problem, ops, cmesh, math.pi).shape == (5, cmesh.n_points, 2)


def test_tangent_phase_condition_is_rejected():
    problem = load_builtin("qp_radial")
    # the phi tangent at (2, 0) points along x2
    phase = PhaseCondition(point=np.array([2.0, 0.0]), normal=np.array([1.0, 0.0]))
    with pytest.raises(SingularSystemError, match="transversal"):
        solve_torus(problem, FourierOps(2), phase_fns=[phase])
    with pytest.raises(ProblemError, match="phase conditions"):
        solve_torus(problem, FourierOps(2), phase_fns=[phase, phase])


def test_vanishing_vector_field_gives_singular_jacobian():
    problem = build_problem(
        ProblemSpec(
            name="still_forced",
            dim_state=2,
            dim_noise=1,
            autonomous=False,
            drift=lambda t, x, p: np.zeros_like(x),
            diffusion=lambda t, x, p: np.zeros(x.shape + (1,)),
            params={"a": 0.0},
            period_scale_hint=1.0,
            vectorized=True,
        )
    )
    with pytest.raises(SingularSystemError):
        solve_torus(problem, FourierOps(2), rho=0.3, guess=_circle(0.3), free_param="a", mesh_intervals=5)
