import math

import numpy as np
import pytest

from stochcov.cycle_cov import (
    PhaseCondition,
    adjoint_function,
    adjoint_left_vector,
    analyse_cycle,
    covariance_eigens,
    covariance_kronecker,
    covariance_pinv,
    covariance_series,
    cumulative_noise,
    left_null_vector,
    noise_quadrature,
    one_period_map,
    predicted_std,
    projection_family,
    propagate_covariance,
    solve_periodic_orbit,
    sweep_cycle,
)
from stochcov.errors import Error, VerificationError
from stochcov.model import ProblemSpec, build_problem, builtin
from stochcov.oracles import hopf_eigenvalue, hopf_noise_integral, hopf_reference, linosc_reference

SAMPLES = np.linspace(0.0, 1.0, 101)


def _quiet(name: str):
    spec = builtin(name)
    return build_problem(spec.model_copy(update={"name": f"{name}_quiet", "diffusion": lambda t, x, p: np.zeros(x.shape + (1,))}))


def _scaled_hopf():
    # limit cycle of radius sqrt(mu), angular speed 1
    def drift(t, x, p):
        x1, x2 = x[..., 0], x[..., 1]
        r2 = x1**2 + x2**2
        return np.stack([p["mu"] * x1 - x2 - x1 * r2, x1 + p["mu"] * x2 - x2 * r2], axis=-1)

    return build_problem(
        ProblemSpec(
            name="scaled_hopf",
            dim_state=2,
            dim_noise=1,
            autonomous=True,
            drift=drift,
            diffusion=lambda t, x, p: x[..., :, None] * 0.1,
            params={"mu": 1.0},
            period_scale_hint=2 * math.pi,
            vectorized=True,
            initial_guess=lambda phi, t, p, rho: 1.1 * np.stack([np.cos(2 * np.pi * t), np.sin(2 * np.pi * t)], axis=-1),
        )
    )


# --- orbit and adjoint ------------------------------------------------------


def test_hopf_period_and_phase(hopf_analysis):
    po = hopf_analysis[0]
    assert po.T == pytest.approx(2 * math.pi, abs=1e-8)
    np.testing.assert_allclose(po.gamma(0.0), [1.0, 0.0], atol=1e-8)
    np.testing.assert_allclose(po.gamma(SAMPLES), hopf_reference(SAMPLES)["gamma"], atol=1e-8)
    np.testing.assert_allclose(po.orbit(po.cmesh.mesh), hopf_reference(po.cmesh.mesh)["gamma"], atol=1e-8)
    assert po.newton.residual_norm < 1e-10


def test_phase_condition_variants(hopf):
    along = PhaseCondition.along(lambda t: np.array([np.cos(2 * np.pi * t), np.sin(2 * np.pi * t)]))
    np.testing.assert_allclose(along.normal, [0.0, 2 * np.pi], rtol=1e-8)
    assert along([1.0, 0.0]) == pytest.approx(0.0, abs=1e-15)
    through = PhaseCondition.through(hopf, np.array([1.0, 0.0]))
    np.testing.assert_allclose(through.gradient, [0.0, 1.0], atol=1e-15)


def test_hopf_adjoint_matches_reference(hopf_analysis):
    po, adj, _, _ = hopf_analysis
    np.testing.assert_allclose(adj.w, [0.0, 1.0], atol=1e-10)
    ref = hopf_reference(SAMPLES)
    np.testing.assert_allclose(adj.lambda_(SAMPLES), ref["lambda"], atol=1e-8)
    np.testing.assert_allclose(adj.lambda_(0.25), [-1.0, 0.0], atol=1e-8)
    assert adj.integral == pytest.approx(1.0, abs=1e-10)
    pairing = np.einsum("ki,ki->k", adj.lambda_(SAMPLES), po.f_on_orbit(SAMPLES))
    np.testing.assert_allclose(pairing, 1.0, atol=1e-8)


def test_hopf_projection_matches_reference(hopf_analysis):
    po, _, proj, _ = hopf_analysis
    Q = proj(SAMPLES)
    np.testing.assert_allclose(Q, hopf_reference(SAMPLES)["Q"], atol=1e-8)
    np.testing.assert_allclose(proj(0.125), [[0.5, 0.5], [0.5, 0.5]], atol=1e-8)
    np.testing.assert_allclose(Q @ Q, Q, atol=1e-8)
    np.testing.assert_allclose(np.einsum("kij,kj->ki", Q, po.f_on_orbit(SAMPLES)), 0.0, atol=1e-8)
    assert np.all(np.linalg.matrix_rank(Q, tol=1e-6) == 1)


def test_projection_commutes_with_flow(hopf_analysis):
    po, _, proj, _ = hopf_analysis
    for t in (0.1, 0.45, 0.8):
        np.testing.assert_allclose(po.X(t) @ proj.Q0, proj(t) @ po.X(t), atol=1e-6)


def test_forced_cycle_has_identity_projection(linosc_analysis):
    po, adj, proj, _ = linosc_analysis
    assert not adj.present
    np.testing.assert_array_equal(proj(0.3), np.eye(2))
    with pytest.raises(VerificationError):
        adjoint_left_vector(po)


def test_left_null_vector_of_diagonal_monodromy():
    w = left_null_vector(np.diag([1.0, 0.5]), np.array([2.0, 0.0]))
    np.testing.assert_allclose(w, [0.5, 0.0], atol=1e-15)
    with pytest.raises(VerificationError, match="not simple"):
        left_null_vector(np.diag([1.0, 1.0 + 1e-6]), np.array([1.0, 0.0]))


# --- noise integral and C(0) ------------------------------------------------


def test_hopf_noise_integral(hopf_analysis):
    po, _, proj, _ = hopf_analysis
    J = cumulative_noise(po)
    Q0 = proj.Q0
    for k in (len(po.mesh) // 2, len(po.mesh) - 1):
        projected = po.T * Q0 @ J[k] @ Q0.T
        expected = hopf_noise_integral(po.mesh[k])
        assert projected[0, 0] == pytest.approx(expected, rel=1e-6)
        assert np.max(np.abs(projected[1:, :])) < 1e-6 * expected
    np.testing.assert_array_equal(noise_quadrature(po), J[-1])
    np.testing.assert_allclose(noise_quadrature(po), hopf_analysis[3].I_cal, atol=1e-15)


def test_hopf_covariance_at_zero(hopf_analysis):
    cov = hopf_analysis[3]
    np.testing.assert_allclose(cov.C0, [[1 / 40, 0.0], [0.0, 0.0]], atol=1e-8)
    assert cov.method == "series"
    assert cov.series_terms_used >= 1
    assert abs(cov.b) < 1e-10


def test_covariance_routes_agree(hopf_analysis):
    po, _, proj, cov = hopf_analysis
    kron = covariance_kronecker(po, proj, cov.I_cal)
    pinv = covariance_pinv(po, proj, cov.I_cal)
    np.testing.assert_allclose(kron.C0, cov.C0, atol=1e-10)
    np.testing.assert_allclose(pinv.C0, cov.C0, atol=1e-8)


def test_linosc_covariance_at_zero(linosc_analysis):
    po, _, proj, cov = linosc_analysis
    np.testing.assert_allclose(cov.C0, np.array([[5.0, -1.0], [-1.0, 1.0]]) / 32, atol=1e-8)
    kron = covariance_kronecker(po, proj, cov.I_cal)
    np.testing.assert_allclose(kron.C0, cov.C0, atol=1e-10)


def test_covariance_is_fixed_point_of_period_map(hopf_analysis, linosc_analysis):
    for po, _, proj, cov in (hopf_analysis, linosc_analysis):
        np.testing.assert_allclose(one_period_map(po, proj, cov.I_cal, cov.C0), cov.C0, atol=1e-9)


def test_prescribed_level_adds_tangential_variance(hopf_analysis):
    po, _, proj, cov = hopf_analysis
    shifted = covariance_series(po, proj, cov.I_cal, level=0.5)
    assert shifted.b == pytest.approx(0.5, abs=1e-8)
    np.testing.assert_allclose(shifted.C0 - cov.C0, 0.5 * np.outer(po.f0, po.f0), atol=1e-10)


# --- C(t) ------------------------------------------------------------------


def test_hopf_covariance_eigenvalue_curve(hopf_analysis):
    cov = hopf_analysis[3]
    largest = np.linalg.eigvalsh(cov.C(SAMPLES))[:, -1]
    np.testing.assert_allclose(largest, hopf_eigenvalue(SAMPLES), atol=1e-6)
    np.testing.assert_allclose(cov.C(SAMPLES), hopf_reference(SAMPLES)["C"], atol=1e-6)


def test_hopf_eigencurves_follow_radial_direction(hopf_analysis):
    cov = hopf_analysis[3]
    curves = covariance_eigens(cov)
    values, vectors = curves.at(0.25)
    assert values[0] == pytest.approx(0.225, abs=1e-6)
    np.testing.assert_allclose(vectors[:, 0], [0.0, 1.0], atol=1e-6)
    std = predicted_std(curves, 0.1)
    assert std.shape == curves.eigenvalues.shape
    assert np.all(std >= 0)


def test_linosc_covariance_matches_reference(linosc_analysis):
    cov = linosc_analysis[3]
    ref = linosc_reference(SAMPLES)
    np.testing.assert_allclose(cov.C(SAMPLES), ref["C"], atol=1e-8)
    eigenvalues = np.linalg.eigvalsh(cov.C(SAMPLES))[:, ::-1]
    np.testing.assert_allclose(eigenvalues, ref["eigs"], atol=1e-8)
    values, _ = covariance_eigens(cov).at(0.0)
    np.testing.assert_allclose(values, [(3 + math.sqrt(5)) / 32, (3 - math.sqrt(5)) / 32], atol=1e-8)


def test_covariance_invariants(hopf_analysis):
    _, adj, _, cov = hopf_analysis
    values = cov.values
    np.testing.assert_allclose(values, np.swapaxes(values, -1, -2), atol=1e-15)
    assert np.linalg.eigvalsh(values).min() > -1e-10
    assert np.max(np.abs(cov.level_curve)) < 1e-8
    assert cov.periodicity_defect < 1e-8
    assert cov.ode_discrepancy < 1e-6
    assert cov.a < 1e-6
    lam = adj.lambda_(cov.times)
    assert np.max(np.abs(np.einsum("kij,kj->ki", values, lam))) < 1e-6
    ranks = np.sum(np.linalg.eigvalsh(values) > 1e-8 * np.max(np.abs(values)), axis=-1)
    assert np.all(ranks == 1)


def test_zero_diffusion_gives_zero_covariance():
    po, _, proj, cov = analyse_cycle(_quiet("hopf"))
    np.testing.assert_array_equal(cov.I_cal, np.zeros((2, 2)))
    np.testing.assert_allclose(cov.C0, 0.0, atol=1e-15)
    np.testing.assert_allclose(cov.values, 0.0, atol=1e-15)
    np.testing.assert_allclose(covariance_kronecker(po, proj, cov.I_cal).C0, 0.0, atol=1e-15)


def test_propagate_from_explicit_matrix(linosc_analysis):
    po, _, proj, cov = linosc_analysis
    again = propagate_covariance(po, proj, cov.C0)
    assert again.method == "given"
    np.testing.assert_allclose(again.values, cov.values, atol=1e-12)


def test_kronecker_pipeline_matches_series(hopf, hopf_analysis):
    _, _, _, kron = analyse_cycle(hopf, method="kronecker")
    np.testing.assert_allclose(kron.values, hopf_analysis[3].values, atol=1e-9)
    with pytest.raises(ValueError):
        analyse_cycle(hopf, method="magic")


def test_newton_from_equilibrium_guess_fails(hopf):
    def tiny(t):
        t = np.asarray(t, dtype=float)
        return 1e-6 * np.stack([np.cos(2 * np.pi * t), np.sin(2 * np.pi * t)], axis=-1)

    with pytest.raises(Error):
        solve_periodic_orbit(hopf, guess=tiny)


def test_adjoint_requires_consistent_left_vector(hopf_analysis):
    po = hopf_analysis[0]
    with pytest.raises(VerificationError):
        adjoint_function(po, np.array([1.0, 1.0]))
    assert projection_family(po, adjoint_function(po, None)).identity_flag


def test_sweep_warm_starts_along_parameter():
    orbits = sweep_cycle(_scaled_hopf(), "mu", [1.0, 1.2, 1.4])
    for po, mu in zip(orbits, (1.0, 1.2, 1.4)):
        assert po.T == pytest.approx(2 * math.pi, abs=1e-7)
        assert np.linalg.norm(po.gamma(0.37)) == pytest.approx(math.sqrt(mu), abs=1e-7)
