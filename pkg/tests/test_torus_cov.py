import numpy as np
import pytest

from stochcov.fourier import FourierOps, fourier_ops
from stochcov.model import build_problem, builtin, load_builtin
from stochcov.oracles import qp1_reference
from stochcov.torus import solve_torus
from stochcov.torus_cov import (
    analyse_torus,
    covariance_node_eigens,
    cross_check,
    evaluate_on_torus,
    segment_eigens,
    tangent_fields,
    torus_adjoints,
    torus_covariance,
    torus_projection,
    transversal_radius,
    zero_level,
)


def _at_mesh_points(torus, field):
    return field[:, :: torus.cmesh.degree]


def _reference_at_mesh_points(torus, key):
    phi = torus.ops.nodes[:, None]
    t = torus.cmesh.mesh[None, :]
    return qp1_reference(phi, t)[key]


def test_radial_torus_adjoint_fields(qp_torus, qp_analysis):
    adj, _, _ = qp_analysis
    assert adj.M.shape == (qp_torus.K, qp_torus.cmesh.n_points, 2, 1)
    assert adj.lambda_t is None and adj.w_t is None
    np.testing.assert_allclose(adj.w_phi, qp1_reference(qp_torus.ops.nodes, 0.0)["w_phi"], atol=1e-6)
    np.testing.assert_allclose(_at_mesh_points(qp_torus, adj.lambda_phi), _reference_at_mesh_points(qp_torus, "lambda_phi"), atol=1e-6)
    assert adj.boundary_residual < 1e-6
    assert adj.normalization_residual < 1e-10
    assert adj.node_defect < 1e-6
    pairings = np.einsum("kpna,kpnb->kpab", adj.M, tangent_fields(qp_torus))
    np.testing.assert_allclose(_at_mesh_points(qp_torus, pairings), 1.0, atol=1e-6)


def test_radial_torus_projection(qp_torus, qp_analysis):
    _, proj, _ = qp_analysis
    np.testing.assert_allclose(proj.at_node(0), [[1.0, 0.0], [0.0, 0.0]], atol=1e-6)
    np.testing.assert_allclose(_at_mesh_points(qp_torus, proj.Q), _reference_at_mesh_points(qp_torus, "Q"), atol=1e-6)
    np.testing.assert_allclose(proj.Q @ proj.Q, proj.Q, atol=1e-8)
    residual = np.einsum("kpij,kpja->kpia", proj.Q, proj.tangents)
    assert np.max(np.abs(residual)) < 1e-8


def test_radial_torus_covariance_matches_closed_form(qp_torus, qp_analysis):
    adj, _, cov = qp_analysis
    ref = qp1_reference(qp_torus.ops.nodes, 0.0)
    np.testing.assert_allclose(cov.C0, ref["C0"], atol=1e-4)
    assert cov.C0[0, 0, 0] == pytest.approx(4 * np.pi**2 / (1 + np.pi**2), abs=1e-4)
    values, _ = covariance_node_eigens(cov)
    np.testing.assert_allclose(values[:, 0], ref["C0_eig"], atol=1e-4)
    assert cov.method == "fixed_point"
    assert cov.iterations > 0


def test_radial_torus_covariance_invariants(qp_torus, qp_analysis):
    adj, _, cov = qp_analysis
    assert cov.residual_norm < 1e-6
    assert cov.boundary_residual < 1e-6
    assert np.max(np.abs(zero_level(adj, cov))) < 1e-6
    assert np.max(np.abs(cov.B_level)) < 1e-6
    for t in (0.0, 0.3, 0.75):
        C = cov.nodes_at(t)
        np.testing.assert_allclose(C, np.swapaxes(C, -1, -2), atol=1e-15)
        assert np.linalg.eigvalsh(C).min() > -1e-8
    assert transversal_radius(qp_torus, adj) < 1.0
    assert segment_eigens(cov, [0.0, 0.5]).shape == (2, qp_torus.K, 2)


def test_direct_solve_agrees_with_fixed_point(qp_torus, qp_analysis):
    adj, proj, cov = qp_analysis
    direct = torus_covariance(qp_torus, adj, proj, method="direct")
    for t in (0.0, 0.5):
        np.testing.assert_allclose(direct.nodes_at(t), cov.nodes_at(t), atol=1e-6)
    assert direct.residual_norm < 1e-6
    assert direct.A.shape == (1, 1)
    with pytest.raises(ValueError):
        torus_covariance(qp_torus, adj, proj, method="galerkin")
    check = cross_check(qp_torus, adj, proj, cov)
    assert check["A_norm2_direct"] == pytest.approx(direct.residual_norm, abs=1e-15)
    assert check["method_gap"] < 1e-6


def test_covariance_between_nodes(qp_torus, qp_analysis):
    _, _, cov = qp_analysis
    C = evaluate_on_torus(qp_torus.ops, cov, 0.15, t=0.0)
    np.testing.assert_allclose(C, qp1_reference(0.15, 0.0)["C0"], atol=1e-4)
    # node values pass straight through
    node = evaluate_on_torus(qp_torus.ops, cov.C0, qp_torus.ops.nodes[3])
    np.testing.assert_allclose(node, cov.C0[3], atol=1e-12)
    gamma = evaluate_on_torus(qp_torus.ops, qp_torus, 0.15, t=0.0)
    np.testing.assert_allclose(gamma, qp1_reference(0.15, 0.0)["gamma"], atol=1e-6)


def test_covariance_converges_in_fourier_order(qp_analysis):
    _, _, coarse = qp_analysis
    finer_torus = solve_torus(load_builtin("qp_radial"), FourierOps(8), mesh_intervals=40)
    _, _, finer = analyse_torus(finer_torus)
    phi = np.linspace(0.0, 1.0, 13, endpoint=False)
    a = evaluate_on_torus(FourierOps(4), coarse, phi, t=0.0)
    b = evaluate_on_torus(FourierOps(8), finer, phi, t=0.0)
    np.testing.assert_allclose(a, b, atol=1e-7)


def test_zero_diffusion_gives_zero_torus_covariance():
    spec = builtin("qp_radial")
    quiet = build_problem(spec.model_copy(update={"name": "qp_quiet", "diffusion": lambda t, x, p: np.zeros(x.shape + (1,))}))
    torus = solve_torus(quiet, FourierOps(2))
    adj, proj, cov = analyse_torus(torus)
    np.testing.assert_allclose(cov.C0, 0.0, atol=1e-15)
    np.testing.assert_allclose(cov.A, 0.0, atol=1e-15)
    direct = torus_covariance(torus, adj, proj, method="direct")
    np.testing.assert_allclose(direct.C0, 0.0, atol=1e-15)


def _rank_two_at_every_node(cov, t=0.0):
    values, _ = covariance_node_eigens(cov, t)
    scale = np.max(values)
    assert np.all(values[:, :2] > 1e-6 * scale)
    assert np.all(np.abs(values[:, 2:]) < 1e-6 * scale)


@pytest.mark.slow
def test_coupled_oscillators_adjoints_pair_pointwise(vdp_torus, vdp_analysis):
    adj, proj, _ = vdp_analysis
    assert vdp_torus.problem.params["delta"] == pytest.approx(1.9422, abs=1e-3)
    assert adj.normalization_residual < 1e-6
    pairings = np.einsum("kpna,kpnb->kpab", adj.M, tangent_fields(vdp_torus))
    np.testing.assert_allclose(pairings, np.broadcast_to(np.eye(2), pairings.shape), atol=1e-6)
    np.testing.assert_allclose(proj.Q @ proj.Q, proj.Q, atol=1e-8)
    assert np.all(np.linalg.matrix_rank(proj.Q[:, 0], tol=1e-6) == 2)


@pytest.mark.slow
def test_coupled_oscillators_fixed_point(vdp_torus, vdp_analysis):
    adj, _, cov = vdp_analysis
    assert cov.method == "fixed_point" and cov.iterations > 0
    _rank_two_at_every_node(cov)
    _rank_two_at_every_node(cov, 0.5)
    scale = np.max(np.abs(cov.C0))
    assert np.max(np.abs(zero_level(adj, cov))) < 1e-6 * scale
    assert cov.boundary_residual < 1e-6 * scale


@pytest.mark.slow
def test_coupled_oscillators_direct_bvp(vdp_torus, vdp_analysis):
    adj, proj, cov = vdp_analysis
    direct = torus_covariance(vdp_torus, adj, proj, method="direct")
    assert direct.residual_norm < 1e-6
    assert direct.A.shape == (2, 2)
    _rank_two_at_every_node(direct)
    scale = np.max(np.abs(cov.C0))
    for t in (0.0, 0.5):
        assert np.max(np.abs(direct.nodes_at(t) - cov.nodes_at(t))) < 1e-4 * scale



def test_adjoints_and_projection_recomputed_with_explicit_ops(qp_torus, qp_analysis):
    adj_ref, proj_ref, _ = qp_analysis
    adj = torus_adjoints(qp_torus, fourier_ops(4))
    np.testing.assert_allclose(adj.M, adj_ref.M, atol=1e-12)
    assert adj.M.shape == (qp_torus.K, qp_torus.cmesh.n_points, 2, 1)
    proj = torus_projection(qp_torus, adj)
    np.testing.assert_allclose(proj.Q, proj_ref.Q, atol=1e-12)
    # Q annihilates the tangents it projects along
    np.testing.assert_allclose(np.einsum("kpij,kpja->kpia", proj.Q, proj.tangents), 0.0, atol=1e-6)
