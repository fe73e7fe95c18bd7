import logging

import numpy as np

from commands.base import BaseCommand, CommandResult
from shared.config import problem_reference, resolve_problem
from stochcov import storage
from stochcov.errors import ConfigError
from stochcov.fourier import FourierOps
from stochcov.torus import run_schedule, solve_torus
from stochcov.torus_cov import analyse_torus, covariance_node_eigens, cross_check, transversal_radius, zero_level

logger = logging.getLogger(__name__)

RANK_RTOL = 1e-6


class TorusCommand(BaseCommand):
    """
    Quasiperiodic torus pipeline at fixed rotation number: torus, adjoints, projections and C(phi, t).

    Writes torus.json, adjoints.csv, covariance_nodes.csv and diagnostics.json
    (including ||A||_2 of the direct BVP and its gap to the fixed-point result).
    """

    name: str = "torus"

    def run(self) -> CommandResult:
        config = self.config
        if config.solver.N is None:
            raise ConfigError("torus runs need solver.N")
        problem = resolve_problem(config.problem)
        solver = config.solver
        ops = FourierOps(solver.N)
        kwargs = dict(
            rho=config.problem.rho,
            free_param=config.problem.free_param,
            mesh_intervals=solver.mesh_intervals,
            degree=solver.degree,
            tol=solver.newton_tol,
            max_iter=solver.max_iter,
            fundamental_steps=solver.fundamental_steps,
            workers=self.workers,
        )
        if config.problem.schedule:
            schedule = [(step.param, step.values) for step in config.problem.schedule]
            torus = run_schedule(problem, ops, schedule, **kwargs)
        else:
            torus = solve_torus(problem, ops, T_guess=config.problem.T_guess, **kwargs)
        adj, proj, cov = analyse_torus(torus, method=config.torus_method(), K_max=solver.K_max)
        check = cross_check(torus, adj, proj, cov)
        a_norm = check["A_norm2_direct"]

        eigs, _ = covariance_node_eigens(cov, 0.0)
        rank = np.sum(eigs > RANK_RTOL * np.max(eigs), axis=-1)
        levels = zero_level(adj, cov)
        out = self.output_dir()
        reference = problem_reference(config, torus.problem)
        diagnostics = {
            "problem": reference,
            "N": ops.N,
            "rho": torus.rho,
            "T": torus.T,
            "free_param": torus.free_param,
            "free_param_value": torus.problem.params[torus.free_param] if torus.free_param else None,
            "newton": None if torus.newton is None else {"iterations": torus.newton.iterations, "residual": torus.newton.residual_norm},
            "boundary_residual": torus.boundary_residual(),
            "collocation_residual": torus.collocation_residual(),
            "adjoint": {
                "normalization_residual": adj.normalization_residual,
                "boundary_residual": adj.boundary_residual,
                "node_defect": adj.node_defect,
                "kappa": adj.kappa.tolist(),
                "w_phi": adj.w_phi.tolist(),
            },
            "transversal_radius": transversal_radius(torus, adj),
            "covariance": {
                "method": cov.method,
                "iterations": cov.iterations,
                "A": np.asarray(cov.A).tolist(),
                "A_norm2": a_norm,
                "level_defect": cov.level_defect,
                "method_gap": check["method_gap"],
                "B_level": np.asarray(cov.B_level).tolist(),
                "boundary_residual": cov.boundary_residual,
                "zero_level_max": float(np.max(np.abs(levels))),
                "rank_min": int(rank.min()),
                "rank_max": int(rank.max()),
            },
        }
        files = []
        if self.wants("csv"):
            files.append(storage.write_torus_adjoints_csv(out / "adjoints.csv", torus, adj))
            times = np.linspace(0.0, 1.0, config.covariance.time_samples)
            files.append(storage.write_covariance_nodes_csv(out / "covariance_nodes.csv", torus, cov, times, config.sde.sigma))
        files.append(storage.write_json(out / "diagnostics.json", diagnostics))
        files.append(storage.write_json(out / "torus.json", storage.torus_document(reference, torus, adj, cov, diagnostics)))
        logger.info(f"torus {problem.name}: T = {torus.T:.12g}, ||A||_2 = {a_norm:.3e}")
        return self.result(files, {"T": torus.T, "A_norm2": a_norm, "method": cov.method})
