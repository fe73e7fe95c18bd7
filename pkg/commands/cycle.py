import logging

import numpy as np

from commands.base import BaseCommand, CommandResult
from shared.config import problem_reference, resolve_problem
from stochcov import storage
from stochcov.cycle_cov import analyse_cycle, covariance_eigens
from stochcov.errors import ConfigError

logger = logging.getLogger(__name__)


class CycleCommand(BaseCommand):
    """
    Limit-cycle pipeline: periodic orbit, adjoint, projections and the rescaled covariance C(t).

    Writes orbit.csv, adjoint.csv, covariance.csv, diagnostics.json and cycle.json
    (the geometry reloaded by simulate and compare).
    """

    name: str = "cycle"

    def run(self) -> CommandResult:
        config = self.config
        if config.is_torus:
            raise ConfigError(f"problem {config.problem.name} has a torus, use the torus command")
        if config.problem.schedule:
            raise ConfigError("parameter schedules apply to torus runs only")
        problem = resolve_problem(config.problem)
        solver = config.solver
        method = config.cycle_method()
        po, adj, proj, cov = analyse_cycle(
            problem,
            method=method,
            series_tol=solver.series_tol,
            K_max=solver.K_max,
            T_guess=config.problem.T_guess,
            mesh_intervals=solver.mesh_intervals,
            degree=solver.degree,
            tol=solver.newton_tol,
            max_iter=solver.max_iter,
            fundamental_steps=solver.fundamental_steps,
        )
        curves = covariance_eigens(cov)
        out = self.output_dir()
        diagnostics = {
            "problem": problem_reference(config, problem),
            "T": po.T,
            "autonomous": po.autonomous,
            "monodromy": po.mono.to_dict(),
            "newton": None if po.newton is None else {"iterations": po.newton.iterations, "residual": po.newton.residual_norm},
            "adjoint": {
                "w": None if adj.w is None else adj.w.tolist(),
                "ode_residual": adj.ode_residual,
                "periodicity_residual": adj.periodicity_residual,
                "integral": adj.integral,
            },
            "projection_idempotence": float(np.max(np.abs(proj.Q0 @ proj.Q0 - proj.Q0))),
            "covariance": {
                "method": cov.method,
                "C0": cov.C0.tolist(),
                "series_terms_used": cov.series_terms_used,
                "b": cov.b,
                "a": cov.a,
                "ode_discrepancy": cov.ode_discrepancy,
                "periodicity_defect": cov.periodicity_defect,
            },
        }
        files = []
        if self.wants("csv"):
            files.append(storage.write_orbit_csv(out / "orbit.csv", po))
            files.append(storage.write_adjoint_csv(out / "adjoint.csv", po, adj))
            files.append(storage.write_covariance_csv(out / "covariance.csv", cov, curves, config.sde.sigma))
        files.append(storage.write_json(out / "diagnostics.json", diagnostics))
        files.append(storage.write_json(out / "cycle.json", storage.cycle_document(problem_reference(config, problem), po, adj, cov, diagnostics)))
        logger.info(f"cycle {problem.name}: T = {po.T:.12g}, a = {cov.a}")
        return self.result(files, {"T": po.T, "a": cov.a, "method": cov.method})
