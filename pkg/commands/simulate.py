import logging
from pathlib import Path

import numpy as np

from commands.base import BaseCommand, CommandResult
from shared.config import ProblemSection, RunConfig, resolve_problem
from stochcov import storage
from stochcov.errors import ConfigError, VerificationError
from stochcov.sde_lab import SdeRun, binned_stats, compare_samples, simulate_sections

logger = logging.getLogger(__name__)


def geometry_path(config: RunConfig, out: Path) -> Path:
    """The geometry file named in the config, else cycle.json or torus.json in the output directory."""
    if config.sde.geometry:
        path = Path(config.sde.geometry)
    else:
        path = out / ("torus.json" if config.is_torus else "cycle.json")
    if not path.is_file():
        raise ConfigError(f"geometry file {path} not found; run the {'torus' if config.is_torus else 'cycle'} command first")
    return path


class SimulateCommand(BaseCommand):
    """
    Euler-Maruyama ensemble around a stored cycle or torus, with section statistics.

    Writes samples.csv, bins.csv and compare.json (per-bin predicted-vs-empirical
    std ratios and covariance distances).
    """

    name: str = "simulate"

    def run(self) -> CommandResult:
        config = self.config
        sde = config.sde
        out = self.output_dir()
        stored = storage.load_geometry(geometry_path(config, out))
        problem = resolve_problem(ProblemSection(name=stored.problem["name"], params=stored.problem.get("params", {})))
        run = SdeRun.for_periods(
            problem,
            T=stored.T,
            sigma=sde.sigma,
            dt=sde.dt,
            periods=sde.periods,
            burn_in_periods=sde.burn_in_periods,
            seed=sde.seed,
            thinning=sde.thinning,
        )
        geometry = stored.geometry
        x0 = geometry.gamma(np.zeros(1), np.zeros(1))[0]
        logger.info(
            f"simulating {problem.name}: sigma = {sde.sigma:g}, dt = {sde.dt:g}, {sde.periods:g} periods x {sde.trajectories} trajectories"
        )
        samples = simulate_sections(
            run,
            x0,
            geometry,
            trajectories=sde.trajectories,
            mode=sde.mode,
            tau_star=sde.tau_star,
            workers=sde.workers or self.workers,
            batch_size=sde.batch_size,
        )
        if len(samples) == 0:
            raise VerificationError(f"no {sde.mode} samples collected; increase sde.periods")
        stats = binned_stats(samples, sde.bins, sde.by)
        comparison = compare_samples(samples, geometry, sde.sigma, sde.bins, sde.by)
        report = comparison.to_dict()
        report["samples"] = len(samples)
        report["max_hyperplane_residual"] = samples.max_hyperplane_residual
        files = []
        if self.wants("csv"):
            files.append(storage.write_samples_csv(out / "samples.csv", samples, sde.bins, sde.by))
            files.append(storage.write_bins_csv(out / "bins.csv", stats, sde.sigma))
        files.append(storage.write_json(out / "compare.json", report))
        return self.result(files, {"samples": len(samples), "fraction_within_15pct": report["fraction_within_15pct"]})
