from pathlib import Path

from commands.base import BaseCommand, CommandResult
from commands.simulate import geometry_path
from stochcov import storage
from stochcov.errors import ConfigError
from stochcov.sde_lab import compare_samples


class CompareCommand(BaseCommand):
    """
    Recompute compare.json from an existing samples.csv and the stored geometry.

    Useful for re-binning (sde.bins, sde.by) or a different sigma without re-simulating.
    """

    name: str = "compare"
    samples_path: str = ""

    def run(self) -> CommandResult:
        config = self.config
        out = self.output_dir()
        path = Path(self.samples_path) if self.samples_path else out / "samples.csv"
        if not path.is_file():
            raise ConfigError(f"samples file {path} not found; run the simulate command first")
        stored = storage.load_geometry(geometry_path(config, out))
        samples = storage.read_samples_csv(path)
        if len(samples) == 0:
            raise ConfigError(f"{path} holds no samples")
        comparison = compare_samples(samples, stored.geometry, config.sde.sigma, config.sde.bins, config.sde.by)
        report = comparison.to_dict()
        report["samples"] = len(samples)
        report["max_hyperplane_residual"] = samples.max_hyperplane_residual
        files = [storage.write_json(out / "compare.json", report)]
        return self.result(files, {"samples": len(samples), "fraction_within_15pct": report["fraction_within_15pct"]})
