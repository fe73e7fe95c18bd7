"""Run configuration for the command-line verbs.

A run is described by one JSON file with the sections problem, solver, covariance,
sde and output. Values resolve as: command-line flag, then file, then the built-in
defaults of the problem (``default_config``).
"""

import copy
import importlib.util
import json
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from stochcov.errors import ConfigError, ProblemError
from stochcov.model import BUILTINS, TORUS_PROBLEMS, VDP_RHO, Problem, ProblemSpec, build_problem, load_builtin


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SweepStep(_Section):
    param: str
    values: List[float] = Field(..., min_length=1)


class ProblemSection(_Section):
    name: str = Field(..., description="Built-in problem name or path to a .py file defining PROBLEM (a ProblemSpec)")
    params: Dict[str, float] = Field(default_factory=dict)
    rho: Optional[float] = Field(None, gt=0, lt=1, description="Rotation number of a torus")
    free_param: Optional[str] = None
    T_guess: Optional[float] = Field(None, gt=0)
    schedule: List[SweepStep] = Field(default_factory=list, description="Warm-started parameter sweeps leading to the torus")


class SolverSection(_Section):
    mesh_intervals: int = Field(20, ge=1)
    degree: int = Field(4, ge=1, le=10)
    N: Optional[int] = Field(None, ge=1, description="Fourier truncation order of a torus")
    newton_tol: float = Field(1e-10, gt=0)
    max_iter: int = Field(20, ge=1)
    fundamental_steps: int = Field(2000, ge=10)
    series_tol: float = Field(1e-12, gt=0)
    K_max: Optional[int] = Field(None, ge=1)


class CovarianceSection(_Section):
    method: Optional[Literal["series", "kronecker", "pinv", "fixed_point", "direct"]] = None
    level: float = Field(0.0, description="b (cycles) or B (tori); only 0 is supported")
    time_samples: int = Field(41, ge=2, description="t grid of covariance_nodes.csv")

    @field_validator("level")
    @classmethod
    def _zero_level(cls, v: float) -> float:
        if v != 0.0:
            raise ValueError("only the zero level b = 0 (B = 0) is supported")
        return v


class SdeSection(_Section):
    sigma: float = Field(0.1, ge=0)
    dt: float = Field(1e-4, gt=0)
    periods: float = Field(500.0, gt=0)
    burn_in_periods: float = Field(1.0, ge=0)
    trajectories: int = Field(1, ge=1)
    seed: int = Field(0, ge=0, lt=2**64)
    bins: int = Field(40, ge=1)
    by: Literal["tau", "psi"] = "tau"
    thinning: int = Field(10, ge=1)
    mode: Literal["points", "crossings"] = "points"
    tau_star: float = Field(0.0, ge=0, lt=1)
    workers: Optional[int] = Field(None, ge=1)
    batch_size: int = Field(16, ge=1)
    geometry: Optional[str] = Field(None, description="cycle.json or torus.json; defaults to the one in the output directory")


class OutputSection(_Section):
    directory: Optional[str] = None
    formats: List[Literal["csv", "json"]] = Field(default_factory=lambda: ["csv", "json"])


class RunConfig(_Section):
    problem: ProblemSection
    solver: SolverSection = Field(default_factory=SolverSection)
    covariance: CovarianceSection = Field(default_factory=CovarianceSection)
    sde: SdeSection = Field(default_factory=SdeSection)
    output: OutputSection = Field(default_factory=OutputSection)

    @model_validator(mode="after")
    def _torus_needs_N(self):
        if self.problem.name in TORUS_PROBLEMS and self.solver.N is None:
            raise ValueError(f"problem {self.problem.name} is a torus and needs solver.N")
        return self

    @property
    def is_torus(self) -> bool:
        return self.problem.name in TORUS_PROBLEMS or self.problem.rho is not None

    def cycle_method(self) -> str:
        method = self.covariance.method or "series"
        if method not in ("series", "kronecker", "pinv"):
            raise ConfigError(f"covariance.method '{method}' does not apply to cycles")
        return method

    def torus_method(self) -> str:
        method = self.covariance.method or "fixed_point"
        if method not in ("fixed_point", "direct"):
            raise ConfigError(f"covariance.method '{method}' does not apply to tori")
        return method

    def output_dir(self, root: str) -> Path:
        return Path(self.output.directory) if self.output.directory else Path(root) / Path(self.problem.name).stem


def _vdp_schedule() -> List[Dict[str, Any]]:
    return [
        {"param": "epsilon", "values": [0.1, 0.2, 0.3, 0.4, 0.5]},
        {"param": "beta", "values": [0.1, 0.2, 0.3, 0.4, 0.5]},
    ]


_DEFAULTS: Dict[str, Dict[str, Any]] = {
    "hopf": {"sde": {"periods": 500.0, "bins": 40}},
    "linosc": {"sde": {"periods": 1000.0, "bins": 40}},
    "qp_radial": {
        "solver": {"N": 4},
        "sde": {"periods": 10000.0, "bins": 40, "by": "psi"},
    },
    "vdp_coupled": {
        "problem": {"params": {"epsilon": 0.1, "beta": 0.0, "delta": VDP_RHO**2 - 1.0}, "schedule": _vdp_schedule()},
        "solver": {"N": 14},
        "sde": {"periods": 5800.0, "bins": 40, "by": "psi", "mode": "crossings", "tau_star": 0.5, "thinning": 10},
    },
}


def _merge(base: Dict[str, Any], update: Dict[str, Any]) -> Dict[str, Any]:
    out = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def default_config_dict(problem: str) -> Dict[str, Any]:
    return _merge({"problem": {"name": problem}}, _DEFAULTS.get(problem, {}))


def default_config(problem: str) -> RunConfig:
    """Settings used when a run names only its problem."""
    return build_config(default_config_dict(problem))


def build_config(data: Dict[str, Any]) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"invalid run configuration: {e}") from e


def read_config_file(path: str) -> Dict[str, Any]:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(p, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must contain a JSON object")
    return data


def dotted(overrides: Dict[str, Any]) -> Dict[str, Any]:
    """{'sde.sigma': 0.2} -> {'sde': {'sigma': 0.2}}; None values are dropped."""
    out: Dict[str, Any] = {}
    for key, value in overrides.items():
        if value is None:
            continue
        node = out
        *parents, leaf = key.split(".")
        for part in parents:
            node = node.setdefault(part, {})
        node[leaf] = value
    return out


def load_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Merge defaults, an optional config file and dotted-key overrides."""
    file_data = read_config_file(path) if path else {}
    flag_data = dotted(overrides or {})
    name = flag_data.get("problem", {}).get("name") or file_data.get("problem", {}).get("name")
    if not name:
        raise ConfigError("no problem given: pass --problem or set problem.name in the config file")
    return build_config(_merge(_merge(default_config_dict(name), file_data), flag_data))


def resolve_problem(section: ProblemSection) -> Problem:
    """Built-in problem, or the ProblemSpec named PROBLEM in a Python file, with parameter overrides."""
    try:
        if section.name in BUILTINS:
            return load_builtin(section.name, **section.params)
        path = Path(section.name)
        if path.suffix == ".py" and path.is_file():
            module_spec = importlib.util.spec_from_file_location(path.stem, path)
            module = importlib.util.module_from_spec(module_spec)
            module_spec.loader.exec_module(module)
            spec = getattr(module, "PROBLEM", None)
            if not isinstance(spec, ProblemSpec):
                raise ConfigError(f"{path} does not define PROBLEM as a ProblemSpec")
            problem = build_problem(spec)
            return problem.with_params(**section.params) if section.params else problem
    except ProblemError as e:
        raise ConfigError(str(e)) from e
    raise ConfigError(f"unknown problem '{section.name}': not a built-in ({', '.join(sorted(BUILTINS))}) or a .py file")


def problem_reference(config: RunConfig, problem: Problem) -> Dict[str, Any]:
    """What a geometry file records to rebuild the problem for simulation."""
    return {"name": config.problem.name, "params": dict(problem.params)}
