import json
from pathlib import Path

import pytest

from shared.config import (
    ProblemSection,
    build_config,
    default_config,
    dotted,
    load_config,
    problem_reference,
    resolve_problem,
)
from shared.settings import Settings
from stochcov.errors import ConfigError
from stochcov.model import VDP_RHO

CUSTOM_PROBLEM = """
import numpy as np

from stochcov.model import ProblemSpec


def drift(t, x, p):
    r2 = x[0] ** 2 + x[1] ** 2
    return np.array([p["mu"] * x[0] - x[1] - r2 * x[0], x[0] + p["mu"] * x[1] - r2 * x[1]])


def diffusion(t, x, p):
    return np.array([[x[0]], [x[1]]])


def guess(phi, t, p, rho):
    t = np.asarray(t, dtype=float)
    return np.sqrt(p["mu"]) * np.stack([np.cos(2 * np.pi * t), np.sin(2 * np.pi * t)], axis=-1)


PROBLEM = ProblemSpec(
    name="scaled_hopf",
    dim_state=2,
    dim_noise=1,
    autonomous=True,
    drift=drift,
    diffusion=diffusion,
    params={"mu": 1.0},
    period_scale_hint=2 * np.pi,
    initial_guess=guess,
)
"""


def _write_config(tmp_path: Path, data) -> str:
    path = tmp_path / "run.json"
    path.write_text(json.dumps(data), encoding="utf-8")
    return str(path)


def test_cycle_defaults():
    config = default_config("hopf")
    assert not config.is_torus
    assert config.solver.N is None
    assert config.solver.mesh_intervals == 20 and config.solver.degree == 4
    assert config.sde.sigma == 0.1 and config.sde.dt == 1e-4
    assert config.sde.periods == 500.0 and config.sde.bins == 40
    assert config.sde.thinning == 10 and config.sde.burn_in_periods == 1.0
    assert config.cycle_method() == "series"
    assert config.output.formats == ["csv", "json"]


def test_torus_defaults():
    qp = default_config("qp_radial")
    assert qp.is_torus
    assert qp.solver.N == 4
    assert qp.sde.by == "psi"
    assert qp.torus_method() == "fixed_point"
    with pytest.raises(ConfigError, match="does not apply to cycles"):
        qp.cycle_method()

    vdp = default_config("vdp_coupled")
    assert vdp.solver.N == 14
    assert vdp.problem.params["delta"] == pytest.approx(VDP_RHO**2 - 1.0)
    assert [step.param for step in vdp.problem.schedule] == ["epsilon", "beta"]
    assert vdp.problem.schedule[0].values[-1] == 0.5
    assert vdp.sde.mode == "crossings" and vdp.sde.tau_star == 0.5


@pytest.mark.parametrize(
    "data, match",
    [
        ({"problem": {"name": "qp_radial"}}, "needs solver.N"),
        ({"problem": {"name": "qp_radial"}, "solver": {"N": 0}}, "N"),
        ({"problem": {"name": "hopf"}, "solver": {"meshes": 3}}, "meshes"),
        ({"problem": {"name": "hopf"}, "covariance": {"level": 0.5}}, "zero level"),
        ({"problem": {"name": "hopf"}, "sde": {"dt": 0.0}}, "dt"),
        ({"problem": {"name": "hopf"}, "sde": {"mode": "sweeps"}}, "mode"),
    ],
)
def test_invalid_configurations(data, match):
    with pytest.raises(ConfigError, match=match):
        build_config(data)


def test_method_must_match_the_limit_set():
    config = build_config({"problem": {"name": "hopf"}, "covariance": {"method": "direct"}})
    with pytest.raises(ConfigError, match="does not apply to cycles"):
        config.cycle_method()
    torus = build_config({"problem": {"name": "qp_radial"}, "solver": {"N": 3}, "covariance": {"method": "pinv"}})
    with pytest.raises(ConfigError, match="does not apply to tori"):
        torus.torus_method()


def test_flags_override_file_override_defaults(tmp_path):
    path = _write_config(tmp_path, {"problem": {"name": "hopf"}, "sde": {"sigma": 0.2, "bins": 20}})
    config = load_config(path, {"sde.sigma": 0.3, "sde.seed": None})
    assert config.sde.sigma == 0.3
    assert config.sde.bins == 20
    assert config.sde.seed == 0
    assert config.sde.periods == 500.0
    # a flag may name the problem of a file without one
    nameless = _write_config(tmp_path, {"sde": {"periods": 5}})
    assert load_config(nameless, {"problem.name": "linosc"}).sde.periods == 5


def test_config_file_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(str(tmp_path / "missing.json"))
    broken = tmp_path / "broken.json"
    broken.write_text("[1, 2", encoding="utf-8")
    with pytest.raises(ConfigError, match="not valid JSON"):
        load_config(str(broken))
    with pytest.raises(ConfigError, match="JSON object"):
        load_config(_write_config(tmp_path, [1, 2]))
    with pytest.raises(ConfigError, match="no problem given"):
        load_config(None, {"sde.sigma": 0.1})


def test_dotted_keys():
    assert dotted({"sde.sigma": 0.2, "problem.name": "hopf", "solver.N": None}) == {
        "sde": {"sigma": 0.2},
        "problem": {"name": "hopf"},
    }


def test_resolve_builtin_with_parameters():
    problem = resolve_problem(ProblemSection(name="vdp_coupled", params={"epsilon": 0.2}))
    assert problem.params["epsilon"] == 0.2
    assert problem.name == "vdp_coupled"
    config = default_config("vdp_coupled")
    reference = problem_reference(config, problem)
    assert reference == {"name": "vdp_coupled", "params": dict(problem.params)}


def test_resolve_problem_file(tmp_path):
    path = tmp_path / "scaled_hopf.py"
    path.write_text(CUSTOM_PROBLEM, encoding="utf-8")
    problem = resolve_problem(ProblemSection(name=str(path), params={"mu": 1.5}))
    assert problem.name == "scaled_hopf"
    assert problem.params["mu"] == 1.5
    config = build_config({"problem": {"name": str(path)}})
    assert config.output_dir("runs") == Path("runs") / "scaled_hopf"
    assert not config.is_torus


def test_unknown_problems(tmp_path):
    with pytest.raises(ConfigError, match="unknown problem"):
        resolve_problem(ProblemSection(name="lorenz"))
    empty = tmp_path / "empty.py"
    empty.write_text("VALUE = 1\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="does not define PROBLEM"):
        resolve_problem(ProblemSection(name=str(empty)))


def test_output_directory():
    assert default_config("hopf").output_dir("runs") == Path("runs") / "hopf"
    explicit = build_config({"problem": {"name": "hopf"}, "output": {"directory": "elsewhere"}})
    assert explicit.output_dir("runs") == Path("elsewhere")


def test_settings_from_environment(monkeypatch):
    monkeypatch.setenv("STOCHCOV_WORKERS", "3")
    monkeypatch.setenv("STOCHCOV_LOG_LEVEL", "DEBUG")
    monkeypatch.setenv("STOCHCOV_OUTPUT_DIR", "/tmp/stochcov-runs")
    settings = Settings()
    assert settings.workers == 3
    assert settings.log_level == "DEBUG"
    assert settings.output_dir == "/tmp/stochcov-runs"
