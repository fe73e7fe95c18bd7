import json
import math

import numpy as np
import pytest

from main import build_parser, main, overrides_from
from stochcov import storage
from stochcov.oracles import hopf_eigenvalue

STALLED_PROBLEM = """
import numpy as np

from stochcov.model import ProblemSpec


def drift(t, x, p):
    r2 = x[0] ** 2 + x[1] ** 2
    return np.array([x[0] - x[1] - r2 * x[0], x[0] + x[1] - r2 * x[1]])


def diffusion(t, x, p):
    return np.array([[x[0]], [x[1]]])


def guess(phi, t, p, rho):
    t = np.asarray(t, dtype=float)
    return 1e-6 * np.stack([np.cos(2 * np.pi * t), np.sin(2 * np.pi * t)], axis=-1)


PROBLEM = ProblemSpec(
    name="stalled",
    dim_state=2,
    dim_noise=1,
    autonomous=True,
    drift=drift,
    diffusion=diffusion,
    period_scale_hint=2 * np.pi,
    initial_guess=guess,
)
"""


def _run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr().out
    return code, json.loads(out)


def test_flags_map_to_config_keys():
    args = build_parser().parse_args(["simulate", "--problem", "hopf", "--sigma", "0.2", "--burn-in", "3", "--tau-star", "0.5"])
    assert overrides_from(args) == {"problem.name": "hopf", "sde.sigma": 0.2, "sde.burn_in_periods": 3.0, "sde.tau_star": 0.5}
    with pytest.raises(SystemExit):
        build_parser().parse_args(["integrate"])


def test_cycle_verb_writes_tables(tmp_path, capsys):
    out = tmp_path / "hopf"
    code, result = _run(capsys, "cycle", "--problem", "hopf", "--out", str(out))
    assert code == 0
    assert result["command"] == "cycle"
    assert result["summary"]["T"] == pytest.approx(2 * math.pi, abs=1e-8)
    assert result["summary"]["method"] == "series"
    for name in ("orbit.csv", "adjoint.csv", "covariance.csv", "diagnostics.json", "cycle.json"):
        assert (out / name).is_file()
    columns = storage.read_csv(out / "covariance.csv")
    np.testing.assert_allclose(columns["eig_1"], hopf_eigenvalue(columns["t"]), atol=1e-6)
    diagnostics = storage.read_json(out / "diagnostics.json")
    assert diagnostics["covariance"]["b"] == 0.0
    assert abs(diagnostics["covariance"]["a"]) < 1e-6
    assert diagnostics["problem"]["name"] == "hopf"


def test_simulate_and_compare_without_noise(tmp_path, capsys):
    out = tmp_path / "linosc"
    assert main(["cycle", "--problem", "linosc", "--out", str(out)]) == 0
    capsys.readouterr()
    diagnostics = storage.read_json(out / "diagnostics.json")
    np.testing.assert_allclose(diagnostics["monodromy"]["moduli"], math.exp(-2 * math.pi), atol=1e-8)
    assert diagnostics["autonomous"] is False
    code, result = _run(
        capsys,
        "simulate",
        "--problem", "linosc",
        "--out", str(out),
        "--sigma", "0",
        "--dt", "0.0009765625",
        "--periods", "5",
        "--burn-in", "10",
        "--thinning", "1",
        "--bins", "1024",
    )
    assert code == 0
    assert result["summary"]["samples"] == 5121
    bins = storage.read_csv(out / "bins.csv")
    assert bins["count"].sum() == 5121
    assert np.nanmax(bins["std_1"]) < 1e-8 and np.nanmax(bins["std_2"]) < 1e-8
    np.testing.assert_array_equal(bins["pred_std_1"], 0.0)
    report = storage.read_json(out / "compare.json")
    assert report["max_hyperplane_residual"] == 0.0
    assert len(report["bins"]) == 1024

    code, result = _run(capsys, "compare", "--problem", "linosc", "--out", str(out), "--bins", "8", "--sigma", "0.1")
    assert code == 0
    report = storage.read_json(out / "compare.json")
    assert len(report["bins"]) == 8
    assert report["sigma"] == 0.1
    assert sum(b["count"] for b in report["bins"]) == 5121


def test_torus_verb(tmp_path, capsys):
    out = tmp_path / "qp"
    code, result = _run(capsys, "torus", "--problem", "qp_radial", "--N", "4", "--mesh-intervals", "40", "--out", str(out))
    assert code == 0
    assert result["summary"]["method"] == "fixed_point"
    diagnostics = storage.read_json(out / "diagnostics.json")
    assert diagnostics["N"] == 4
    assert diagnostics["free_param"] == "Omega"
    assert diagnostics["free_param_value"] == pytest.approx(math.pi, abs=1e-6)
    assert diagnostics["covariance"]["A_norm2"] < 1e-6
    assert diagnostics["covariance"]["method_gap"] < 1e-6
    assert diagnostics["adjoint"]["normalization_residual"] < 1e-6
    assert diagnostics["covariance"]["zero_level_max"] < 1e-6
    assert diagnostics["transversal_radius"] < 1.0
    nodes = storage.read_csv(out / "covariance_nodes.csv")
    assert len(nodes["t"]) == 9 * 41
    stored = storage.load_geometry(out / "torus.json")
    assert stored.kind == "torus"


def test_unknown_problem_is_a_config_error(tmp_path, capsys):
    out = tmp_path / "lorenz"
    code, payload = _run(capsys, "cycle", "--problem", "lorenz", "--out", str(out))
    assert code == 2
    assert payload["error"] == "ConfigError"
    assert payload["exit_code"] == 2
    assert json.loads((out / "error.json").read_text(encoding="utf-8")) == payload


@pytest.mark.parametrize(
    "argv",
    [
        ["cycle", "--problem", "qp_radial"],
        ["cycle", "--problem", "hopf", "--method", "direct"],
        ["simulate", "--problem", "hopf"],
        ["compare", "--problem", "hopf"],
    ],
)
def test_config_errors_exit_with_two(tmp_path, capsys, argv):
    code, payload = _run(capsys, *argv, "--out", str(tmp_path / "run"))
    assert code == 2
    assert payload["error"] == "ConfigError"


def test_solver_failure_exits_with_one(tmp_path, capsys):
    path = tmp_path / "stalled.py"
    path.write_text(STALLED_PROBLEM, encoding="utf-8")
    code, payload = _run(capsys, "cycle", "--problem", str(path), "--out", str(tmp_path / "stalled"))
    assert code == 1
    assert payload["exit_code"] == 1
    assert payload["error"] != "ConfigError"


def test_linear_algebra_failure_exits_with_one(tmp_path, capsys, monkeypatch):
    from commands import CycleCommand

    def singular(self):
        raise np.linalg.LinAlgError("Singular matrix")

    monkeypatch.setattr(CycleCommand, "run", singular)
    out = tmp_path / "hopf"
    code, payload = _run(capsys, "cycle", "--problem", "hopf", "--out", str(out))
    assert code == 1
    assert payload == {"error": "LinAlgError", "message": "Singular matrix", "exit_code": 1}
    assert json.loads((out / "error.json").read_text(encoding="utf-8")) == payload
