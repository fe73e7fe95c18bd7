"""Command-line entry point: cycle, torus, simulate and compare.

Exit codes: 0 success, 1 solver failure, 2 configuration error. Failures print a
JSON object {"error", "message", "exit_code"} and write it to error.json in the
output directory when possible.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

from shared.settings import get_settings
from shared.utils import configure_logging, silence_warnings_and_logs

logger = logging.getLogger("stochcov.cli")

# flag dest -> dotted config key
FLAG_KEYS = {
    "problem": "problem.name",
    "rho": "problem.rho",
    "free_param": "problem.free_param",
    "T_guess": "problem.T_guess",
    "mesh_intervals": "solver.mesh_intervals",
    "degree": "solver.degree",
    "N": "solver.N",
    "newton_tol": "solver.newton_tol",
    "K_max": "solver.K_max",
    "method": "covariance.method",
    "sigma": "sde.sigma",
    "dt": "sde.dt",
    "periods": "sde.periods",
    "burn_in": "sde.burn_in_periods",
    "trajectories": "sde.trajectories",
    "seed": "sde.seed",
    "bins": "sde.bins",
    "by": "sde.by",
    "thinning": "sde.thinning",
    "mode": "sde.mode",
    "tau_star": "sde.tau_star",
    "geometry": "sde.geometry",
    "out": "output.directory",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stochcov", description="Noise-induced covariance around limit cycles and quasiperiodic tori.")
    parser.add_argument("--quiet", action="store_true", help="Silence warnings and library logs.")
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR.")
    sub = parser.add_subparsers(dest="verb", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="JSON run configuration.")
    common.add_argument("--problem", default=None, help="Built-in problem name or path to a .py file defining PROBLEM.")
    common.add_argument("--out", default=None, help="Output directory.")
    common.add_argument("--workers", type=int, default=None, help="Worker threads.")
    common.add_argument("--sigma", type=float, default=None, help="Noise intensity.")

    solve = argparse.ArgumentParser(add_help=False)
    solve.add_argument("--mesh-intervals", dest="mesh_intervals", type=int, default=None)
    solve.add_argument("--degree", type=int, default=None)
    solve.add_argument("--newton-tol", dest="newton_tol", type=float, default=None)
    solve.add_argument("--K-max", dest="K_max", type=int, default=None)
    solve.add_argument("--T-guess", dest="T_guess", type=float, default=None)
    solve.add_argument("--method", default=None, help="series | kronecker | pinv (cycles), fixed_point | direct (tori).")

    sde = argparse.ArgumentParser(add_help=False)
    sde.add_argument("--geometry", default=None, help="cycle.json or torus.json to simulate around.")
    sde.add_argument("--bins", type=int, default=None)
    sde.add_argument("--by", choices=["tau", "psi"], default=None)

    sub.add_parser("cycle", parents=[common, solve], help="Periodic orbit, adjoint and covariance C(t).")
    torus = sub.add_parser("torus", parents=[common, solve], help="Quasiperiodic torus, adjoints and covariance C(phi, t).")
    torus.add_argument("--N", type=int, default=None, help="Fourier truncation order.")
    torus.add_argument("--rho", type=float, default=None, help="Rotation number.")
    torus.add_argument("--free-param", dest="free_param", default=None, help="Parameter solved for at fixed rho.")

    simulate = sub.add_parser("simulate", parents=[common, sde], help="Euler-Maruyama validation run.")
    simulate.add_argument("--dt", type=float, default=None)
    simulate.add_argument("--periods", type=float, default=None)
    simulate.add_argument("--burn-in", dest="burn_in", type=float, default=None)
    simulate.add_argument("--trajectories", type=int, default=None)
    simulate.add_argument("--seed", type=int, default=None)
    simulate.add_argument("--thinning", type=int, default=None)
    simulate.add_argument("--mode", choices=["points", "crossings"], default=None)
    simulate.add_argument("--tau-star", dest="tau_star", type=float, default=None)

    compare = sub.add_parser("compare", parents=[common, sde], help="Recompute compare.json from samples.csv.")
    compare.add_argument("--samples", default=None, help="samples.csv (defaults to the output directory).")
    return parser


def overrides_from(args: argparse.Namespace) -> Dict[str, Any]:
    values = vars(args)
    return {key: values[dest] for dest, key in FLAG_KEYS.items() if values.get(dest) is not None}


def emit_error(error: Exception, exit_code: int, out_dir: Optional[Path]) -> None:
    payload = {"error": type(error).__name__, "message": str(error), "exit_code": exit_code}
    print(json.dumps(payload))
    if out_dir is None:
        return
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "error.json").write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    except OSError:
        pass


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    settings = get_settings()
    if args.quiet or settings.quiet:
        silence_warnings_and_logs()
    else:
        configure_logging(args.log_level or settings.log_level)

    # imported after logging is configured
    from commands import COMMANDS
    from shared.config import load_config
    from stochcov.errors import ConfigError, Error

    out_dir: Optional[Path] = Path(args.out) if args.out else Path(settings.output_dir)
    try:
        config = load_config(args.config, overrides_from(args))
        out_dir = config.output_dir(settings.output_dir)
        extra = {"samples_path": args.samples} if args.verb == "compare" and args.samples else {}
        command = COMMANDS[args.verb](
            config=config,
            output_root=settings.output_dir,
            workers=args.workers or settings.workers,
            **extra,
        )
        result = command.run()
    except ConfigError as e:
        emit_error(e, e.exit_code, out_dir)
        return e.exit_code
    except Error as e:
        logger.error(f"{args.verb} failed: {e}")
        emit_error(e, e.exit_code, out_dir)
        return e.exit_code
    except (np.linalg.LinAlgError, FloatingPointError) as e:
        # numerical failures below the solver layer count as solver failures
        logger.error(f"{args.verb} failed: {e}")
        emit_error(e, 1, out_dir)
        return 1
    print(result.model_dump_json(indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
