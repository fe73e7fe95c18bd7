"""Data files written and read by the command-line verbs.

CSV files carry a header row and numbers in full double precision, scientific
notation. Geometry files (cycle.json, torus.json) store piecewise polynomials as
coefficient arrays so that a reload evaluates exactly as the original.
"""

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Union

import numpy as np

from .cycle_cov import AdjointCycle, CovarianceCycle, Eigencurves, PeriodicOrbit
from .errors import ConfigError
from .flow import Trajectory
from .fourier import FourierOps
from .polynomials import PiecewisePolynomial
from .sde_lab import BinnedStats, CycleGeometry, SectionSamples, TorusGeometry
from .torus import TorusSolution
from .torus_cov import CovarianceTorus, TorusAdjoints

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
PathLike = Union[str, Path]


def fmt(value) -> str:
    """Full-precision scientific notation; integers stay integers."""
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return str(int(value))
    value = float(value)
    if not np.isfinite(value):
        return "nan" if np.isnan(value) else ("inf" if value > 0 else "-inf")
    return f"{value:.16e}"


def write_csv(path: PathLike, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([v if isinstance(v, str) else fmt(v) for v in row])
            count += 1
    logger.info(f"wrote {path} ({count} rows)")
    return path


def read_csv(path: PathLike) -> Dict[str, np.ndarray]:
    """Columns of a numeric CSV keyed by header name; text columns stay strings."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"data file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    columns = {}
    for k, name in enumerate(header):
        raw = [row[k] for row in rows]
        try:
            columns[name] = np.array([float(v) for v in raw])
        except ValueError:
            columns[name] = np.array(raw)
    return columns


def write_json(path: PathLike, data: Dict[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=2, sort_keys=False)
        fh.write("\n")
    logger.info(f"wrote {path}")
    return path


def read_json(path: PathLike) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"file not found: {path}")
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} is not valid JSON: {e}") from e


def _arr(a) -> Optional[list]:
    return None if a is None else np.asarray(a, dtype=float).tolist()


def _poly(data: Optional[dict]) -> Optional[PiecewisePolynomial]:
    return None if data is None else PiecewisePolynomial.from_dict(data)


# --- geometry files ---------------------------------------------------------


@dataclass
class StoredGeometry:
    """A reloaded cycle.json or torus.json."""

    kind: str
    problem: Dict[str, Any]
    T: float
    geometry: Union[CycleGeometry, TorusGeometry]
    diagnostics: Dict[str, Any] = field(default_factory=dict)


def cycle_document(problem_ref: Dict[str, Any], po: PeriodicOrbit, adj: AdjointCycle, cov: CovarianceCycle, diagnostics: Dict[str, Any]) -> Dict[str, Any]:
    return {
        "format_version": FORMAT_VERSION,
        "kind": "cycle",
        "problem": problem_ref,
        "T": po.T,
        "autonomous": po.autonomous,
        "gamma": po.X.orbit.to_dict(),
        "w": _arr(adj.w),
        "lambda": adj.lambda_.to_dict() if adj.lambda_ is not None else None,
        "covariance": {"method": cov.method, "C0": _arr(cov.C0), "C": cov.C.to_dict()},
        "diagnostics": diagnostics,
    }


def torus_document(problem_ref: Dict[str, Any], torus: TorusSolution, adj: TorusAdjoints, cov: CovarianceTorus, diagnostics: Dict[str, Any]) -> Dict[str, Any]:
    return {
        "format_version": FORMAT_VERSION,
        "kind": "torus",
        "problem": problem_ref,
        "N": torus.ops.N,
        "rho": torus.rho,
        "T": torus.T,
        "autonomous": torus.autonomous,
        "free_param": torus.free_param,
        "mesh": torus.cmesh.mesh.tolist(),
        "degree": torus.cmesh.degree,
        "values": _arr(torus.values),
        "adjoint": _arr(adj.M),
        "covariance": {
            "method": cov.method,
            "A": _arr(cov.A),
            "segments": [seg.to_dict() for seg in cov.segments],
        },
        "diagnostics": diagnostics,
    }


def load_geometry(path: PathLike) -> StoredGeometry:
    """Rebuild the section geometry stored by the cycle or torus verb."""
    doc = read_json(path)
    kind = doc.get("kind")
    if doc.get("format_version") != FORMAT_VERSION:
        raise ConfigError(f"{path}: unsupported format version {doc.get('format_version')}")
    if kind == "cycle":
        geometry = CycleGeometry(
            T=doc["T"],
            gamma=Trajectory.from_dict(doc["gamma"]),
            lambda_=_poly(doc["lambda"]) if doc["autonomous"] else None,
            covariance=PiecewisePolynomial.from_dict(doc["covariance"]["C"]),
        )
    elif kind == "torus":
        mesh = np.asarray(doc["mesh"])
        values = np.asarray(doc["values"])
        M = np.asarray(doc["adjoint"])
        geometry = TorusGeometry(
            ops=FourierOps(int(doc["N"])),
            rho=doc["rho"],
            T=doc["T"],
            gamma_segments=[Trajectory.from_node_values(mesh, v) for v in values],
            lambda_segments=[PiecewisePolynomial.from_node_values(mesh, m) for m in M],
            covariance_segments=[PiecewisePolynomial.from_dict(s) for s in doc["covariance"]["segments"]],
            autonomous=doc["autonomous"],
        )
    else:
        raise ConfigError(f"{path}: unknown geometry kind {kind!r}")
    return StoredGeometry(kind=kind, problem=doc["problem"], T=float(doc["T"]), geometry=geometry, diagnostics=doc.get("diagnostics", {}))


# --- cycle tables ------------------------------------------------------------


def _names(prefix: str, count: int) -> List[str]:
    return [f"{prefix}_{i + 1}" for i in range(count)]


def write_orbit_csv(path: PathLike, po: PeriodicOrbit) -> Path:
    t = po.mesh
    return write_csv(path, ["t"] + _names("gamma", po.problem.n), (np.r_[tk, g] for tk, g in zip(t, po.gamma(t))))


def write_adjoint_csv(path: PathLike, po: PeriodicOrbit, adj: AdjointCycle) -> Path:
    t = po.mesh
    n = po.problem.n
    lam = adj.lambda_(t) if adj.lambda_ is not None else np.zeros((len(t), n))
    return write_csv(path, ["t"] + _names("lambda", n), (np.r_[tk, v] for tk, v in zip(t, lam)))


def _vec_names(n: int) -> List[str]:
    # column-major vec C
    return [f"C_{i + 1}{j + 1}" for j in range(n) for i in range(n)]


def write_covariance_csv(path: PathLike, cov: CovarianceCycle, curves: Eigencurves, sigma: float) -> Path:
    """t, vec C, eigenvalues, eigenvectors (column by column) and sigma * sqrt(eigenvalue)."""
    n = cov.C0.shape[0]
    header = ["t"] + _vec_names(n) + _names("eig", n)
    header += [f"vec{k + 1}_{i + 1}" for k in range(n) for i in range(n)]
    header += _names("std", n)
    std = sigma * np.sqrt(np.clip(curves.eigenvalues, 0.0, None))

    def rows():
        for k, t in enumerate(curves.times):
            yield np.r_[
                t,
                cov.values[k].reshape(-1, order="F"),
                curves.eigenvalues[k],
                curves.eigenvectors[k].reshape(-1, order="F"),
                std[k],
            ]

    return write_csv(path, header, rows())


# --- torus tables ----------------------------------------------------------------


def write_torus_adjoints_csv(path: PathLike, torus: TorusSolution, adj: TorusAdjoints) -> Path:
    n = torus.n
    labels = ["t", "phi"] if torus.autonomous else ["phi"]
    header = ["node", "phi", "t"] + [f"Lambda_{lab}_{i + 1}" for lab in labels for i in range(n)]
    base = torus.cmesh.base_times

    def rows():
        for j, phi in enumerate(torus.ops.nodes):
            for p, t in enumerate(base):
                yield [j, phi, t] + list(adj.M[j, p].T.reshape(-1))

    return write_csv(path, header, rows())


def write_covariance_nodes_csv(path: PathLike, torus: TorusSolution, cov: CovarianceTorus, times: Sequence[float], sigma: float) -> Path:
    """phi_j, t, vec C and descending eigenvalues on a grid of t for every node."""
    n = torus.n
    header = ["node", "phi", "t"] + _vec_names(n) + _names("eig", n) + _names("std", n)

    def rows():
        for t in times:
            C = cov.nodes_at(t)
            eigs = np.linalg.eigvalsh(C)[:, ::-1]
            for j, phi in enumerate(torus.ops.nodes):
                yield [j, phi, t] + list(C[j].reshape(-1, order="F")) + list(eigs[j]) + list(sigma * np.sqrt(np.clip(eigs[j], 0.0, None)))

    return write_csv(path, header, rows())


# --- Monte-Carlo tables -----------------------------------------------------------


def write_samples_csv(path: PathLike, samples: SectionSamples, n_bins: int, by: str = "tau") -> Path:
    n = samples.x.shape[1]
    p = samples.projections.shape[1]
    r = samples.hyperplane.shape[1]
    header = ["trajectory", "mode", "psi", "tau"] + _names("x", n) + _names("xtr", n) + _names("proj", p) + _names("eig", p)
    header += _names("h", r) + ["bin_id"]
    coord = samples.psi if by == "psi" else samples.tau
    bins = np.minimum((np.mod(coord, 1.0) * n_bins).astype(int), n_bins - 1)

    def rows():
        for k in range(len(samples)):
            yield (
                [int(samples.trajectory[k]), samples.mode, samples.psi[k], samples.tau[k]]
                + list(samples.x[k])
                + list(samples.x_tr[k])
                + list(samples.projections[k])
                + list(samples.eigenvalues[k])
                + list(samples.hyperplane[k])
                + [int(bins[k])]
            )

    return write_csv(path, header, rows())


def _block(columns: Dict[str, np.ndarray], prefix: str) -> np.ndarray:
    names = sorted((k for k in columns if k.startswith(prefix + "_") and k[len(prefix) + 1 :].isdigit()), key=lambda k: int(k.split("_")[-1]))
    if not names:
        return np.zeros((len(columns["tau"]), 0))
    return np.stack([columns[k] for k in names], axis=-1)


def read_samples_csv(path: PathLike) -> SectionSamples:
    columns = read_csv(path)
    if "tau" not in columns:
        raise ConfigError(f"{path} is not a samples file")
    modes = columns.get("mode")
    mode = str(modes[0]) if modes is not None and len(modes) else "points"
    return SectionSamples(
        mode=mode,
        x=_block(columns, "x"),
        psi=columns["psi"],
        tau=columns["tau"],
        x_tr=_block(columns, "xtr"),
        projections=_block(columns, "proj"),
        eigenvalues=_block(columns, "eig"),
        hyperplane=_block(columns, "h"),
        trajectory=columns["trajectory"].astype(int),
    )


def write_bins_csv(path: PathLike, stats: BinnedStats, sigma: float) -> Path:
    p = stats.mean.shape[1]
    header = ["bin_id", "lo", "hi", "count"] + _names("mean", p) + _names("std", p) + _names("pred_std", p)
    predicted = stats.predicted_std(sigma)

    def rows():
        for b in range(stats.n_bins):
            yield [b, stats.edges[b], stats.edges[b + 1], int(stats.counts[b])] + list(stats.mean[b]) + list(stats.std[b]) + list(predicted[b])

    return write_csv(path, header, rows())
