"""Serialization of study results to JSON documents and CSV tables."""

import glob
import json
import os
import platform
import re

import numpy as np
import pandas as pd
import scipy

from nlhomog.homogenization import cell_problems as hc
from nlhomog.homogenization import einstein as he
from nlhomog.homogenization import evolution as hv
from nlhomog.homogenization import oracle as ho

FLOAT_FORMAT = "%.16e"
EVOLUTION_COLUMNS = ["t", "l2_error", "weighted_mass", "weighted_energy"]


def to_jsonable(value):
    """Converts numpy containers and scalars to plain Python for json."""
    match value:
        case np.ndarray():
            return value.tolist()
        case np.generic():
            return value.item()
        case dict():
            return {str(k): to_jsonable(v) for k, v in value.items()}
        case list() | tuple():
            return [to_jsonable(v) for v in value]
    return value


def write_json(path: str, payload: dict) -> str:
    """Writes payload as indented JSON with sorted keys and returns the path."""
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(to_jsonable(payload), handle, indent=2, sort_keys=True)
        handle.write("\n")
    return path


def cell_payload(cell: hc.CellSolution) -> dict:
    """Everything cell_solution.json records about a CellSolution."""
    return {
        "grid": {"dim": cell.grid.dim, "n": cell.grid.n},
        "v0": cell.v0,
        "b": cell.b,
        "kappa1": cell.kappa1,
        "kappa2": cell.kappa2,
        "theta": cell.theta,
        "flux_matrix": cell.flux,
        "theta_sym_min_eigenvalue": float(np.linalg.eigvalsh(cell.theta_sym).min()),
        "residuals": cell.residuals,
    }


def evolution_frame(report: hv.EvolutionReport) -> pd.DataFrame:
    """The per-snapshot trace of one epsilon as a dataframe."""
    return pd.DataFrame({"t": report.times, "l2_error": report.l2_error,
                         "weighted_mass": report.weighted_mass,
                         "weighted_energy": report.weighted_energy},
                        columns=EVOLUTION_COLUMNS)


def evolution_csv_name(inverse_epsilon: int) -> str:
    """File name of the trace for epsilon = 1 / inverse_epsilon."""
    return f"evolve_eps{inverse_epsilon}.csv"


def write_evolution_csv(report: hv.EvolutionReport, out_dir: str) -> str:
    """Writes evolve_eps{M}.csv with 17 significant digits."""
    path = os.path.join(out_dir, evolution_csv_name(int(round(1.0 / report.epsilon))))
    evolution_frame(report).to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return path


def get_evolution_csv_paths(out_dir: str) -> list[str]:
    """Returns the evolution CSV paths in out_dir ordered by increasing M."""
    paths = glob.glob(os.path.join(out_dir, "evolve_eps*.csv"))
    return sorted(paths, key=lambda p: int(re.search(r"eps(\d+)\.csv$", p).group(1)))


def read_evolution_csvs(out_dir: str) -> pd.DataFrame:
    """Reads every evolution CSV in out_dir and stacks them with an M column."""
    frames = []
    for path in get_evolution_csv_paths(out_dir):
        df = pd.read_csv(path)
        df["inverse_epsilon"] = int(re.search(r"eps(\d+)\.csv$", path).group(1))
        frames.append(df)
    return pd.concat(frames, ignore_index=True)


def aggregate_evolution(df: pd.DataFrame) -> pd.DataFrame:
    """Returns per-epsilon sup error, mass range and energy range."""
    return df.groupby("inverse_epsilon").agg(
        sup_error=("l2_error", "max"),
        mass_min=("weighted_mass", "min"),
        mass_max=("weighted_mass", "max"),
        energy_first=("weighted_energy", "first"),
        energy_last=("weighted_energy", "last"),
    ).reset_index()


def evolution_summary(reports: list[hv.EvolutionReport], summary: hv.ConvergenceSummary,
                      theta: np.ndarray, traces: pd.DataFrame | None = None) -> dict:
    """Payload of evolution_summary.json.

    Args:
      reports:
        One report per epsilon.
      summary:
        The ladder summary of the same runs.
      theta:
        Effective matrix of the cell solution.
      traces:
        Output of aggregate_evolution over the written CSVs; recorded under
        "traces" when given.
    """
    runs = []
    for report in reports:
        runs.append({
            "epsilon": report.epsilon,
            "inverse_epsilon": int(round(1.0 / report.epsilon)),
            "sup_error": report.sup_error,
            "initial_error": float(report.l2_error[0]),
            "mass_drift": report.mass_drift,
            "max_energy_increase": report.max_energy_increase,
            "frame_gap": report.frame_gap,
            "comparison_excess": report.comparison_excess,
            "plain_final_error": report.plain_final_error,
            "ansatz_final_error": report.ansatz_final_error,
            "mode_decay_diffusivity": hv.mode_decay_diffusivity(report),
            "steps": report.steps,
            "dt": report.dt,
        })
    payload = {"runs": runs, "sup_errors": summary.sup_errors, "halving_ratios": summary.ratios,
               "monotone": summary.monotone, "theta_sym": 0.5 * (theta + theta.T)}
    if traces is not None:
        payload["traces"] = traces.to_dict(orient="records")
    return payload


def einstein_payload(report: he.EinsteinReport) -> dict:
    """Payload of einstein_report.json."""
    return {
        "b_lin": report.b_lin,
        "b_fd": report.b_fd,
        "two_theta_sym": 2.0 * report.theta_sym,
        "flux_sym": report.flux_sym,
        "deviations": report.deviations,
        "fd_steps": report.fd.steps,
        "identity_asserted": report.identity_asserted,
        "phi0": report.phi0,
        "diagnostics": report.diagnostics,
    }


def jacobian_frame(report: he.EinsteinReport) -> pd.DataFrame:
    """One row per (route, step, i, j) with the Jacobian entry."""
    rows = []
    dim = report.b_lin.shape[0]
    for step, matrix in zip(report.fd.steps, report.fd.jacobians):
        rows += [("central", step, i, j, matrix[i, j]) for i in range(dim) for j in range(dim)]
    for route, matrix in (("richardson", report.b_fd), ("linearized", report.b_lin)):
        rows += [(route, np.nan, i, j, matrix[i, j]) for i in range(dim) for j in range(dim)]
    return pd.DataFrame(rows, columns=["route", "step", "i", "j", "value"])


def write_jacobian_csv(report: he.EinsteinReport, out_dir: str) -> str:
    """Writes einstein_jacobians.csv and returns its path."""
    path = os.path.join(out_dir, "einstein_jacobians.csv")
    jacobian_frame(report).to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return path


def oracle_payload(report: ho.OracleReport) -> dict:
    """Payload of oracle_report.json."""
    return {"discrepancies": report.discrepancies, "tolerance": report.tolerance,
            "passed": report.passed}


def manifest(resolved_config: dict, study: str, version: str) -> dict:
    """Payload of manifest.json; contains no timestamps so reruns match."""
    return {
        "study": study,
        "config": resolved_config,
        "versions": {"nlhomog": version, "numpy": np.__version__, "scipy": scipy.__version__,
                     "pandas": pd.__version__, "python": platform.python_version()},
    }
