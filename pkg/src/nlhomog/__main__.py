"""Entry point for nlhomog."""

import logging
import os
import sys

import nlhomog
import nlhomog.homogenization.artifacts as ha
import nlhomog.homogenization.cell_problems as hc
import nlhomog.homogenization.einstein as he
import nlhomog.homogenization.evolution as hv
import nlhomog.homogenization.oracle as ho
import nlhomog.homogenization.torus as ht
import nlhomog.user_input as ui
from nlhomog.errors import (ConfigurationError, ConvergenceError, NlhomogError,
                            OracleMismatchError)

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def _path(cfg: ui.RunConfig, name: str) -> str:
    return os.path.join(cfg.output_dir, name)


def run_cell(cfg: ui.RunConfig, threads: int) -> None:
    """Solves the cell problem and writes cell_solution.json."""
    print("Solving cell problem...", flush=True, end=" ")
    cell = hc.solve_cell(cfg.kernel, cfg.mu, cfg.grid, cfg.tolerances, cfg.storage, threads)
    print("...done.")
    ha.write_json(_path(cfg, "cell_solution.json"), ha.cell_payload(cell))


def run_evolve(cfg: ui.RunConfig, threads: int) -> None:
    """Runs the epsilon ladder against the cell solution on N = n_cell."""
    grid = ht.TorusGrid(cfg.grid.dim, cfg.evolution.n_cell)
    print(f"Solving cell problem on N={grid.n}...", flush=True, end=" ")
    cell = hc.solve_cell(cfg.kernel, cfg.mu, grid, cfg.tolerances, cfg.storage, threads)
    print("...done.")
    ha.write_json(_path(cfg, "cell_solution.json"), ha.cell_payload(cell))

    print("Evolving u_eps for every epsilon...", flush=True, end=" ")
    reports, summary = hv.convergence_study(cfg.evolution.configs(), cell, cfg.kernel, cfg.mu,
                                            threads)
    print("...done.")
    for report in reports:
        ha.write_evolution_csv(report, cfg.output_dir)
    # per-epsilon ranges of the CSVs as written
    traces = ha.aggregate_evolution(ha.read_evolution_csvs(cfg.output_dir))
    traces = traces[traces["inverse_epsilon"].isin([round(1.0 / r.epsilon) for r in reports])]
    ha.write_json(_path(cfg, "evolution_summary.json"),
                  ha.evolution_summary(reports, summary, cell.theta, traces))
    if not summary.monotone:
        logger.warning("sup errors %s do not decrease along the epsilon ladder",
                       summary.sup_errors)


def run_einstein(cfg: ui.RunConfig, threads: int) -> None:
    """Runs both drift Jacobian routes and writes the report and the CSV."""
    print("Running linear response study...", flush=True, end=" ")
    report = he.einstein_check(cfg.kernel, cfg.mu, cfg.grid, cfg.einstein.steps,
                               cfg.einstein.kind, cfg.einstein.width, cfg.tolerances,
                               cfg.storage, threads)
    print("...done.")
    ha.write_json(_path(cfg, "einstein_report.json"), ha.einstein_payload(report))
    ha.write_jacobian_csv(report, cfg.output_dir)


def run_oracle(cfg: ui.RunConfig, threads: int) -> None:
    """Compares the pipeline with the dense path; raises on mismatch after writing."""
    print("Solving cell problem...", flush=True, end=" ")
    cell = hc.solve_cell(cfg.kernel, cfg.mu, cfg.grid, cfg.tolerances, cfg.storage, threads)
    print("...done.")
    print("Solving dense reference...", flush=True, end=" ")
    dense = ho.dense_cell_solution(cfg.kernel, cfg.mu, cfg.grid.n)
    print("...done.")
    report = ho.compare(cell, dense, cfg.oracle_tolerance)
    ha.write_json(_path(cfg, "cell_solution.json"), ha.cell_payload(cell))
    ha.write_json(_path(cfg, "oracle_report.json"), ha.oracle_payload(report))
    report.check()


STUDY_RUNNERS = {"cell": run_cell, "evolve": run_evolve, "einstein": run_einstein,
                 "oracle": run_oracle}


def main(argv: list[str] | None = None) -> int:
    """Parse the command line, run the study and map failures to exit codes."""
    args = ui.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format=LOG_FORMAT)
    try:
        threads = ui.resolve_threads(args.threads)
        cfg = ui.load_config(args.config, args.study, args.out)
    except ConfigurationError as exc:
        print(f"Configuration error: {exc}", file=sys.stderr)
        return exc.exit_code

    os.makedirs(cfg.output_dir, exist_ok=True)
    ha.write_json(_path(cfg, "manifest.json"),
                  ha.manifest(cfg.resolved, cfg.study, nlhomog.__version__))
    try:
        STUDY_RUNNERS[cfg.study](cfg, threads)
    except ConvergenceError as exc:
        print("...failed.")
        logger.error("%s", exc)
        ha.write_json(_path(cfg, "failure.json"), exc.to_dict())
        return exc.exit_code
    except OracleMismatchError as exc:
        logger.error("%s", exc)
        return exc.exit_code
    except NlhomogError as exc:
        # a progress line is still open
        print("...failed.")
        logger.error("%s", exc)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
