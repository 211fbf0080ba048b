"""Manages the command line and the JSON run configuration."""

import argparse
import dataclasses
import json
import os
from dataclasses import dataclass, field

from nlhomog.errors import ConfigurationError, UnknownFamilyError
from nlhomog.homogenization import cell_problems as hc
from nlhomog.homogenization import einstein as he
from nlhomog.homogenization import evolution as hv
from nlhomog.homogenization import kernels as hk
from nlhomog.homogenization import oracle as ho
from nlhomog.homogenization import torus as ht

STUDIES = ("cell", "evolve", "einstein", "oracle")
THREADS_VARIABLE = "NLHOMOG_THREADS"

KERNEL_KEYS = {"family", "dim", "sigma", "shift", "covariance", "radius", "base", "perturbation"}
PERTURBATION_KEYS = {"kind", "ell", "width"}
MU_KEYS = {"family", "dim", "value", "scale", "amplitude", "nu_amplitude", "phase_x", "phase_y",
           "table", "alpha1", "alpha2"}
GRID_KEYS = {"dim", "n", "storage"}
TOLERANCE_KEYS = {f.name for f in dataclasses.fields(hc.Tolerances)} | {"oracle"}
COUNT_KEYS = {"max_iter", "krylov_max_iter", "max_shells", "n_cell", "k0", "snapshots"}
EVOLUTION_KEYS = {"epsilons", "horizon", "n_cell", "initial_datum", "k0", "width", "dt_safety",
                  "snapshots"}
EINSTEIN_KEYS = {"steps", "kind", "width"}
TOP_KEYS = {"study", "kernel", "mu", "grid", "tolerances", "evolution", "einstein",
            "output_dir", "seed"}


@dataclass(frozen=True)
class EvolutionSettings:
    """The epsilon ladder and the parameters shared by its runs."""

    epsilons: tuple[float, ...] = (1 / 8, 1 / 16, 1 / 32)
    horizon: float = 0.25
    n_cell: int = 32
    initial_datum: str = "harmonic"
    k0: int = 1
    width: float = 0.1
    dt_safety: float = 0.5
    snapshots: int = 33

    def configs(self) -> list[hv.EvolutionConfig]:
        """One EvolutionConfig per epsilon."""
        return [hv.EvolutionConfig(epsilon=eps, horizon=self.horizon, n_cell=self.n_cell,
                                   initial_datum=self.initial_datum, k0=self.k0,
                                   width=self.width, dt_safety=self.dt_safety,
                                   snapshots=self.snapshots)
                for eps in self.epsilons]


@dataclass(frozen=True)
class EinsteinSettings:
    """Finite difference steps and perturbation family of the einstein study.

    Attributes:
      steps:
        Probe steps h, largest first.
      kind:
        "cutoff" or "dipole".
      width:
        Width of the dipole profile; unused for the cutoff family.
    """

    steps: tuple[float, ...] = he.DEFAULT_STEPS
    kind: str = "cutoff"
    width: float | None = None


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved run configuration.

    Attributes:
      study:
        One of cell, evolve, einstein, oracle.
      kernel:
        The jump kernel (the symmetric kernel a_sym for the einstein study).
      mu:
        The coefficient.
      grid:
        The cell grid.
      storage:
        Operator storage mode.
      tolerances:
        Cell pipeline tolerances.
      oracle_tolerance:
        Largest accepted dense-oracle discrepancy.
      evolution:
        Settings of the evolve study.
      einstein:
        Settings of the einstein study.
      output_dir:
        Directory receiving the artifacts.
      seed:
        Seed of randomized property checks.
      resolved:
        The configuration with every default filled in, for the manifest.
    """

    study: str
    kernel: hk.KernelSpec
    mu: hk.CoefficientSpec
    grid: ht.TorusGrid
    storage: str = "auto"
    tolerances: hc.Tolerances = hc.Tolerances()
    oracle_tolerance: float = ho.ORACLE_TOL
    evolution: EvolutionSettings = EvolutionSettings()
    einstein: EinsteinSettings = EinsteinSettings()
    output_dir: str = "results"
    seed: int = 0
    resolved: dict = field(default_factory=dict, compare=False)


def parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    """Parses ``nlhomog <study> --config <path> [--out] [--threads] [--verbose]``."""
    parser = argparse.ArgumentParser(
        prog="nlhomog",
        description="Effective drift, correctors and diffusion of periodic nonlocal "
                    "jump operators, with evolution and linear response studies.")
    parser.add_argument("study", choices=STUDIES, help="study to run")
    parser.add_argument("--config", required=True, help="path of the JSON run configuration")
    parser.add_argument("--out", default=None, help="output directory (overrides output_dir)")
    parser.add_argument("--threads", type=int, default=1,
                        help=f"worker threads; {THREADS_VARIABLE} overrides this")
    parser.add_argument("--verbose", action="store_true", help="log progress at INFO level")
    return parser.parse_args(argv)


def resolve_threads(requested: int) -> int:
    """Returns the worker count, giving NLHOMOG_THREADS precedence."""
    value = os.environ.get(THREADS_VARIABLE)
    if value is not None:
        try:
            requested = int(value)
        except ValueError:
            raise ConfigurationError(f"{THREADS_VARIABLE} must be an integer, got {value!r}")
    if requested < 1:
        raise ConfigurationError("thread count must be at least 1")
    return requested


def check_keys(section: dict, allowed: set[str], path: str) -> None:
    """Rejects keys of section not in allowed, naming the dotted path."""
    if not isinstance(section, dict):
        raise ConfigurationError(f"{path} must be an object")
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigurationError(f"unknown configuration key {path}.{unknown[0]}")


def _positive(value, path: str) -> float:
    if not isinstance(value, (int, float)) or isinstance(value, bool) or not value > 0:
        raise ConfigurationError(f"{path} must be a positive number, got {value!r}")
    return float(value)


def _positive_int(value, path: str) -> int:
    if not isinstance(value, int) or isinstance(value, bool) or value < 1:
        raise ConfigurationError(f"{path} must be a positive integer, got {value!r}")
    return value


def build_kernel(section: dict, dim: int, path: str = "kernel") -> hk.KernelSpec:
    """Builds a KernelSpec from its config section."""
    check_keys(section, KERNEL_KEYS, path)
    if "family" not in section:
        raise ConfigurationError(f"{path}.family is required")
    dim = int(section.get("dim", dim))
    family = section["family"]
    match family:
        case "gaussian":
            return hk.gaussian(_positive(section.get("sigma"), f"{path}.sigma"), dim)
        case "shifted_gaussian":
            return hk.shifted_gaussian(_positive(section.get("sigma"), f"{path}.sigma"),
                                       section.get("shift", [0.0] * dim))
        case "anisotropic_gaussian":
            if "covariance" not in section:
                raise ConfigurationError(f"{path}.covariance is required")
            return hk.anisotropic_gaussian(section["covariance"], section.get("shift"))
        case "compact_bump":
            return hk.compact_bump(_positive(section.get("radius"), f"{path}.radius"), dim,
                                   section.get("shift"))
        case "composite_biased":
            if "base" not in section or "perturbation" not in section:
                raise ConfigurationError(f"{path} needs base and perturbation")
            base = build_kernel(section["base"], dim, f"{path}.base")
            return hk.composite_biased(build_perturbation(section["perturbation"], base,
                                                          f"{path}.perturbation"))
    raise UnknownFamilyError(f"unknown kernel family {family!r} at {path}.family")


def build_perturbation(section: dict, base: hk.KernelSpec, path: str) -> hk.PerturbationSpec:
    """Builds the perturbation of a composite kernel, which must stay nonnegative."""
    check_keys(section, PERTURBATION_KEYS, path)
    ell = section.get("ell", [0.0] * base.dim)
    match section.get("kind", "cutoff"):
        case "cutoff":
            pert = hk.make_cutoff_perturbation(base, ell)
        case "dipole":
            pert = hk.make_dipole_perturbation(base, ell,
                                               _positive(section.get("width"), f"{path}.width"))
        case other:
            raise UnknownFamilyError(f"unknown perturbation kind {other!r} at {path}.kind")
    hk.check_nonnegative(hk.composite_biased(pert))
    return pert


def build_mu(section: dict, dim: int, path: str = "mu") -> hk.CoefficientSpec:
    """Builds a CoefficientSpec from its config section."""
    check_keys(section, MU_KEYS, path)
    if "family" not in section:
        raise ConfigurationError(f"{path}.family is required")
    dim = int(section.get("dim", dim))
    bounds = {"alpha1": section.get("alpha1"), "alpha2": section.get("alpha2")}
    family = section["family"]
    match family:
        case "constant":
            return hk.constant_mu(section.get("value", 1.0), dim, **bounds)
        case "separable":
            return hk.separable_mu(section.get("amplitude", 0.0), section.get("nu_amplitude", 0.0),
                                   dim, section.get("phase_x", 0.0), section.get("phase_y", 0.0),
                                   section.get("scale", 1.0), **bounds)
        case "trig_product":
            return hk.trig_product_mu(section.get("amplitude", 0.5), dim,
                                      section.get("phase_x", 0.0), section.get("phase_y", 0.0),
                                      section.get("scale", 1.0), **bounds)
        case "tabulated":
            if "table" not in section:
                raise ConfigurationError(f"{path}.table is required")
            return hk.tabulated_mu(section["table"], dim, **bounds)
    raise UnknownFamilyError(f"unknown coefficient family {family!r} at {path}.family")


def _check_einstein(settings: EinsteinSettings, kernel: hk.KernelSpec,
                    mu: hk.CoefficientSpec) -> None:
    if not settings.steps or any(not h > 0 for h in settings.steps):
        raise ConfigurationError("einstein.steps must be a nonempty list of positive steps")
    if settings.kind not in hk.PERTURBATION_KINDS:
        raise UnknownFamilyError(f"unknown perturbation kind {settings.kind!r} at einstein.kind")
    if settings.kind == "dipole":
        _positive(settings.width, "einstein.width")
    if not hk.is_even_kernel(kernel):
        raise ConfigurationError("the einstein study needs an even kernel")
    if not hk.is_symmetric_mu(mu):
        raise ConfigurationError("the einstein study needs a symmetric mu")
    match settings.kind:
        case "cutoff":
            pert = hk.make_cutoff_perturbation(kernel, [0.0] * kernel.dim)
        case "dipole":
            pert = hk.make_dipole_perturbation(kernel, [0.0] * kernel.dim, settings.width)
    # every finite difference kernel a_sym +- h c must stay a jump density
    for step in settings.steps:
        for axis in range(kernel.dim):
            for sign in (1.0, -1.0):
                ell = [0.0] * kernel.dim
                ell[axis] = sign * step
                hk.check_nonnegative(hk.composite_biased(pert.with_ell(ell)))


def _settings(cls, section: dict, allowed: set[str], path: str, sequences: tuple[str, ...] = ()):
    check_keys(section, allowed, path)
    values = {key: tuple(value) if key in sequences else value for key, value in section.items()}
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigurationError(f"invalid {path} section: {exc}") from exc


def build_config(raw: dict, study: str | None = None, out: str | None = None) -> RunConfig:
    """Validates a raw configuration document and resolves all defaults.

    Args:
      raw:
        The parsed JSON document.
      study:
        Study from the command line; overrides raw["study"].
      out:
        Output directory from the command line; overrides raw["output_dir"].

    Returns:
      The resolved RunConfig.

    Raises:
      ConfigurationError: for unknown keys, unknown families, missing or
        invalid values.
    """
    check_keys(raw, TOP_KEYS, "config")
    study = study or raw.get("study")
    if study not in STUDIES:
        raise ConfigurationError(f"study must be one of {', '.join(STUDIES)}, got {study!r}")
    for section in ("kernel", "mu"):
        if section not in raw:
            raise ConfigurationError(f"config.{section} is required")

    grid_section = raw.get("grid", {})
    check_keys(grid_section, GRID_KEYS, "grid")
    dim = int(grid_section.get("dim", raw["kernel"].get("dim", 1)))
    storage = grid_section.get("storage", "auto")
    if storage not in ht.STORAGE_MODES:
        raise ConfigurationError(f"grid.storage must be one of {ht.STORAGE_MODES}")
    grid = ht.TorusGrid(dim, int(grid_section.get("n", 128)))

    kernel = build_kernel(raw["kernel"], dim)
    mu = build_mu(raw["mu"], dim)
    hk.check_bounds(mu)
    if kernel.dim != dim or mu.dim != dim:
        raise ConfigurationError("kernel, mu and grid dimensions differ")

    tolerance_section = dict(raw.get("tolerances", {}))
    check_keys(tolerance_section, TOLERANCE_KEYS, "tolerances")
    oracle_tolerance = _positive(tolerance_section.pop("oracle", ho.ORACLE_TOL),
                                 "tolerances.oracle")
    for key, value in tolerance_section.items():
        if key in COUNT_KEYS:
            _positive_int(value, f"tolerances.{key}")
        else:
            _positive(value, f"tolerances.{key}")
    tolerances = _settings(hc.Tolerances, tolerance_section, TOLERANCE_KEYS, "tolerances")

    evolution = _settings(EvolutionSettings, raw.get("evolution", {}), EVOLUTION_KEYS,
                          "evolution", sequences=("epsilons",))
    einstein = _settings(EinsteinSettings, raw.get("einstein", {}), EINSTEIN_KEYS, "einstein",
                         sequences=("steps",))
    for key in sorted(COUNT_KEYS & set(raw.get("evolution", {}))):
        _positive_int(raw["evolution"][key], f"evolution.{key}")
    # the cell grid of the evolve study is the n_cell lattice, not grid.n
    solve_grid = grid
    if study == "evolve":
        solve_grid = ht.TorusGrid(dim, evolution.n_cell)
        for cfg in evolution.configs():
            hv.check_reach(kernel, cfg)
    ht.storage_mode(solve_grid, mu, storage)
    if study == "einstein":
        _check_einstein(einstein, kernel, mu)
    if study == "oracle" and (dim != 1 or grid.n > ho.MAX_ORACLE_POINTS):
        raise ConfigurationError(f"the oracle study needs d=1 and N <= {ho.MAX_ORACLE_POINTS}")

    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigurationError("seed must be an integer")
    output_dir = out or raw.get("output_dir", "results")
    resolved = {
        "study": study, "output_dir": output_dir, "seed": seed,
        "kernel": dataclasses.asdict(kernel), "mu": dataclasses.asdict(mu),
        "grid": {"dim": dim, "n": grid.n, "storage": storage},
        "tolerances": {**dataclasses.asdict(tolerances), "oracle": oracle_tolerance},
        "evolution": dataclasses.asdict(evolution), "einstein": dataclasses.asdict(einstein),
    }
    return RunConfig(study=study, kernel=kernel, mu=mu, grid=grid, storage=storage,
                     tolerances=tolerances, oracle_tolerance=oracle_tolerance,
                     evolution=evolution, einstein=einstein, output_dir=output_dir, seed=seed,
                     resolved=resolved)


def load_config(path: str, study: str | None = None, out: str | None = None) -> RunConfig:
    """Reads and validates the JSON configuration at path."""
    try:
        with open(path, encoding="utf-8") as handle:
            raw = json.load(handle)
    except OSError as exc:
        raise ConfigurationError(f"cannot read configuration {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"configuration {path} is not valid JSON: {exc}") from exc
    return build_config(raw, study, out)
