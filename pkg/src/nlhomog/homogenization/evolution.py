"""Time integration of the rescaled evolution and the moving-frame comparison.

The slow variable lives on the unit torus, discretized with P = M n_cell
points per dimension where M = 1/epsilon. Fast-scale offsets z_m = m / n_cell
then correspond to exactly m fine grid steps, so the generator is a sum of
circular shifts with coefficients that repeat with period n_cell.
Fields are numpy arrays of shape (P,) * d.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import fft

from nlhomog.errors import ConfigurationError, InputError, InstabilityError
from nlhomog.homogenization import cell_problems as hc
from nlhomog.homogenization import kernels as hk

logger = logging.getLogger(__name__)

DATUM_KINDS = ("harmonic", "gaussian_bump")
MIN_CELL_RESOLUTION = 16


@dataclass(frozen=True)
class EvolutionConfig:
    """Parameters of one evolution run.

    Attributes:
      epsilon:
        Scale parameter; 1/epsilon must be a positive integer M.
      horizon:
        Final time T.
      n_cell:
        Fine grid points per periodicity cell and dimension.
      initial_datum:
        "harmonic" (cos(2 pi k0 sum x_i)) or "gaussian_bump" (periodized
        Gaussian of the given width centred at 1/2).
      k0:
        Wave number of the harmonic datum.
      width:
        Width of the Gaussian bump.
      dt_safety:
        Fraction in (0, 1] of the explicit stability step.
      snapshots:
        Number of equispaced snapshot times in [0, T].
    """

    epsilon: float
    horizon: float
    n_cell: int = 32
    initial_datum: str = "harmonic"
    k0: int = 1
    width: float = 0.1
    dt_safety: float = 0.5
    snapshots: int = 33

    def __post_init__(self):
        if not self.epsilon > 0 or abs(1.0 / self.epsilon - round(1.0 / self.epsilon)) > 1e-9:
            raise ConfigurationError(f"1/epsilon must be a positive integer, got {self.epsilon}")
        if not self.horizon > 0:
            raise ConfigurationError("horizon must be positive")
        if self.n_cell < MIN_CELL_RESOLUTION:
            raise ConfigurationError(f"n_cell must be at least {MIN_CELL_RESOLUTION}")
        if self.initial_datum not in DATUM_KINDS:
            raise ConfigurationError(f"unknown initial datum {self.initial_datum!r}")
        if not 0.0 < self.dt_safety <= 1.0:
            raise ConfigurationError("dt_safety must lie in (0, 1]")
        if self.snapshots < 2:
            raise ConfigurationError("need at least two snapshots")

    @property
    def inverse_epsilon(self) -> int:
        return int(round(1.0 / self.epsilon))

    @property
    def fine_points(self) -> int:
        return self.inverse_epsilon * self.n_cell

    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.snapshots)


def kernel_reach(kernel: hk.KernelSpec, cfg: EvolutionConfig) -> float:
    """Largest kept kernel offset, in units of the slow torus."""
    return math.floor(kernel.decay_radius * cfg.n_cell) / cfg.fine_points


def check_reach(kernel: hk.KernelSpec, cfg: EvolutionConfig) -> float:
    """Returns the kernel reach for cfg.

    Raises:
      ConfigurationError: if the reach exceeds half the slow torus, where
        shifted copies of the kernel would overlap.
    """
    reach = kernel_reach(kernel, cfg)
    if reach > 0.5:
        raise ConfigurationError(
            f"kernel reach {reach:.3f} exceeds half the slow torus; "
            f"epsilon={cfg.epsilon} is too large for this kernel")
    return reach


class FineGenerator:
    """The generator L^eps on the fine slow-variable grid.

    Attributes:
      offsets:
        Integer offsets m with nonzero kernel weight, shape (n_offsets, d).
      coefficients:
        eps^-2 n_cell^-d a(z_m) mu(x/eps, x/eps - z_m) on the fine grid,
        shape (n_offsets, P, ..., P).
      reach:
        Largest offset in units of the slow torus.
    """

    def __init__(self, kernel: hk.KernelSpec, mu: hk.CoefficientSpec, cfg: EvolutionConfig):
        dim = kernel.dim
        n = cfg.n_cell
        self.cfg = cfg
        self.dim = dim
        self.kernel = kernel
        self.mu = mu
        self.reach = check_reach(kernel, cfg)
        radius = math.floor(kernel.decay_radius * n)
        span = np.arange(-radius, radius + 1)
        offsets = np.stack(np.meshgrid(*[span] * dim, indexing="ij"), axis=-1).reshape(-1, dim)
        weights = hk.eval_kernel(kernel, offsets / n) / n ** dim
        keep = weights > 0.0
        self.offsets = offsets[keep]
        self.weights = weights[keep]

        cell_index = np.stack(np.meshgrid(*[np.arange(n)] * dim, indexing="ij"), axis=-1)
        scale = cfg.inverse_epsilon ** 2
        tiles = (cfg.inverse_epsilon,) * dim
        coefficients = []
        for m, w in zip(self.offsets, self.weights):
            source = (cell_index - m) % n
            mu_vals = hk.eval_mu(mu, cell_index / n, source / n)
            coefficients.append(np.tile(scale * w * mu_vals, tiles))
        self.coefficients = np.stack(coefficients)
        self._axes = tuple(range(dim))
        logger.info("fine generator: %d offsets on %d points per dimension, reach %.3f",
                    len(self.offsets), cfg.fine_points, self.reach)

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.cfg.fine_points,) * self.dim

    def apply(self, u: np.ndarray) -> np.ndarray:
        """Returns L^eps u; sum over m of C_m (u(x - eps z_m) - u(x))."""
        out = np.zeros_like(u)
        for m, c in zip(self.offsets, self.coefficients):
            out += c * (np.roll(u, tuple(m), axis=self._axes) - u)
        return out

    def constant_symbol(self, k) -> complex:
        """Fourier multiplier of L^eps on e^{2 pi i k.x} for constant mu."""
        if self.mu.family != "constant":
            raise InputError("the Fourier symbol only exists for constant mu")
        k = np.atleast_1d(np.asarray(k, dtype=float))
        phase = np.exp(-2j * np.pi * (self.offsets @ k) / self.cfg.fine_points)
        scale = self.cfg.inverse_epsilon ** 2 * self.mu.scale
        return complex(scale * np.sum(self.weights * (phase - 1.0)))

    def stable_step(self) -> float:
        """dt_safety eps^2 / (2 a_1 alpha_2)."""
        mass = hk.kernel_moments(self.kernel).mass
        return self.cfg.dt_safety * self.cfg.epsilon ** 2 / (2.0 * mass * self.mu.alpha2)


def apply_Leps(u: np.ndarray, generator: FineGenerator) -> np.ndarray:
    """Applies the rescaled generator L^eps to a fine grid field."""
    return generator.apply(u)


def fine_nodes(cfg: EvolutionConfig, dim: int) -> np.ndarray:
    """Fine grid coordinates, shape (P, ..., P, d)."""
    axis = np.arange(cfg.fine_points) / cfg.fine_points
    return np.stack(np.meshgrid(*[axis] * dim, indexing="ij"), axis=-1)


def initial_datum(cfg: EvolutionConfig, dim: int) -> np.ndarray:
    """Samples the configured initial datum phi on the fine grid."""
    x = fine_nodes(cfg, dim)
    match cfg.initial_datum:
        case "harmonic":
            return np.cos(2.0 * np.pi * cfg.k0 * x.sum(axis=-1))
        case "gaussian_bump":
            out = np.zeros(x.shape[:-1])
            span = np.arange(-2, 3)
            for k in np.stack(np.meshgrid(*[span] * dim, indexing="ij"), -1).reshape(-1, dim):
                out += np.exp(-np.sum((x - 0.5 + k) ** 2, axis=-1) / (2.0 * cfg.width ** 2))
            return out
    raise ConfigurationError(f"unknown initial datum {cfg.initial_datum!r}")


def cell_field_on_fine_grid(values: np.ndarray, cfg: EvolutionConfig, dim: int) -> np.ndarray:
    """Evaluates a cell field g at x / eps, i.e. tiles it M times per dimension."""
    shaped = values.reshape((cfg.n_cell,) * dim)
    return np.tile(shaped, (cfg.inverse_epsilon,) * dim)


def fine_quadrature(u: np.ndarray) -> float:
    """Rectangle rule on the fine grid of the unit torus."""
    return float(np.mean(u))


def _wavenumbers(shape: tuple[int, ...]) -> list[np.ndarray]:
    # integer wave numbers on the unit torus
    grids = np.meshgrid(*[fft.fftfreq(n, 1.0 / n) for n in shape], indexing="ij")
    return list(grids)


def spectral_shift(u: np.ndarray, displacement) -> np.ndarray:
    """Returns u(x + displacement) by a Fourier phase shift."""
    waves = _wavenumbers(u.shape)
    phase = sum(k * s for k, s in zip(waves, np.atleast_1d(displacement)))
    return np.real(fft.ifftn(fft.fftn(u) * np.exp(2j * np.pi * phase)))


def spectral_derivative(u: np.ndarray, *axes: int) -> np.ndarray:
    """Spectral partial derivative of u along the given axes."""
    waves = _wavenumbers(u.shape)
    factor = np.ones(u.shape, dtype=complex)
    for axis in axes:
        factor = factor * (2j * np.pi * waves[axis])
    return np.real(fft.ifftn(fft.fftn(u) * factor))


def exact_u0(phi: np.ndarray, theta: np.ndarray, b, t: float, frame: str = "static",
             epsilon: float | None = None) -> np.ndarray:
    """Spectral solution of du/dt = Theta : grad grad u with u(0) = phi.

    Args:
      phi:
        Initial datum on a uniform periodic grid.
      theta:
        Effective matrix; only its symmetric part acts.
      b:
        Effective drift, used by the moving frame.
      t:
        Time.
      frame:
        "static" for u0(x, t) or "moving" for u0(x - b t / eps, t).
      epsilon:
        Scale parameter, required by the moving frame.
    """
    theta_sym = 0.5 * (np.asarray(theta) + np.asarray(theta).T)
    waves = _wavenumbers(phi.shape)
    quadratic = sum(theta_sym[i, j] * waves[i] * waves[j]
                    for i in range(phi.ndim) for j in range(phi.ndim))
    multiplier = np.exp(-4.0 * np.pi ** 2 * t * quadratic).astype(complex)
    if frame == "moving":
        if epsilon is None:
            raise InputError("the moving frame needs epsilon")
        # translation by b t / eps is a phase factor
        shift = sum(k * bk for k, bk in zip(waves, np.atleast_1d(b))) * t / epsilon
        multiplier *= np.exp(-2j * np.pi * shift)
    elif frame != "static":
        raise InputError(f"unknown frame {frame!r}")
    return np.real(fft.ifftn(fft.fftn(phi) * multiplier))


@dataclass
class EvolutionRun:
    """Snapshots of u^eps together with the conserved and dissipated quantities."""

    times: np.ndarray
    states: list[np.ndarray]
    weighted_mass: np.ndarray
    weighted_energy: np.ndarray
    max_energy_increase: float
    steps: int
    dt: float


def _rk4_step(generator: FineGenerator, u: np.ndarray, dt: float) -> np.ndarray:
    k1 = generator.apply(u)
    k2 = generator.apply(u + 0.5 * dt * k1)
    k3 = generator.apply(u + 0.5 * dt * k2)
    k4 = generator.apply(u + dt * k3)
    return u + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def evolve_u_eps(cfg: EvolutionConfig, generator: FineGenerator, phi: np.ndarray,
                 v0_fine: np.ndarray) -> EvolutionRun:
    """Integrates du/dt = L^eps u with classical RK4 up to the horizon.

    The step is the stability step, shortened so that every snapshot time is
    hit exactly.

    Raises:
      InstabilityError: if the state stops being finite.
    """
    times = cfg.times()
    dt_max = generator.stable_step()
    u = phi.copy()
    states = [u.copy()]
    mass = [fine_quadrature(v0_fine * u)]
    energy = [fine_quadrature(v0_fine * u * u)]
    worst_increase = -np.inf
    steps = 0
    dt = dt_max
    for start, stop in zip(times[:-1], times[1:]):
        substeps = max(1, math.ceil((stop - start) / dt_max - 1e-12))
        # equal substeps so the snapshot time is hit exactly
        dt = (stop - start) / substeps
        previous = energy[-1]
        for _ in range(substeps):
            u = _rk4_step(generator, u, dt)
            current = fine_quadrature(v0_fine * u * u)
            worst_increase = max(worst_increase, current - previous)
            previous = current
        steps += substeps
        if not np.all(np.isfinite(u)):
            raise InstabilityError(f"non-finite state at t={stop:.4g}; reduce dt_safety",
                                   residual=math.inf)
        states.append(u.copy())
        mass.append(fine_quadrature(v0_fine * u))
        energy.append(previous)
    logger.info("evolved eps=1/%d to T=%g in %d RK4 steps", cfg.inverse_epsilon,
                cfg.horizon, steps)
    return EvolutionRun(times, states, np.array(mass), np.array(energy),
                        float(worst_increase), steps, dt)


def build_ansatz(u0_moving: np.ndarray, cell: hc.CellSolution, cfg: EvolutionConfig) -> np.ndarray:
    """Two-scale ansatz u0 + eps kappa1(x/eps).grad u0 + eps^2 kappa2(x/eps):grad grad u0.

    Args:
      u0_moving:
        The moving-frame effective solution u0(x - b t / eps, t) on the fine grid.
      cell:
        Cell solution with both correctors, on a grid with N = n_cell.
      cfg:
        The evolution configuration.
    """
    dim = u0_moving.ndim
    eps = cfg.epsilon
    w = u0_moving.copy()
    for i in range(dim):
        kappa = cell_field_on_fine_grid(cell.kappa1[i], cfg, dim)
        w += eps * kappa * spectral_derivative(u0_moving, i)
    for i in range(dim):
        for j in range(dim):
            kappa = cell_field_on_fine_grid(cell.kappa2[i, j], cfg, dim)
            w += eps ** 2 * kappa * spectral_derivative(u0_moving, i, j)
    return w


def l2_norm(u: np.ndarray) -> float:
    """L2 norm over the unit torus."""
    return math.sqrt(fine_quadrature(u * u))


@dataclass
class EvolutionReport:
    """Moving-frame error trace and diagnostics of one epsilon.

    Attributes:
      epsilon:
        The scale parameter.
      times:
        Snapshot times.
      l2_error:
        L2 norm of u^eps(x + b t / eps, t) - u0(x, t) at each snapshot.
      weighted_mass:
        Quadrature of v0(x / eps) u^eps at each snapshot.
      weighted_energy:
        Quadrature of v0(x / eps) (u^eps)^2 at each snapshot.
      sup_error:
        Maximum of l2_error.
      mass_drift:
        Largest mass change relative to the weighted L1 norm of the datum.
      max_energy_increase:
        Largest energy increase over a single step (negative if dissipative).
      frame_gap:
        Largest difference between the forward-shift and backward-shift errors.
      comparison_excess:
        How far u^eps left [min phi, max phi] (0 if it never did).
      plain_final_error, ansatz_final_error:
        |u^eps - u0(shifted)| and |u^eps - w^eps| at the final snapshot.
      mode_amplitudes:
        |Fourier coefficient| of the datum's wave vector at each snapshot.
      wavevector:
        That wave vector.
      steps, dt:
        Step count and last step length.
    """

    epsilon: float
    times: np.ndarray
    l2_error: np.ndarray
    weighted_mass: np.ndarray
    weighted_energy: np.ndarray
    sup_error: float
    mass_drift: float
    max_energy_increase: float
    frame_gap: float
    comparison_excess: float
    plain_final_error: float
    ansatz_final_error: float
    mode_amplitudes: np.ndarray
    wavevector: tuple[int, ...]
    steps: int
    dt: float
    extras: dict = field(default_factory=dict)


def _mode_amplitude(u: np.ndarray, wavevector) -> float:
    index = tuple(int(k) % n for k, n in zip(wavevector, u.shape))
    return float(abs(fft.fftn(u)[index]) / u.size)


def moving_frame_error(cfg: EvolutionConfig, cell: hc.CellSolution, kernel: hk.KernelSpec,
                       mu: hk.CoefficientSpec) -> EvolutionReport:
    """Simulates u^eps and compares it with the effective solution in the moving frame.

    Raises:
      ConfigurationError: if the cell grid does not match n_cell or the kernel
        reach is too large for epsilon.
      InstabilityError: if time stepping blows up.
    """
    dim = kernel.dim
    if cell.grid.n != cfg.n_cell or cell.grid.dim != dim:
        raise ConfigurationError(
            f"cell solution lives on N={cell.grid.n}, evolution needs N=n_cell={cfg.n_cell}")
    generator = FineGenerator(kernel, mu, cfg)
    phi = initial_datum(cfg, dim)
    v0_fine = cell_field_on_fine_grid(cell.v0, cfg, dim)
    run = evolve_u_eps(cfg, generator, phi, v0_fine)

    errors, gaps, amplitudes = [], [], []
    wavevector = (cfg.k0,) * dim
    for t, u in zip(run.times, run.states):
        # follow u along the drift, or move u0 with it; the two must agree
        displacement = cell.b * t / cfg.epsilon
        forward = l2_norm(spectral_shift(u, displacement) - exact_u0(phi, cell.theta, cell.b, t))
        backward = l2_norm(u - exact_u0(phi, cell.theta, cell.b, t, "moving", cfg.epsilon))
        errors.append(forward)
        gaps.append(abs(forward - backward))
        amplitudes.append(_mode_amplitude(u, wavevector))

    t_final = run.times[-1]
    u_final = run.states[-1]
    u0_final = exact_u0(phi, cell.theta, cell.b, t_final, "moving", cfg.epsilon)
    ansatz = build_ansatz(u0_final, cell, cfg)
    low, high = phi.min(), phi.max()
    # u stays within [min phi, max phi] for a Markov generator
    excess = max(max(float(u.max() - high), float(low - u.min()), 0.0) for u in run.states)
    mass_scale = max(fine_quadrature(v0_fine * np.abs(phi)), 1e-300)
    errors = np.array(errors)
    report = EvolutionReport(
        epsilon=cfg.epsilon, times=run.times, l2_error=errors,
        weighted_mass=run.weighted_mass, weighted_energy=run.weighted_energy,
        sup_error=float(errors.max()),
        mass_drift=float(np.abs(run.weighted_mass - run.weighted_mass[0]).max() / mass_scale),
        max_energy_increase=run.max_energy_increase, frame_gap=float(max(gaps)),
        comparison_excess=excess, plain_final_error=l2_norm(u_final - u0_final),
        ansatz_final_error=l2_norm(u_final - ansatz), mode_amplitudes=np.array(amplitudes),
        wavevector=wavevector, steps=run.steps, dt=run.dt)
    logger.info("eps=1/%d: sup error %.3e, mass drift %.2e, max energy step %.2e",
                cfg.inverse_epsilon, report.sup_error, report.mass_drift,
                report.max_energy_increase)
    return report


def mode_decay_diffusivity(report: EvolutionReport) -> float:
    """Diffusivity k.Theta k / |k|^2 seen by the simulated datum mode.

    Fits the log amplitude of the datum's Fourier mode over the second half of
    the horizon.
    """
    late = report.times >= 0.5 * report.times[-1]
    slope, _ = np.polyfit(report.times[late], np.log(report.mode_amplitudes[late]), 1)
    k = np.asarray(report.wavevector, dtype=float)
    return float(-slope / (4.0 * np.pi ** 2 * (k @ k)))


@dataclass(frozen=True)
class ConvergenceSummary:
    """Sup errors over an epsilon ladder ordered by decreasing epsilon."""

    epsilons: tuple[float, ...]
    sup_errors: tuple[float, ...]
    ratios: tuple[float, ...]
    monotone: bool


def convergence_study(configs: list[EvolutionConfig], cell: hc.CellSolution,
                      kernel: hk.KernelSpec, mu: hk.CoefficientSpec,
                      max_workers: int | None = None) -> tuple[list[EvolutionReport],
                                                               ConvergenceSummary]:
    """Runs moving_frame_error for every epsilon, concurrently if asked."""
    configs = sorted(configs, key=lambda c: -c.epsilon)

    def run(cfg):
        return moving_frame_error(cfg, cell, kernel, mu)

    if max_workers and max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as executor:
            reports = list(executor.map(run, configs))
    else:
        reports = [run(cfg) for cfg in configs]
    errors = [r.sup_error for r in reports]
    ratios = tuple(b / a for a, b in zip(errors[:-1], errors[1:]))
    summary = ConvergenceSummary(tuple(c.epsilon for c in configs), tuple(errors), ratios,
                                 all(r < 1.0 for r in ratios))
    return reports, summary
