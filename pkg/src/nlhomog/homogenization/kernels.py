"""Jump kernels a(z), periodic coefficients mu(x, y) and their perturbations.

Everything here is an immutable description plus pure evaluation functions.
Points are numpy arrays whose last axis has length ``dim``; in one
dimension plain scalars and 1-D arrays of positions are accepted as well.
"""

from __future__ import annotations

import functools
import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, NamedTuple

import numpy as np
from scipy import integrate, special

from nlhomog.errors import (InputError, QuadratureError, SpecificationError,
                            StepTooLargeError, UnknownFamilyError)

logger = logging.getLogger(__name__)

KERNEL_FAMILIES = ("gaussian", "shifted_gaussian", "anisotropic_gaussian",
                   "compact_bump", "composite_biased")
MU_FAMILIES = ("constant", "separable", "trig_product", "tabulated")
PERTURBATION_KINDS = ("cutoff", "dipole")

# Gaussian tails beyond this many standard deviations carry < 1e-14 mass.
TAIL_SIGMAS = 8.0
NONNEG_SAMPLES = 100_000


def as_points(z, dim: int) -> np.ndarray:
    """Returns ``z`` as a float array with a trailing axis of length dim."""
    pts = np.asarray(z, dtype=float)
    if dim == 1 and (pts.ndim == 0 or pts.shape[-1] != 1):
        pts = pts[..., None]
    if pts.shape[-1] != dim:
        raise InputError(f"points have trailing size {pts.shape[-1]}, expected {dim}")
    return pts


class Moments(NamedTuple):
    """Mass, first moment vector and second moment matrix of a kernel."""

    mass: float
    first: np.ndarray
    second: np.ndarray


@dataclass(frozen=True)
class PerturbationSpec:
    """Antisymmetric perturbation l.c(z) of a symmetric kernel a_sym.

    Attributes:
      base:
        The symmetric kernel a_sym.
      ell:
        The vector l, one entry per dimension.
      kind:
        "cutoff" for c_l(z) = z a_sym(z) w(|l||z|), "dipole" for
        c(z) = z g_w(z) with g_w a centred Gaussian of width ``width``.
      width:
        Width of the dipole profile; unused for the cutoff family.
    """

    base: "KernelSpec"
    ell: tuple[float, ...]
    kind: str = "cutoff"
    width: float | None = None

    @property
    def dim(self) -> int:
        return self.base.dim

    @property
    def is_cutoff_family(self) -> bool:
        return self.kind == "cutoff"

    def with_ell(self, ell) -> "PerturbationSpec":
        """Returns the same perturbation family at another l."""
        return replace(self, ell=tuple(float(v) for v in np.atleast_1d(ell)))


@dataclass(frozen=True)
class KernelSpec:
    """Analytic description of a jump density a(z) on R^d.

    Only the fields relevant to ``family`` are set; use the factory
    functions below rather than the constructor.
    """

    family: str
    dim: int = 1
    sigma: float | None = None
    shift: tuple[float, ...] | None = None
    covariance: tuple[tuple[float, ...], ...] | None = None
    radius: float | None = None
    perturbation: PerturbationSpec | None = None

    @property
    def mean(self) -> np.ndarray:
        if self.shift is None:
            return np.zeros(self.dim)
        return np.asarray(self.shift, dtype=float)

    @property
    def decay_radius(self) -> float:
        """Radius beyond which the mass and second moment are negligible."""
        offset = float(np.linalg.norm(self.mean))
        match self.family:
            case "gaussian" | "shifted_gaussian":
                return TAIL_SIGMAS * self.sigma + offset
            case "anisotropic_gaussian":
                spread = math.sqrt(float(np.linalg.eigvalsh(np.asarray(self.covariance)).max()))
                return TAIL_SIGMAS * spread + offset
            case "compact_bump":
                return self.radius + offset
            case "composite_biased":
                pert = self.perturbation
                reach = pert.base.decay_radius
                if pert.kind == "dipole":
                    reach = max(reach, TAIL_SIGMAS * pert.width)
                return reach
        raise UnknownFamilyError(f"unknown kernel family {self.family!r}")


def gaussian(sigma: float, dim: int = 1) -> KernelSpec:
    """Centred isotropic Gaussian density with standard deviation sigma."""
    _check_positive("sigma", sigma)
    return KernelSpec("gaussian", dim=dim, sigma=float(sigma))


def shifted_gaussian(sigma: float, shift) -> KernelSpec:
    """Isotropic Gaussian density centred at ``shift`` (a biased kernel)."""
    _check_positive("sigma", sigma)
    shift = tuple(float(v) for v in np.atleast_1d(shift))
    return KernelSpec("shifted_gaussian", dim=len(shift), sigma=float(sigma), shift=shift)


def anisotropic_gaussian(covariance, shift=None) -> KernelSpec:
    """Gaussian density with a general covariance matrix and optional shift."""
    cov = np.atleast_2d(np.asarray(covariance, dtype=float))
    dim = cov.shape[0]
    if cov.shape != (dim, dim) or not np.allclose(cov, cov.T):
        raise InputError("covariance must be a symmetric square matrix")
    if np.linalg.eigvalsh(cov).min() <= 0:
        raise InputError("covariance must be positive definite")
    if shift is not None:
        shift = tuple(float(v) for v in np.atleast_1d(shift))
        if len(shift) != dim:
            raise InputError("shift and covariance dimensions differ")
    return KernelSpec("anisotropic_gaussian", dim=dim, shift=shift,
                      covariance=tuple(tuple(row) for row in cov.tolist()))


def compact_bump(radius: float, dim: int = 1, shift=None) -> KernelSpec:
    """Normalized C-infinity bump supported in the ball of given radius."""
    _check_positive("radius", radius)
    if shift is not None:
        shift = tuple(float(v) for v in np.atleast_1d(shift))
        if len(shift) != dim:
            raise InputError("shift and dimension differ")
    return KernelSpec("compact_bump", dim=dim, radius=float(radius), shift=shift)


def composite_biased(perturbation: PerturbationSpec) -> KernelSpec:
    """Kernel a(z) = a_sym(z) + l.c(z) built from a perturbation."""
    return KernelSpec("composite_biased", dim=perturbation.dim, perturbation=perturbation)


def _check_positive(name: str, value: float) -> None:
    if not value > 0:
        raise InputError(f"{name} must be positive, got {value}")


def _gaussian_density(pts: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    dim = mean.shape[0]
    diff = pts - mean
    inv = np.linalg.inv(cov)
    quad = np.einsum("...i,ij,...j->...", diff, inv, diff)
    norm = 1.0 / math.sqrt((2.0 * math.pi) ** dim * np.linalg.det(cov))
    return norm * np.exp(-0.5 * quad)


@functools.lru_cache(maxsize=None)
def _bump_radial_integrals(dim: int) -> tuple[float, float]:
    """Integrals of exp(-1/(1-r^2)) r^(d-1) and r^(d+1) over [0, 1]."""
    def profile(r, power):
        return math.exp(-1.0 / (1.0 - r * r)) * r ** power if r < 1.0 else 0.0

    mass, _ = integrate.quad(profile, 0.0, 1.0, args=(dim - 1,), epsabs=1e-15, limit=200)
    second, _ = integrate.quad(profile, 0.0, 1.0, args=(dim + 1,), epsabs=1e-15, limit=200)
    return mass, second


def _sphere_area(dim: int) -> float:
    return 2.0 * math.pi ** (dim / 2.0) / special.gamma(dim / 2.0)


def _bump(spec: KernelSpec, pts: np.ndarray) -> np.ndarray:
    radial_mass, _ = _bump_radial_integrals(spec.dim)
    norm = 1.0 / (_sphere_area(spec.dim) * radial_mass * spec.radius ** spec.dim)
    u = np.sum((pts - spec.mean) ** 2, axis=-1) / spec.radius ** 2
    out = np.zeros(u.shape)
    inside = u < 1.0
    out[inside] = norm * np.exp(-1.0 / (1.0 - u[inside]))
    return out


def eval_kernel(spec: KernelSpec, z) -> np.ndarray:
    """Evaluates a(z).

    Args:
      spec:
        The kernel description.
      z:
        One point or an array of points in R^d.

    Returns:
      Non-negative array of kernel values, one per point.

    Raises:
      UnknownFamilyError: if the family is not known.
    """
    pts = as_points(z, spec.dim)
    match spec.family:
        case "gaussian" | "shifted_gaussian":
            return _gaussian_density(pts, spec.mean, spec.sigma ** 2 * np.eye(spec.dim))
        case "anisotropic_gaussian":
            return _gaussian_density(pts, spec.mean, np.asarray(spec.covariance))
        case "compact_bump":
            return _bump(spec, pts)
        case "composite_biased":
            pert = spec.perturbation
            c = eval_perturbation(pert, pts)
            return eval_kernel(pert.base, pts) + c @ np.asarray(pert.ell)
    raise UnknownFamilyError(f"unknown kernel family {spec.family!r}")


def cutoff_profile(s) -> np.ndarray:
    """Smooth monotone cutoff: 1 on [0, 1/4], 0 on [1/2, inf)."""
    t = np.clip(2.0 - 4.0 * np.asarray(s, dtype=float), 0.0, 1.0)
    e0 = np.exp(-1.0 / np.where(t > 0.0, t, 1.0)) * (t > 0.0)
    e1 = np.exp(-1.0 / np.where(t < 1.0, 1.0 - t, 1.0)) * (t < 1.0)
    return e0 / (e0 + e1)


def eval_perturbation(pert: PerturbationSpec, z) -> np.ndarray:
    """Evaluates the antisymmetric vector field c(z), shape (..., d)."""
    pts = as_points(z, pert.dim)
    match pert.kind:
        case "cutoff":
            norm_ell = float(np.linalg.norm(pert.ell))
            weight = cutoff_profile(norm_ell * np.linalg.norm(pts, axis=-1))
            profile = eval_kernel(pert.base, pts) * weight
        case "dipole":
            cov = pert.width ** 2 * np.eye(pert.dim)
            profile = _gaussian_density(pts, np.zeros(pert.dim), cov)
        case _:
            raise UnknownFamilyError(f"unknown perturbation kind {pert.kind!r}")
    return pts * profile[..., None]


def is_even_kernel(spec: KernelSpec, samples: int = 256, seed: int = 0) -> bool:
    """Spot-checks a(-z) = a(z) on random points inside the decay radius."""
    rng = np.random.default_rng(seed)
    radius = spec.decay_radius
    pts = rng.uniform(-radius, radius, size=(samples, spec.dim))
    plus, minus = eval_kernel(spec, pts), eval_kernel(spec, -pts)
    scale = max(float(np.abs(plus).max()), 1e-300)
    return bool(np.abs(plus - minus).max() <= 1e-12 * scale)


def make_cutoff_perturbation(a_sym: KernelSpec, ell, seed: int = 0) -> PerturbationSpec:
    """Builds c_l(z) = z a_sym(z) w(|l||z|) for a symmetric kernel.

    Raises:
      InputError: if a_sym fails the symmetry spot check or l has the wrong
        dimension.
    """
    ell = tuple(float(v) for v in np.atleast_1d(ell))
    if len(ell) != a_sym.dim:
        raise InputError(f"ell has {len(ell)} entries, kernel dimension is {a_sym.dim}")
    if not is_even_kernel(a_sym, seed=seed):
        raise InputError("the cutoff family needs a symmetric kernel a_sym(-z) = a_sym(z)")
    return PerturbationSpec(base=a_sym, ell=ell, kind="cutoff")


def make_dipole_perturbation(a_sym: KernelSpec, ell, width: float,
                             seed: int = 0) -> PerturbationSpec:
    """Builds the general antisymmetric family c(z) = z g_width(z)."""
    _check_positive("width", width)
    pert = make_cutoff_perturbation(a_sym, ell, seed=seed)
    return replace(pert, kind="dipole", width=float(width))


def check_nonnegative(spec: KernelSpec, samples: int = NONNEG_SAMPLES, seed: int = 0) -> float:
    """Samples a(z) inside the decay radius and returns the minimum.

    Raises:
      StepTooLargeError: if a negative value is found.
    """
    rng = np.random.default_rng(seed)
    radius = spec.decay_radius
    pts = rng.uniform(-radius, radius, size=(samples, spec.dim))
    lowest = float(eval_kernel(spec, pts).min())
    if lowest < 0.0:
        raise StepTooLargeError(f"kernel takes the negative value {lowest:.3e}; reduce |ell|")
    return lowest


def _adaptive_integral(func: Callable, radius: float, dim: int, tol: float) -> float:
    """Integrates func over the box [-radius, radius]^d to absolute tol."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        if dim == 1:
            value, err = integrate.quad(func, -radius, radius, epsabs=tol, epsrel=0.0,
                                        limit=500, points=(0.0,))
        else:
            value, err = integrate.nquad(func, [(-radius, radius)] * dim,
                                         opts={"epsabs": tol, "epsrel": 0.0, "limit": 200})
    if not err <= tol:
        raise QuadratureError(f"kernel moment quadrature reached only {err:.2e}",
                              residual=err, tolerance=tol)
    return value


@functools.lru_cache(maxsize=64)
def kernel_moments(spec: KernelSpec, tol: float = 1e-12) -> Moments:
    """Mass a_1, first moment m_1 and second moment M_2 of a kernel.

    Closed forms are used for the Gaussian families and for the bump up to a
    one-dimensional radial integral; the composite family is integrated
    adaptively over the decay box.

    Raises:
      QuadratureError: if the adaptive quadrature misses ``tol``.
    """
    dim = spec.dim
    mean = spec.mean
    match spec.family:
        case "gaussian" | "shifted_gaussian":
            cov = spec.sigma ** 2 * np.eye(dim)
            return Moments(1.0, mean.copy(), cov + np.outer(mean, mean))
        case "anisotropic_gaussian":
            cov = np.asarray(spec.covariance, dtype=float)
            return Moments(1.0, mean.copy(), cov + np.outer(mean, mean))
        case "compact_bump":
            radial_mass, radial_second = _bump_radial_integrals(dim)
            # isotropic, each axis carries 1/d of E|z - m|^2
            spread = spec.radius ** 2 * radial_second / (dim * radial_mass)
            return Moments(1.0, mean.copy(), spread * np.eye(dim) + np.outer(mean, mean))
        case "composite_biased":
            return _quadrature_moments(spec, tol)
    raise UnknownFamilyError(f"unknown kernel family {spec.family!r}")


def _quadrature_moments(spec: KernelSpec, tol: float) -> Moments:
    dim = spec.dim
    radius = spec.decay_radius

    def weighted(powers):
        def integrand(*z):
            value = float(eval_kernel(spec, np.asarray(z)))
            for axis in powers:
                value *= z[axis]
            return value
        return _adaptive_integral(integrand, radius, dim, tol)

    mass = weighted(())
    first = np.array([weighted((i,)) for i in range(dim)])
    second = np.empty((dim, dim))
    for i in range(dim):
        for j in range(i, dim):
            second[i, j] = second[j, i] = weighted((i, j))
    return Moments(mass, first, second)


@dataclass(frozen=True)
class CoefficientSpec:
    """The periodic rate modulation mu(x, y) with bounds alpha1 <= mu <= alpha2.

    Families:
      constant:      mu = scale
      separable:     mu = scale * t(x; amplitude, phase_x) * t(y; nu_amplitude, phase_y)
      trig_product:  mu = scale * (1 + amplitude * C(x - phase_x) * C(y - phase_y))
      tabulated:     mu = table[cell(x), cell(y)], piecewise constant

    where t(x; A, p) = 1 + A * C(x - p) and C(x) = prod_i cos(2 pi x_i).
    """

    family: str
    dim: int = 1
    scale: float = 1.0
    amplitude: float = 0.0
    nu_amplitude: float = 0.0
    phase_x: float = 0.0
    phase_y: float = 0.0
    table: np.ndarray | None = field(default=None, compare=False, repr=False)
    alpha1: float = 0.0
    alpha2: float = 0.0

    def scaled(self, factor: float) -> "CoefficientSpec":
        """Returns the coefficient factor * mu with scaled bounds."""
        _check_positive("factor", factor)
        table = None if self.table is None else self.table * factor
        return replace(self, scale=self.scale * factor, table=table,
                       alpha1=self.alpha1 * factor, alpha2=self.alpha2 * factor)


def _natural_bounds(spec: CoefficientSpec) -> tuple[float, float]:
    s = spec.scale
    match spec.family:
        case "constant":
            return s, s
        case "separable":
            la, na = abs(spec.amplitude), abs(spec.nu_amplitude)
            return s * (1 - la) * (1 - na), s * (1 + la) * (1 + na)
        case "trig_product":
            amp = abs(spec.amplitude)
            return s * (1 - amp), s * (1 + amp)
        case "tabulated":
            return float(spec.table.min()), float(spec.table.max())
    raise UnknownFamilyError(f"unknown coefficient family {spec.family!r}")


def _finish(spec: CoefficientSpec, alpha1, alpha2) -> CoefficientSpec:
    low, high = _natural_bounds(spec)
    alpha1 = low if alpha1 is None else float(alpha1)
    alpha2 = high if alpha2 is None else float(alpha2)
    if not 0.0 < alpha1 <= alpha2:
        raise SpecificationError(f"need 0 < alpha1 <= alpha2, got {alpha1}, {alpha2}")
    return replace(spec, alpha1=alpha1, alpha2=alpha2)


def constant_mu(value: float = 1.0, dim: int = 1, alpha1=None, alpha2=None) -> CoefficientSpec:
    """mu(x, y) = value."""
    return _finish(CoefficientSpec("constant", dim=dim, scale=float(value)), alpha1, alpha2)


def separable_mu(lam_amplitude: float, nu_amplitude: float, dim: int = 1,
                 phase_x: float = 0.0, phase_y: float = 0.0, scale: float = 1.0,
                 alpha1=None, alpha2=None) -> CoefficientSpec:
    """mu(x, y) = lambda(x) nu(y) with trigonometric factors."""
    if max(abs(lam_amplitude), abs(nu_amplitude)) >= 1.0:
        raise SpecificationError("separable amplitudes must be below 1 in modulus")
    spec = CoefficientSpec("separable", dim=dim, scale=float(scale),
                           amplitude=float(lam_amplitude),
                           nu_amplitude=float(nu_amplitude), phase_x=float(phase_x),
                           phase_y=float(phase_y))
    return _finish(spec, alpha1, alpha2)


def trig_product_mu(amplitude: float = 0.5, dim: int = 1, phase_x: float = 0.0,
                    phase_y: float = 0.0, scale: float = 1.0,
                    alpha1=None, alpha2=None) -> CoefficientSpec:
    """mu(x, y) = scale (1 + A prod cos 2pi(x_i - px) cos 2pi(y_i - py))."""
    if abs(amplitude) >= 1.0:
        raise SpecificationError("trig_product amplitude must be below 1 in modulus")
    spec = CoefficientSpec("trig_product", dim=dim, scale=float(scale), amplitude=float(amplitude),
                           phase_x=float(phase_x), phase_y=float(phase_y))
    return _finish(spec, alpha1, alpha2)


def tabulated_mu(table, dim: int = 1, alpha1=None, alpha2=None) -> CoefficientSpec:
    """Piecewise constant mu given on an n^d x n^d table of cells."""
    table = np.asarray(table, dtype=float)
    n = table.shape[0]
    if table.shape != (n,) * (2 * dim):
        raise InputError(f"table must have shape {(n,) * (2 * dim)}, got {table.shape}")
    return _finish(CoefficientSpec("tabulated", dim=dim, table=table.copy()), alpha1, alpha2)


def _cos_product(pts: np.ndarray, phase: float) -> np.ndarray:
    return np.prod(np.cos(2.0 * np.pi * (pts - phase)), axis=-1)


def _raw_mu(spec: CoefficientSpec, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    match spec.family:
        case "constant":
            return np.full(np.broadcast_shapes(x.shape[:-1], y.shape[:-1]), spec.scale)
        case "separable":
            lam = 1.0 + spec.amplitude * _cos_product(x, spec.phase_x)
            nu = 1.0 + spec.nu_amplitude * _cos_product(y, spec.phase_y)
            return spec.scale * lam * nu
        case "trig_product":
            cx, cy = _cos_product(x, spec.phase_x), _cos_product(y, spec.phase_y)
            return spec.scale * (1.0 + spec.amplitude * (cx * cy))
        case "tabulated":
            n = spec.table.shape[0]
            ix = np.floor(x * n).astype(int) % n
            iy = np.floor(y * n).astype(int) % n
            index = tuple(np.moveaxis(ix, -1, 0)) + tuple(np.moveaxis(iy, -1, 0))
            return spec.table[index]
    raise UnknownFamilyError(f"unknown coefficient family {spec.family!r}")


def eval_mu(spec: CoefficientSpec, x, y) -> np.ndarray:
    """Evaluates mu(x, y) after reducing both arguments mod 1.

    Raises:
      SpecificationError: if a value leaves the declared [alpha1, alpha2].
    """
    x = np.mod(as_points(x, spec.dim), 1.0)
    y = np.mod(as_points(y, spec.dim), 1.0)
    values = _raw_mu(spec, x, y)
    slack = 1e-12 * spec.alpha2
    if values.size and (values.min() < spec.alpha1 - slack or values.max() > spec.alpha2 + slack):
        raise SpecificationError(
            f"mu ranges over [{values.min():.6g}, {values.max():.6g}], outside the declared "
            f"bounds [{spec.alpha1:.6g}, {spec.alpha2:.6g}]")
    return values


def separable_terms(spec: CoefficientSpec) -> list[tuple[Callable, Callable]] | None:
    """Decomposes mu(x, y) = sum_t lambda_t(x) nu_t(y), or None if impossible."""
    def ones(pts):
        return np.ones(pts.shape[:-1])

    s = spec.scale
    match spec.family:
        case "constant":
            return [(lambda pts: s * ones(pts), ones)]
        case "separable":
            return [(lambda pts: s * (1.0 + spec.amplitude * _cos_product(pts, spec.phase_x)),
                     lambda pts: 1.0 + spec.nu_amplitude * _cos_product(pts, spec.phase_y))]
        case "trig_product":
            return [(lambda pts: s * ones(pts), ones),
                    (lambda pts: s * spec.amplitude * _cos_product(pts, spec.phase_x),
                     lambda pts: _cos_product(pts, spec.phase_y))]
    return None


def check_bounds(spec: CoefficientSpec, samples: int = NONNEG_SAMPLES, seed: int = 0) -> None:
    """Sweeps random (x, y) pairs through eval_mu so inconsistent bounds fail early.

    Raises:
      SpecificationError: if a sampled value leaves [alpha1, alpha2].
    """
    rng = np.random.default_rng(seed)
    eval_mu(spec, rng.random((samples, spec.dim)), rng.random((samples, spec.dim)))


def is_symmetric_mu(spec: CoefficientSpec, samples: int = 512, seed: int = 0) -> bool:
    """Spot-checks mu(x, y) = mu(y, x) on random pairs."""
    rng = np.random.default_rng(seed)
    x = rng.random((samples, spec.dim))
    y = rng.random((samples, spec.dim))
    gap = np.abs(eval_mu(spec, x, y) - eval_mu(spec, y, x)).max()
    return bool(gap <= 1e-13 * spec.alpha2)
