"""Linear response of the effective drift to small antisymmetric kernel perturbations.

For a(z) = a_sym(z) + l.c(z) with a_sym even and mu symmetric, the drift
b(l) vanishes at l = 0 and its Jacobian is computed two ways: from the
linearized ground state phi0 and by central differences of the full cell
pipeline. For the cutoff family both should equal 2 Theta_sym.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from nlhomog.errors import InputError, KernelSymmetryError, UnknownFamilyError
from nlhomog.homogenization import cell_problems as hc
from nlhomog.homogenization import kernels as hk
from nlhomog.homogenization import torus as ht

logger = logging.getLogger(__name__)

DEFAULT_STEPS = (1e-2, 5e-3, 2.5e-3)


def _perturbation_operator(pert: hk.PerturbationSpec, component: int, alpha,
                           mu: hk.CoefficientSpec, grid: ht.TorusGrid,
                           tolerances: hc.Tolerances, storage: str) -> ht.KernelOperator:
    """Operator of the periodized z^alpha c^component(z) against mu."""
    periodized = ht.periodize_function(
        lambda z: hk.eval_perturbation(pert, z)[..., component], alpha, grid,
        hk.composite_biased(pert).decay_radius, tolerances.periodization, tolerances.max_shells)
    return ht.KernelOperator(periodized, mu, storage=storage)


def _check_symmetric_inputs(a_sym: hk.KernelSpec, mu: hk.CoefficientSpec) -> None:
    if not hk.is_even_kernel(a_sym):
        raise InputError("the linear response study needs an even kernel a_sym")
    if not hk.is_symmetric_mu(mu):
        raise InputError("the linear response study needs a symmetric mu(x, y) = mu(y, x)")


def solve_phi0(a_sym: hk.KernelSpec, pert: hk.PerturbationSpec, mu: hk.CoefficientSpec,
               grid: ht.TorusGrid, tolerances: hc.Tolerances = hc.Tolerances(),
               storage: str = "auto") -> tuple[np.ndarray, float]:
    """Solves A_sym phi0^i = 2 (row sums of c^i against mu) with zero mean.

    Returns:
      The pair (phi0 of shape (d, N^d), largest |quadrature| of a right-hand
      side).

    Raises:
      InputError: if a_sym is not even or mu is not symmetric.
      KernelSymmetryError: if a right-hand side does not integrate to zero.
    """
    _check_symmetric_inputs(a_sym, mu)
    ops = hc.build_operators(a_sym, mu, grid, tolerances, storage)
    zero = (0,) * grid.dim
    # antisymmetric source of the linearized ground state equation
    rhs = [2.0 * _perturbation_operator(pert, i, zero, mu, grid, tolerances, storage).row_sums()
           for i in range(grid.dim)]
    solvability = max(abs(ht.quadrature(r, grid)) for r in rhs)
    if solvability > tolerances.solvability:
        raise KernelSymmetryError(
            f"antisymmetric right-hand side integrates to {solvability:.2e}; "
            "c is not odd or mu is not symmetric")
    # A_sym is self-adjoint, so its null vector is the constant
    ones = grid.ones()
    phi0 = [hc.solve_gauged(ops, r, ones, tolerances.corrector, tolerances.solvability,
                            tolerances.krylov_max_iter)[0] for r in rhs]
    return np.stack(phi0), solvability


def drift_linearization(a_sym: hk.KernelSpec, pert: hk.PerturbationSpec,
                        mu: hk.CoefficientSpec, grid: ht.TorusGrid, phi0: np.ndarray,
                        tolerances: hc.Tolerances = hc.Tolerances(),
                        storage: str = "auto") -> np.ndarray:
    """Linearized drift Jacobian B_lin^{ij}.

    B_lin^{ij} is the torus integral of the z^i c^j row sums plus the
    integral of f_sym^i phi0^j, where f_sym^i are the z^i a_sym row sums.
    """
    dim = grid.dim
    weighted = hc.weighted_operators(a_sym, mu, grid, tolerances, storage, with_second=False)
    b_lin = np.empty((dim, dim))
    for i in range(dim):
        f_sym = weighted.first[i].row_sums()
        alpha = ht.weight_exponents(dim, i)
        for j in range(dim):
            moment = _perturbation_operator(pert, j, alpha, mu, grid, tolerances, storage)
            b_lin[i, j] = (ht.quadrature(moment.row_sums(), grid)
                           + ht.quadrature(f_sym * phi0[j], grid))
    return b_lin


@dataclass
class FiniteDifferenceJacobian:
    """Central difference Jacobians of b(l) at several steps.

    Attributes:
      steps:
        Steps h in decreasing order.
      jacobians:
        Central difference matrix per step, shape (n_steps, d, d).
      richardson:
        Extrapolation of the two smallest steps.
      even_parts:
        max |b(h e_j) + b(-h e_j)| per step.
      order_ratio:
        |B(h1) - B(h2)| / |B(h2) - B(h3)| for the first three steps (about 4
        for a second order difference), NaN if undefined.
      ground_states:
        v0 at l = +h e_j per step and axis, shape (n_steps, d, N^d).
    """

    steps: tuple[float, ...]
    jacobians: np.ndarray
    richardson: np.ndarray
    even_parts: np.ndarray
    order_ratio: float
    ground_states: np.ndarray


def drift_finite_difference(a_sym: hk.KernelSpec, pert: hk.PerturbationSpec,
                            mu: hk.CoefficientSpec, grid: ht.TorusGrid,
                            steps=DEFAULT_STEPS, tolerances: hc.Tolerances = hc.Tolerances(),
                            storage: str = "auto",
                            max_workers: int | None = None) -> FiniteDifferenceJacobian:
    """Differentiates the drift of the full cell pipeline by central differences.

    Every evaluation periodizes a_sym + l.c afresh, solves its ground state
    and integrates its drift.

    Raises:
      StepTooLargeError: if a perturbed kernel takes negative values.
    """
    steps = tuple(sorted((float(h) for h in steps), reverse=True))
    dim = grid.dim
    points = [(h, j, sign) for h in steps for j in range(dim) for sign in (1.0, -1.0)]

    def evaluate(point):
        h, j, sign = point
        ell = np.zeros(dim)
        ell[j] = sign * h
        kernel = hk.composite_biased(pert.with_ell(ell))
        hk.check_nonnegative(kernel)
        return hc.cell_drift(kernel, mu, grid, tolerances, storage)

    if max_workers and max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as executor:
            results = dict(zip(points, executor.map(evaluate, points)))
    else:
        results = {point: evaluate(point) for point in points}

    jacobians = np.empty((len(steps), dim, dim))
    even_parts = np.empty(len(steps))
    ground_states = np.empty((len(steps), dim, grid.size))
    for s, h in enumerate(steps):
        even = 0.0
        for j in range(dim):
            (b_plus, v_plus), (b_minus, _) = results[(h, j, 1.0)], results[(h, j, -1.0)]
            jacobians[s, :, j] = (b_plus - b_minus) / (2.0 * h)
            even = max(even, float(np.abs(b_plus + b_minus).max()))
            ground_states[s, j] = v_plus
        even_parts[s] = even
        logger.info("central difference at h=%.3g: %s", h, jacobians[s].tolist())

    # the central difference error is O(h^2)
    if len(steps) >= 2:
        ratio = (steps[-2] / steps[-1]) ** 2
        richardson = (ratio * jacobians[-1] - jacobians[-2]) / (ratio - 1.0)
    else:
        richardson = jacobians[-1].copy()
    order_ratio = float("nan")
    if len(steps) >= 3:
        first = np.abs(jacobians[0] - jacobians[1]).max()
        second = np.abs(jacobians[1] - jacobians[2]).max()
        if second > 0.0:
            order_ratio = float(first / second)
    return FiniteDifferenceJacobian(steps, jacobians, richardson, even_parts, order_ratio,
                                    ground_states)


@dataclass
class EinsteinReport:
    """Both Jacobian routes compared with twice the symmetric effective matrix.

    Attributes:
      phi0:
        Linearized ground state, shape (d, N^d), zero mean per component.
      b_lin:
        Linearized drift Jacobian.
      b_fd:
        Richardson-extrapolated finite difference Jacobian.
      theta_sym:
        Effective matrix of the unperturbed problem (symmetric part).
      flux_sym:
        Flux matrix I of the unperturbed problem.
      deviations:
        Max-norm gaps keyed by lin_vs_theta, fd_vs_theta, lin_vs_fd and
        flux_vs_theta.
      fd:
        The finite difference record.
      identity_asserted:
        True for the cutoff family, the only one for which the drift
        Jacobian is known to equal 2 Theta_sym.
      diagnostics:
        Expansion and tail diagnostics, see :func:`einstein_check`.
    """

    phi0: np.ndarray
    b_lin: np.ndarray
    b_fd: np.ndarray
    theta_sym: np.ndarray
    flux_sym: np.ndarray
    deviations: dict
    fd: FiniteDifferenceJacobian
    identity_asserted: bool
    diagnostics: dict = field(default_factory=dict)


def _cutoff_tail_norm(a_sym: hk.KernelSpec, step: float, mu: hk.CoefficientSpec,
                      grid: ht.TorusGrid, tolerances: hc.Tolerances, storage: str) -> float:
    """max over xi of |row sums of z a_sym(z) (1 - w(step |z|)) against mu|."""
    def tail(z, axis):
        pts = hk.as_points(z, a_sym.dim)
        cut = 1.0 - hk.cutoff_profile(step * np.linalg.norm(pts, axis=-1))
        return pts[..., axis] * hk.eval_kernel(a_sym, pts) * cut

    worst = 0.0
    for axis in range(grid.dim):
        periodized = ht.periodize_function(lambda z: tail(z, axis), (0,) * grid.dim, grid,
                                           a_sym.decay_radius, tolerances.periodization,
                                           tolerances.max_shells)
        sums = ht.KernelOperator(periodized, mu, storage=storage).row_sums()
        worst = max(worst, float(np.abs(sums).max()))
    return worst


def einstein_check(a_sym: hk.KernelSpec, mu: hk.CoefficientSpec, grid: ht.TorusGrid,
                   steps=DEFAULT_STEPS, kind: str = "cutoff", width: float | None = None,
                   tolerances: hc.Tolerances = hc.Tolerances(), storage: str = "auto",
                   max_workers: int | None = None) -> EinsteinReport:
    """Runs the linear response study for one symmetric kernel and coefficient.

    The diagnostics record the discrepancy |phi0 - 2 kappa_sym|, the cutoff tail
    norm per step, the expansion error |v0^l - 1 - h phi0^j| per step with
    its halving ratios, the even part of b per step, and the integral of the
    antisymmetric right-hand side.
    """
    _check_symmetric_inputs(a_sym, mu)
    steps = tuple(sorted((float(h) for h in steps), reverse=True))
    cell = hc.solve_cell(a_sym, mu, grid, tolerances, storage, max_workers)
    ell_min = np.zeros(grid.dim)
    ell_min[0] = steps[-1]
    match kind:
        case "cutoff":
            pert = hk.make_cutoff_perturbation(a_sym, ell_min)
        case "dipole":
            pert = hk.make_dipole_perturbation(a_sym, ell_min, width)
        case _:
            raise UnknownFamilyError(f"unknown perturbation kind {kind!r}")

    phi0, solvability = solve_phi0(a_sym, pert, mu, grid, tolerances, storage)
    b_lin = drift_linearization(a_sym, pert, mu, grid, phi0, tolerances, storage)
    fd = drift_finite_difference(a_sym, pert, mu, grid, steps, tolerances, storage, max_workers)
    theta_sym = cell.theta_sym
    deviations = {
        "lin_vs_theta": float(np.abs(b_lin - 2.0 * theta_sym).max()),
        "fd_vs_theta": float(np.abs(fd.richardson - 2.0 * theta_sym).max()),
        "fd_smallest_step_vs_theta": float(np.abs(fd.jacobians[-1] - 2.0 * theta_sym).max()),
        "lin_vs_fd": float(np.abs(b_lin - fd.richardson).max()),
        "flux_vs_theta": float(np.abs(cell.flux - 2.0 * theta_sym).max()),
    }
    expansion = []
    for s, h in enumerate(steps):
        gaps = [np.abs(fd.ground_states[s, j] - 1.0 - h * phi0[j]).max() for j in range(grid.dim)]
        expansion.append(float(max(gaps)))
    diagnostics = {
        "r_ell_norm": float(np.abs(phi0 - 2.0 * cell.kappa1).max()),
        "cutoff_tail_norms": [_cutoff_tail_norm(a_sym, h, mu, grid, tolerances, storage)
                              for h in steps] if kind == "cutoff" else [],
        "v0_expansion": expansion,
        "v0_expansion_ratios": [a / b if b > 0 else float("nan")
                                for a, b in zip(expansion[:-1], expansion[1:])],
        "even_parts": fd.even_parts.tolist(),
        "order_ratio": fd.order_ratio,
        "antisymmetric_rhs_integral": solvability,
    }
    logger.info("linear response: B_lin=%s, B_fd=%s, 2 Theta_sym=%s", b_lin.tolist(),
                fd.richardson.tolist(), (2.0 * theta_sym).tolist())
    return EinsteinReport(phi0=phi0, b_lin=b_lin, b_fd=fd.richardson, theta_sym=theta_sym,
                          flux_sym=cell.flux, deviations=deviations, fd=fd,
                          identity_asserted=kind == "cutoff", diagnostics=diagnostics)
