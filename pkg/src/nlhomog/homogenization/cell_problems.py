"""Ground state, correctors, effective drift and effective matrix of a cell problem.

All cell quantities live on one TorusGrid. The operator A = K - G has the
constants as its kernel and the ground state v0 as its adjoint kernel, so
correctors are determined up to a constant; the gauge used throughout is a
zero quadrature mean.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import linalg as spla

from nlhomog.errors import (DiscretizationError, InputError, NonConvergenceError,
                            SolvabilityError)
from nlhomog.homogenization import kernels as hk
from nlhomog.homogenization import torus as ht

logger = logging.getLogger(__name__)

FLUX_IDENTITY_TOL = 1e-8
REFINEMENT_ROUNDS = 4


@dataclass(frozen=True)
class Tolerances:
    """Tolerances and iteration budgets of the cell pipeline."""

    periodization: float = 1e-14
    ground_state: float = 1e-12
    corrector: float = 1e-10
    solvability: float = 1e-10
    max_iter: int = 20_000
    krylov_max_iter: int = 500
    max_shells: int = ht.MAX_SHELLS


@dataclass(frozen=True)
class WeightedOperators:
    """Operators built from the first and second moment periodizations.

    Attributes:
      first:
        ``first[i]`` uses the weight z^i.
      second:
        ``second[i][j]`` uses the weight z^i z^j; the nested tuple is
        symmetric and shares operators between (i, j) and (j, i).
    """

    first: tuple[ht.KernelOperator, ...]
    second: tuple[tuple[ht.KernelOperator, ...], ...]


def weighted_operators(kernel: hk.KernelSpec, mu: hk.CoefficientSpec, grid: ht.TorusGrid,
                       tolerances: Tolerances = Tolerances(), storage: str = "auto",
                       with_second: bool = True) -> WeightedOperators:
    """Periodizes z^i a(z) (and z^i z^j a(z)) and wraps them as operators."""
    def build(*axes):
        periodized = ht.periodize_weighted(kernel, ht.weight_exponents(grid.dim, *axes), grid,
                                           tolerances.periodization, tolerances.max_shells)
        return ht.KernelOperator(periodized, mu, storage=storage)

    dim = grid.dim
    first = tuple(build(i) for i in range(dim))
    if not with_second:
        return WeightedOperators(first, ())
    second = [[None] * dim for _ in range(dim)]
    for i in range(dim):
        for j in range(i, dim):
            second[i][j] = second[j][i] = build(i, j)
    return WeightedOperators(first, tuple(tuple(row) for row in second))


@dataclass(frozen=True)
class CellSolution:
    """Everything the cell pipeline produces for one kernel, coefficient and grid.

    Attributes:
      grid:
        The torus grid.
      v0:
        Positive adjoint null vector with quadrature 1.
      b:
        Effective drift, shape (d,).
      kappa1:
        First correctors, shape (d, N^d), each of zero mean.
      kappa2:
        Second correctors, shape (d, d, N^d), each of zero mean.
      theta:
        Effective matrix, shape (d, d); not symmetric in general.
      flux:
        The flux matrix I, symmetric, equal to theta + theta.T.
      g_diag:
        The multiplier G = K 1.
      f:
        The drift fields f^i, shape (d, N^d).
      residuals:
        Achieved residuals keyed by ground_state, solvability, corrector1
        and corrector2.
    """

    grid: ht.TorusGrid
    v0: np.ndarray
    b: np.ndarray
    kappa1: np.ndarray
    kappa2: np.ndarray
    theta: np.ndarray
    flux: np.ndarray
    g_diag: np.ndarray
    f: np.ndarray
    residuals: dict = field(default_factory=dict)

    @property
    def theta_sym(self) -> np.ndarray:
        return 0.5 * (self.theta + self.theta.T)

    def psi0(self) -> np.ndarray:
        """The ground state psi0 = G v0 of (G^-1 K)*, normalized to unit L2 norm."""
        psi = self.g_diag * self.v0
        psi = psi / np.sqrt(ht.quadrature(psi * psi, self.grid))
        if not psi.min() > 0.0:
            raise DiscretizationError("psi0 is not strictly positive", residual=float(psi.min()))
        return psi


def ground_state(ops: ht.DiscreteOperatorPair, tol: float = 1e-12,
                 max_iter: int = 20_000) -> tuple[np.ndarray, float]:
    """Finds v0 with K* v0 = G v0 and quadrature 1 by fixed-point iteration.

    Each sweep maps v to K* v / G and renormalizes; the iteration stops when
    both the update and the residual max|K* v - G v| are at most tol.

    Args:
      ops:
        The assembled operators, G strictly positive.
      tol:
        Tolerance on update and residual.
      max_iter:
        Sweep budget.

    Returns:
      The pair (v0, residual).

    Raises:
      NonConvergenceError: if max_iter sweeps do not suffice.
      DiscretizationError: if the converged v0 has a nonpositive entry.
    """
    grid, g = ops.grid, ops.g_diag
    v = grid.ones()
    residual = update = np.inf
    for sweep in range(1, max_iter + 1):
        w = ops.adjoint_apply(v)
        residual = float(np.abs(w - g * v).max())
        # one step of the adjoint jump chain
        w = w / g
        w /= ht.quadrature(w, grid)
        update = float(np.abs(w - v).max())
        v = w
        if residual <= tol and update <= tol:
            break
    else:
        raise NonConvergenceError(
            f"ground state iteration stalled after {max_iter} sweeps "
            f"(update {update:.2e})", residual=residual, tolerance=tol)
    residual = float(np.abs(ops.adjoint_apply(v) - g * v).max())
    if not v.min() > 0.0:
        raise DiscretizationError(f"ground state has the nonpositive entry {v.min():.3e}",
                                  residual=residual, tolerance=tol)
    logger.info("ground state converged in %d sweeps, residual %.2e, v0 in [%.6g, %.6g]",
                sweep, residual, v.min(), v.max())
    return v, residual


def drift_and_rhs(ops: ht.DiscreteOperatorPair, grid: ht.TorusGrid,
                  weighted: WeightedOperators,
                  v0: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Computes the drift fields f, the effective drift b and h = f - b.

    Returns:
      The triple (b, f, h) with b of shape (d,) and f, h of shape (d, N^d).
    """
    f = np.stack([op.row_sums() for op in weighted.first])
    b = np.array([ht.quadrature(fi * v0, grid) for fi in f])
    h = f - b[:, None]
    return b, f, h


def solve_gauged(ops: ht.DiscreteOperatorPair, rhs: np.ndarray, v0: np.ndarray,
                 tol: float, solvability_tol: float, max_iter: int) -> tuple[np.ndarray, float]:
    """Solves A x = rhs for the zero-mean x.

    GMRES runs on the nonsingular operator x -> A(x - mean x) + mean x, whose
    solution for a solvable rhs is the zero-mean solution of A x = rhs.
    """
    grid = ops.grid
    solvability = abs(ht.quadrature(rhs * v0, grid))
    if solvability > solvability_tol:
        raise SolvabilityError(
            f"right-hand side is not orthogonal to v0 (residual {solvability:.2e})")

    def gauged(x):
        x = np.ravel(x)
        mean = ht.quadrature(x, grid)
        return ops.a_apply(x - mean) + mean

    size = grid.size
    system = spla.LinearOperator((size, size), matvec=gauged, dtype=float)
    # -1/G inverts the diagonal part of A = K - G
    preconditioner = spla.LinearOperator((size, size), matvec=lambda x: -np.ravel(x) / ops.g_diag,
                                         dtype=float)
    x = np.zeros(size)
    residual = float(np.abs(rhs).max())
    for _ in range(REFINEMENT_ROUNDS):
        if residual <= tol:
            break
        correction, info = spla.gmres(system, rhs - gauged(x), rtol=0.0, atol=0.1 * tol,
                                      restart=min(size, 60), maxiter=max_iter, M=preconditioner)
        if info < 0:
            raise NonConvergenceError("GMRES rejected the corrector system", residual=residual,
                                      tolerance=tol)
        x = x + correction
        x -= ht.quadrature(x, grid)
        # the residual is measured on A, not on the gauged operator
        residual = float(np.abs(ops.a_apply(x) - rhs).max())
    if residual > tol:
        raise NonConvergenceError(f"corrector residual {residual:.2e} exceeds {tol:.1e}",
                                  residual=residual, tolerance=tol)
    return x, residual


def _solve_components(ops, rhs_fields, v0, tolerances: Tolerances,
                      max_workers: int | None) -> tuple[list[np.ndarray], float]:
    def solve(rhs):
        return solve_gauged(ops, rhs, v0, tolerances.corrector, tolerances.solvability,
                            tolerances.krylov_max_iter)

    if max_workers and max_workers > 1 and len(rhs_fields) > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as executor:
            results = list(executor.map(solve, rhs_fields))
    else:
        results = [solve(rhs) for rhs in rhs_fields]
    return [x for x, _ in results], max(res for _, res in results)


def solve_corrector1(ops: ht.DiscreteOperatorPair, h: np.ndarray, v0: np.ndarray,
                     tolerances: Tolerances = Tolerances(),
                     max_workers: int | None = None) -> tuple[np.ndarray, float]:
    """Solves A kappa1^i = h^i for every i with zero-mean gauge.

    Raises:
      SolvabilityError: if some h^i is not orthogonal to v0.
      NonConvergenceError: if the Krylov solve stalls.
    """
    kappa, residual = _solve_components(ops, list(h), v0, tolerances, max_workers)
    logger.info("first corrector residual %.2e", residual)
    return np.stack(kappa), residual


def effective_matrix(kappa1: np.ndarray, b: np.ndarray, v0: np.ndarray,
                     weighted: WeightedOperators,
                     grid: ht.TorusGrid) -> tuple[np.ndarray, np.ndarray]:
    """Computes the fields F^{ij} and the effective matrix Theta^{ij} = <F^{ij}, v0>.

    F^{ij} = b^i kappa1^j + 1/2 (z^i z^j row sums) - (z^i weighted operator applied
    to kappa1^j).
    """
    dim = grid.dim
    F = np.empty((dim, dim, grid.size))
    for i in range(dim):
        for j in range(dim):
            F[i, j] = (b[i] * kappa1[j] + 0.5 * weighted.second[i][j].row_sums()
                       - weighted.first[i].apply(kappa1[j]))
    theta = np.array([[ht.quadrature(F[i, j] * v0, grid) for j in range(dim)]
                      for i in range(dim)])
    return theta, F


def flux_matrix_I(kappa1: np.ndarray, v0: np.ndarray, weighted: WeightedOperators,
                  ops: ht.DiscreteOperatorPair, f: np.ndarray) -> np.ndarray:
    """Evaluates the flux matrix I by expanding its quadratic integrand.

    The square ((xi - q) + kappa1(xi) - kappa1(q))^i (...)^j is split into a
    second moment term, two cross terms and a corrector difference term.
    """
    grid = ops.grid
    dim = grid.dim
    k_kappa = [ops.k_apply(kappa1[j]) for j in range(dim)]
    flux = np.empty((dim, dim))
    for i in range(dim):
        for j in range(i, dim):
            cross_ij = kappa1[j] * f[i] - weighted.first[i].apply(kappa1[j])
            cross_ji = kappa1[i] * f[j] - weighted.first[j].apply(kappa1[i])
            product = kappa1[i] * kappa1[j]
            # sum over q of k mu (kappa1(xi) - kappa1(q))^i (kappa1(xi) - kappa1(q))^j
            difference = (product * ops.g_diag - kappa1[i] * k_kappa[j]
                          - kappa1[j] * k_kappa[i] + ops.k_apply(product))
            integrand = weighted.second[i][j].row_sums() + cross_ij + cross_ji + difference
            flux[i, j] = flux[j, i] = ht.quadrature(integrand * v0, grid)
    return flux


def solve_corrector2(ops: ht.DiscreteOperatorPair, F: np.ndarray, theta: np.ndarray,
                     v0: np.ndarray, tolerances: Tolerances = Tolerances(),
                     max_workers: int | None = None) -> tuple[np.ndarray, float]:
    """Solves -A kappa2^{ij} = F^{ij} - Theta^{ij} with zero-mean gauge."""
    dim = theta.shape[0]
    rhs = [theta[i, j] - F[i, j] for i in range(dim) for j in range(dim)]
    kappa, residual = _solve_components(ops, rhs, v0, tolerances, max_workers)
    logger.info("second corrector residual %.2e", residual)
    return np.stack(kappa).reshape(dim, dim, -1), residual


def _check_flux_identity(theta: np.ndarray, flux: np.ndarray) -> None:
    gap = float(np.abs(flux - (theta + theta.T)).max())
    scale = max(float(np.abs(flux).max()), 1e-300)
    if gap > FLUX_IDENTITY_TOL * scale:
        raise DiscretizationError(f"I differs from Theta + Theta^T by {gap:.2e}",
                                  residual=gap / scale, tolerance=FLUX_IDENTITY_TOL)
    lowest = float(np.linalg.eigvalsh(0.5 * (theta + theta.T)).min())
    if not lowest > 0.0:
        raise DiscretizationError(f"symmetric part of Theta has eigenvalue {lowest:.3e}",
                                  residual=lowest)


def build_operators(kernel: hk.KernelSpec, mu: hk.CoefficientSpec, grid: ht.TorusGrid,
                    tolerances: Tolerances = Tolerances(),
                    storage: str = "auto") -> ht.DiscreteOperatorPair:
    """Periodizes the kernel and assembles K, K* and G."""
    a_hat = ht.periodize_weighted(kernel, (0,) * grid.dim, grid, tolerances.periodization,
                                  tolerances.max_shells)
    return ht.assemble_operators(a_hat, mu, grid, storage=storage)


def cell_drift(kernel: hk.KernelSpec, mu: hk.CoefficientSpec, grid: ht.TorusGrid,
               tolerances: Tolerances = Tolerances(),
               storage: str = "auto") -> tuple[np.ndarray, np.ndarray]:
    """Ground state and effective drift only; returns (b, v0)."""
    ops = build_operators(kernel, mu, grid, tolerances, storage)
    weighted = weighted_operators(kernel, mu, grid, tolerances, storage, with_second=False)
    v0, _ = ground_state(ops, tolerances.ground_state, tolerances.max_iter)
    b, _, _ = drift_and_rhs(ops, grid, weighted, v0)
    return b, v0


def solve_cell(kernel: hk.KernelSpec, mu: hk.CoefficientSpec, grid: ht.TorusGrid,
               tolerances: Tolerances = Tolerances(), storage: str = "auto",
               max_workers: int | None = None) -> CellSolution:
    """Runs the whole cell pipeline.

    Args:
      kernel:
        The jump kernel a.
      mu:
        The coefficient mu.
      grid:
        The torus grid.
      tolerances:
        Tolerances of the individual stages.
      storage:
        Operator storage mode, see :class:`nlhomog.homogenization.torus.KernelOperator`.
      max_workers:
        Threads for the componentwise corrector solves.

    Returns:
      The CellSolution.

    Raises:
      ConvergenceError: if a stage misses its tolerance.
      ConfigurationError: if an input is invalid.
    """
    if kernel.dim != grid.dim or mu.dim != grid.dim:
        raise InputError("kernel, coefficient and grid dimensions differ")
    ops = build_operators(kernel, mu, grid, tolerances, storage)
    weighted = weighted_operators(kernel, mu, grid, tolerances, storage)
    v0, gs_res = ground_state(ops, tolerances.ground_state, tolerances.max_iter)
    b, f, h = drift_and_rhs(ops, grid, weighted, v0)
    solvability = max(abs(ht.quadrature(hi * v0, grid)) for hi in h)
    kappa1, res1 = solve_corrector1(ops, h, v0, tolerances, max_workers)
    theta, F = effective_matrix(kappa1, b, v0, weighted, grid)
    flux = flux_matrix_I(kappa1, v0, weighted, ops, f)
    _check_flux_identity(theta, flux)
    kappa2, res2 = solve_corrector2(ops, F, theta, v0, tolerances, max_workers)
    logger.info("cell problem on N=%d: b=%s, Theta=%s", grid.n, b.tolist(), theta.tolist())
    return CellSolution(grid=grid, v0=v0, b=b, kappa1=kappa1, kappa2=kappa2, theta=theta,
                        flux=flux, g_diag=ops.g_diag, f=f,
                        residuals={"ground_state": gs_res, "solvability": solvability,
                                   "corrector1": res1, "corrector2": res2})


def weighted_dissipativity(ops: ht.DiscreteOperatorPair, v0: np.ndarray, samples: int = 100,
                           seed: int = 0) -> float:
    """Largest sampled ratio <v, A v>_{v0} / |v|^2 over random fields v."""
    grid = ops.grid
    rng = np.random.default_rng(seed)
    worst = -np.inf
    for _ in range(samples):
        v = rng.standard_normal(grid.size)
        form = ht.quadrature(v * v0 * ops.a_apply(v), grid)
        worst = max(worst, form / ht.quadrature(v * v, grid))
    return float(worst)
