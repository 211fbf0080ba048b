"""Uniform grids on the unit torus, kernel periodization and operator assembly.

Grid fields are flat float arrays of length N^d in C order over the node
multi-index, so node j = (j_1, ..., j_d) sits at xi_j = j / N.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Callable

import numpy as np
from scipy import fft

from nlhomog.errors import (CapabilityError, DiscretizationError, InputError,
                            TruncationError)
from nlhomog.homogenization import kernels as hk

logger = logging.getLogger(__name__)

MAX_SHELLS = 64
DENSE_NODE_LIMIT = 4096
DENSE_MEMORY_CAP = 512 * 2**20
MASS_DEFECT_WARNING = 1e-8
STORAGE_MODES = ("auto", "dense", "matrix_free")


@dataclass(frozen=True)
class TorusGrid:
    """Uniform grid with N points per dimension on [0, 1)^d.

    Attributes:
      dim:
        Dimension d, 1 or 2.
      n:
        Points per dimension N >= 4.
    """

    dim: int
    n: int

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise InputError(f"torus dimension must be 1 or 2, got {self.dim}")
        if self.n < 4:
            raise InputError(f"need at least 4 points per dimension, got {self.n}")

    @property
    def spacing(self) -> float:
        return 1.0 / self.n

    @property
    def weight(self) -> float:
        """Quadrature weight h^d of a single node."""
        return self.spacing ** self.dim

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n,) * self.dim

    @property
    def size(self) -> int:
        return self.n ** self.dim

    @cached_property
    def indices(self) -> np.ndarray:
        """Integer node multi-indices, shape (N^d, d)."""
        axes = np.meshgrid(*[np.arange(self.n)] * self.dim, indexing="ij")
        return np.stack(axes, axis=-1).reshape(-1, self.dim)

    @cached_property
    def nodes(self) -> np.ndarray:
        """Node coordinates xi_j = j / N, shape (N^d, d)."""
        return self.indices / self.n

    def ones(self) -> np.ndarray:
        """The constant field 1."""
        return np.ones(self.size)

    def sample(self, func: Callable) -> np.ndarray:
        """Evaluates func on the node coordinates."""
        return np.asarray(func(self.nodes), dtype=float).reshape(self.size)


def quadrature(field: np.ndarray, grid: TorusGrid) -> float:
    """Rectangle rule h^d sum_j field_j over the torus."""
    return float(grid.weight * np.sum(field))


@dataclass(frozen=True)
class PeriodizedKernel:
    """Weighted periodization sum_k (eta + k)^alpha a(eta + k) on grid differences.

    Attributes:
      alpha:
        Monomial exponents, one per dimension.
      values:
        Values at eta = r / N for every difference multi-index r, as a field.
      shells_used:
        Number K of lattice shells |k|_inf <= K that were summed.
      tail_bound:
        Max-norm of the contribution of the last shell.
      grid:
        The grid the differences live on.
    """

    alpha: tuple[int, ...]
    values: np.ndarray
    shells_used: int
    tail_bound: float
    grid: TorusGrid

    @property
    def order(self) -> int:
        return sum(self.alpha)


def _lattice_shell(k: int, dim: int) -> np.ndarray:
    if k == 0:
        return np.zeros((1, dim), dtype=int)
    span = np.arange(-k, k + 1)
    points = np.stack(np.meshgrid(*[span] * dim, indexing="ij"), axis=-1).reshape(-1, dim)
    return points[np.abs(points).max(axis=1) == k]


def periodize_function(func: Callable, alpha, grid: TorusGrid, radius: float,
                       tol: float = 1e-14, max_shells: int = MAX_SHELLS) -> PeriodizedKernel:
    """Periodizes an arbitrary function of z in R^d onto the grid differences.

    Shells are added until at least ceil(radius) + 1 of them have been summed
    and the last one contributes less than ``tol`` in max norm.

    Args:
      func:
        Callable mapping an array of points (..., d) to values (...).
      alpha:
        Monomial weight exponents, |alpha| <= 2.
      grid:
        Target grid.
      radius:
        Decay radius of func; shells inside it are always summed.
      tol:
        Max-norm threshold for the last shell.
      max_shells:
        Hard cap on the number of shells.

    Returns:
      The periodized field with its truncation record.

    Raises:
      TruncationError: if the cap is hit before the tail drops below tol.
    """
    alpha = tuple(int(a) for a in np.atleast_1d(alpha)) if np.size(alpha) else (0,) * grid.dim
    if len(alpha) != grid.dim or min(alpha) < 0 or sum(alpha) > 2:
        raise InputError(f"weight exponents {alpha} invalid for dimension {grid.dim}")
    eta = grid.nodes
    values = np.zeros(grid.size)
    min_shells = math.ceil(radius) + 1
    tail = math.inf
    for shell in range(max_shells + 1):
        # points eta + k for every k on the shell |k|_inf = shell
        points = eta[None, :, :] + _lattice_shell(shell, grid.dim)[:, None, :]
        weights = np.prod(points ** np.asarray(alpha), axis=-1)
        contribution = np.sum(weights * func(points), axis=0)
        values += contribution
        tail = float(np.abs(contribution).max())
        if shell >= min_shells and tail < tol:
            return PeriodizedKernel(alpha, values, shell, tail, grid)
    raise TruncationError(f"lattice sum still changes by {tail:.2e} after {max_shells} shells",
                          residual=tail, tolerance=tol)


def periodize_weighted(spec: hk.KernelSpec, alpha, grid: TorusGrid, tol: float = 1e-14,
                       max_shells: int = MAX_SHELLS) -> PeriodizedKernel:
    """Weighted periodization of a kernel, see :func:`periodize_function`."""
    periodized = periodize_function(lambda z: hk.eval_kernel(spec, z), alpha, grid,
                                    spec.decay_radius, tol, max_shells)
    if periodized.order == 0:
        defect = quadrature_mass_defect(periodized, spec)
        if defect > MASS_DEFECT_WARNING:
            logger.warning("periodized %s kernel misses its mass by %.2e on N=%d; "
                           "the grid under-resolves the kernel", spec.family, defect, grid.n)
    return periodized


def quadrature_mass_defect(periodized: PeriodizedKernel, spec: hk.KernelSpec) -> float:
    """Relative gap between the quadrature of a_hat and the kernel mass."""
    # The antisymmetric part of a composite kernel carries no mass.
    reference = spec.perturbation.base if spec.family == "composite_biased" else spec
    mass = hk.kernel_moments(reference).mass
    return abs(quadrature(periodized.values, periodized.grid) - mass) / mass


def weight_exponents(dim: int, *axes: int) -> tuple[int, ...]:
    """Exponent tuple of the monomial z^{axes[0]} z^{axes[1]} ..."""
    alpha = [0] * dim
    for axis in axes:
        alpha[axis] += 1
    return tuple(alpha)


def storage_mode(grid: TorusGrid, mu: hk.CoefficientSpec, storage: str = "auto",
                 memory_cap: int = DENSE_MEMORY_CAP) -> str:
    """Returns "dense" or "matrix_free" for K on grid, before anything is assembled.

    Raises:
      InputError: for an unknown storage mode.
      CapabilityError: if mu has no separable form and dense storage does not fit.
    """
    if storage not in STORAGE_MODES:
        raise InputError(f"unknown storage mode {storage!r}")
    dense_fits = grid.size <= DENSE_NODE_LIMIT and 8 * grid.size ** 2 <= memory_cap
    if storage != "matrix_free" and dense_fits:
        return "dense"
    if hk.separable_terms(mu) is None:
        raise CapabilityError(f"{mu.family} coefficients need dense storage, which does not fit "
                              f"{grid.size} nodes")
    if storage == "dense":
        logger.warning("dense storage of %d nodes exceeds the memory cap; "
                       "using circular convolutions", grid.size)
    return "matrix_free"


class KernelOperator:
    """The mu-weighted convolution h^d sum_m k(xi_j - xi_m) mu(xi_j, xi_m) phi_m.

    Dense storage is used up to DENSE_NODE_LIMIT nodes within the memory cap;
    larger grids go through circular convolutions over the separable terms
    of mu.

    Attributes:
      kernel:
        The periodized kernel k (any weight exponents).
      mu:
        The coefficient.
      mode:
        "dense" or "matrix_free".
    """

    def __init__(self, kernel: PeriodizedKernel, mu: hk.CoefficientSpec,
                 storage: str = "auto", memory_cap: int = DENSE_MEMORY_CAP):
        self.kernel = kernel
        self.mu = mu
        self.grid = kernel.grid
        self.mode = storage_mode(self.grid, mu, storage, memory_cap)
        if self.mode == "matrix_free":
            self._setup_convolution(hk.separable_terms(mu))
        else:
            self._matrix = self._assemble()

    def _setup_convolution(self, terms) -> None:
        nodes, shape = self.grid.nodes, self.grid.shape
        self._symbol = fft.rfftn(self.kernel.values.reshape(shape))
        self._terms = [(lam(nodes), nu(nodes)) for lam, nu in terms]

    def _assemble(self, block: int = 512) -> np.ndarray:
        grid = self.grid
        n, size = grid.n, grid.size
        difference = (np.arange(n)[:, None] - np.arange(n)[None, :]) % n
        # k(xi_j - xi_m) only depends on (j - m) mod N
        table = self.kernel.values.reshape(grid.shape)
        if grid.dim == 1:
            kvals = table[difference]
        else:
            kvals = table[difference[:, None, :, None],
                          difference[None, :, None, :]].reshape(size, size)
        matrix = np.empty((size, size))
        nodes = grid.nodes
        # mu is evaluated in row blocks to bound the temporaries
        for start in range(0, size, block):
            rows = slice(start, min(start + block, size))
            mu_vals = hk.eval_mu(self.mu, nodes[rows, None, :], nodes[None, :, :])
            matrix[rows] = grid.weight * kvals[rows] * mu_vals
        return matrix

    def _convolve(self, values: np.ndarray, adjoint: bool) -> np.ndarray:
        shape = self.grid.shape
        # the adjoint convolves with k(-eta), whose symbol is the conjugate
        symbol = np.conj(self._symbol) if adjoint else self._symbol
        spectrum = fft.rfftn(values.reshape(shape))
        return fft.irfftn(symbol * spectrum, s=shape).reshape(-1)

    def apply(self, phi: np.ndarray) -> np.ndarray:
        """Returns (K phi)(xi_j)."""
        if self.mode == "dense":
            return self._matrix @ phi
        out = np.zeros(self.grid.size)
        for lam, nu in self._terms:
            out += lam * self._convolve(nu * phi, adjoint=False)
        return self.grid.weight * out

    def apply_adjoint(self, psi: np.ndarray) -> np.ndarray:
        """Returns (K* psi)(xi_m) = h^d sum_j k(xi_j - xi_m) mu(xi_j, xi_m) psi_j."""
        if self.mode == "dense":
            return self._matrix.T @ psi
        out = np.zeros(self.grid.size)
        for lam, nu in self._terms:
            out += nu * self._convolve(lam * psi, adjoint=True)
        return self.grid.weight * out

    def row_sums(self) -> np.ndarray:
        """Torus integrals of k(xi - eta) mu(xi, eta) over eta."""
        return self.apply(self.grid.ones())

    def to_dense(self) -> np.ndarray:
        """The operator as an explicit matrix (copies in dense mode)."""
        if self.mode == "dense":
            return self._matrix.copy()
        return np.column_stack([self.apply(e) for e in np.eye(self.grid.size)])


@dataclass(frozen=True)
class DiscreteOperatorPair:
    """The operators K, K* and the multiplier G = K 1 of a cell problem.

    Attributes:
      kernel_op:
        The unweighted kernel operator K.
      g_diag:
        Row sums of K, computed by the same summation as K applied to 1.
    """

    kernel_op: KernelOperator
    g_diag: np.ndarray

    @property
    def grid(self) -> TorusGrid:
        return self.kernel_op.grid

    def k_apply(self, phi: np.ndarray) -> np.ndarray:
        return self.kernel_op.apply(phi)

    def adjoint_apply(self, psi: np.ndarray) -> np.ndarray:
        return self.kernel_op.apply_adjoint(psi)

    def a_apply(self, phi: np.ndarray) -> np.ndarray:
        """A phi = K phi - G phi; annihilates constants exactly."""
        return self.kernel_op.apply(phi) - self.g_diag * phi

    def a_adjoint(self, psi: np.ndarray) -> np.ndarray:
        return self.kernel_op.apply_adjoint(psi) - self.g_diag * psi


def assemble_operators(a_hat: PeriodizedKernel, mu: hk.CoefficientSpec, grid: TorusGrid,
                       storage: str = "auto",
                       memory_cap: int = DENSE_MEMORY_CAP) -> DiscreteOperatorPair:
    """Builds K, K* and G for the unweighted periodized kernel.

    Raises:
      InputError: if a_hat is weighted or lives on another grid.
      CapabilityError: if mu cannot be applied without dense storage that
        does not fit.
      DiscretizationError: if G is not strictly positive.
    """
    if a_hat.order != 0:
        raise InputError("K is assembled from the unweighted periodization")
    if a_hat.grid != grid:
        raise InputError(f"kernel grid N={a_hat.grid.n} differs from N={grid.n}")
    kernel_op = KernelOperator(a_hat, mu, storage=storage, memory_cap=memory_cap)
    g_diag = kernel_op.row_sums()
    if not g_diag.min() > 0.0:
        raise DiscretizationError(f"G takes the nonpositive value {g_diag.min():.3e}",
                                  residual=float(g_diag.min()))
    logger.info("assembled %s operator on %d nodes, G in [%.6g, %.6g]",
                kernel_op.mode, grid.size, g_diag.min(), g_diag.max())
    return DiscreteOperatorPair(kernel_op, g_diag)
