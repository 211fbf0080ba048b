"""Dense reference solution of the one-dimensional cell problem.

Matrices are filled entry by entry from a lattice sum with a fixed number of
shells, the ground state comes from a singular value decomposition and the
correctors from least squares on the system augmented by the gauge row. None
of this shares code with the periodization, operator or Krylov paths.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from nlhomog.errors import InputError, OracleMismatchError
from nlhomog.homogenization import cell_problems as hc
from nlhomog.homogenization import kernels as hk

logger = logging.getLogger(__name__)

MAX_ORACLE_POINTS = 256
ORACLE_TOL = 1e-8
COMPARED_FIELDS = ("v0", "b", "kappa1", "theta", "kappa2")


@dataclass
class DenseCellSolution:
    """Quantities recomputed by dense linear algebra."""

    v0: np.ndarray
    b: np.ndarray
    kappa1: np.ndarray
    kappa2: np.ndarray
    theta: np.ndarray
    a_matrix: np.ndarray


def lattice_matrix(kernel: hk.KernelSpec, mu: hk.CoefficientSpec, n: int,
                   power: int = 0) -> np.ndarray:
    """Entries h sum_k (x_j - x_m + k)^power a(x_j - x_m + k) mu(x_j, x_m)."""
    nodes = np.arange(n) / n
    difference = nodes[:, None] - nodes[None, :]
    shells = math.ceil(kernel.decay_radius) + 1
    total = np.zeros((n, n))
    for k in range(-shells, shells + 1):
        z = difference + k
        total += z ** power * hk.eval_kernel(kernel, z)
    return total * hk.eval_mu(mu, nodes[:, None, None], nodes[None, :, None]) / n


def _gauged_lstsq(a_matrix: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    n = a_matrix.shape[0]
    # extra row enforces zero mean
    system = np.vstack([a_matrix, np.full((1, n), 1.0 / n)])
    solution, *_ = linalg.lstsq(system, np.append(rhs, 0.0))
    return solution


def dense_cell_solution(kernel: hk.KernelSpec, mu: hk.CoefficientSpec,
                        n: int) -> DenseCellSolution:
    """Solves the one-dimensional cell problem on n points by dense linear algebra.

    Raises:
      InputError: if the problem is not one-dimensional or n is too large.
    """
    if kernel.dim != 1 or mu.dim != 1:
        raise InputError("the dense oracle handles one-dimensional problems only")
    if not 4 <= n <= MAX_ORACLE_POINTS:
        raise InputError(f"the dense oracle needs 4 <= N <= {MAX_ORACLE_POINTS}, got {n}")
    k_matrix = lattice_matrix(kernel, mu, n)
    first = lattice_matrix(kernel, mu, n, power=1)
    second = lattice_matrix(kernel, mu, n, power=2)
    a_matrix = k_matrix - np.diag(k_matrix.sum(axis=1))

    # last right singular vector of A^T spans its null space
    _, _, vt = linalg.svd(a_matrix.T)
    v0 = vt[-1] / (vt[-1].sum() / n)

    f = first.sum(axis=1)
    b = f @ v0 / n
    kappa1 = _gauged_lstsq(a_matrix, f - b)
    F = b * kappa1 + 0.5 * second.sum(axis=1) - first @ kappa1
    theta = F @ v0 / n
    kappa2 = _gauged_lstsq(a_matrix, theta - F)
    return DenseCellSolution(v0=v0, b=np.array([b]), kappa1=kappa1[None, :],
                             kappa2=kappa2[None, None, :], theta=np.array([[theta]]),
                             a_matrix=a_matrix)


@dataclass
class OracleReport:
    """Max-norm discrepancies between the pipeline and the dense path."""

    discrepancies: dict
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(value <= self.tolerance for value in self.discrepancies.values())

    def check(self) -> None:
        """Raises OracleMismatchError naming the first field over tolerance."""
        for name in COMPARED_FIELDS:
            if self.discrepancies[name] > self.tolerance:
                raise OracleMismatchError(name, self.discrepancies[name], self.tolerance)


def compare(cell: hc.CellSolution, dense: DenseCellSolution,
            tolerance: float = ORACLE_TOL) -> OracleReport:
    """Diffs every compared field of a pipeline solution against the dense one."""
    def gap(x, y):
        return float(np.abs(np.asarray(x) - np.asarray(y)).max())

    discrepancies = {
        "v0": gap(cell.v0, dense.v0),
        "b": gap(cell.b, dense.b),
        "kappa1": gap(cell.kappa1, dense.kappa1),
        "theta": gap(cell.theta, dense.theta),
        "kappa2": gap(cell.kappa2, dense.kappa2),
    }
    report = OracleReport(discrepancies, tolerance)
    logger.info("oracle discrepancies: %s", discrepancies)
    return report
