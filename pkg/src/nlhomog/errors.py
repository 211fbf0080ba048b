"""Exception hierarchy shared by the numerical modules and the CLI.

Every exception carries the exit code the command line harness reports for
it, so the entry point can map failures to exit statuses without knowing
which module raised them.
"""


class NlhomogError(Exception):
    """Base class of all errors raised by nlhomog."""

    exit_code = 1


class ConfigurationError(NlhomogError):
    """Invalid configuration or invalid input specification."""

    exit_code = 2


class UnknownFamilyError(ConfigurationError):
    """A kernel, coefficient or perturbation family name is not known."""


class SpecificationError(ConfigurationError):
    """Declared bounds of a coefficient are inconsistent with its formula."""


class InputError(ConfigurationError):
    """An input fails a structural check (symmetry, antisymmetry, shape)."""


class StepTooLargeError(InputError):
    """A perturbed kernel a_sym + l.c takes negative values."""


class CapabilityError(ConfigurationError):
    """The requested storage mode cannot represent the operator."""


class SolvabilityError(InputError):
    """A right-hand side is not orthogonal to the adjoint null vector."""


class KernelSymmetryError(SolvabilityError):
    """The antisymmetric right-hand side does not integrate to zero."""


class ConvergenceError(NlhomogError):
    """A numerical procedure did not reach its tolerance.

    Attributes:
      residual:
        The achieved residual (or error estimate) when the procedure stopped.
      tolerance:
        The tolerance that was requested, if one applies.
    """

    exit_code = 3

    def __init__(self, message: str, residual: float = float("nan"),
                 tolerance: float | None = None):
        super().__init__(message)
        self.residual = float(residual)
        self.tolerance = tolerance

    def to_dict(self) -> dict:
        """Returns a JSON-ready summary of the failure."""
        return {"error": type(self).__name__, "message": str(self),
                "residual": self.residual, "tolerance": self.tolerance}


class QuadratureError(ConvergenceError):
    """Adaptive quadrature of a kernel moment did not converge."""


class TruncationError(ConvergenceError):
    """The lattice sum of a periodization hit its shell cap."""


class NonConvergenceError(ConvergenceError):
    """An iterative solver exhausted its iteration budget."""


class DiscretizationError(ConvergenceError):
    """A converged discrete solution violates a structural bound."""


class InstabilityError(ConvergenceError):
    """Time stepping produced non-finite values."""


class OracleMismatchError(NlhomogError):
    """The dense oracle disagrees with the iterative pipeline.

    Attributes:
      field:
        Name of the first field whose discrepancy exceeds the tolerance.
      discrepancy:
        The max-norm discrepancy of that field.
    """

    exit_code = 4

    def __init__(self, field: str, discrepancy: float, tolerance: float):
        super().__init__(f"oracle mismatch in {field}: {discrepancy:.3e} > {tolerance:.1e}")
        self.field = field
        self.discrepancy = discrepancy
        self.tolerance = tolerance
