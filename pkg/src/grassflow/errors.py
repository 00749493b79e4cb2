"""Exception types raised across the package."""


class GrassflowError(Exception):
    """Base class for all grassflow errors."""


class DimensionMismatch(GrassflowError):
    """Operator and block shapes are incompatible."""


class NonSquare(GrassflowError):
    """A square matrix was required."""


class AsymmetricInput(GrassflowError):
    """Input matrix violates the symmetry tolerance."""


class UnboundedMatrixFree(GrassflowError):
    """No spectral bound is available for a matrix-free operator."""


class DenseUnavailable(GrassflowError):
    """A dense assembly was requested from a matrix-free operator."""


class ParseError(GrassflowError):
    """Malformed input file.

    Carries the 1-based line number of the offending line when known.
    """

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class NonSymmetricHeader(GrassflowError):
    """MatrixMarket file does not declare a symmetric matrix."""


class NoConvergence(GrassflowError):
    """Iterative eigensolver failed to converge within its sweep budget."""


class SingularMatrix(GrassflowError):
    """Matrix is (numerically) singular where an SPD matrix was required."""


class AdmissibilityFailure(GrassflowError):
    """Could not produce an admissible initial block."""


class NonFiniteState(GrassflowError):
    """NaN or Inf appeared in the evolving block; the step was too large."""


class StepUnderflow(GrassflowError):
    """Adaptive step control drove the step size below its floor.

    Usually signals stiffness; the message carries a spectral-radius hint.
    """


class InsufficientSamples(GrassflowError):
    """Not enough samples for the requested fit or estimate."""


class NonPositiveValue(GrassflowError):
    """A positive value was required (log-linear fitting)."""


class ConfigError(GrassflowError):
    """Invalid experiment configuration.

    ``error_code`` is a machine-parsable identifier (e.g.
    ``CONFIG_MISSING_FIELD``) surfaced on stderr by the CLI.
    """

    def __init__(self, error_code, message):
        super().__init__(message)
        self.error_code = error_code
