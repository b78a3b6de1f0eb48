"""Exception types shared across the package.

Every failure mode that a caller can reasonably branch on gets its own
class.  The CLI maps each class to a short machine-parsable error tag
printed on stderr.
"""


class DynctError(Exception):
    """Base class for all package errors."""

    cli_tag = "internal-error"


class ConfigError(DynctError):
    """Malformed or inconsistent experiment configuration."""

    cli_tag = "config-error"


class MissingInputError(DynctError):
    """A required input file or config entry is absent."""

    cli_tag = "missing-input"


class FormatError(DynctError):
    """A file does not conform to its declared on-disk format."""

    cli_tag = "format-error"


class ValidationError(DynctError):
    """A constructed object violates one of its declared invariants."""

    cli_tag = "validation-error"


class DomainError(DynctError):
    """A parameter value lies outside the curve's parameter intervals."""

    cli_tag = "domain-error"


class InsufficientDomainError(DomainError):
    """Too close to a segment endpoint for the requested finite difference."""

    cli_tag = "domain-error"


class InvalidDeformationError(DynctError):
    """The deformation is not a valid orientation-preserving diffeomorphism."""

    cli_tag = "invalid-deformation"


class AccuracyError(DynctError):
    """A quadrature failed to reach its target tolerance.

    Carries the best available estimate so callers can decide whether to
    keep it anyway.
    """

    cli_tag = "accuracy-error"

    def __init__(self, message, estimate=None, achieved_tol=None):
        super().__init__(message)
        self.estimate = estimate
        self.achieved_tol = achieved_tol


class CoverageError(DynctError):
    """Requested data falls outside the recorded detector grid."""

    cli_tag = "coverage-error"


class NoAdmissibleRootError(DynctError):
    """No contributing time branch exists for a (point, direction) pair."""

    cli_tag = "no-admissible-root"

    def __init__(self, x0, theta, message=None):
        self.x0 = x0
        self.theta = theta
        if message is None:
            pt = ", ".join(f"{float(v):.6g}" for v in x0)
            dr = ", ".join(f"{float(v):.6g}" for v in theta)
            message = f"no admissible root at point ({pt}) for direction ({dr})"
        super().__init__(message)


class ContinuationError(DynctError):
    """Root continuation left its branch or failed to converge."""

    cli_tag = "continuation-error"


class CriticalityError(DynctError):
    """A direction is too close to critical for the requested quantity."""

    cli_tag = "criticality-error"


class DegenerateDirectionError(DynctError):
    """The distinguished direction is undefined (vanishing cross product)."""

    cli_tag = "degenerate-direction"


class DegenerateLimitError(DynctError):
    """An extrapolated limit failed to converge."""

    cli_tag = "degenerate-limit"


class GridMismatchError(DynctError):
    """Two gridded objects do not share a common grid."""

    cli_tag = "grid-mismatch"
