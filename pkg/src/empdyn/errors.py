"""Exception hierarchy shared by the estimation modules and the CLI."""


class EmpdynError(Exception):
    """Base class for all package errors."""


class DataError(EmpdynError, ValueError):
    """Malformed or inadmissible input data."""


class ConfigError(EmpdynError, ValueError):
    """Invalid run configuration (CLI exit code 2)."""


class EstimationError(EmpdynError, RuntimeError):
    """A numerical estimation step failed (CLI exit code 3)."""


class DegenerateInputError(EstimationError):
    """Input has no positive spectral mass (e.g. an all-zero covariance)."""


class SingularSystemError(EstimationError):
    """A local fit or conditioning matrix is singular."""

    def __init__(self, message, subject_id=None):
        super().__init__(message)
        self.subject_id = subject_id


class EstimationWarning(UserWarning):
    """Recoverable event during estimation (window widening, clamping, flooring)."""
