"""Exception types shared across the package."""


class PRGPError(Exception):
    """Base class for all errors raised by this package."""


class InputDomainError(PRGPError, ValueError):
    """An argument lies outside the domain an operation accepts."""


class IllConditionedKernelError(PRGPError):
    """A Gram matrix could not be factorized even after jitter escalation."""

    def __init__(self, message, jitter):
        super().__init__(f"{message} (last jitter tried: {jitter:g})")
        self.jitter = jitter


class InternalStateError(PRGPError):
    """Cached state is missing or inconsistent."""


class ModelDomainError(PRGPError, ValueError):
    """A car-following model was evaluated where it is undefined."""


class SchemaError(PRGPError):
    """An input file lacks a required column."""

    def __init__(self, column):
        super().__init__(f"missing required column: {column!r}")
        self.column = column


class EmptyDataError(PRGPError):
    """Nothing usable was left after filtering."""


class CalibrationError(PRGPError):
    """Physics-model calibration failed to converge."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace or []


class RegularizerDegeneracyError(PRGPError):
    """Too many physics residuals were masked for the regularizer to be meaningful."""
