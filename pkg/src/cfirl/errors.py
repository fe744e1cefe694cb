"""Exception types shared across the package."""


class CfirlError(Exception):
    """Base class; ``category`` is used by the CLI to pick an exit code."""

    category = "error"
    exit_code = 1


class InvalidArgument(CfirlError, ValueError):
    category = "invalid-argument"
    exit_code = 2


class InvalidState(CfirlError, RuntimeError):
    category = "invalid-state"
    exit_code = 3


class NumericFailure(CfirlError, ArithmeticError):
    """Raised on non-finite values; carries where it happened."""

    category = "numeric-failure"
    exit_code = 4

    def __init__(self, message, *, parameter=None, iteration=None, trace=None):
        super().__init__(message)
        self.parameter = parameter
        self.iteration = iteration
        self.trace = trace or []


class FormatError(CfirlError, ValueError):
    """Malformed or incompatible file; ``line`` is 1-based when known."""

    category = "format-error"
    exit_code = 5

    def __init__(self, message, *, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class VersionMismatch(FormatError):
    category = "version-mismatch"


class OverlapViolation(CfirlError):
    """Dataset fails the positivity check and the caller did not force."""

    category = "overlap-violation"
    exit_code = 6


class MissingArtifact(CfirlError, FileNotFoundError):
    category = "missing-artifact"
    exit_code = 7

    def __init__(self, path, producer):
        super().__init__(f"missing artifact {path}; run `{producer}` first")
        self.path = path
        self.producer = producer
