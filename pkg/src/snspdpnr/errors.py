"""Exception hierarchy and the exit codes the CLI maps them to."""

from __future__ import annotations

from typing import Optional

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


class PnrError(Exception):
    """Root of every error raised by snspdpnr."""

    exit_code = EXIT_DATA


class DataError(PnrError, ValueError):
    """Invalid input data or arguments."""

    exit_code = EXIT_DATA


class BundleError(DataError):
    """A trace bundle or basis sidecar could not be decoded."""


class MalformedHeaderError(BundleError):
    pass


class TruncatedPayloadError(BundleError):
    pass


class VersionMismatchError(BundleError):
    pass


class ShapeMismatchError(DataError):
    """Declared matrix shape does not match the payload size."""


class EmptySetError(DataError):
    pass


class LengthMismatchError(DataError):
    """Trace length does not match the basis or model it is applied to."""


class ConfigError(DataError):
    """Unknown keys or invalid values in a JSON config document."""


class TraceError(PnrError):
    """A per-trace failure, carrying the index of the offending trace."""

    def __init__(self, index: int, message: str, exit_code: int = EXIT_DATA):
        super().__init__(f"trace {index}: {message}")
        self.index = index
        self.exit_code = exit_code


class NumericalError(PnrError, RuntimeError):
    """A numerical procedure failed or has no well-defined answer."""

    exit_code = EXIT_NUMERICAL


class DegenerateFitError(NumericalError):
    pass


class FitConvergenceError(NumericalError):
    pass


class DegenerateBasisError(NumericalError):
    pass


class StageError(PnrError):
    """A pipeline stage failed; wraps the underlying error and names the stage."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", EXIT_DATA)


def exit_code_for(exc: Optional[BaseException]) -> int:
    """Exit status for an exception raised while running a command."""
    if exc is None:
        return EXIT_OK
    if isinstance(exc, PnrError):
        return exc.exit_code
    if isinstance(exc, (ValueError, OSError)):
        return EXIT_DATA
    return EXIT_NUMERICAL
