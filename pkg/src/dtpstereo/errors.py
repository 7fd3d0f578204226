"""Exception types shared across the package.

Each carries the CLI exit code used when it escapes a command.
"""


class DTPError(Exception):
    exit_code = 1


class ConfigError(DTPError, ValueError):
    exit_code = 2


class ShapeError(DTPError, ValueError):
    exit_code = 2


class DataError(DTPError):
    exit_code = 3


class FormatError(DataError, ValueError):
    """Malformed file contents; ``offset`` is the byte position of the fault."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(DTPError, ValueError):
    exit_code = 4


class DivergenceError(NumericError):
    """Training produced a non-finite loss. ``checkpoint`` is the last good one."""

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


class AnalysisError(DTPError, ValueError):
    """The dependency analysis met a graph it cannot reason about."""

    exit_code = 2
