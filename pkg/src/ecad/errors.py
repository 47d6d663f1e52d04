"""Exception types shared across the package.

Each class maps to a distinct CLI exit code.
"""


class EcadError(Exception):
    exit_code = 1


class ConfigError(EcadError):
    """Inconsistent or invalid configuration (window lists, net sizes, variants)."""

    exit_code = 2


class DataError(EcadError):
    """Malformed input data: bad file lines, out-of-range feature ids, clicks after cutoff."""

    exit_code = 3


class UndefinedMetricError(EcadError):
    """A metric was asked for on data where it has no value (e.g. AUC on one class)."""

    exit_code = 4


class UnsupportedTaskError(EcadError):
    exit_code = 5


class StageError(EcadError):
    """Wraps a failure inside the replicate pipeline with the stage that raised it."""

    exit_code = 6

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause
        if isinstance(cause, EcadError):
            self.exit_code = cause.exit_code
