"""Exception hierarchy shared across the package.

Each class carries the CLI exit code it maps to.
"""


class ArchDiffError(Exception):
    exit_code = 1


class UsageError(ArchDiffError):
    exit_code = 2


class ConfigError(UsageError):
    pass


class DimensionError(UsageError):
    pass


class NumericError(ArchDiffError):
    exit_code = 3

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class CapacityError(ArchDiffError):
    exit_code = 4
