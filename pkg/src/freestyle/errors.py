"""Exception hierarchy shared across the package.

Each class carries the process exit status the CLI maps it to.
"""


class FreeStyleError(Exception):
    exit_code = 1


class ConfigError(FreeStyleError, ValueError):
    exit_code = 2


class DimensionError(ConfigError):
    """Tensor shapes disagree; the message names the offending axes."""


class PlanError(ConfigError):
    """Invalid timestep plan (empty, unordered or out of range)."""


class RequestError(ConfigError):
    """A stylization / ablation request violates its invariants."""


class StorageError(FreeStyleError, OSError):
    """Unreadable/corrupt files: images, manifests, checkpoints."""
    exit_code = 3


class ChecksumError(StorageError):
    pass


class NumericError(FreeStyleError, ArithmeticError):
    exit_code = 4
