"""Exception hierarchy shared by every module.

The CLI maps :class:`ContractError` (and subclasses) to exit code 1 and
:class:`NumericError` to exit code 2.
"""


class ContractError(ValueError):
    """A caller broke a documented precondition."""


class DimensionError(ContractError):
    """Tensor shapes do not line up for the requested operation."""


class ConfigError(ContractError):
    """Invalid or inconsistent configuration."""


class CheckpointError(ContractError):
    """Checkpoint or trace file is unreadable, corrupted or from another format version."""


class InvariantViolation(ContractError):
    """A run finished but broke an invariant it promised to keep."""


class NumericError(ArithmeticError):
    """Non-finite values appeared where finite ones are required."""
