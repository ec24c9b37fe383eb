"""Exception types shared across the package."""


class LancerError(Exception):
    """Base class for all package-specific failures."""


class ShapeError(LancerError):
    """Tensor shape or rank precondition violated."""


class BudgetError(LancerError):
    """A token or context budget was exceeded."""


class EmptyLossError(LancerError):
    """A loss was requested over zero contributing positions."""


class DataError(LancerError):
    """Malformed or inconsistent input data."""


class ConfigError(LancerError):
    """Invalid run configuration."""


class CheckpointError(LancerError):
    """Checkpoint file is corrupt, truncated, or unsupported."""


class DegenerateInputError(LancerError):
    """An input is mathematically unusable (e.g. zero-norm query vector)."""
