"""Exception types shared across the package."""


class TilestreamError(Exception):
    """Base class for package errors."""


class ShapeError(TilestreamError, ValueError):
    """Array dims, dtypes or layer geometry violate an operation contract."""


class NonFiniteError(TilestreamError, FloatingPointError):
    """A NaN or Inf appeared in an activation, gradient or loss."""


class PlanError(TilestreamError, ValueError):
    """A tile plan is infeasible or inconsistent with its network/image."""


class ConfigError(TilestreamError, ValueError):
    """An experiment config failed to parse or validate."""


class NondeterminismError(TilestreamError, RuntimeError):
    """Two runs that must be bit-identical were not."""
