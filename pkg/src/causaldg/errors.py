"""Exception types shared across the package."""


class ConfigError(ValueError):
    """A configuration object violates one of its invariants."""


class ContractError(ValueError):
    """An operation was called with arguments that break its contract."""


class NumericError(ArithmeticError):
    """A computation produced a non-finite value where a finite one is required."""


class IngestionError(ValueError):
    """A dataset manifest or its referenced files could not be loaded."""


class MetricUndefinedError(ValueError):
    """A metric is undefined for the given label configuration."""
