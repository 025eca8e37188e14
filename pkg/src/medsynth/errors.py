"""Exception taxonomy shared across the toolkit."""


class ToolkitError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(ToolkitError):
    """Invalid configuration value, unknown key, or unusable CLI input."""


class DimensionError(ToolkitError):
    """Tensor/array shape disagreement."""


class ContractError(ToolkitError):
    """An operation was called outside its stated contract."""


class NumericError(ToolkitError):
    """Non-finite values crossed an op boundary."""


class InsufficientSampleError(ToolkitError):
    """Too few samples to estimate the requested statistic."""
