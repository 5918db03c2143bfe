 # utils/errors.py
"""Exception types shared by every package.

Argument and shape problems stay ``ValueError`` subclasses so callers that
catch ``ValueError`` keep working.
"""


class ZFusionError(Exception):
    """Base class for all errors raised by this project."""


class DimensionError(ZFusionError, ValueError):
    """Array shapes or grid sizes do not line up."""


class ConfigError(ZFusionError, ValueError):
    """A configuration value is missing, malformed or out of range."""


class ContractError(ZFusionError, ValueError):
    """A caller broke a documented precondition."""


class NumericError(ZFusionError, ArithmeticError):
    """Non-finite values showed up where finite ones are required."""


class GenerationError(ZFusionError, RuntimeError):
    """Synthetic scene generation gave up."""
