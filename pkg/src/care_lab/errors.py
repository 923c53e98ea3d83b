"""Exception types shared across the package."""


class CareLabError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(CareLabError, ValueError):
    """Operands or arguments have incompatible shapes."""


class InputError(CareLabError, ValueError):
    """An argument value is outside its valid range."""


class UsageError(CareLabError, RuntimeError):
    """An API was called in a way its contract forbids."""


class ValidationError(CareLabError, ValueError):
    """A record or configuration failed validation."""


class StratificationError(ValidationError):
    """A label set cannot be stratified (e.g. a class with < 2 records)."""


class CompatibilityError(CareLabError, ValueError):
    """Two artifacts (e.g. checkpoint and config) do not fit together."""
