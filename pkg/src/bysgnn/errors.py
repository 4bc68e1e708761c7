"""Shared exception types."""


class BysgnnError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(BysgnnError):
    """Tensor shapes are incompatible for the requested operation."""


class ContractError(BysgnnError):
    """An operation was called outside its documented contract."""


class NonFiniteError(BysgnnError):
    """A NaN or Inf value was produced while debug checks are enabled."""


class ParseError(BysgnnError):
    """A file could not be parsed; message carries the offending line number."""


class SchemaError(BysgnnError):
    """File contents parse but violate the documented schema."""


class ConfigurationError(BysgnnError):
    """A configuration value or combination of values is invalid."""


class DivergenceError(BysgnnError):
    """Training produced a non-finite loss; the last good state was kept."""
