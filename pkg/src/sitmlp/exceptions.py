"""Exception hierarchy shared by every sitmlp module."""


class SitMlpError(Exception):
    """Base class for all errors raised by sitmlp."""


class ShapeError(SitMlpError, ValueError):
    """Tensor extents are incompatible with the requested operation."""


class ConfigError(SitMlpError, ValueError):
    """A layer, model or training configuration is invalid."""


class ContractError(SitMlpError, RuntimeError):
    """An operation was called outside its pre-conditions."""


class StateError(SitMlpError, RuntimeError):
    """An object is not in the state required for the call."""


class DataError(SitMlpError, ValueError):
    """Input data is malformed, empty or out of range."""


class FormatError(DataError):
    """A binary or text file does not match its expected layout."""
