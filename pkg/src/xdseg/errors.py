"""Exception hierarchy shared across the package."""


class XdsegError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(XdsegError, ValueError):
    """Tensor shapes are inconsistent with the requested operation."""


class ConfigError(XdsegError, ValueError):
    """A configuration value is invalid or inconsistent."""


class ValidationError(XdsegError, ValueError):
    """Input data violates a documented precondition."""


class FormatError(XdsegError, ValueError):
    """A file does not conform to its declared on-disk format."""


class ParamLookupError(XdsegError, KeyError):
    """A graph node references a parameter missing from the weight store."""


class NumericFault(XdsegError, ArithmeticError):
    """A non-finite value appeared where only finite values are allowed."""
