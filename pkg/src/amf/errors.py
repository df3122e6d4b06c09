"""Exception hierarchy shared across the package."""


class AMFError(Exception):
    """Base class for all package errors."""


class ShapeError(AMFError):
    """Tensor extents are invalid or incompatible for an operation."""


class DataError(AMFError):
    """Payload values out of contract (e.g. label outside the class range)."""


class UsageError(AMFError):
    """API misuse: wrong call order, missing gradients, non-scalar loss."""


class ConfigError(AMFError):
    """Bad configuration key, value, or group structure."""


class FormatError(AMFError):
    """Corrupt or unrecognized on-disk artifact."""


class CompatibilityError(AMFError):
    """Checkpoint/architecture mismatch; carries the offending names."""


class RunError(AMFError):
    """Training-time failure such as a non-finite loss."""
