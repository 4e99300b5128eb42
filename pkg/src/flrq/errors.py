"""Exception types shared across the package."""


class FlrqError(Exception):
    """Base class for all package-specific errors."""


class FormatError(FlrqError):
    """Malformed on-disk data (containers, bundles, reports)."""


class BadMagicError(FormatError):
    """Container does not start with the expected magic bytes."""


class BadVersionError(FormatError):
    """Container version is not supported."""


class TruncatedError(FormatError):
    """Container ends before the declared payload."""


class NumericalError(FlrqError):
    """A numerical precondition failed (zero matrix, collapsed sketch, oracle guard)."""
