"""Exception hierarchy shared across the package."""


class StiefelMCError(Exception):
    """Base class for all package errors."""


class DimensionError(StiefelMCError, ValueError):
    """Array shapes are incompatible."""


class PreconditionError(StiefelMCError, ValueError):
    """An input violates a documented precondition (e.g. tangency)."""


class DomainError(StiefelMCError, ValueError):
    """A value lies outside the domain of the operation."""


class InvalidModelError(StiefelMCError, ValueError):
    """Operation is not defined for the requested model kind."""


class ConfigError(StiefelMCError, ValueError):
    """Invalid run configuration."""


class DataError(StiefelMCError, ValueError):
    """Malformed or inconsistent input data."""


class ChecksumError(DataError):
    """A persisted file does not match the digest recorded in its manifest."""


class FormatVersionError(DataError):
    """Persisted chain uses an unknown format version."""


class NumericalAbort(StiefelMCError, RuntimeError):
    """The chain could not continue for numerical reasons."""
