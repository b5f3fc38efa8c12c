"""Exception hierarchy shared across the package.

Configuration problems (bad shapes, bad specs, bad files) are distinguished
from usage problems (calling an API wrong) and from corrupted runtime state,
so the CLI can map them onto distinct exit codes.
"""


class MSYoloError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(MSYoloError, ValueError):
    """A spec, config file, or layer wiring is inconsistent."""


class UsageError(MSYoloError, ValueError):
    """An operation was invoked with arguments it cannot accept."""


class InvalidStateError(MSYoloError, RuntimeError):
    """Internal state is corrupt (negative variance, NaN loss, ...)."""


class ParseError(MSYoloError, ValueError):
    """A file could not be parsed; message carries path and position."""


class ValidationError(MSYoloError, ValueError):
    """Parsed data violates referential or numeric constraints."""
