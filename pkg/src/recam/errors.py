"""Exception hierarchy shared across the package."""


class RecamError(Exception):
    """Base class for all package errors."""


class DimensionError(RecamError, ValueError):
    """Tensor shapes or axes are incompatible with an operation."""


class ArgumentError(RecamError, ValueError):
    """An argument is outside its allowed range."""


class DegenerateInputError(RecamError, ValueError):
    """Input is well-formed but leaves nothing to compute over (e.g. every key masked)."""


class ConfigurationError(RecamError, ValueError):
    pass


class DataError(RecamError, ValueError):
    pass


class ValidationError(DataError):
    """A dataset record violates an instance invariant."""

    def __init__(self, message, line=None, field=None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)


class FormatError(RecamError):
    """A checkpoint or cache file is corrupt, truncated, or of the wrong version."""


class CapabilityError(RecamError):
    """A scorer backend lacks a capability required by a prompting style."""


class TransportError(RecamError):
    """A remote scoring request failed."""

    def __init__(self, message, instance_id=None, attempts=0, status=None):
        self.instance_id = instance_id
        self.attempts = attempts
        self.status = status
        super().__init__(message)


class ParseError(RecamError):
    """A generated answer could not be mapped to an option index."""
