"""Exception types shared across the package."""


class HatBenchError(Exception):
    """Base class for all package errors."""


class DimensionError(HatBenchError, ValueError):
    """Operand shapes are incompatible."""


class DomainError(HatBenchError, ValueError):
    """Input values outside an operation's domain (e.g. non-finite)."""


class UsageError(HatBenchError, ValueError):
    """API misuse, such as calling backward on a non-scalar."""


class ConfigError(HatBenchError, ValueError):
    """A configuration violates a named invariant.

    ``constraint`` carries the short name of the violated invariant so callers
    (and the CLI) can report it verbatim.
    """

    def __init__(self, message: str, constraint: str | None = None):
        super().__init__(message)
        self.message = message
        self.constraint = constraint

    def __str__(self) -> str:
        return f"{self.message} [{self.constraint}]" if self.constraint else self.message


class StateError(HatBenchError, RuntimeError):
    """Required state (e.g. running statistics) is missing."""


class FormatError(HatBenchError, ValueError):
    """An archive has a bad magic number or unsupported version."""


class IntegrityError(HatBenchError, ValueError):
    """An archive is truncated or internally inconsistent."""
