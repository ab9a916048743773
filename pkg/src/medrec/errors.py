"""Exception types raised across the package."""


class MedrecError(Exception):
    """Base class for all package errors."""


class ShapeError(MedrecError, ValueError):
    """Operand extents are incompatible."""


class ContractViolation(MedrecError, ValueError):
    """A precondition of an operation does not hold."""


class ConfigurationError(MedrecError, ValueError):
    """A configuration value is invalid or inconsistent."""


class IngestionError(MedrecError, ValueError):
    """A dataset or patient file is malformed.

    ``location`` names the offending file and line when known.
    """

    def __init__(self, message: str, location: str | None = None):
        self.location = location
        super().__init__(f"{location}: {message}" if location else message)
