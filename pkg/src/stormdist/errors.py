"""Exception types shared across the package."""


class StormdistError(Exception):
    """Base class for all package-specific failures."""


class ContractViolation(StormdistError):
    """An internal invariant or documented precondition was broken."""


class ProtocolError(StormdistError):
    """Messaging misuse: wrong round, duplicate sender, missing worker."""


class ValidationFailure(StormdistError):
    """A required inequality on problem or schedule constants does not hold.

    The message always cites the violated inequality so callers can surface
    it verbatim (the CLI maps this to exit code 3).
    """


class UnknownConfigKey(StormdistError):
    """A config object carries a key outside the documented schema."""

    def __init__(self, key: str, where: str = "config"):
        self.key = key
        self.where = where
        super().__init__(f"unknown key {key!r} in {where}")


class DivergenceError(StormdistError):
    """An iterate left the safety region or became non-finite mid-run."""

    def __init__(self, message, record=None):
        self.record = record
        super().__init__(message)
