class DomainError(ValueError):
    """Raised when an input violates an operation's domain (shape, finiteness, range)."""


class IntegrityError(RuntimeError):
    """Raised when a model or data file fails validation (missing, bad checksum)."""
