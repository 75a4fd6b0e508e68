"""Exception types shared across the package."""


class ProtoscopeError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(ProtoscopeError):
    """Operands have incompatible dimensions."""


class NumericalError(ProtoscopeError):
    """A computation produced or received non-finite values."""


class DegenerateNeighborhood(ProtoscopeError):
    """A point set has too little rank to support the requested basis."""


class DegenerateBatch(ProtoscopeError):
    """No anchor in a batch admitted a valid chart."""


class FormatError(ProtoscopeError):
    """A serialized file is malformed.

    Carries the 1-based line number of the offending line when known.
    """

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ContractError(ProtoscopeError):
    """An argument violates a documented structural contract."""


class ConfigError(ProtoscopeError):
    """Configuration and data are inconsistent."""


class TrainingFailed(ProtoscopeError):
    """Policy search ended without reaching its target score."""

    def __init__(self, message, best_score=None):
        super().__init__(message)
        self.best_score = best_score
