"""Exception types shared across the package."""


class CapAttackError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(CapAttackError, ValueError):
    """Array arguments have incompatible or invalid shapes."""


class InputError(CapAttackError, ValueError):
    """User-supplied data (tokens, positions, files) is invalid."""


class ContractError(CapAttackError, ValueError):
    """An API was called in a way that violates its documented contract."""


class GuardError(CapAttackError, RuntimeError):
    """An exhaustive computation would exceed its configured size guard."""


class TrainingError(CapAttackError, RuntimeError):
    """Training diverged or produced non-finite values."""


class NumericalError(CapAttackError, RuntimeError):
    """A numeric quantity became non-finite during optimization."""
