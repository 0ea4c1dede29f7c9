"""Exception hierarchy shared by every module.

The CLI maps ``ValidationError`` subclasses to exit code 2 and
``DivergenceError``/``DeadlockError`` to exit code 3.
"""

from __future__ import annotations


class AdpsgdError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(AdpsgdError, ValueError):
    """Invalid input: bad sizes, indices, matrices, or configuration."""


class InvalidSizeError(ValidationError):
    pass


class InvalidPairError(ValidationError):
    pass


class BoundsError(ValidationError, IndexError):
    pass


class ConnectivityError(ValidationError):
    pass


class InvalidMatrixError(ValidationError):
    pass


class InsufficientDataError(ValidationError):
    pass


class ConfigError(ValidationError):
    """Configuration file problem; ``where`` names the key path and line if known."""

    def __init__(self, message: str, where: str | None = None):
        self.where = where
        super().__init__(f"{where}: {message}" if where else message)


class DomainError(ValidationError):
    pass


class DriftError(AdpsgdError):
    """AllReduce replicas stopped being identical."""


class StalenessError(AdpsgdError):
    """A staleness request exceeded the configured cap or the retained history."""


class DivergenceError(AdpsgdError):
    def __init__(self, k: int, detail: str = "non-finite model entries"):
        self.k = k
        super().__init__(f"divergence at iteration k={k}: {detail}")


class DeadlockError(AdpsgdError):
    def __init__(self, time: float, waits: dict[int, int]):
        self.time = time
        self.waits = waits
        chain = ", ".join(f"{a}->{b}" for a, b in sorted(waits.items()))
        super().__init__(f"deadlock at t={time}: no pending events; wait-for edges [{chain}]")
