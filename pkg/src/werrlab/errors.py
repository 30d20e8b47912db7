"""Exception types raised across the package."""


class WerrError(Exception):
    """Base class for all package errors."""


class ContractViolation(WerrError, ValueError):
    """An argument does not conform to the operation's preconditions."""


class IntegrationBlowup(WerrError, FloatingPointError):
    """The model produced a non-finite state."""

    def __init__(self, message, step=None, time=None):
        super().__init__(message)
        self.step = step
        self.time = time


class InsufficientSamples(WerrError, ValueError):
    pass


class NotPositiveSemiDefinite(WerrError, ValueError):
    """Raised by factorizations that need ``ensure_psd`` to be called first."""


class NumericalError(WerrError, ArithmeticError):
    pass


class RegularizationRequired(WerrError, ValueError):
    """A covariance that must be inverted is singular."""


class TrainingDiverged(WerrError, FloatingPointError):
    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history or []


class CyclingDiverged(WerrError, RuntimeError):
    def __init__(self, message, window=None):
        super().__init__(message)
        self.window = window


class InsufficientWindows(WerrError, ValueError):
    pass
