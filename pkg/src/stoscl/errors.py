"""Exception types shared across the package."""


class StosclError(Exception):
    """Base class for all package errors."""


class ArgumentError(StosclError, ValueError):
    """An argument violates an operation's precondition."""


class RangeError(ArgumentError):
    """A flux evaluation point lies outside the configured xi range."""


class NoFitError(StosclError):
    """A power-law fit is impossible (degenerate flux or bad samples)."""


class BlowUpError(StosclError, FloatingPointError):
    """A time step produced a non-finite value."""

    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"non-finite state after step {step}")


class InsufficientDataError(StosclError):
    """Not enough recorded data to evaluate the requested quantity."""


class IntegrityError(StosclError):
    """Replayed data does not match what was recorded."""


class EnsembleInvalidError(StosclError):
    """Too many paths of an ensemble blew up."""


class ConfigError(StosclError):
    """Configuration validation failed; carries every problem found."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))
