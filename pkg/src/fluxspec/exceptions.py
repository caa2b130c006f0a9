"""Exception hierarchy shared across the package."""


class FluxspecError(Exception):
    """Base class for all package errors."""


class ParameterError(FluxspecError, ValueError):
    """A physical parameter violates its domain.

    ``field`` names the offending parameter so callers can report it.
    """

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class TruncationError(FluxspecError):
    """Basis too small for the requested number of levels."""


class ConvergenceError(FluxspecError):
    """Iterative refinement or optimisation failed to converge.

    ``estimates`` carries the last two estimates (if any) and ``result``
    any best-so-far or fallback result.
    """

    def __init__(self, message, estimates=None, result=None):
        super().__init__(message)
        self.estimates = estimates
        self.result = result


class WindowError(FluxspecError):
    """A sampling grid does not cover the support of a wavefunction."""


class DataError(FluxspecError, ValueError):
    """Input data do not satisfy an operation's preconditions."""


class SNRError(DataError):
    """State bands overlap: signal-to-noise too low for latching."""
