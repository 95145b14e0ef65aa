from typing import Optional

# --- Exception hierarchy ---
# Every engine raises one of these. The CLI maps them onto exit codes and the
# API maps them onto HTTP status codes, so callers never need to inspect
# numpy or scipy exceptions directly.


class LabError(Exception):
    """Root of all errors raised by the passport lab engines."""


class ArgumentError(LabError, ValueError):
    """Invalid argument: dimension mismatch, out-of-range value, point off the grid."""


class ConfigurationError(LabError):
    """Invalid run configuration, including stability-bound violations."""


class HypothesisError(LabError):
    """The hypotheses of a verification routine are not met; the run is refused."""


class PayoffNotRegularizedError(LabError):
    """Adjoint Greeks need a mollified payoff; call mollify_and_cutoff first."""


class NumericalError(LabError):
    """A computation failed numerically. Subclasses carry the failing time index."""

    def __init__(self, message: str, time_index: Optional[int] = None):
        super().__init__(message)
        self.time_index = time_index


class NotPSDError(NumericalError):
    """A matrix expected to be positive semidefinite failed the tolerance check."""


class DivergenceError(NumericalError):
    """A solve produced non-finite values."""


class StrategyInfeasibleError(NumericalError):
    """A strategy returned a control outside its constraint set."""
