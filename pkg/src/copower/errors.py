"""Exception hierarchy shared across the package.

Every error raised by copower derives from :class:`CopowerError`, so callers
(and the CLI) can distinguish validation problems from numerical failures.
"""


class CopowerError(Exception):
    """Base class for all copower errors."""


class ValidationError(CopowerError):
    """An input violates a documented invariant."""


class NotPositiveDefinite(ValidationError):
    """A matrix that must be positive definite is not."""


class DegenerateCorrection(CopowerError):
    """The unequal-cluster-size correction matrix is singular or not PD.

    Signals a coefficient of variation outside the validity range of the
    second-order approximation.
    """


class InsufficientDf(ValidationError):
    """The number of clusters is too small for the requested test."""


class InfeasibleAllocation(ValidationError):
    """n * z_bar is not an integer, so exact allocation is impossible."""


class NonConvergence(CopowerError):
    """An iterative numerical routine exceeded its iteration budget."""


class AccuracyNotReached(CopowerError):
    """A Monte Carlo integration hit its sample cap before reaching the
    requested error tolerance."""

    def __init__(self, estimate, mc_error, message=None):
        self.estimate = estimate
        self.mc_error = mc_error
        super().__init__(
            message or f"accuracy target not reached: estimate={estimate}, mc_error={mc_error}"
        )


class Unattainable(CopowerError):
    """The requested power cannot be reached within the search ceiling."""


class DegenerateData(CopowerError):
    """A dataset cannot identify all model parameters (e.g. an arm is
    missing). Fitting may still proceed with a flag."""


class SingularInformation(CopowerError):
    """The observed information matrix is numerically singular."""
