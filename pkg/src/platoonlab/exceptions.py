"""Exception and warning types shared across the package."""


class PlatoonLabError(Exception):
    """Base class for all package errors."""


class Infeasible(PlatoonLabError):
    """An optimisation problem has no feasible point (or the solver says so)."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class NumericalFailure(PlatoonLabError):
    """A solver stopped without a usable answer for numerical reasons."""


class RankDeficient(PlatoonLabError):
    """The state data matrix does not have full row rank."""


class CollisionError(PlatoonLabError):
    """A gap between consecutive vehicles dropped to zero or below."""

    def __init__(self, message, step=None, vehicle=None, gap=None):
        super().__init__(message)
        self.step = step
        self.vehicle = vehicle
        self.gap = gap


class DetectabilityWarning(UserWarning):
    """The augmented internal model failed the PBH detectability test."""
