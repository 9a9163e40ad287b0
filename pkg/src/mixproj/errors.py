"""Exception hierarchy shared by every module.

Two broad classes matter for the CLI exit codes: configuration problems
(:class:`ValidationError`, exit code 2) and numeric failures discovered
while computing (:class:`DomainError` and subclasses, exit code 3).
"""


class MixProjError(Exception):
    """Base class for all library errors."""


class ValidationError(MixProjError):
    """Invalid specification, configuration, or argument."""


class AlignmentError(ValidationError):
    """Engine outputs cannot be compared (non-overlapping time grids)."""


class CapabilityError(MixProjError):
    """A required capability (e.g. derivatives) is unavailable."""


class DomainError(MixProjError):
    """A numeric quantity left its valid domain (non-finite, negative density, ...)."""


class DegenerateFamilyError(DomainError):
    """Metric / Gram matrix is numerically singular: basis too close to dependent."""


class StarvationError(DomainError):
    """A mixture component received vanishing likelihood mass in a Bayes update."""


class ManifoldExitError(DomainError):
    """Filter state left the coordinate simplex beyond the clip tolerance."""


class ExplosionError(DomainError):
    """A simulated path exceeded the explosion guard."""


class DegeneracyError(DomainError):
    """Particle weights collapsed to zero."""


class FilterAbort(MixProjError):
    """A filter step failed; carries the trajectory recorded so far."""

    def __init__(self, message, trajectory=None):
        super().__init__(message)
        self.trajectory = trajectory
