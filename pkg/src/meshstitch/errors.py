"""Exception types shared across the package."""


class MeshStitchError(Exception):
    """Base class for errors raised by this package."""


class DegenerateConfigurationError(MeshStitchError):
    """A linear system (TPS or homography fit) is singular or near-singular."""


class EstimationFailedError(MeshStitchError):
    """Motion estimation diverged; carries diagnostic details."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class InsufficientOverlapError(MeshStitchError):
    """The two views share less overlap than the estimator can work with."""


class UndefinedMetricError(MeshStitchError):
    """A score cannot be computed, e.g. no frame has a usable overlap."""


class InvalidSceneError(MeshStitchError):
    """A synthetic scene specification is inconsistent or out of range."""
