"""Exception hierarchy shared across the package."""


class PathPredError(Exception):
    """Base class for all package-specific errors."""


class EmptyInput(PathPredError):
    """An operation that needs at least one element received none."""


class InvalidSpec(PathPredError):
    """A generator or run specification violates its invariants."""


class NonFiniteActivation(PathPredError):
    """A network forward pass produced a non-finite value."""


class DegenerateDensity(PathPredError):
    """A per-step likelihood underflowed to zero (clamped at 1e-300)."""


class DivergedTraining(PathPredError):
    """The training loss became non-finite."""


class HorizonTooLong(PathPredError):
    """Requested prediction horizon exceeds the configured cap."""


class AllOutliers(PathPredError):
    """Every particle fell outside both endpoint regions."""


class DegenerateGrid(PathPredError):
    """Heatmap grid has a non-positive cell size or extent."""


class CheckpointError(PathPredError):
    """Checkpoint file is malformed or has an unsupported version."""


class ConfigError(PathPredError):
    """A run configuration field failed validation.

    ``field`` names the offending entry so the CLI can report it.
    """

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")
