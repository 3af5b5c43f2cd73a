"""Exception types shared across the package."""


class SemAlignError(Exception):
    """Base class for all package errors."""


class InvalidDimensionError(SemAlignError):
    """Grid or image dimensions are too small or inconsistent."""


class DegenerateWarpError(SemAlignError):
    """Warp parameters produce a singular or unsolvable system."""


class ShapeMismatchError(SemAlignError):
    """Tensor shapes of two inputs do not agree."""


class VolumeKindError(SemAlignError):
    """A similarity volume of the wrong kind (self vs cross) was passed."""


class WindowError(SemAlignError):
    """Search window radius is incompatible with the grid size."""


class UndefinedLossError(SemAlignError):
    """A loss has no valid support (e.g. no anchors, no valid landmarks)."""


class DegenerateChannelError(SemAlignError):
    """A probability channel has (numerically) zero total mass."""


class ConfigError(SemAlignError):
    """Bad configuration: unknown key, bad value, missing file."""


class DataError(SemAlignError):
    """Bad or missing data: empty streams, unreadable datasets."""


class TrainingError(SemAlignError):
    """Non-finite loss or gradient encountered during optimization."""


class CheckpointError(SemAlignError):
    """Checkpoint file is unreadable or has an unsupported format version."""
